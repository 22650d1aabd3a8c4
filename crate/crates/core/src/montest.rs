//! Linearized monotonicity test: pixel `B_k` is marked as part of the
//! inclusion iff
//!
//! ```text
//! Λ(λ0, μ0) − (α^λ S^λ_k + α^μ S^μ_k) − Λ^δ + δI ⪰ 0
//! ```

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fem::NtdMatrix;
use crate::linalg;
use crate::sensitivity::SensitivitySet;

/// Relative eigenvalue tolerance of the PSD decision.
pub const PSD_REL_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TestWeights {
    pub alpha_lambda: f64,
    pub alpha_mu: f64,
}

impl TestWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha_lambda >= 0.0 && self.alpha_mu >= 0.0)
            || !self.alpha_lambda.is_finite()
            || !self.alpha_mu.is_finite()
        {
            return Err(Error::invalid("test weights must be finite and ≥ 0"));
        }
        if self.alpha_lambda + self.alpha_mu <= 0.0 {
            return Err(Error::invalid("test weights must not both be zero"));
        }
        Ok(())
    }

    /// Largest weights with guaranteed detection for a known inclusion material:
    /// `α^λ = (λ0/λ1)(λ1 − λ0)`, `α^μ = (μ0/μ1)(μ1 − μ0)`.
    pub fn admissible_limit(lambda0: f64, lambda1: f64, mu0: f64, mu1: f64) -> Self {
        TestWeights {
            alpha_lambda: lambda0 / lambda1 * (lambda1 - lambda0),
            alpha_mu: mu0 / mu1 * (mu1 - mu0),
        }
    }

    pub fn is_admissible(&self, lambda0: f64, lambda1: f64, mu0: f64, mu1: f64) -> bool {
        let lim = Self::admissible_limit(lambda0, lambda1, mu0, mu1);
        self.alpha_lambda <= lim.alpha_lambda && self.alpha_mu <= lim.alpha_mu
    }
}

/// The matrix whose positive semidefiniteness decides pixel `k`.
pub fn test_matrix(
    k: usize,
    weights: &TestWeights,
    lambda0: &NtdMatrix,
    lambda_delta: &NtdMatrix,
    delta: f64,
    s: &SensitivitySet,
) -> Result<DMatrix<f64>> {
    let m = lambda0.dim();
    if lambda_delta.dim() != m || s.num_loads() != m {
        return Err(Error::invalid(format!(
            "dimension mismatch: background {m}, data {}, sensitivities {}",
            lambda_delta.dim(),
            s.num_loads()
        )));
    }
    if k >= s.num_pixels() {
        return Err(Error::invalid(format!("pixel {k} out of range")));
    }
    if !(delta >= 0.0) {
        return Err(Error::invalid("noise level must be ≥ 0"));
    }
    let mut t = lambda0.matrix() - lambda_delta.matrix();
    t -= &s.s_lambda[k] * weights.alpha_lambda + &s.s_mu[k] * weights.alpha_mu;
    for i in 0..m {
        t[(i, i)] += delta;
    }
    Ok(linalg::symmetrize(&t))
}

pub fn linearized_test(
    k: usize,
    weights: &TestWeights,
    lambda0: &NtdMatrix,
    lambda_delta: &NtdMatrix,
    delta: f64,
    s: &SensitivitySet,
) -> Result<bool> {
    weights.validate()?;
    let t = test_matrix(k, weights, lambda0, lambda_delta, delta, s)?;
    Ok(linalg::is_psd(&t, PSD_REL_TOL))
}

/// Characteristic function of the detected inclusion, one entry per pixel.
pub fn run_montest(
    weights: &TestWeights,
    lambda0: &NtdMatrix,
    lambda_delta: &NtdMatrix,
    delta: f64,
    s: &SensitivitySet,
) -> Result<Vec<bool>> {
    weights.validate()?;
    (0..s.num_pixels())
        .into_par_iter()
        .map(|k| linearized_test(k, weights, lambda0, lambda_delta, delta, s))
        .collect()
}
