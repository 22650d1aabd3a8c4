//! One-step linearization with two-parameter Tikhonov regularization.
//!
//! Minimizes `‖S^λ κ + S^μ ν − V‖² + ω²‖κ‖² + σ²‖ν‖²` through the normal
//! equations of the stacked system `A = [S^λ S^μ; ωI 0; 0 σI]`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::DifferenceData;
use crate::error::{Error, Result};
use crate::sensitivity::SensitivitySet;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OneStepConfig {
    /// Weight on `κ` (the λ-contrast).
    pub omega: f64,
    /// Weight on `ν` (the μ-contrast).
    pub sigma: f64,
}

impl OneStepConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.omega >= 0.0 && self.sigma >= 0.0) || !self.omega.is_finite() || !self.sigma.is_finite() {
            return Err(Error::invalid(format!(
                "regularization weights must be finite and ≥ 0 (omega {}, sigma {})",
                self.omega, self.sigma
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OneStepResult {
    pub kappa: DVector<f64>,
    pub nu: DVector<f64>,
}

/// Normal matrix `AᵀA` and right-hand side `Aᵀ(V; 0; 0)`.
pub fn normal_equations(
    s: &SensitivitySet,
    v: &DVector<f64>,
    cfg: &OneStepConfig,
) -> (DMatrix<f64>, DVector<f64>) {
    let p = s.num_pixels();
    let mut sys = DMatrix::zeros(2 * p, 2 * p);
    let ll = s.flat_lambda.tr_mul(&s.flat_lambda);
    let lm = s.flat_lambda.tr_mul(&s.flat_mu);
    let mm = s.flat_mu.tr_mul(&s.flat_mu);
    sys.view_mut((0, 0), (p, p)).copy_from(&ll);
    sys.view_mut((0, p), (p, p)).copy_from(&lm);
    sys.view_mut((p, 0), (p, p)).copy_from(&lm.transpose());
    sys.view_mut((p, p), (p, p)).copy_from(&mm);
    for i in 0..p {
        sys[(i, i)] += cfg.omega * cfg.omega;
        sys[(p + i, p + i)] += cfg.sigma * cfg.sigma;
    }
    let mut rhs = DVector::zeros(2 * p);
    rhs.rows_mut(0, p).copy_from(&s.flat_lambda.tr_mul(v));
    rhs.rows_mut(p, p).copy_from(&s.flat_mu.tr_mul(v));
    (sys, rhs)
}

pub fn onestep_reconstruct(
    s: &SensitivitySet,
    data: &DifferenceData,
    cfg: &OneStepConfig,
) -> Result<OneStepResult> {
    cfg.validate()?;
    let m = s.num_loads();
    if data.dim() != m {
        return Err(Error::invalid(format!(
            "data is {}×{} but sensitivities are for {m} loads",
            data.dim(),
            data.dim()
        )));
    }
    let p = s.num_pixels();
    let v = data.flattened();
    let (sys, rhs) = normal_equations(s, &v, cfg);
    let chol = sys.cholesky().ok_or_else(|| {
        Error::numerical("normal matrix is singular; increase omega or sigma")
    })?;
    let x = chol.solve(&rhs);
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::numerical("one-step solve produced non-finite values"));
    }
    Ok(OneStepResult {
        kappa: x.rows(0, p).into_owned(),
        nu: x.rows(p, p).into_owned(),
    })
}
