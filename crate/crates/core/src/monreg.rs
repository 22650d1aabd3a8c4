//! Monotonicity-based regularization.
//!
//! A single per-pixel unknown `ν` drives both contrasts (`κ = τ ν`). The
//! linearized residual `‖Σ_k ν_k S^τ_k − V^δ‖_F` is minimized over the box
//! `0 ≤ ν_k ≤ min(a_max, β̃_k)`, where `β̃_k` is the largest contrast on
//! pixel `k` the (noisy) data can support:
//!
//! ```text
//! β̃_k = max { a ≥ 0 : δI + |V^δ| − a S^τ_k ⪰ 0 } = 1 / θ_max(L⁻¹ S^τ_k L⁻ᵀ),
//! δI + |V^δ| = L Lᵀ.
//! ```
//!
//! The softening case (`λ ≤ λ0`, `μ ≤ μ0`) uses the mirrored box
//! `−min(a_max, β̃_k) ≤ ν_k ≤ 0` and is solved by negating the unknown.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{DifferenceData, SymmetrizedData};
use crate::error::{Error, Result};
use crate::linalg;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SignCase {
    /// `λ ≥ λ0`, `μ ≥ μ0` on the inclusion.
    Increase,
    /// `λ ≤ λ0`, `μ ≤ μ0` on the inclusion.
    Decrease,
}

impl std::str::FromStr for SignCase {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "increase" => Ok(SignCase::Increase),
            "decrease" => Ok(SignCase::Decrease),
            _ => Err(Error::invalid(format!(
                "sign case must be 'increase' or 'decrease', got '{s}'"
            ))),
        }
    }
}

/// Known bounds `c ≤ |γ| ≤ C` on the inclusion contrasts (Pa).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContrastBounds {
    pub c_lambda: f64,
    #[serde(rename = "C_lambda")]
    pub upper_lambda: f64,
    pub c_mu: f64,
    #[serde(rename = "C_mu")]
    pub upper_mu: f64,
    pub sign_case: SignCase,
}

impl ContrastBounds {
    pub fn validate(&self) -> Result<()> {
        let vals = [self.c_lambda, self.upper_lambda, self.c_mu, self.upper_mu];
        if vals.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(Error::invalid("contrast bounds must be finite and ≥ 0"));
        }
        if self.c_lambda > self.upper_lambda || self.c_mu > self.upper_mu {
            return Err(Error::invalid("lower contrast bounds exceed upper bounds"));
        }
        if !(self.c_mu > 0.0) {
            return Err(Error::invalid("c_mu must be positive"));
        }
        if self.sign_case == SignCase::Increase && !(self.c_lambda > 0.0) {
            return Err(Error::invalid("c_lambda must be positive for the increase case"));
        }
        Ok(())
    }

    /// Whether the contrast pair `(γ^λ, γ^μ)` respects the bounds and sign case.
    pub fn admits(&self, gamma_lambda: f64, gamma_mu: f64) -> bool {
        let (gl, gm) = match self.sign_case {
            SignCase::Increase => (gamma_lambda, gamma_mu),
            SignCase::Decrease => (-gamma_lambda, -gamma_mu),
        };
        (self.c_lambda..=self.upper_lambda).contains(&gl) && (self.c_mu..=self.upper_mu).contains(&gm)
    }
}

/// `(a_max, τ)` for the background `(λ0, μ0)` and the contrast bounds.
///
/// Increase case: `a_max = μ0 − μ0²/(μ0 + c^μ)`, `τ = (λ0 − λ0²/(λ0 + c^λ)) / a_max`.
/// Decrease case: `a_max = c^μ`, `τ = c^λ / c^μ`.
pub fn compute_amax_tau(lambda0: f64, mu0: f64, bounds: &ContrastBounds) -> Result<(f64, f64)> {
    if !(lambda0 > 0.0 && mu0 > 0.0) {
        return Err(Error::invalid("background Lamé parameters must be positive"));
    }
    bounds.validate()?;
    let (a_max, tau) = match bounds.sign_case {
        SignCase::Increase => {
            let a_max = mu0 - mu0 * mu0 / (mu0 + bounds.c_mu);
            let lam = lambda0 - lambda0 * lambda0 / (lambda0 + bounds.c_lambda);
            (a_max, lam / a_max)
        }
        SignCase::Decrease => (bounds.c_mu, bounds.c_lambda / bounds.c_mu),
    };
    if !(a_max > 0.0) || !tau.is_finite() {
        return Err(Error::invalid(format!(
            "degenerate constraint parameters (a_max {a_max}, tau {tau})"
        )));
    }
    Ok((a_max, tau))
}

/// `β̃ = 1/θ_max(L⁻¹ S Lᵀ⁻¹)`; `+∞` when `S` has no positive direction.
pub fn compute_beta(s_tau: &DMatrix<f64>, chol_lower: &DMatrix<f64>) -> Result<f64> {
    let m = chol_lower.nrows();
    if s_tau.shape() != (m, m) || !chol_lower.is_square() {
        return Err(Error::invalid("β̃ needs matching square matrices"));
    }
    if (0..m).any(|i| chol_lower[(i, i)] == 0.0) {
        return Err(Error::invalid("Cholesky factor is singular"));
    }
    let x = chol_lower
        .solve_lower_triangular(s_tau)
        .ok_or_else(|| Error::numerical("triangular solve failed"))?;
    let w = chol_lower
        .solve_lower_triangular(&x.transpose())
        .ok_or_else(|| Error::numerical("triangular solve failed"))?;
    let theta_max = linalg::max_eigenvalue(&w);
    if !theta_max.is_finite() {
        return Err(Error::numerical("non-finite eigenvalue while computing β̃"));
    }
    if theta_max <= 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(1.0 / theta_max)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonRegConstraints {
    pub a_max: f64,
    pub tau: f64,
    pub beta: Vec<f64>,
    pub delta: f64,
    pub sign_case: SignCase,
}

impl MonRegConstraints {
    /// `min(a_max, β̃_k)` per pixel.
    pub fn upper_bounds(&self) -> Vec<f64> {
        self.beta.iter().map(|b| b.min(self.a_max)).collect()
    }
}

/// `β̃_k` for every pixel (parallel over pixels).
pub fn compute_constraints(
    s_tau: &[DMatrix<f64>],
    sym: &SymmetrizedData,
    a_max: f64,
    tau: f64,
    delta: f64,
    sign_case: SignCase,
) -> Result<MonRegConstraints> {
    let beta = s_tau
        .par_iter()
        .map(|s| compute_beta(s, &sym.chol))
        .collect::<Result<Vec<f64>>>()?;
    Ok(MonRegConstraints {
        a_max,
        tau,
        beta,
        delta,
        sign_case,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QpOptions {
    /// Relative KKT tolerance.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for QpOptions {
    fn default() -> Self {
        QpOptions {
            tol: 1e-10,
            max_iter: 20_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QpSolution {
    pub x: Vec<f64>,
    pub iterations: usize,
    pub kkt_residual: f64,
}

/// Convex quadratic `½ xᵀ H x − cᵀ x` over `0 ≤ x ≤ upper`.
///
/// Projected gradient with Barzilai–Borwein steps and Armijo backtracking
/// along the projection arc. After every gradient step a Newton step on the
/// currently free variables is tried (pseudo-inverse, so a singular `H` is
/// fine) and kept only if it lowers the objective; this finishes in a few
/// iterations once the active set settles. Iterates are always feasible.
pub fn solve_box_qp(
    hessian: &DMatrix<f64>,
    linear: &DVector<f64>,
    upper: &[f64],
    opts: &QpOptions,
) -> Result<QpSolution> {
    let n = linear.len();
    if hessian.shape() != (n, n) || upper.len() != n {
        return Err(Error::invalid("box QP dimensions do not match"));
    }
    if upper.iter().any(|u| !(*u >= 0.0)) {
        return Err(Error::invalid("box QP upper bounds must be ≥ 0 (NaN not allowed)"));
    }
    if !(opts.tol > 0.0) {
        return Err(Error::invalid("box QP tolerance must be positive"));
    }

    // Unit box for the variables with room; the rest are pinned at zero.
    let free: Vec<usize> = (0..n).filter(|&i| upper[i] > 0.0).collect();
    let scale: Vec<f64> = free
        .iter()
        .map(|&i| {
            let u = upper[i];
            if u.is_finite() {
                u
            } else {
                // Unbounded: scale by the Jacobi factor instead.
                let h = hessian[(i, i)];
                if h > 0.0 {
                    1.0 / h.sqrt()
                } else {
                    1.0
                }
            }
        })
        .collect();
    let hi: Vec<f64> = free
        .iter()
        .map(|&i| if upper[i].is_finite() { 1.0 } else { f64::INFINITY })
        .collect();
    let nf = free.len();
    let h = DMatrix::from_fn(nf, nf, |a, b| hessian[(free[a], free[b])] * scale[a] * scale[b]);
    let c = DVector::from_fn(nf, |a, _| linear[free[a]] * scale[a]);

    let grad_scale = c
        .amax()
        .max((0..nf).map(|i| h[(i, i)].abs()).fold(0.0, f64::max));
    let project = |x: &mut DVector<f64>| {
        for (v, &u) in x.iter_mut().zip(&hi) {
            *v = v.clamp(0.0, u);
        }
    };
    let objective = |x: &DVector<f64>| 0.5 * x.dot(&(&h * x)) - c.dot(x);
    let kkt = |x: &DVector<f64>, g: &DVector<f64>| -> f64 {
        if grad_scale == 0.0 {
            return 0.0;
        }
        let mut worst = 0.0_f64;
        for i in 0..nf {
            let pg = if x[i] <= 0.0 {
                g[i].min(0.0)
            } else if x[i] >= hi[i] {
                g[i].max(0.0)
            } else {
                g[i]
            };
            worst = worst.max(pg.abs());
        }
        worst / grad_scale
    };
    let finish = |x: &DVector<f64>, iterations: usize, kkt_residual: f64| {
        let mut full = vec![0.0; n];
        for (a, &i) in free.iter().enumerate() {
            // x ≤ 1 and rounding is monotone, so x·u ≤ u holds exactly.
            full[i] = if x[a] >= hi[a] { upper[i] } else { x[a] * scale[a] };
        }
        QpSolution {
            x: full,
            iterations,
            kkt_residual,
        }
    };

    let mut x = DVector::zeros(nf);
    let mut g = &h * &x - &c;
    let mut f = objective(&x);
    let mut step = 1.0 / h.diagonal().amax().max(f64::MIN_POSITIVE);
    for iter in 0..opts.max_iter {
        let res = kkt(&x, &g);
        if res <= opts.tol {
            return Ok(finish(&x, iter, res));
        }

        // Projected gradient step with backtracking.
        let mut alpha = step;
        let mut accepted = false;
        for _ in 0..60 {
            let mut trial = &x - &g * alpha;
            project(&mut trial);
            let ft = objective(&trial);
            let decrease = g.dot(&(&trial - &x));
            if ft <= f + 1e-4 * decrease {
                let s = &trial - &x;
                let g_new = &h * &trial - &c;
                let y = &g_new - &g;
                let sy = s.dot(&y);
                step = if sy > 0.0 { s.norm_squared() / sy } else { step * 2.0 };
                x = trial;
                g = g_new;
                f = ft;
                accepted = true;
                break;
            }
            alpha *= 0.5;
        }

        // Newton step on the free variables.
        if let Some(d) = subspace_newton_direction(&h, &x, &g, &hi) {
            let mut t = 1.0;
            for _ in 0..30 {
                let mut trial = &x + &d * t;
                project(&mut trial);
                let ft = objective(&trial);
                if ft < f {
                    g = &h * &trial - &c;
                    x = trial;
                    f = ft;
                    accepted = true;
                    break;
                }
                t *= 0.5;
            }
        }

        if !accepted {
            // Neither step makes progress in floating point: we are at the
            // attainable optimum.
            let res = kkt(&x, &g);
            if res <= opts.tol.sqrt() {
                return Ok(finish(&x, iter + 1, res));
            }
            return Err(Error::NoConvergence {
                iterations: iter + 1,
                kkt_residual: res,
                last_iterate: finish(&x, iter + 1, res).x,
            });
        }
    }
    let res = kkt(&x, &g);
    if res <= opts.tol {
        return Ok(finish(&x, opts.max_iter, res));
    }
    Err(Error::NoConvergence {
        iterations: opts.max_iter,
        kkt_residual: res,
        last_iterate: finish(&x, opts.max_iter, res).x,
    })
}

/// Newton direction restricted to variables that are not held by an active bound.
fn subspace_newton_direction(
    h: &DMatrix<f64>,
    x: &DVector<f64>,
    g: &DVector<f64>,
    hi: &[f64],
) -> Option<DVector<f64>> {
    let n = x.len();
    let idx: Vec<usize> = (0..n)
        .filter(|&i| !((x[i] <= 0.0 && g[i] >= 0.0) || (x[i] >= hi[i] && g[i] <= 0.0)))
        .collect();
    if idx.is_empty() {
        return None;
    }
    let k = idx.len();
    let sub = DMatrix::from_fn(k, k, |a, b| h[(idx[a], idx[b])]);
    let rhs = DVector::from_fn(k, |a, _| -g[idx[a]]);
    let eig = SymmetricEigen::new(sub);
    let top = eig.eigenvalues.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    if top == 0.0 {
        return None;
    }
    let cutoff = top * 1e-13;
    let q = &eig.eigenvectors;
    let coeffs = q.tr_mul(&rhs);
    let mut y = DVector::zeros(k);
    for (j, &lam) in eig.eigenvalues.iter().enumerate() {
        if lam > cutoff {
            y += q.column(j) * (coeffs[j] / lam);
        }
    }
    let mut d = DVector::zeros(n);
    for (a, &i) in idx.iter().enumerate() {
        d[i] = y[a];
    }
    if d.iter().all(|v| *v == 0.0) {
        None
    } else {
        Some(d)
    }
}

/// Gram matrix `G[j][k] = ⟨S_j, S_k⟩_F` and `b_k = ⟨S_k, V⟩_F`.
pub fn residual_quadratic(s_tau: &[DMatrix<f64>], v: &DMatrix<f64>) -> (DMatrix<f64>, DVector<f64>) {
    let p = s_tau.len();
    let mut gram = DMatrix::zeros(p, p);
    for j in 0..p {
        for k in j..p {
            let val = linalg::frobenius_inner(&s_tau[j], &s_tau[k]);
            gram[(j, k)] = val;
            gram[(k, j)] = val;
        }
    }
    let b = DVector::from_fn(p, |k, _| linalg::frobenius_inner(&s_tau[k], v));
    (gram, b)
}

/// `‖Σ_k ν_k S_k − V‖_F`.
pub fn residual_norm(s_tau: &[DMatrix<f64>], nu: &[f64], v: &DMatrix<f64>) -> f64 {
    let mut r = -v.clone();
    for (s, &a) in s_tau.iter().zip(nu) {
        if a != 0.0 {
            r += s * a;
        }
    }
    r.norm()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReconstructionResult {
    /// Reconstructed μ-contrast per pixel (Pa).
    pub nu: Vec<f64>,
    /// Reconstructed λ-contrast per pixel, `τ ν` (Pa).
    pub kappa: Vec<f64>,
    pub lambda_map: Vec<f64>,
    pub mu_map: Vec<f64>,
    pub iterations: usize,
    /// `‖Σ ν_k S^τ_k − V^δ‖_F` at the solution.
    pub objective: f64,
    pub kkt_residual: f64,
    pub constraints: MonRegConstraints,
}

/// Minimizes the linearized residual over the monotonicity box.
pub fn solve_box_constrained(
    s_tau: &[DMatrix<f64>],
    data: &DifferenceData,
    constraints: &MonRegConstraints,
    background: (f64, f64),
    opts: &QpOptions,
) -> Result<ReconstructionResult> {
    let p = s_tau.len();
    if constraints.beta.len() != p {
        return Err(Error::invalid(format!(
            "{} β̃ values for {p} pixels",
            constraints.beta.len()
        )));
    }
    if s_tau.iter().any(|s| s.shape() != (data.dim(), data.dim())) {
        return Err(Error::invalid("sensitivity and data sizes differ"));
    }
    let v = linalg::symmetrize(&data.v);
    let sign = match constraints.sign_case {
        SignCase::Increase => 1.0,
        SignCase::Decrease => -1.0,
    };
    let (gram, b) = residual_quadratic(s_tau, &(&v * sign));
    let upper = constraints.upper_bounds();
    let sol = solve_box_qp(&gram, &b, &upper, opts)?;
    let nu: Vec<f64> = sol.x.iter().map(|w| sign * w).collect();
    let kappa: Vec<f64> = nu.iter().map(|n| constraints.tau * n).collect();
    let (lambda0, mu0) = background;
    Ok(ReconstructionResult {
        lambda_map: kappa.iter().map(|k| lambda0 + k).collect(),
        mu_map: nu.iter().map(|n| mu0 + n).collect(),
        objective: residual_norm(s_tau, &nu, &v),
        iterations: sol.iterations,
        kkt_residual: sol.kkt_residual,
        constraints: constraints.clone(),
        kappa,
        nu,
    })
}
