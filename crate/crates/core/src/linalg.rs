//! Small dense helpers for symmetric matrices.

use nalgebra::{DMatrix, SymmetricEigen};

/// `(A + Aᵀ) / 2`.
pub fn symmetrize(a: &DMatrix<f64>) -> DMatrix<f64> {
    (a + a.transpose()) * 0.5
}

/// Relative asymmetry `‖A − Aᵀ‖_F / ‖A‖_F` (zero for the zero matrix).
pub fn asymmetry(a: &DMatrix<f64>) -> f64 {
    let norm = a.norm();
    if norm == 0.0 {
        return 0.0;
    }
    (a - a.transpose()).norm() / norm
}

/// Eigenvalues of the symmetric part of `a`, ascending.
pub fn eigenvalues_sorted(a: &DMatrix<f64>) -> Vec<f64> {
    let mut ev: Vec<f64> = SymmetricEigen::new(symmetrize(a))
        .eigenvalues
        .iter()
        .copied()
        .collect();
    ev.sort_by(f64::total_cmp);
    ev
}

pub fn min_eigenvalue(a: &DMatrix<f64>) -> f64 {
    eigenvalues_sorted(a).first().copied().unwrap_or(0.0)
}

pub fn max_eigenvalue(a: &DMatrix<f64>) -> f64 {
    eigenvalues_sorted(a).last().copied().unwrap_or(0.0)
}

/// Spectral norm of a symmetric matrix (largest absolute eigenvalue).
pub fn spectral_norm_sym(a: &DMatrix<f64>) -> f64 {
    eigenvalues_sorted(a)
        .iter()
        .fold(0.0_f64, |acc, v| acc.max(v.abs()))
}

/// Spectral norm of a general matrix (largest singular value).
pub fn spectral_norm(a: &DMatrix<f64>) -> f64 {
    if a.is_empty() {
        return 0.0;
    }
    a.singular_values().max()
}

/// `min eig(A) ≥ −rel_tol · ‖A‖₂` for the symmetric part of `a`.
pub fn is_psd(a: &DMatrix<f64>, rel_tol: f64) -> bool {
    let ev = eigenvalues_sorted(a);
    let scale = ev.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()));
    match ev.first() {
        Some(&min) => min >= -rel_tol * scale,
        None => true,
    }
}

/// Matrix absolute value `|A| = √(AᵀA)` of a symmetric matrix, via its eigendecomposition.
pub fn abs_sym(a: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(symmetrize(a));
    let q = &eig.eigenvectors;
    let d = DMatrix::from_diagonal(&eig.eigenvalues.map(f64::abs));
    symmetrize(&(q * d * q.transpose()))
}

/// Frobenius inner product `Σ_ij A_ij B_ij`.
pub fn frobenius_inner(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

/// Whether a plain Cholesky factorization of `a` succeeds.
pub fn cholesky_succeeds(a: &DMatrix<f64>) -> bool {
    a.clone().cholesky().is_some()
}
