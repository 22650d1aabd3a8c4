//! Discretized Fréchet derivative of the NtD map at a homogeneous background.
//!
//! For pixel `B_j` and loads `k, l`:
//!
//! ```text
//! S^λ_j[k][l] = ∫_{B_j} (∇·u_k)(∇·u_l) dx
//! S^μ_j[k][l] = ∫_{B_j} 2 ε(u_k) : ε(u_l) dx
//! ```
//!
//! Both are Gram matrices, so they are assembled as `A Aᵀ` from per-element
//! feature vectors and come out symmetric and positive semidefinite by
//! construction. They hold the *negated* derivative blocks:
//! `Λ'(λ0, μ0)(κ χ_j, ν χ_j) = −(κ S^λ_j + ν S^μ_j)`.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::fem::{ElementGeometry, ForwardSolution};
use crate::linalg;
use crate::mesh::{BoxMesh, PixelPartition};

#[derive(Debug, Clone)]
pub struct SensitivitySet {
    /// Per-pixel `M × M` divergence Gram matrices.
    pub s_lambda: Vec<DMatrix<f64>>,
    /// Per-pixel `M × M` symmetric-gradient Gram matrices (factor 2 included).
    pub s_mu: Vec<DMatrix<f64>>,
    /// `M² × p`, column `j` is `S^λ_j` flattened column-major.
    pub flat_lambda: DMatrix<f64>,
    pub flat_mu: DMatrix<f64>,
}

impl SensitivitySet {
    /// Builds both layouts from per-pixel matrices.
    pub fn from_blocks(s_lambda: Vec<DMatrix<f64>>, s_mu: Vec<DMatrix<f64>>) -> Result<Self> {
        if s_lambda.len() != s_mu.len() || s_lambda.is_empty() {
            return Err(Error::invalid("sensitivity blocks must be non-empty and paired"));
        }
        let m = s_lambda[0].nrows();
        if s_lambda
            .iter()
            .chain(&s_mu)
            .any(|s| s.nrows() != m || s.ncols() != m)
        {
            return Err(Error::invalid("sensitivity blocks must all be M × M"));
        }
        let flatten = |blocks: &[DMatrix<f64>]| {
            DMatrix::from_fn(m * m, blocks.len(), |i, j| blocks[j].as_slice()[i])
        };
        Ok(SensitivitySet {
            flat_lambda: flatten(&s_lambda),
            flat_mu: flatten(&s_mu),
            s_lambda,
            s_mu,
        })
    }

    pub fn num_pixels(&self) -> usize {
        self.s_lambda.len()
    }

    pub fn num_loads(&self) -> usize {
        self.s_lambda[0].nrows()
    }

    /// `‖S^μ‖₂ / ‖S^λ‖₂` of the flattened `M² × p` matrices.
    pub fn norm_ratio(&self) -> f64 {
        linalg::spectral_norm(&self.flat_mu) / linalg::spectral_norm(&self.flat_lambda)
    }
}

/// Per-element features: `√|T| ∇·u_k` and `√(2|T|) ε(u_k)` in a Voigt layout
/// whose Euclidean product equals `ε : ε'`.
struct ElementFeatures {
    div: DVector<f64>,
    strain: DMatrix<f64>,
}

fn element_features(
    mesh: &BoxMesh,
    geometry: &ElementGeometry,
    reference: &ForwardSolution,
    t: usize,
) -> ElementFeatures {
    let m = reference.displacements.ncols();
    let grads = &geometry.gradients[t];
    let vol = geometry.volumes[t];
    let dofs: Vec<Option<usize>> = (0..12)
        .map(|r| reference.dofs.free_index(mesh.tets[t][r / 3], r % 3))
        .collect();
    let mut div = DVector::zeros(m);
    let mut strain = DMatrix::zeros(m, 6);
    let s2 = std::f64::consts::SQRT_2;
    for k in 0..m {
        let mut g = nalgebra::Matrix3::<f64>::zeros();
        for a in 0..4 {
            for i in 0..3 {
                if let Some(d) = dofs[3 * a + i] {
                    let val = reference.displacements[(d, k)];
                    for j in 0..3 {
                        g[(i, j)] += val * grads[a][j];
                    }
                }
            }
        }
        div[k] = vol.sqrt() * g.trace();
        let w = (2.0 * vol).sqrt();
        strain[(k, 0)] = w * g[(0, 0)];
        strain[(k, 1)] = w * g[(1, 1)];
        strain[(k, 2)] = w * g[(2, 2)];
        strain[(k, 3)] = w * s2 * 0.5 * (g[(0, 1)] + g[(1, 0)]);
        strain[(k, 4)] = w * s2 * 0.5 * (g[(0, 2)] + g[(2, 0)]);
        strain[(k, 5)] = w * s2 * 0.5 * (g[(1, 2)] + g[(2, 1)]);
    }
    ElementFeatures { div, strain }
}

/// Assembles `S^λ_j`, `S^μ_j` for every pixel from the background solutions.
pub fn compute_sensitivities(
    mesh: &BoxMesh,
    geometry: &ElementGeometry,
    partition: &PixelPartition,
    reference: &ForwardSolution,
) -> Result<SensitivitySet> {
    let m = reference.displacements.ncols();
    if m == 0 {
        return Err(Error::invalid("no reference solutions supplied"));
    }
    if partition.element_to_pixel.len() != mesh.num_tets() {
        return Err(Error::invalid("pixel partition does not match the mesh"));
    }
    let blocks: Vec<(DMatrix<f64>, DMatrix<f64>)> = partition
        .pixel_elements
        .par_iter()
        .map(|elements| {
            let mut a = DMatrix::zeros(m, elements.len());
            let mut b = DMatrix::zeros(m, 6 * elements.len());
            for (c, &t) in elements.iter().enumerate() {
                let feat = element_features(mesh, geometry, reference, t);
                a.set_column(c, &feat.div);
                b.columns_mut(6 * c, 6).copy_from(&feat.strain);
            }
            let s_lambda = &a * a.transpose();
            let s_mu = &b * b.transpose();
            (linalg::symmetrize(&s_lambda), linalg::symmetrize(&s_mu))
        })
        .collect();
    let (s_lambda, s_mu) = blocks.into_iter().unzip();
    SensitivitySet::from_blocks(s_lambda, s_mu)
}

/// `S^τ_j = S^μ_j + τ S^λ_j` for every pixel.
pub fn combine_tau(s: &SensitivitySet, tau: f64) -> Result<Vec<DMatrix<f64>>> {
    if !(tau >= 0.0) || !tau.is_finite() {
        return Err(Error::invalid(format!("τ must be ≥ 0, got {tau}")));
    }
    Ok(s.s_mu
        .iter()
        .zip(&s.s_lambda)
        .map(|(mu, lam)| mu + lam * tau)
        .collect())
}
