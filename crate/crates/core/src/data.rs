//! Synthetic ground truth, difference data and the noise model.

use nalgebra::{DMatrix, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fem::{LameField, NtdMatrix};
use crate::linalg;
use crate::mesh::{BoxMesh, PixelPartition};

/// Axis-aligned box in physical coordinates (m).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InclusionBox {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

/// Union of pixel-aligned boxes carrying constant contrasts `(γ^λ, γ^μ)`.
#[derive(Debug, Clone, PartialEq)]
pub struct InclusionGeometry {
    pub boxes: Vec<InclusionBox>,
    pub gamma_lambda: f64,
    pub gamma_mu: f64,
}

const ALIGN_TOL: f64 = 1e-9;

impl InclusionGeometry {
    pub fn empty() -> Self {
        InclusionGeometry {
            boxes: Vec::new(),
            gamma_lambda: 0.0,
            gamma_mu: 0.0,
        }
    }

    /// Indicator of `D` per pixel. Fails if a box leaves the mesh or cuts
    /// through a pixel.
    pub fn pixel_mask(&self, mesh: &BoxMesh, partition: &PixelPartition) -> Result<Vec<bool>> {
        let mut mask = vec![false; partition.num_pixels()];
        for (b, bx) in self.boxes.iter().enumerate() {
            let mut lo = [0usize; 3];
            let mut hi = [0usize; 3];
            for axis in 0..3 {
                let size = mesh.extents[axis] / partition.pixel_resolution[axis] as f64;
                let to_grid = |x: f64| -> Result<usize> {
                    let rel = (x - mesh.origin[axis]) / size;
                    let idx = rel.round();
                    if (rel - idx).abs() > ALIGN_TOL * rel.abs().max(1.0) {
                        return Err(Error::invalid(format!(
                            "inclusion box {b} is not aligned with the pixel grid along axis {axis}"
                        )));
                    }
                    if idx < 0.0 || idx > partition.pixel_resolution[axis] as f64 {
                        return Err(Error::invalid(format!(
                            "inclusion box {b} extends outside the mesh along axis {axis}"
                        )));
                    }
                    Ok(idx as usize)
                };
                lo[axis] = to_grid(bx.min[axis])?;
                hi[axis] = to_grid(bx.max[axis])?;
                if hi[axis] <= lo[axis] {
                    return Err(Error::invalid(format!(
                        "inclusion box {b} is empty along axis {axis}"
                    )));
                }
            }
            for iz in lo[2]..hi[2] {
                for iy in lo[1]..hi[1] {
                    for ix in lo[0]..hi[0] {
                        mask[partition.pixel_index(ix, iy, iz)] = true;
                    }
                }
            }
        }
        Ok(mask)
    }

    /// Validates the geometry: pixel alignment and a connected complement.
    pub fn validate(&self, mesh: &BoxMesh, partition: &PixelPartition) -> Result<Vec<bool>> {
        let mask = self.pixel_mask(mesh, partition)?;
        if !complement_connected(partition, &mask) {
            return Err(Error::invalid(
                "the complement of the inclusion must be connected",
            ));
        }
        Ok(mask)
    }
}

/// Face-connectivity of the pixels outside `mask` (true when empty).
pub fn complement_connected(partition: &PixelPartition, mask: &[bool]) -> bool {
    let outside: Vec<usize> = (0..mask.len()).filter(|&k| !mask[k]).collect();
    let Some(&start) = outside.first() else {
        return true;
    };
    let mut seen = vec![false; mask.len()];
    let mut stack = vec![start];
    seen[start] = true;
    let mut count = 0;
    while let Some(k) = stack.pop() {
        count += 1;
        for n in partition.neighbors(k) {
            if !mask[n] && !seen[n] {
                seen[n] = true;
                stack.push(n);
            }
        }
    }
    count == outside.len()
}

/// `(λ0 + γ^λ χ_D, μ0 + γ^μ χ_D)` element-wise.
pub fn synthesize_field(
    lambda0: f64,
    mu0: f64,
    inclusion: &InclusionGeometry,
    mesh: &BoxMesh,
    partition: &PixelPartition,
) -> Result<LameField> {
    if !(lambda0 > 0.0 && mu0 > 0.0) {
        return Err(Error::invalid("background Lamé parameters must be positive"));
    }
    let mask = inclusion.pixel_mask(mesh, partition)?;
    let mut field = LameField::homogeneous(mesh.num_tets(), lambda0, mu0);
    for (t, &k) in partition.element_to_pixel.iter().enumerate() {
        if mask[k] {
            field.lambda[t] += inclusion.gamma_lambda;
            field.mu[t] += inclusion.gamma_mu;
        }
    }
    field.validate(mesh.num_tets())?;
    Ok(field)
}

/// Difference measurements `V = Λ(λ0, μ0) − Λ(λ, μ)` and their noise level.
#[derive(Debug, Clone, PartialEq)]
pub struct DifferenceData {
    pub v: DMatrix<f64>,
    pub delta: f64,
}

const SYMMETRY_TOL: f64 = 1e-8;

impl DifferenceData {
    pub fn new(v: DMatrix<f64>, delta: f64) -> Result<Self> {
        if !v.is_square() {
            return Err(Error::invalid("difference data must be square"));
        }
        if !(delta >= 0.0) || !delta.is_finite() {
            return Err(Error::invalid(format!("noise level must be ≥ 0, got {delta}")));
        }
        Ok(DifferenceData { v, delta })
    }

    pub fn dim(&self) -> usize {
        self.v.nrows()
    }

    /// Column-major flattening, index `(l−1)M + k` ↔ entry `(k, l)` (1-based).
    pub fn flattened(&self) -> nalgebra::DVector<f64> {
        nalgebra::DVector::from_column_slice(self.v.as_slice())
    }
}

/// `V = Λ0 − Λ`, exact data (`δ = 0`).
pub fn difference_data(lambda0: &NtdMatrix, lambda: &NtdMatrix) -> Result<DifferenceData> {
    if lambda0.dim() != lambda.dim() {
        return Err(Error::invalid(format!(
            "NtD matrices have different sizes ({} vs {})",
            lambda0.dim(),
            lambda.dim()
        )));
    }
    for (name, m) in [("background", lambda0), ("measured", lambda)] {
        let a = m.asymmetry();
        if a > SYMMETRY_TOL {
            return Err(Error::invalid(format!(
                "{name} NtD matrix is not symmetric (relative asymmetry {a:.2e})"
            )));
        }
    }
    DifferenceData::new(lambda0.matrix() - lambda.matrix(), 0.0)
}

/// Noisy data `Λ^δ = Λ + δ E/‖E‖_F` with `E` uniform on `[−1, 1]` and
/// `δ = η ‖Λ‖_F`. Deterministic for a given seed.
pub fn add_noise(lambda: &NtdMatrix, eta: f64, seed: u64) -> Result<(NtdMatrix, f64)> {
    if !(eta >= 0.0) || !eta.is_finite() {
        return Err(Error::invalid(format!("relative noise level must be ≥ 0, got {eta}")));
    }
    let delta = eta * lambda.frobenius_norm();
    if delta == 0.0 {
        return Ok((lambda.clone(), 0.0));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let m = lambda.dim();
    // Row-major draw order so the realization does not depend on storage layout.
    let mut e = DMatrix::zeros(m, m);
    for i in 0..m {
        for j in 0..m {
            e[(i, j)] = rng.random_range(-1.0..=1.0);
        }
    }
    let enorm = e.norm();
    if enorm == 0.0 {
        return Err(Error::numerical("noise realization vanished"));
    }
    let noisy = lambda.matrix() + e * (delta / enorm);
    Ok((NtdMatrix(noisy), delta))
}

/// Symmetrized `V^δ`, its absolute value and the Cholesky factor of `δI + |V^δ|`.
#[derive(Debug, Clone)]
pub struct SymmetrizedData {
    pub v_sym: DMatrix<f64>,
    pub abs: DMatrix<f64>,
    pub chol: DMatrix<f64>,
}

pub fn symmetrized_abs(v: &DMatrix<f64>, delta: f64) -> Result<SymmetrizedData> {
    if !v.is_square() {
        return Err(Error::invalid("symmetrized_abs needs a square matrix"));
    }
    if !(delta >= 0.0) {
        return Err(Error::invalid("noise level must be ≥ 0"));
    }
    let v_sym = linalg::symmetrize(v);
    let abs = linalg::abs_sym(&v_sym);
    let shifted = &abs + DMatrix::identity(v.nrows(), v.nrows()) * delta;
    let chol = shifted.cholesky().ok_or_else(|| {
        Error::numerical(
            "δI + |V^δ| is not positive definite; the data is singular, supply a small positive delta",
        )
    })?;
    Ok(SymmetrizedData {
        v_sym,
        abs,
        chol: chol.l(),
    })
}

/// Physical centre of pixel `k`.
pub fn pixel_center(mesh: &BoxMesh, partition: &PixelPartition, k: usize) -> Vector3<f64> {
    let (lo, hi) = partition.pixel_bounds(mesh, k);
    (lo + hi) * 0.5
}
