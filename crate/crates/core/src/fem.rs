//! P1 finite elements for isotropic linear elasticity with element-wise
//! constant Lamé coefficients, and the discrete Neumann-to-Dirichlet matrix.
//!
//! Basis gradients are constant on each tetrahedron, so every volume
//! integral below is exact: `|T|` times a product of constants.

use nalgebra::{DMatrix, DVector, Matrix3, SMatrix, Vector3};
use nalgebra_sparse::factorization::CscCholesky;
use nalgebra_sparse::{CooMatrix, CscMatrix};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::mesh::{BoxMesh, Face, PatchSet};

/// Element-wise Lamé parameters (Pa).
#[derive(Debug, Clone, PartialEq)]
pub struct LameField {
    pub lambda: Vec<f64>,
    pub mu: Vec<f64>,
}

impl LameField {
    pub fn homogeneous(num_elements: usize, lambda: f64, mu: f64) -> Self {
        LameField {
            lambda: vec![lambda; num_elements],
            mu: vec![mu; num_elements],
        }
    }

    pub fn len(&self) -> usize {
        self.lambda.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lambda.is_empty()
    }

    pub fn scaled(&self, c: f64) -> Self {
        LameField {
            lambda: self.lambda.iter().map(|v| v * c).collect(),
            mu: self.mu.iter().map(|v| v * c).collect(),
        }
    }

    pub fn validate(&self, num_elements: usize) -> Result<()> {
        if self.lambda.len() != num_elements || self.mu.len() != num_elements {
            return Err(Error::invalid(format!(
                "Lamé field has {}/{} values for {num_elements} elements",
                self.lambda.len(),
                self.mu.len()
            )));
        }
        let bad = self
            .lambda
            .iter()
            .chain(&self.mu)
            .position(|v| !(*v > 0.0) || !v.is_finite());
        if let Some(i) = bad {
            return Err(Error::invalid(format!(
                "Lamé parameters must be positive and finite (offending entry {i})"
            )));
        }
        Ok(())
    }
}

/// Constant barycentric gradients and volume of every tet.
#[derive(Debug, Clone)]
pub struct ElementGeometry {
    pub gradients: Vec<[Vector3<f64>; 4]>,
    pub volumes: Vec<f64>,
}

impl ElementGeometry {
    pub fn new(mesh: &BoxMesh) -> Result<Self> {
        let mut gradients = Vec::with_capacity(mesh.num_tets());
        let mut volumes = Vec::with_capacity(mesh.num_tets());
        for (t, tet) in mesh.tets.iter().enumerate() {
            let (grads, vol) = tet_gradients(tet.map(|n| mesh.nodes[n]))
                .ok_or_else(|| Error::numerical(format!("degenerate tetrahedron {t}")))?;
            gradients.push(grads);
            volumes.push(vol);
        }
        Ok(ElementGeometry { gradients, volumes })
    }
}

/// Barycentric basis gradients and (positive) volume of a tet, `None` if degenerate.
pub fn tet_gradients(x: [Vector3<f64>; 4]) -> Option<([Vector3<f64>; 4], f64)> {
    let jac = Matrix3::from_columns(&[x[1] - x[0], x[2] - x[0], x[3] - x[0]]);
    let det = jac.determinant();
    if !(det.abs() > 0.0) {
        return None;
    }
    let inv = jac.try_inverse()?;
    let g1 = inv.row(0).transpose();
    let g2 = inv.row(1).transpose();
    let g3 = inv.row(2).transpose();
    Some(([-(g1 + g2 + g3), g1, g2, g3], det.abs() / 6.0))
}

/// 12×12 element stiffness, dofs ordered `(node, component)`.
///
/// `K[(a,i),(b,j)] = |T| (λ ∂_iφ_a ∂_jφ_b + μ (∂_jφ_a ∂_iφ_b + δ_ij ∇φ_a·∇φ_b))`
pub fn element_stiffness(
    grads: &[Vector3<f64>; 4],
    volume: f64,
    lambda: f64,
    mu: f64,
) -> SMatrix<f64, 12, 12> {
    let mut k = SMatrix::<f64, 12, 12>::zeros();
    for a in 0..4 {
        for b in 0..4 {
            let dot = grads[a].dot(&grads[b]);
            for i in 0..3 {
                for j in 0..3 {
                    let mut v = lambda * grads[a][i] * grads[b][j] + mu * grads[a][j] * grads[b][i];
                    if i == j {
                        v += mu * dot;
                    }
                    k[(3 * a + i, 3 * b + j)] = volume * v;
                }
            }
        }
    }
    k
}

/// Map from global `(node, component)` dofs to the unknowns left after
/// eliminating the Dirichlet face.
#[derive(Debug, Clone)]
pub struct DofMap {
    pub dirichlet_face: Face,
    free: Vec<Option<usize>>,
    num_free: usize,
}

impl DofMap {
    pub fn new(mesh: &BoxMesh, dirichlet_face: Face) -> Self {
        let mut free = Vec::with_capacity(3 * mesh.num_nodes());
        let mut next = 0;
        for n in 0..mesh.num_nodes() {
            let fixed = mesh.node_on_face(n, dirichlet_face);
            for _ in 0..3 {
                if fixed {
                    free.push(None);
                } else {
                    free.push(Some(next));
                    next += 1;
                }
            }
        }
        DofMap {
            dirichlet_face,
            free,
            num_free: next,
        }
    }

    pub fn num_free(&self) -> usize {
        self.num_free
    }

    pub fn free_index(&self, node: usize, component: usize) -> Option<usize> {
        self.free[3 * node + component]
    }
}

/// Reduced stiffness matrix (Dirichlet rows and columns removed).
#[derive(Debug, Clone)]
pub struct Stiffness {
    pub matrix: CscMatrix<f64>,
    pub dofs: DofMap,
}

pub fn assemble_stiffness(
    mesh: &BoxMesh,
    geometry: &ElementGeometry,
    field: &LameField,
    dirichlet_face: Face,
) -> Result<Stiffness> {
    field.validate(mesh.num_tets())?;
    let dofs = DofMap::new(mesh, dirichlet_face);
    let n = dofs.num_free();
    let mut coo = CooMatrix::new(n, n);
    coo.reserve(144 * mesh.num_tets());
    for (t, tet) in mesh.tets.iter().enumerate() {
        let ke = element_stiffness(
            &geometry.gradients[t],
            geometry.volumes[t],
            field.lambda[t],
            field.mu[t],
        );
        let local: Vec<Option<usize>> = (0..12)
            .map(|r| dofs.free_index(tet[r / 3], r % 3))
            .collect();
        for (r, gr) in local.iter().enumerate() {
            let Some(gr) = gr else { continue };
            for (c, gc) in local.iter().enumerate() {
                if let Some(gc) = gc {
                    coo.push(*gr, *gc, ke[(r, c)]);
                }
            }
        }
    }
    Ok(Stiffness {
        matrix: CscMatrix::from(&coo),
        dofs,
    })
}

/// `y = A x` for a CSC matrix.
pub fn csc_mul(a: &CscMatrix<f64>, x: &DVector<f64>) -> DVector<f64> {
    let mut y = DVector::zeros(a.nrows());
    for (col, lane) in a.col_iter().enumerate() {
        let xc = x[col];
        if xc == 0.0 {
            continue;
        }
        for (&row, &v) in lane.row_indices().iter().zip(lane.values()) {
            y[row] += v * xc;
        }
    }
    y
}

/// Right-hand sides `f_l = ∫_{Γ_l} g_l · φ ds`, one column per patch.
///
/// With constant tractions and P1 traces each triangle contributes
/// `g · area / 3` to each of its vertices.
pub fn assemble_loads(mesh: &BoxMesh, patches: &PatchSet, dofs: &DofMap) -> DMatrix<f64> {
    let mut f = DMatrix::zeros(dofs.num_free(), patches.len());
    for (l, patch) in patches.patches.iter().enumerate() {
        for &tri_idx in &patch.triangles {
            let tri = &mesh.boundary_tris[tri_idx];
            let w = mesh.triangle_area(tri) / 3.0;
            for &node in &tri.nodes {
                for c in 0..3 {
                    if let Some(d) = dofs.free_index(node, c) {
                        f[(d, l)] += w * patch.traction[c];
                    }
                }
            }
        }
    }
    f
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolverKind {
    /// Sparse Cholesky factorization.
    Direct,
    /// Jacobi-preconditioned conjugate gradients.
    ConjugateGradient,
}

/// Relative residual the conjugate-gradient fallback must reach.
pub const CG_FALLBACK_TOL: f64 = 1e-10;

/// Factorized (or CG-ready) reduced stiffness.
pub struct LinearSolver<'a> {
    stiffness: &'a Stiffness,
    factor: Option<CscCholesky<f64>>,
    max_cg_iter: usize,
}

impl<'a> LinearSolver<'a> {
    /// Tries sparse Cholesky first unless `preferred` is CG; falls back to CG
    /// when the factorization fails.
    pub fn new(stiffness: &'a Stiffness, preferred: SolverKind) -> Self {
        let factor = match preferred {
            SolverKind::Direct => match CscCholesky::factor(&stiffness.matrix) {
                Ok(f) => Some(f),
                Err(e) => {
                    log::warn!("sparse Cholesky failed ({e:?}); falling back to conjugate gradients");
                    None
                }
            },
            SolverKind::ConjugateGradient => None,
        };
        LinearSolver {
            stiffness,
            factor,
            max_cg_iter: 20 * stiffness.matrix.nrows().max(100),
        }
    }

    pub fn kind(&self) -> SolverKind {
        if self.factor.is_some() {
            SolverKind::Direct
        } else {
            SolverKind::ConjugateGradient
        }
    }

    /// Solves `K U = F` column by column and verifies `‖K u − f‖ ≤ tol ‖f‖`.
    pub fn solve(&self, rhs: &DMatrix<f64>, tol: f64) -> Result<DMatrix<f64>> {
        if !(tol > 0.0 && tol <= 1e-6) {
            return Err(Error::invalid(format!(
                "solver tolerance must lie in (0, 1e-6], got {tol}"
            )));
        }
        let k = &self.stiffness.matrix;
        let mut sol = match &self.factor {
            Some(f) => f.solve(rhs),
            None => {
                let mut sol = DMatrix::zeros(rhs.nrows(), rhs.ncols());
                for c in 0..rhs.ncols() {
                    let b = rhs.column(c).into_owned();
                    let x = conjugate_gradient(k, &b, tol.min(CG_FALLBACK_TOL), self.max_cg_iter)?;
                    sol.set_column(c, &x);
                }
                sol
            }
        };
        for c in 0..rhs.ncols() {
            let b = rhs.column(c).into_owned();
            let bnorm = b.norm();
            if bnorm == 0.0 {
                sol.column_mut(c).fill(0.0);
                continue;
            }
            let mut x = sol.column(c).into_owned();
            let mut res = (&b - csc_mul(k, &x)).norm();
            if !res.is_finite() {
                return Err(Error::numerical("non-finite displacement (singular stiffness?)"));
            }
            // One step of iterative refinement recovers digits lost to rounding.
            if res > tol * bnorm {
                if let Some(f) = &self.factor {
                    let r = &b - csc_mul(k, &x);
                    x += f.solve(&r).column(0);
                    res = (&b - csc_mul(k, &x)).norm();
                    sol.set_column(c, &x);
                }
            }
            if res > tol * bnorm {
                return Err(Error::numerical(format!(
                    "linear solve residual {:.3e} exceeds tolerance {tol:.1e}",
                    res / bnorm
                )));
            }
        }
        Ok(sol)
    }
}

/// Jacobi-preconditioned CG for SPD `a`.
pub fn conjugate_gradient(
    a: &CscMatrix<f64>,
    b: &DVector<f64>,
    tol: f64,
    max_iter: usize,
) -> Result<DVector<f64>> {
    let n = b.len();
    let mut diag = DVector::zeros(n);
    for (col, lane) in a.col_iter().enumerate() {
        for (&row, &v) in lane.row_indices().iter().zip(lane.values()) {
            if row == col {
                diag[col] = v;
            }
        }
    }
    if diag.iter().any(|d| !(*d > 0.0)) {
        return Err(Error::numerical("matrix has a non-positive diagonal entry"));
    }
    let bnorm = b.norm();
    let mut x = DVector::zeros(n);
    if bnorm == 0.0 {
        return Ok(x);
    }
    let mut r = b.clone();
    let mut z = r.component_div(&diag);
    let mut p = z.clone();
    let mut rz = r.dot(&z);
    for _ in 0..max_iter {
        let ap = csc_mul(a, &p);
        let pap = p.dot(&ap);
        if !(pap > 0.0) {
            return Err(Error::numerical("conjugate gradients met a non-positive curvature"));
        }
        let alpha = rz / pap;
        x.axpy(alpha, &p, 1.0);
        r.axpy(-alpha, &ap, 1.0);
        if r.norm() <= tol * bnorm {
            return Ok(x);
        }
        z = r.component_div(&diag);
        let rz_new = r.dot(&z);
        p = &z + (rz_new / rz) * &p;
        rz = rz_new;
    }
    Err(Error::numerical(format!(
        "conjugate gradients did not reach {tol:.1e} in {max_iter} iterations"
    )))
}

/// Nodal displacements; Dirichlet nodes are exactly zero.
#[derive(Debug, Clone, PartialEq)]
pub struct DisplacementField {
    pub values: Vec<Vector3<f64>>,
}

impl DisplacementField {
    pub fn from_reduced(dofs: &DofMap, num_nodes: usize, reduced: &[f64]) -> Self {
        let values = (0..num_nodes)
            .map(|n| {
                Vector3::from_fn(|c, _| dofs.free_index(n, c).map_or(0.0, |d| reduced[d]))
            })
            .collect();
        DisplacementField { values }
    }

    /// Constant displacement gradient `∇u` on tet `t` (row i = ∇u_i).
    pub fn gradient(&self, mesh: &BoxMesh, geometry: &ElementGeometry, t: usize) -> Matrix3<f64> {
        let grads = &geometry.gradients[t];
        let mut g = Matrix3::zeros();
        for (a, &node) in mesh.tets[t].iter().enumerate() {
            g += self.values[node] * grads[a].transpose();
        }
        g
    }
}

/// Solves for a single load vector (reduced dofs).
pub fn solve_displacement(
    stiffness: &Stiffness,
    load: &DVector<f64>,
    tol: f64,
    num_nodes: usize,
) -> Result<DisplacementField> {
    if load.len() != stiffness.dofs.num_free() {
        return Err(Error::invalid(format!(
            "load has {} entries, expected {}",
            load.len(),
            stiffness.dofs.num_free()
        )));
    }
    let solver = LinearSolver::new(stiffness, SolverKind::Direct);
    let rhs = DMatrix::from_column_slice(load.len(), 1, load.as_slice());
    let u = solver.solve(&rhs, tol)?;
    Ok(DisplacementField::from_reduced(
        &stiffness.dofs,
        num_nodes,
        u.column(0).as_slice(),
    ))
}

/// Symmetric `M × M` measurement matrix `Λ[l][k] = ∫_{Γ_l} g_l · u^{(k)} ds`.
#[derive(Debug, Clone, PartialEq)]
pub struct NtdMatrix(pub DMatrix<f64>);

impl NtdMatrix {
    pub fn new(m: DMatrix<f64>) -> Result<Self> {
        if !m.is_square() {
            return Err(Error::invalid(format!(
                "NtD matrix must be square, got {}×{}",
                m.nrows(),
                m.ncols()
            )));
        }
        Ok(NtdMatrix(m))
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.0.norm()
    }

    pub fn asymmetry(&self) -> f64 {
        linalg::asymmetry(&self.0)
    }
}

/// Everything a forward run produces for one Lamé field.
#[derive(Debug, Clone)]
pub struct ForwardSolution {
    pub ntd: NtdMatrix,
    /// Reduced displacements, one column per patch load.
    pub displacements: DMatrix<f64>,
    /// Reduced load vectors, one column per patch.
    pub loads: DMatrix<f64>,
    pub dofs: DofMap,
    pub solver: SolverKind,
}

impl ForwardSolution {
    pub fn displacement(&self, mesh: &BoxMesh, k: usize) -> DisplacementField {
        DisplacementField::from_reduced(
            &self.dofs,
            mesh.num_nodes(),
            self.displacements.column(k).as_slice(),
        )
    }

    /// `(f_k · u_k, u_k · K u_k)` for load `k`.
    pub fn energy_pair(&self, stiffness: &Stiffness, k: usize) -> (f64, f64) {
        let u = self.displacements.column(k).into_owned();
        let f = self.loads.column(k).into_owned();
        (f.dot(&u), u.dot(&csc_mul(&stiffness.matrix, &u)))
    }
}

/// Solves the `M` patch problems for `field` and pairs tractions with traces.
pub fn compute_ntd(
    mesh: &BoxMesh,
    geometry: &ElementGeometry,
    field: &LameField,
    patches: &PatchSet,
    tol: f64,
    preferred: SolverKind,
) -> Result<(ForwardSolution, Stiffness)> {
    let stiffness = assemble_stiffness(mesh, geometry, field, patches.dirichlet_face)?;
    let loads = assemble_loads(mesh, patches, &stiffness.dofs);
    let solver = LinearSolver::new(&stiffness, preferred);
    let kind = solver.kind();
    let displacements = solver.solve(&loads, tol)?;
    // Boundary pairing of a P1 trace with a constant traction is exactly f_l · u_k.
    let raw = loads.transpose() * &displacements;
    let ntd = NtdMatrix::new(raw)?;
    let dofs = stiffness.dofs.clone();
    Ok((
        ForwardSolution {
            ntd,
            displacements,
            loads,
            dofs,
            solver: kind,
        },
        stiffness,
    ))
}

/// `∫_Ω 2 Δμ ε(u):ε(u) + Δλ (∇·u)² dx` with element-wise coefficient differences.
pub fn weighted_energy(
    mesh: &BoxMesh,
    geometry: &ElementGeometry,
    u: &DisplacementField,
    d_lambda: &[f64],
    d_mu: &[f64],
) -> f64 {
    (0..mesh.num_tets())
        .map(|t| {
            let g = u.gradient(mesh, geometry, t);
            let eps = (g + g.transpose()) * 0.5;
            let div = g.trace();
            geometry.volumes[t] * (2.0 * d_mu[t] * eps.norm_squared() + d_lambda[t] * div * div)
        })
        .sum()
}
