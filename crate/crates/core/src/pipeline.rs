//! End-to-end runs: problem setup, synthetic measurements, the three
//! reconstruction methods and the files they leave behind.

use std::fs;
use std::path::Path;
use std::time::Instant;

use nalgebra::Vector3;
use serde::Serialize;

use crate::config::RunConfig;
use crate::data::{self, DifferenceData, InclusionGeometry};
use crate::error::{Error, Result, StageExt};
use crate::fem::{self, ElementGeometry, ForwardSolution, LameField, NtdMatrix, SolverKind};
use crate::io;
use crate::mesh::{self, BoxMesh, PatchSet, PixelPartition};
use crate::monreg::{self, ReconstructionResult, SignCase};
use crate::montest;
use crate::onestep::{self, OneStepResult};
use crate::sensitivity::{self, SensitivitySet};

/// Discretization and phantom shared by every stage of a run.
pub struct Problem {
    pub mesh: BoxMesh,
    pub geometry: ElementGeometry,
    pub partition: PixelPartition,
    pub patches: PatchSet,
    pub inclusion: InclusionGeometry,
    /// Pixels covered by the phantom inclusion.
    pub truth: Vec<bool>,
}

impl Problem {
    pub fn build(cfg: &RunConfig) -> Result<Self> {
        let mc = &cfg.mesh;
        let mesh = mesh::build_box_mesh(
            Vector3::from(mc.origin),
            Vector3::from(mc.extents),
            mc.resolution,
        )?;
        let geometry = ElementGeometry::new(&mesh)?;
        let partition = mesh::build_pixel_partition(&mesh, mc.pixels)?;
        let patches =
            mesh::build_patch_set(&mesh, cfg.patches.per_face_grid, cfg.patches.dirichlet_face)?;
        let inclusion = InclusionGeometry {
            boxes: cfg.inclusion.boxes.clone(),
            gamma_lambda: cfg.inclusion.gamma_lambda,
            gamma_mu: cfg.inclusion.gamma_mu,
        };
        let truth = inclusion.validate(&mesh, &partition)?;
        Ok(Problem {
            mesh,
            geometry,
            partition,
            patches,
            inclusion,
            truth,
        })
    }

    pub fn background_field(&self, cfg: &RunConfig) -> LameField {
        LameField::homogeneous(self.mesh.num_tets(), cfg.material.lambda0, cfg.material.mu0)
    }

    pub fn true_field(&self, cfg: &RunConfig) -> Result<LameField> {
        data::synthesize_field(
            cfg.material.lambda0,
            cfg.material.mu0,
            &self.inclusion,
            &self.mesh,
            &self.partition,
        )
    }
}

/// Background NtD matrix, the reference solutions and their sensitivities.
pub struct Reference {
    pub lambda0: NtdMatrix,
    pub solution: ForwardSolution,
    pub sensitivities: SensitivitySet,
    pub forward_seconds: f64,
    pub sensitivity_seconds: f64,
}

pub fn prepare_reference(problem: &Problem, cfg: &RunConfig) -> Result<Reference> {
    let t0 = Instant::now();
    let field = problem.background_field(cfg);
    let (solution, _) = fem::compute_ntd(
        &problem.mesh,
        &problem.geometry,
        &field,
        &problem.patches,
        cfg.solver.fem_tol,
        cfg.solver.linear,
    )
    .stage("background forward solve")?;
    let forward_seconds = t0.elapsed().as_secs_f64();
    let t1 = Instant::now();
    let sensitivities = sensitivity::compute_sensitivities(
        &problem.mesh,
        &problem.geometry,
        &problem.partition,
        &solution,
    )
    .stage("sensitivities")?;
    Ok(Reference {
        lambda0: solution.ntd.clone(),
        solution,
        sensitivities,
        forward_seconds,
        sensitivity_seconds: t1.elapsed().as_secs_f64(),
    })
}

/// NtD matrix of the phantom (noise-free) and the solver that produced it.
pub fn simulate_measurement(problem: &Problem, cfg: &RunConfig) -> Result<(NtdMatrix, SolverKind)> {
    let field = problem.true_field(cfg).stage("phantom field")?;
    let (sol, _) = fem::compute_ntd(
        &problem.mesh,
        &problem.geometry,
        &field,
        &problem.patches,
        cfg.solver.fem_tol,
        cfg.solver.linear,
    )
    .stage("phantom forward solve")?;
    Ok((sol.ntd, sol.solver))
}

/// Measured matrix `Λ^δ` with its noise magnitude.
#[derive(Debug, Clone)]
pub struct Measurement {
    pub lambda_delta: NtdMatrix,
    pub delta: f64,
}

impl Measurement {
    pub fn noisy(lambda: &NtdMatrix, eta: f64, seed: u64) -> Result<Self> {
        let (lambda_delta, delta) = data::add_noise(lambda, eta, seed).stage("noise")?;
        Ok(Measurement { lambda_delta, delta })
    }

    /// Reads `Lambda_delta.csv` from `dir`; δ comes from `delta` or `delta.txt`.
    pub fn from_dir(dir: &Path, delta: Option<f64>) -> Result<Self> {
        let lambda_delta = NtdMatrix(io::read_matrix(&dir.join("Lambda_delta.csv"))?);
        let delta = match delta {
            Some(d) => d,
            None => {
                let path = dir.join("delta.txt");
                if !path.exists() {
                    return Err(Error::invalid(format!(
                        "{} has no delta.txt; pass the noise level explicitly",
                        dir.display()
                    )));
                }
                io::read_scalar(&path)?
            }
        };
        if !(delta >= 0.0) || !delta.is_finite() {
            return Err(Error::invalid(format!("noise level must be ≥ 0, got {delta}")));
        }
        Ok(Measurement { lambda_delta, delta })
    }

    /// `V^δ = Λ0 − Λ^δ`.
    pub fn difference(&self, lambda0: &NtdMatrix) -> Result<DifferenceData> {
        if lambda0.dim() != self.lambda_delta.dim() {
            return Err(Error::invalid(format!(
                "measured matrix is {}×{} but the configuration has {} patches",
                self.lambda_delta.dim(),
                self.lambda_delta.dim(),
                lambda0.dim()
            )));
        }
        DifferenceData::new(lambda0.matrix() - self.lambda_delta.matrix(), self.delta)
    }
}

/// Constraint construction and box-constrained solve (steps after the
/// sensitivities): `S^τ`, `|V^δ|`, `β̃`, QP, field assembly.
pub fn reconstruct_monreg(
    reference: &Reference,
    data: &DifferenceData,
    cfg: &RunConfig,
) -> Result<ReconstructionResult> {
    let (lambda0, mu0) = (cfg.material.lambda0, cfg.material.mu0);
    let (a_max, tau) =
        monreg::compute_amax_tau(lambda0, mu0, &cfg.bounds).stage("constraint parameters")?;
    let s_tau = sensitivity::combine_tau(&reference.sensitivities, tau).stage("combined sensitivities")?;
    let sym = data::symmetrized_abs(&data.v, data.delta).stage("data absolute value")?;
    let constraints =
        monreg::compute_constraints(&s_tau, &sym, a_max, tau, data.delta, cfg.bounds.sign_case)
            .stage("monotonicity constraints")?;
    monreg::solve_box_constrained(
        &s_tau,
        data,
        &constraints,
        (lambda0, mu0),
        &cfg.solver.qp_options(),
    )
    .stage("box-constrained solve")
}

pub fn reconstruct_onestep(
    reference: &Reference,
    data: &DifferenceData,
    cfg: &RunConfig,
) -> Result<OneStepResult> {
    onestep::onestep_reconstruct(&reference.sensitivities, data, &cfg.onestep).stage("one-step solve")
}

pub fn reconstruct_montest(
    reference: &Reference,
    measurement: &Measurement,
    cfg: &RunConfig,
) -> Result<Vec<bool>> {
    montest::run_montest(
        &cfg.montest,
        &reference.lambda0,
        &measurement.lambda_delta,
        measurement.delta,
        &reference.sensitivities,
    )
    .stage("monotonicity test")
}

/// Pixels whose μ-contrast magnitude (in the configured sign) reaches `a_max/2`.
pub fn classify(nu: &[f64], a_max: f64, sign_case: SignCase) -> Vec<bool> {
    let sign = match sign_case {
        SignCase::Increase => 1.0,
        SignCase::Decrease => -1.0,
    };
    nu.iter().map(|&n| sign * n >= 0.5 * a_max).collect()
}

pub fn misclassified(classified: &[bool], truth: &[bool]) -> usize {
    classified.iter().zip(truth).filter(|(c, t)| c != t).count()
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepRow {
    pub eta: f64,
    pub delta: f64,
    pub monreg_misclassified: usize,
    pub onestep_misclassified: usize,
    /// `‖ν̂_δ − ν̂‖_∞` against the exact-data minimizer.
    pub deviation_from_exact: f64,
}

pub const SWEEP_ETAS: [f64; 4] = [0.1, 0.01, 0.001, 0.0];

/// Monotonicity-regularized and one-step reconstructions for each noise level,
/// all drawn with the same seed from the same phantom matrix.
pub fn noise_sweep(
    problem: &Problem,
    reference: &Reference,
    lambda: &NtdMatrix,
    cfg: &RunConfig,
    etas: &[f64],
) -> Result<Vec<SweepRow>> {
    let (a_max, _) = monreg::compute_amax_tau(cfg.material.lambda0, cfg.material.mu0, &cfg.bounds)?;
    let exact = Measurement::noisy(lambda, 0.0, cfg.noise.seed)?;
    let exact_nu = reconstruct_monreg(reference, &exact.difference(&reference.lambda0)?, cfg)?.nu;
    etas.iter()
        .map(|&eta| {
            let meas = Measurement::noisy(lambda, eta, cfg.noise.seed)?;
            let data = meas.difference(&reference.lambda0)?;
            let mr = reconstruct_monreg(reference, &data, cfg)?;
            let os = reconstruct_onestep(reference, &data, cfg)?;
            let os_nu: Vec<f64> = os.nu.iter().copied().collect();
            let sign_case = cfg.bounds.sign_case;
            Ok(SweepRow {
                eta,
                delta: meas.delta,
                monreg_misclassified: misclassified(
                    &classify(&mr.nu, a_max, sign_case),
                    &problem.truth,
                ),
                onestep_misclassified: misclassified(
                    &classify(&os_nu, a_max, sign_case),
                    &problem.truth,
                ),
                deviation_from_exact: mr
                    .nu
                    .iter()
                    .zip(&exact_nu)
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0, f64::max),
            })
        })
        .collect()
}

pub fn sweep_table(rows: &[SweepRow]) -> String {
    let mut out = String::from("eta,delta,monreg_misclassified,onestep_misclassified,deviation_from_exact\n");
    for r in rows {
        out.push_str(&format!(
            "{},{:.16e},{},{},{:.16e}\n",
            r.eta, r.delta, r.monreg_misclassified, r.onestep_misclassified, r.deviation_from_exact
        ));
    }
    out
}

/// Run metadata; deterministic for a given configuration (timings live elsewhere).
#[derive(Debug, Clone, Serialize)]
pub struct Metadata {
    pub command: String,
    pub seed: u64,
    pub eta: Option<f64>,
    pub delta: f64,
    pub mesh_hash: String,
    pub num_tets: usize,
    pub num_pixels: usize,
    pub num_patches: usize,
    pub linear_solver: SolverKind,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub qp_iterations: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub objective: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kkt_residual: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub a_max: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tau: Option<f64>,
}

impl Metadata {
    pub fn new(command: &str, problem: &Problem, cfg: &RunConfig, solver: SolverKind) -> Self {
        Metadata {
            command: command.to_string(),
            seed: cfg.noise.seed,
            eta: Some(cfg.noise.eta),
            delta: 0.0,
            mesh_hash: io::mesh_hash(&problem.mesh),
            num_tets: problem.mesh.num_tets(),
            num_pixels: problem.partition.num_pixels(),
            num_patches: problem.patches.len(),
            linear_solver: solver,
            qp_iterations: None,
            objective: None,
            kkt_residual: None,
            a_max: None,
            tau: None,
        }
    }
}

fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("metadata serializes");
    s.push('\n');
    s
}

/// Creates the output directory and echoes the configuration into it.
pub fn prepare_output(dir: &Path, cfg: &RunConfig) -> Result<()> {
    fs::create_dir_all(dir).map_err(|source| Error::Io {
        path: dir.display().to_string(),
        source,
    })?;
    io::write_text(&dir.join("config.toml"), &cfg.to_toml_string())
}

pub fn write_metadata(dir: &Path, meta: &Metadata, timings: &[(&str, f64)]) -> Result<()> {
    io::write_text(&dir.join("metadata.json"), &to_json(meta))?;
    let timings: serde_json::Map<String, serde_json::Value> = timings
        .iter()
        .map(|(k, v)| (k.to_string(), serde_json::Value::from(*v)))
        .collect();
    io::write_text(&dir.join("timings.json"), &to_json(&timings))
}

/// Per-tet copy of a per-pixel field, for the VTK dump.
pub fn pixel_to_cells(partition: &PixelPartition, values: &[f64]) -> Vec<f64> {
    partition.element_to_pixel.iter().map(|&k| values[k]).collect()
}

pub fn write_vtk(dir: &Path, problem: &Problem, pixel_fields: &[(&str, Vec<f64>)]) -> Result<()> {
    let mut cells: Vec<(&str, Vec<f64>)> = vec![(
        "pixel",
        problem.partition.element_to_pixel.iter().map(|&k| k as f64).collect(),
    )];
    cells.push((
        "inside_truth",
        pixel_to_cells(
            &problem.partition,
            &problem.truth.iter().map(|&t| f64::from(u8::from(t))).collect::<Vec<_>>(),
        ),
    ));
    for (name, values) in pixel_fields {
        cells.push((name, pixel_to_cells(&problem.partition, values)));
    }
    io::write_text(&dir.join("mesh.vtk"), &io::vtk_unstructured(&problem.mesh, &cells))
}

/// Voxel table rows from per-pixel contrasts.
pub fn voxel_rows(problem: &Problem, cfg: &RunConfig, nu: &[f64], kappa: &[f64]) -> Vec<io::VoxelRow> {
    nu.iter()
        .zip(kappa)
        .zip(&problem.truth)
        .map(|((&nu, &kappa), &inside)| io::VoxelRow {
            nu,
            kappa,
            lambda: cfg.material.lambda0 + kappa,
            mu: cfg.material.mu0 + nu,
            inside_truth: inside,
        })
        .collect()
}

pub fn write_voxels(dir: &Path, problem: &Problem, rows: &[io::VoxelRow]) -> Result<()> {
    io::write_text(&dir.join("voxels.csv"), &io::voxel_csv(&problem.partition, rows))
}
