use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};
use lame_mono::config::RunConfig;
use lame_mono::io;
use lame_mono::monreg;
use lame_mono::pipeline::{self, Measurement, Metadata, Problem};
use log::info;

/// Monotonicity-based shape reconstruction for linear elasticity.
#[derive(Parser)]
#[command(name = "lame-mono", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate background, phantom and noisy NtD matrices.
    Forward {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Reconstruct the inclusion from measured or simulated data.
    Reconstruct {
        #[arg(long, value_enum)]
        method: Method,
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        method_args: MethodArgs,
    },
    /// Batch experiments on the configured phantom.
    Experiment {
        #[command(subcommand)]
        kind: Experiment,
    },
}

#[derive(Subcommand)]
enum Experiment {
    /// Misclassified-pixel counts for η ∈ {0.1, 0.01, 0.001, 0} with a fixed seed.
    NoiseSweep {
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        method_args: MethodArgs,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Method {
    Onestep,
    Monreg,
    Montest,
}

#[derive(Args)]
struct CommonArgs {
    /// TOML run configuration; the built-in desk configuration when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a configuration value, e.g. `--set noise.eta=0.01` (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Relative noise level η.
    #[arg(long)]
    eta: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct MethodArgs {
    #[arg(long)]
    omega: Option<f64>,
    #[arg(long)]
    sigma: Option<f64>,
    /// Contrast bounds `c_lambda,C_lambda,c_mu,C_mu`.
    #[arg(long, value_name = "c_lambda,C_lambda,c_mu,C_mu")]
    bounds: Option<String>,
    #[arg(long, value_parser = ["increase", "decrease"])]
    sign_case: Option<String>,
    #[arg(long)]
    alpha_lambda: Option<f64>,
    #[arg(long)]
    alpha_mu: Option<f64>,
    /// Directory holding `Lambda_delta.csv` (and optionally `delta.txt`).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Absolute noise level of the data in `--data`.
    #[arg(long, requires = "data")]
    delta: Option<f64>,
}

fn overrides(common: &CommonArgs, method: Option<&MethodArgs>) -> anyhow::Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for kv in &common.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| lame_mono::Error::InvalidArgument(format!("--set expects KEY=VALUE, got '{kv}'")))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    let mut push = |k: &str, v: String| out.push((k.to_string(), v));
    if let Some(eta) = common.eta {
        push("noise.eta", format!("{eta:e}"));
    }
    if let Some(seed) = common.seed {
        push("noise.seed", seed.to_string());
    }
    if let Some(dir) = &common.out {
        push("output.dir", toml_string(&dir.display().to_string()));
    }
    if let Some(m) = method {
        if let Some(v) = m.omega {
            push("onestep.omega", format!("{v:e}"));
        }
        if let Some(v) = m.sigma {
            push("onestep.sigma", format!("{v:e}"));
        }
        if let Some(v) = m.alpha_lambda {
            push("montest.alpha_lambda", format!("{v:e}"));
        }
        if let Some(v) = m.alpha_mu {
            push("montest.alpha_mu", format!("{v:e}"));
        }
        if let Some(sc) = &m.sign_case {
            push("bounds.sign_case", toml_string(sc));
        }
        if let Some(b) = &m.bounds {
            let parts: Vec<&str> = b.split(',').map(str::trim).collect();
            if parts.len() != 4 || parts.iter().any(|p| p.parse::<f64>().is_err()) {
                return Err(lame_mono::Error::InvalidArgument(format!(
                    "--bounds expects four numbers c_lambda,C_lambda,c_mu,C_mu, got '{b}'"
                ))
                .into());
            }
            for (key, val) in ["bounds.c_lambda", "bounds.C_lambda", "bounds.c_mu", "bounds.C_mu"].iter().zip(parts) {
                push(key, val.to_string());
            }
        }
    }
    Ok(out)
}

fn toml_string(s: &str) -> String {
    format!("\"{}\"", s.replace('\\', "\\\\").replace('"', "\\\""))
}

fn load_config(common: &CommonArgs, method: Option<&MethodArgs>) -> anyhow::Result<RunConfig> {
    let ov = overrides(common, method)?;
    let cfg = match &common.config {
        Some(path) => RunConfig::load(path, &ov)?,
        None => RunConfig::from_toml_str(&RunConfig::desk().to_toml_string(), &ov)?,
    };
    Ok(cfg)
}

fn cmd_forward(common: &CommonArgs) -> anyhow::Result<()> {
    let cfg = load_config(common, None)?;
    let dir = cfg.output.dir.clone();
    let t = Instant::now();
    let problem = Problem::build(&cfg)?;
    let reference = pipeline::prepare_reference(&problem, &cfg)?;
    let t_phantom = Instant::now();
    let (lambda, solver) = pipeline::simulate_measurement(&problem, &cfg)?;
    let phantom_seconds = t_phantom.elapsed().as_secs_f64();
    let meas = Measurement::noisy(&lambda, cfg.noise.eta, cfg.noise.seed)?;

    pipeline::prepare_output(&dir, &cfg)?;
    io::write_matrix(&dir.join("Lambda0.csv"), reference.lambda0.matrix())?;
    io::write_matrix(&dir.join("Lambda.csv"), lambda.matrix())?;
    io::write_matrix(&dir.join("Lambda_delta.csv"), meas.lambda_delta.matrix())?;
    io::write_scalar(&dir.join("delta.txt"), meas.delta)?;
    let mut meta = Metadata::new("forward", &problem, &cfg, solver);
    meta.delta = meas.delta;
    pipeline::write_metadata(
        &dir,
        &meta,
        &[
            ("background_forward_seconds", reference.forward_seconds),
            ("phantom_forward_seconds", phantom_seconds),
            ("total_seconds", t.elapsed().as_secs_f64()),
        ],
    )?;
    if cfg.output.emit_vtk {
        let m = &cfg.material;
        let truth_mu: Vec<f64> = problem.truth.iter().map(|&t| m.mu0 + if t { cfg.inclusion.gamma_mu } else { 0.0 }).collect();
        let truth_lambda: Vec<f64> =
            problem.truth.iter().map(|&t| m.lambda0 + if t { cfg.inclusion.gamma_lambda } else { 0.0 }).collect();
        pipeline::write_vtk(&dir, &problem, &[("lambda", truth_lambda), ("mu", truth_mu)])?;
    }
    info!("forward data written to {}", dir.display());
    println!("δ = {:.6e}; outputs in {}", meas.delta, dir.display());
    Ok(())
}

fn cmd_reconstruct(method: Method, common: &CommonArgs, margs: &MethodArgs) -> anyhow::Result<()> {
    let cfg = load_config(common, Some(margs))?;
    let dir = cfg.output.dir.clone();
    let t = Instant::now();
    let problem = Problem::build(&cfg)?;
    let reference = pipeline::prepare_reference(&problem, &cfg)?;
    let (meas, eta, solver) = match &margs.data {
        Some(data_dir) => (Measurement::from_dir(data_dir, margs.delta)?, None, reference.solution.solver),
        None => {
            let (lambda, solver) = pipeline::simulate_measurement(&problem, &cfg)?;
            (Measurement::noisy(&lambda, cfg.noise.eta, cfg.noise.seed)?, Some(cfg.noise.eta), solver)
        }
    };
    let data = meas.difference(&reference.lambda0)?;
    pipeline::prepare_output(&dir, &cfg)?;
    let mut meta = Metadata::new(method_name(method), &problem, &cfg, solver);
    meta.eta = eta;
    meta.delta = meas.delta;
    if let Some(d) = &margs.data {
        copy_inputs(d, &dir)?;
    }

    let t_solve = Instant::now();
    let (nu, kappa, summary) = match method {
        Method::Onestep => {
            let r = pipeline::reconstruct_onestep(&reference, &data, &cfg)?;
            let nu: Vec<f64> = r.nu.iter().copied().collect();
            let kappa: Vec<f64> = r.kappa.iter().copied().collect();
            let s = format!("max ν {:.4e}, max κ {:.4e}", max_abs(&nu), max_abs(&kappa));
            (nu, kappa, s)
        }
        Method::Monreg => {
            let r = pipeline::reconstruct_monreg(&reference, &data, &cfg)?;
            io::write_text(&dir.join("constraints.csv"), &io::constraints_csv(&r.constraints))?;
            meta.qp_iterations = Some(r.iterations);
            meta.objective = Some(r.objective);
            meta.kkt_residual = Some(r.kkt_residual);
            meta.a_max = Some(r.constraints.a_max);
            meta.tau = Some(r.constraints.tau);
            let marked = pipeline::classify(&r.nu, r.constraints.a_max, r.constraints.sign_case);
            let s = format!(
                "{} iterations, residual {:.4e}, {} pixels ≥ a_max/2, {} misclassified",
                r.iterations,
                r.objective,
                marked.iter().filter(|&&b| b).count(),
                pipeline::misclassified(&marked, &problem.truth)
            );
            (r.nu, r.kappa, s)
        }
        Method::Montest => {
            let map = pipeline::reconstruct_montest(&reference, &meas, &cfg)?;
            io::write_text(&dir.join("montest.csv"), &io::montest_csv(&problem.partition, &map, &problem.truth))?;
            let ind = |a: f64| map.iter().map(|&b| if b { a } else { 0.0 }).collect::<Vec<f64>>();
            let s = format!(
                "{} pixels marked, {} misclassified",
                map.iter().filter(|&&b| b).count(),
                pipeline::misclassified(&map, &problem.truth)
            );
            (ind(cfg.montest.alpha_mu), ind(cfg.montest.alpha_lambda), s)
        }
    };
    let rows = pipeline::voxel_rows(&problem, &cfg, &nu, &kappa);
    pipeline::write_voxels(&dir, &problem, &rows)?;
    if cfg.output.emit_vtk {
        pipeline::write_vtk(
            &dir,
            &problem,
            &[
                ("nu", nu.clone()),
                ("kappa", kappa.clone()),
                ("lambda", rows.iter().map(|r| r.lambda).collect()),
                ("mu", rows.iter().map(|r| r.mu).collect()),
            ],
        )?;
    }
    pipeline::write_metadata(
        &dir,
        &meta,
        &[
            ("background_forward_seconds", reference.forward_seconds),
            ("sensitivity_seconds", reference.sensitivity_seconds),
            ("reconstruction_seconds", t_solve.elapsed().as_secs_f64()),
            ("total_seconds", t.elapsed().as_secs_f64()),
        ],
    )?;
    println!("{}: {summary}; outputs in {}", method_name(method), dir.display());
    Ok(())
}

fn cmd_noise_sweep(common: &CommonArgs, margs: &MethodArgs) -> anyhow::Result<()> {
    if margs.data.is_some() {
        return Err(lame_mono::Error::InvalidArgument("the noise sweep simulates its own data; drop --data".into()).into());
    }
    let cfg = load_config(common, Some(margs))?;
    let dir = cfg.output.dir.clone();
    let t = Instant::now();
    let problem = Problem::build(&cfg)?;
    let reference = pipeline::prepare_reference(&problem, &cfg)?;
    let (lambda, solver) = pipeline::simulate_measurement(&problem, &cfg)?;
    let rows = pipeline::noise_sweep(&problem, &reference, &lambda, &cfg, &pipeline::SWEEP_ETAS)?;
    pipeline::prepare_output(&dir, &cfg)?;
    let table = pipeline::sweep_table(&rows);
    io::write_text(&dir.join("noise_sweep.csv"), &table)?;
    let (a_max, tau) = monreg::compute_amax_tau(cfg.material.lambda0, cfg.material.mu0, &cfg.bounds)?;
    let mut meta = Metadata::new("noise-sweep", &problem, &cfg, solver);
    meta.eta = None;
    meta.a_max = Some(a_max);
    meta.tau = Some(tau);
    pipeline::write_metadata(&dir, &meta, &[("total_seconds", t.elapsed().as_secs_f64())])?;
    println!("{:>8} {:>14} {:>8} {:>9}", "eta", "delta", "monreg", "one-step");
    for r in &rows {
        println!("{:>8} {:>14.6e} {:>8} {:>9}", r.eta, r.delta, r.monreg_misclassified, r.onestep_misclassified);
    }
    Ok(())
}

fn copy_inputs(src: &Path, dst: &Path) -> anyhow::Result<()> {
    for name in ["Lambda_delta.csv", "delta.txt"] {
        let from = src.join(name);
        if from.exists() && src.canonicalize().ok() != dst.canonicalize().ok() {
            std::fs::copy(&from, dst.join(format!("input_{name}")))
                .with_context(|| format!("copying {}", from.display()))?;
        }
    }
    Ok(())
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

fn method_name(m: Method) -> &'static str {
    match m {
        Method::Onestep => "onestep",
        Method::Monreg => "monreg",
        Method::Montest => "montest",
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<lame_mono::Error>() {
        Some(e) if e.is_invalid_input() => 2,
        Some(_) => 3,
        None => 2,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Forward { common } => cmd_forward(common),
        Command::Reconstruct { method, common, method_args } => cmd_reconstruct(*method, common, method_args),
        Command::Experiment { kind: Experiment::NoiseSweep { common, method_args } } => {
            cmd_noise_sweep(common, method_args)
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            // library errors already spell out their cause chain
            match e.downcast_ref::<lame_mono::Error>() {
                Some(inner) => eprintln!("error: {inner}"),
                None => eprintln!("error: {e:#}"),
            }
            ExitCode::from(exit_code(&e))
        }
    }
}
