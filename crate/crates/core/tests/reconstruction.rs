use lame_mono::config::RunConfig;
use lame_mono::data::{DifferenceData, InclusionBox};
use lame_mono::linalg;
use lame_mono::monreg::{self, SignCase};
use lame_mono::onestep::{normal_equations, onestep_reconstruct, OneStepConfig};
use lame_mono::pipeline::{self, Measurement, Problem, Reference};
use lame_mono::sensitivity::{combine_tau, SensitivitySet};
use lame_mono::Error;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// 6³ mesh, 3³ pixels, one corner-adjacent box inclusion.
fn small_config(sign_case: SignCase) -> RunConfig {
    let mut cfg = RunConfig::desk();
    cfg.mesh.resolution = [6, 6, 6];
    cfg.mesh.pixels = [3, 3, 3];
    let third = 1.0 / 3.0;
    cfg.inclusion.boxes = vec![InclusionBox {
        min: [third, third, third],
        max: [2.0 * third, 2.0 * third, 2.0 * third],
    }];
    if sign_case == SignCase::Decrease {
        cfg.bounds.sign_case = SignCase::Decrease;
        cfg.bounds.c_lambda = 1.0e5;
        cfg.bounds.upper_lambda = 4.0e5;
        cfg.bounds.c_mu = 1.0e3;
        cfg.bounds.upper_mu = 4.0e3;
        cfg.inclusion.gamma_lambda = -3.0e5;
        cfg.inclusion.gamma_mu = -3.0e3;
        let (l0, m0) = (cfg.material.lambda0, cfg.material.mu0);
        cfg.montest.alpha_lambda = 0.5 * 3.0e5 * l0 / (l0 - 3.0e5);
        cfg.montest.alpha_mu = 0.5 * 3.0e3 * m0 / (m0 - 3.0e3);
    }
    cfg.validate().unwrap();
    cfg
}

fn small_run(sign_case: SignCase) -> (RunConfig, Problem, Reference, Measurement) {
    let cfg = small_config(sign_case);
    let problem = Problem::build(&cfg).unwrap();
    let reference = pipeline::prepare_reference(&problem, &cfg).unwrap();
    let (lambda, _) = pipeline::simulate_measurement(&problem, &cfg).unwrap();
    let meas = Measurement::noisy(&lambda, 0.0, cfg.noise.seed).unwrap();
    (cfg, problem, reference, meas)
}

#[test]
fn onestep_matches_dense_stacked_least_squares() {
    let s_l = vec![
        DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0]),
        DMatrix::from_row_slice(2, 2, &[0.5, 0.1, 0.1, 1.5]),
    ];
    let s_m = vec![
        DMatrix::from_row_slice(2, 2, &[3.0, -0.2, -0.2, 1.0]),
        DMatrix::from_row_slice(2, 2, &[1.0, 0.4, 0.4, 2.0]),
    ];
    let s = SensitivitySet::from_blocks(s_l.clone(), s_m.clone()).unwrap();
    let v = DMatrix::from_row_slice(2, 2, &[1.0, 0.2, 0.2, -0.5]);
    let cfg = OneStepConfig { omega: 0.3, sigma: 0.7 };
    let r = onestep_reconstruct(&s, &DifferenceData::new(v.clone(), 0.0).unwrap(), &cfg).unwrap();

    // stacked A (8×4) built entry by entry, solved by LU on AᵀA
    let mut a = DMatrix::zeros(8, 4);
    for (col, block) in s_l.iter().chain(&s_m).enumerate() {
        for l in 0..2 {
            for k in 0..2 {
                a[(l * 2 + k, col)] = block[(k, l)];
            }
        }
    }
    a[(4, 0)] = 0.3;
    a[(5, 1)] = 0.3;
    a[(6, 2)] = 0.7;
    a[(7, 3)] = 0.7;
    let mut b = DVector::zeros(8);
    for l in 0..2 {
        for k in 0..2 {
            b[l * 2 + k] = v[(k, l)];
        }
    }
    let x = (a.transpose() * &a).lu().solve(&(a.transpose() * &b)).unwrap();
    let got = DVector::from_iterator(4, r.kappa.iter().chain(r.nu.iter()).copied());
    assert!((got - &x).norm() <= 1e-10 * x.norm());
}

#[test]
fn onestep_satisfies_first_order_optimality_on_fem_sensitivities() {
    let (cfg, _, reference, meas) = small_run(SignCase::Increase);
    let data = meas.difference(&reference.lambda0).unwrap();
    let r = pipeline::reconstruct_onestep(&reference, &data, &cfg).unwrap();
    let (sys, rhs) = normal_equations(&reference.sensitivities, &data.flattened(), &cfg.onestep);
    let x = DVector::from_iterator(rhs.len(), r.kappa.iter().chain(r.nu.iter()).copied());
    let grad = &sys * &x - &rhs;
    assert!(grad.norm() <= 1e-8 * rhs.norm(), "gradient {:e} vs {:e}", grad.norm(), rhs.norm());
}

#[test]
fn residual_gram_is_positive_semidefinite() {
    let (cfg, _, reference, meas) = small_run(SignCase::Increase);
    let (_, tau) = monreg::compute_amax_tau(cfg.material.lambda0, cfg.material.mu0, &cfg.bounds).unwrap();
    let s_tau = combine_tau(&reference.sensitivities, tau).unwrap();
    let data = meas.difference(&reference.lambda0).unwrap();
    let (gram, _) = monreg::residual_quadratic(&s_tau, &data.v);
    assert!(linalg::min_eigenvalue(&gram) >= -1e-10 * gram.trace());
}

#[test]
fn residual_is_negative_semidefinite_below_the_true_support() {
    let (cfg, problem, reference, meas) = small_run(SignCase::Increase);
    let (a_max, tau) = monreg::compute_amax_tau(cfg.material.lambda0, cfg.material.mu0, &cfg.bounds).unwrap();
    let s_tau = combine_tau(&reference.sensitivities, tau).unwrap();
    let v = meas.difference(&reference.lambda0).unwrap().v;
    let vnorm = linalg::spectral_norm_sym(&v);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for trial in 0..10 {
        let nu: Vec<f64> = problem
            .truth
            .iter()
            .map(|&t| if !t { 0.0 } else if trial == 0 { a_max } else { rng.random_range(0.0..=a_max) })
            .collect();
        let mut r = -v.clone();
        for (k, s) in s_tau.iter().enumerate() {
            r += s * nu[k];
        }
        assert!(linalg::max_eigenvalue(&linalg::symmetrize(&r)) <= 1e-8 * vnorm);
    }
}

#[test]
fn monreg_solution_is_feasible_and_kappa_is_tau_nu() {
    for sign_case in [SignCase::Increase, SignCase::Decrease] {
        let (cfg, problem, reference, meas) = small_run(sign_case);
        for eta in [0.0, 0.05] {
            let m = Measurement::noisy(&meas.lambda_delta, eta, 4).unwrap();
            let data = m.difference(&reference.lambda0).unwrap();
            let r = pipeline::reconstruct_monreg(&reference, &data, &cfg).unwrap();
            let upper = r.constraints.upper_bounds();
            for k in 0..r.nu.len() {
                match sign_case {
                    SignCase::Increase => assert!(r.nu[k] >= 0.0 && r.nu[k] <= upper[k]),
                    SignCase::Decrease => assert!(r.nu[k] <= 0.0 && -r.nu[k] <= upper[k]),
                }
                assert_eq!(r.kappa[k], r.constraints.tau * r.nu[k]);
                assert_eq!(r.mu_map[k], cfg.material.mu0 + r.nu[k]);
            }
            assert!(r.kkt_residual <= cfg.solver.qp_tol);
            // the inclusion carries some contrast
            let inside_sum: f64 = r.nu.iter().zip(&problem.truth).filter(|(_, t)| **t).map(|(n, _)| n.abs()).sum();
            assert!(inside_sum > 0.0);
        }
    }
}

#[test]
fn softer_inclusion_gives_negative_semidefinite_difference() {
    let (_, _, reference, meas) = small_run(SignCase::Decrease);
    let v = meas.difference(&reference.lambda0).unwrap().v;
    assert!(linalg::max_eigenvalue(&linalg::symmetrize(&v)) <= 1e-10 * linalg::spectral_norm_sym(&v));
}

#[test]
fn iteration_cap_reports_last_iterate() {
    let (mut cfg, _, reference, meas) = small_run(SignCase::Increase);
    cfg.solver.max_iter = 1;
    let data = meas.difference(&reference.lambda0).unwrap();
    match pipeline::reconstruct_monreg(&reference, &data, &cfg) {
        Err(e) => match e.root() {
            Error::NoConvergence { last_iterate, iterations, .. } => {
                assert_eq!(*iterations, 1);
                assert_eq!(last_iterate.len(), 27);
                assert!(!e.is_invalid_input());
                assert!(e.to_string().starts_with("box-constrained solve"));
            }
            other => panic!("unexpected {other}"),
        },
        Ok(_) => panic!("one iteration should not converge"),
    }
}

#[test]
fn zero_difference_gives_zero_reconstructions() {
    let (cfg, _, reference, _) = small_run(SignCase::Increase);
    let m = Measurement {
        lambda_delta: reference.lambda0.clone(),
        delta: 1e-12,
    };
    let data = m.difference(&reference.lambda0).unwrap();
    let r = pipeline::reconstruct_monreg(&reference, &data, &cfg).unwrap();
    assert!(r.nu.iter().all(|&n| n == 0.0));
    let o = pipeline::reconstruct_onestep(&reference, &data, &cfg).unwrap();
    assert!(o.nu.iter().chain(o.kappa.iter()).all(|&n| n == 0.0));
}
