use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use unified_sam::objective::grad_stoch_into;
use unified_sam::optimizer::{run, unified_sam_step, unified_vasso_step, vasso_direction};
use unified_sam::problems::{gen_logistic, gen_ridge, Design, Ridge};
use unified_sam::schedules::{pl_constant_steps, PlOptions};
use unified_sam::{rng, ErConstants, FiniteSum, LambdaSchedule, OptimizerConfig, Problem, RidgeSpec, SamplingScheme, StepPlan};

fn plan(rho: f64, gamma: f64, lambda: f64) -> StepPlan {
    StepPlan::manual(rho, gamma, LambdaSchedule::Const(lambda)).unwrap()
}

/// Full-batch Unified SAM written directly against the matrix form.
#[allow(clippy::too_many_arguments)]
fn reference_full_batch(a: &DMatrix<f64>, b: &DVector<f64>, reg: f64, x0: &[f64], rho: f64, gamma: f64, lambda: f64, iters: usize) -> Vec<f64> {
    let n = a.nrows() as f64;
    let grad = |x: &DVector<f64>| a.transpose() * (a * x - b) / n + reg * x;
    let mut x = DVector::from_column_slice(x0);
    for _ in 0..iters {
        let g = grad(&x);
        let norm = g.norm();
        let coeff = if norm <= 1e-12 { rho * (1.0 - lambda) } else { rho * (1.0 - lambda + lambda / norm) };
        let y = &x + coeff * &g;
        x -= gamma * grad(&y);
    }
    x.as_slice().to_vec()
}

#[test]
fn full_batch_run_matches_matrix_reference() {
    let p = gen_ridge(&RidgeSpec::new(20, 6, 5.0, 0.05, 9)).unwrap();
    let design = p.design();
    let (a, b) = (design.matrix(), DVector::from_column_slice(&design.b));
    let x0 = vec![1.0; 6];
    for lambda in [0.0, 0.3, 1.0] {
        let mut cfg = OptimizerConfig::new(plan(0.05, 0.2, lambda), SamplingScheme::full_batch(20).unwrap(), 200, x0.clone());
        cfg.record_every = 50;
        let rec = run(&p, &cfg, &mut rng::stream(0)).unwrap();
        let want = reference_full_batch(&a, &b, 0.05, &x0, 0.05, 0.2, lambda, 200);
        for (u, v) in rec.final_x.iter().zip(&want) {
            assert!((u - v).abs() <= 1e-12 * v.abs().max(1.0));
        }
        let iters: Vec<u64> = rec.entries.iter().map(|e| e.iteration).collect();
        assert_eq!(iters, vec![0, 50, 100, 150, 200]);
    }
}

#[test]
fn runs_are_byte_identical_for_equal_seeds() {
    let p = gen_logistic(&RidgeSpec::new(30, 5, 4.0, 0.03, 10)).unwrap();
    let cfg = OptimizerConfig::new(plan(0.1, 0.1, 0.5), SamplingScheme::uniform(30).unwrap(), 500, vec![0.0; 5]);
    let a = serde_json::to_string(&run(&p, &cfg, &mut rng::trial_stream(5, 2)).unwrap()).unwrap();
    let b = serde_json::to_string(&run(&p, &cfg, &mut rng::trial_stream(5, 2)).unwrap()).unwrap();
    let c = serde_json::to_string(&run(&p, &cfg, &mut rng::trial_stream(5, 3)).unwrap()).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn zero_gradient_rule_fires_at_interpolating_minimizer() {
    let (n, d) = (6, 2);
    let a = vec![1.0, 0.0, 0.0, 1.0, 1.0, 1.0, 2.0, 0.0, 0.0, 2.0, 1.0, -1.0];
    let x_bar = [0.5, 0.25];
    let b: Vec<f64> = a.chunks(d).map(|r| r[0] * x_bar[0] + r[1] * x_bar[1]).collect();
    let p = Problem::Ridge(Ridge::from_design(Design::new(n, d, a, b, 0.0).unwrap()).unwrap());
    for scheme in [SamplingScheme::uniform(n).unwrap(), SamplingScheme::full_batch(n).unwrap()] {
        let cfg = OptimizerConfig::new(plan(0.1, 0.1, 1.0), scheme, 25, x_bar.to_vec());
        let rec = run(&p, &cfg, &mut rng::stream(3)).unwrap();
        assert_eq!(rec.zero_grad_events, 25);
        assert_eq!(rec.final_x, x_bar.to_vec());
        assert_eq!(rec.last().unwrap().zero_grad_events, 25);
    }
}

#[test]
fn divergence_returns_partial_record() {
    let p = gen_ridge(&RidgeSpec::new(10, 4, 5.0, 0.0, 11)).unwrap();
    let gamma = 100.0 / p.stats().l_max;
    let cfg = OptimizerConfig::new(plan(0.0, gamma, 0.0), SamplingScheme::full_batch(10).unwrap(), 10_000, vec![1.0; 4]);
    let rec = run(&p, &cfg, &mut rng::stream(0)).unwrap();
    let t = rec.diverged.expect("run should diverge");
    assert!(t < 10_000);
    assert!(!rec.entries.is_empty());
    assert!(rec.entries.iter().all(|e| e.loss.is_finite() && e.iteration <= t));
    assert!(rec.iterations <= t);
}

#[test]
fn vasso_direction_averages() {
    let mut out = [0.0; 2];
    vasso_direction(&[1.0, 2.0], &[3.0, -2.0], 0.4, &mut out);
    assert!((out[0] - (0.6 * 1.0 + 0.4 * 3.0)).abs() < 1e-15);
    assert!((out[1] - (0.6 * 2.0 - 0.4 * 2.0)).abs() < 1e-15);
}

#[test]
fn vasso_step_perturbs_along_average() {
    // On f(x) = ½‖x‖² the gradient is the identity, so the step is
    // x − γ(x + c·d) with d the averaged direction.
    let x = [1.0, -2.0];
    let g = [1.0, -2.0];
    let d_prev = [0.0, 4.0];
    let (rho, gamma, lambda, theta) = (0.3, 0.5, 0.6, 0.4);
    let step = unified_vasso_step(0, &x, &d_prev, &g, theta, rho, gamma, lambda, |y, out| {
        out.copy_from_slice(y);
        Ok(())
    })
    .unwrap();
    let d: [f64; 2] = [0.4, 1.6];
    let nd = (d[0] * d[0] + d[1] * d[1]).sqrt();
    let c = rho * (1.0 - lambda + lambda / nd);
    for k in 0..2 {
        assert!((step.direction[k] - d[k]).abs() < 1e-15);
        assert!((step.x_next[k] - (x[k] - gamma * (x[k] + c * d[k]))).abs() < 1e-15);
    }
    assert!(unified_vasso_step(0, &x, &d_prev, &g, 0.0, rho, gamma, lambda, |_, _| Ok(())).is_err());
}

#[test]
fn vasso_with_full_weight_reproduces_sam() {
    let p = gen_logistic(&RidgeSpec::new(25, 5, 4.0, 0.03, 12)).unwrap();
    let base = OptimizerConfig::new(plan(0.2, 0.3, 1.0), SamplingScheme::uniform(25).unwrap(), 300, vec![0.0; 5]);
    let mut vasso = base.clone();
    vasso.vasso_theta = Some(1.0);
    let a = run(&p, &base, &mut rng::stream(8)).unwrap();
    let b = run(&p, &vasso, &mut rng::stream(8)).unwrap();
    assert_eq!(a, b);
}

#[test]
fn step_function_agrees_with_run() {
    let p = gen_ridge(&RidgeSpec::new(15, 4, 3.0, 0.1, 13)).unwrap();
    let scheme = SamplingScheme::uniform(15).unwrap();
    let (rho, gamma, lambda) = (0.1, 0.2, 0.5);
    let cfg = OptimizerConfig::new(plan(rho, gamma, lambda), scheme.clone(), 40, vec![0.5; 4]);
    let rec = run(&p, &cfg, &mut rng::stream(21)).unwrap();

    let mut r = rng::stream(21);
    let mut x = vec![0.5; 4];
    let mut g = vec![0.0; 4];
    for t in 0..40 {
        let v = scheme.draw(&mut r);
        grad_stoch_into(&p, &x, &v, &mut g).unwrap();
        let s = unified_sam_step(t, &x, &g, rho, gamma, lambda, |y, out| grad_stoch_into(&p, y, &v, out)).unwrap();
        x = s.x_next;
    }
    assert_eq!(x, rec.final_x);
}

#[test]
fn deterministic_usam_reaches_optimum_with_theorem_steps() {
    let p = gen_ridge(&RidgeSpec::new(100, 100, 10.0, 0.0, 1)).unwrap();
    let stats = p.stats();
    let l = stats.l_full.unwrap();
    let rates = pl_constant_steps(&ErConstants::full_batch(), l, stats.mu.unwrap(), 0.0, &PlOptions::default()).unwrap();
    let cfg = OptimizerConfig::new(
        StepPlan::pl_constant(&rates, LambdaSchedule::Const(0.0)).unwrap(),
        SamplingScheme::full_batch(100).unwrap(),
        5000,
        vec![0.0; 100],
    );
    let rec = run(&p, &cfg, &mut rng::stream(0)).unwrap();
    assert!(rec.final_subopt().unwrap() < 1e-10);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn suboptimality_is_never_negative(seed in 0u64..1000, lambda in 0.0f64..=1.0, frac in 0.05f64..0.9) {
        let p = gen_logistic(&RidgeSpec::new(20, 4, 3.0, 0.05, seed)).unwrap();
        let stats = p.stats();
        let scheme = SamplingScheme::uniform(20).unwrap();
        let c = unified_sam::sampling::er_constants(&scheme, stats, false).unwrap();
        let opts = PlOptions { rho_fraction: frac, ..Default::default() };
        let rates = pl_constant_steps(&c, stats.l_max, stats.mu.unwrap(), lambda, &opts).unwrap();
        let cfg = OptimizerConfig::new(StepPlan::pl_constant(&rates, LambdaSchedule::Const(lambda)).unwrap(), scheme, 400, vec![0.0; 4]);
        let rec = run(&p, &cfg, &mut rng::stream(seed)).unwrap();
        prop_assert!(rec.diverged.is_none());
        for e in &rec.entries {
            prop_assert!(e.subopt.unwrap() >= -1e-9);
        }
    }

    #[test]
    fn zero_radius_is_sgd(seed in 0u64..1000, lambda in 0.0f64..=1.0) {
        let p = gen_ridge(&RidgeSpec::new(12, 3, 3.0, 0.1, seed)).unwrap();
        let scheme = SamplingScheme::uniform(12).unwrap();
        let a = run(&p, &OptimizerConfig::new(plan(0.0, 0.1, lambda), scheme.clone(), 100, vec![1.0; 3]), &mut rng::stream(seed)).unwrap();
        let b = run(&p, &OptimizerConfig::new(plan(0.0, 0.1, 0.0), scheme, 100, vec![1.0; 3]), &mut rng::stream(seed)).unwrap();
        prop_assert_eq!(a.final_x, b.final_x);
    }
}

#[test]
fn config_validation_rejects_mismatches() {
    let p = gen_ridge(&RidgeSpec::new(8, 3, 2.0, 0.0, 1)).unwrap();
    let mut r = rng::stream(0);
    let ok = OptimizerConfig::new(plan(0.1, 0.1, 0.5), SamplingScheme::uniform(8).unwrap(), 10, vec![0.0; 3]);
    assert!(run(&p, &ok, &mut r).is_ok());
    let mut bad = ok.clone();
    bad.x0 = vec![0.0; 4];
    assert!(run(&p, &bad, &mut r).is_err());
    let mut bad = ok.clone();
    bad.scheme = SamplingScheme::uniform(9).unwrap();
    assert!(run(&p, &bad, &mut r).is_err());
    let mut bad = ok.clone();
    bad.max_iters = 0;
    assert!(run(&p, &bad, &mut r).is_err());
    let mut bad = ok;
    bad.vasso_theta = Some(1.5);
    assert!(run(&p, &bad, &mut r).is_err());
}
