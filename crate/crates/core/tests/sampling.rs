use approx::assert_relative_eq;
use proptest::prelude::*;
use rand::Rng;
use rand_distr::StandardNormal;
use unified_sam::objective::{grad_full, grad_stoch_into};
use unified_sam::problems::{gen_logistic, gen_ridge};
use unified_sam::sampling::{er_constants, er_preset, importance_probs, second_moment, verify_er};
use unified_sam::{rng, ErConstants, FiniteSum, ProblemStats, RidgeSpec, SamplingScheme, SamplingVector};

fn schemes(stats: &ProblemStats) -> Vec<SamplingScheme> {
    let n = stats.l_i.len();
    vec![
        SamplingScheme::uniform(n).unwrap(),
        SamplingScheme::importance(stats).unwrap(),
        SamplingScheme::tau_nice(n, 3).unwrap(),
        SamplingScheme::full_batch(n).unwrap(),
    ]
}

#[test]
fn stochastic_gradients_are_unbiased() {
    let p = gen_ridge(&RidgeSpec::new(12, 4, 5.0, 0.1, 3)).unwrap();
    let mut r = rng::stream(40);
    let draws = 100_000;
    for scheme in schemes(p.stats()) {
        for _ in 0..10 {
            let x: Vec<f64> = (0..4).map(|_| r.sample::<f64, _>(StandardNormal)).collect();
            let full = grad_full(&p, &x).unwrap();
            let (mut sum, mut sum_sq) = (vec![0.0; 4], vec![0.0; 4]);
            let mut g = vec![0.0; 4];
            for _ in 0..draws {
                let v = scheme.draw(&mut r);
                grad_stoch_into(&p, &x, &v, &mut g).unwrap();
                for j in 0..4 {
                    sum[j] += g[j];
                    sum_sq[j] += g[j] * g[j];
                }
            }
            let k = draws as f64;
            for j in 0..4 {
                let mean = sum[j] / k;
                let se = ((sum_sq[j] / k - mean * mean).max(0.0) / k).sqrt();
                assert!((mean - full[j]).abs() <= 4.0 * se + 1e-12, "{}: coord {j}", scheme.label());
            }
        }
    }
}

#[test]
fn uniform_frequencies_are_flat() {
    let s = SamplingScheme::uniform(4).unwrap();
    let mut r = rng::stream(41);
    let mut counts = [0usize; 4];
    let draws = 100_000;
    for _ in 0..draws {
        let SamplingVector::Sparse { indices, weights } = s.draw(&mut r) else { panic!("expected a sparse draw") };
        assert_eq!(weights, vec![4.0]);
        counts[indices[0]] += 1;
    }
    let se = (0.25 * 0.75 / draws as f64).sqrt();
    for c in counts {
        assert!((c as f64 / draws as f64 - 0.25).abs() <= 4.0 * se);
    }
}

#[test]
fn tau_nice_inclusion_frequency() {
    let s = SamplingScheme::tau_nice(6, 2).unwrap();
    let mut r = rng::stream(42);
    let mut counts = [0usize; 6];
    let draws = 60_000;
    for _ in 0..draws {
        let SamplingVector::Sparse { indices, .. } = s.draw(&mut r) else { panic!("expected a sparse draw") };
        indices.iter().for_each(|&i| counts[i] += 1);
    }
    let p = 2.0 / 6.0;
    let se = (p * (1.0 - p) / draws as f64).sqrt();
    for c in counts {
        assert!((c as f64 / draws as f64 - p).abs() <= 4.0 * se);
    }
}

#[test]
fn enumerated_vectors_have_unit_mean() {
    let stats = ProblemStats::from_smoothness(vec![1.0, 2.0, 7.0, 0.5]);
    for s in [
        SamplingScheme::uniform(4).unwrap(),
        SamplingScheme::importance(&stats).unwrap(),
        SamplingScheme::full_batch(4).unwrap(),
    ] {
        let mut mean = [0.0; 4];
        let mut total = 0.0;
        for (p, v) in s.enumerate().unwrap() {
            total += p;
            for (m, vi) in mean.iter_mut().zip(v.to_dense(4)) {
                *m += p * vi;
            }
        }
        assert_relative_eq!(total, 1.0, epsilon = 1e-15);
        for m in mean {
            assert_relative_eq!(m, 1.0, epsilon = 1e-14);
        }
    }
}

#[test]
fn importance_minimizes_expected_smoothness() {
    let stats = ProblemStats::from_smoothness(vec![1.0, 4.0, 9.0]);
    let imp = er_constants(&SamplingScheme::importance(&stats).unwrap(), &stats, false);
    // σ* is unknown here, so only A is comparable; compute it directly.
    let a_of = |p: &[f64]| stats.l_i.iter().zip(p).map(|(l, q)| l / q).fold(0.0, f64::max) / 3.0;
    let best = a_of(&importance_probs(&stats, None).unwrap());
    assert_relative_eq!(best, 14.0 / 3.0, max_relative = 1e-12);
    assert!(imp.is_err(), "C must not be fabricated without sigma*");
    let steps = 200;
    for i in 1..steps {
        for j in 1..steps - i {
            let p = [i as f64 / steps as f64, j as f64 / steps as f64, (steps - i - j) as f64 / steps as f64];
            assert!(a_of(&p) >= best - 1e-12);
        }
    }
}

#[test]
fn er_constants_hold_exactly_for_enumerable_schemes() {
    for p in [
        gen_ridge(&RidgeSpec::new(10, 4, 6.0, 0.05, 5)).unwrap(),
        gen_logistic(&RidgeSpec::new(10, 4, 6.0, 0.05, 5)).unwrap(),
    ] {
        let stats = p.stats();
        for scheme in [
            SamplingScheme::uniform(10).unwrap(),
            SamplingScheme::importance(stats).unwrap(),
            SamplingScheme::full_batch(10).unwrap(),
        ] {
            let c = er_constants(&scheme, stats, false).unwrap();
            let mut r = rng::stream(43);
            let report = verify_er(&p, &scheme, &c, 200, 0, &mut r).unwrap();
            assert!(report.exact);
            assert!(report.passed, "{}: worst slack {}", scheme.label(), report.worst_slack);
        }
    }
}

#[test]
fn tau_nice_er_constants_hold_by_monte_carlo() {
    let p = gen_ridge(&RidgeSpec::new(10, 4, 6.0, 0.05, 6)).unwrap();
    let scheme = SamplingScheme::tau_nice(10, 3).unwrap();
    for hint in [false, true] {
        let c = er_constants(&scheme, p.stats(), hint).unwrap();
        let mut r = rng::stream(44);
        let report = verify_er(&p, &scheme, &c, 30, 20_000, &mut r).unwrap();
        assert!(!report.exact);
        assert!(report.passed, "hint {hint}: {report:?}");
    }
}

#[test]
fn halved_constants_are_violated() {
    let p = gen_ridge(&RidgeSpec::new(10, 4, 6.0, 0.05, 7)).unwrap();
    let scheme = SamplingScheme::uniform(10).unwrap();
    let c = er_constants(&scheme, p.stats(), false).unwrap().scaled(0.5);
    let mut r = rng::stream(45);
    let report = verify_er(&p, &scheme, &c, 100, 0, &mut r).unwrap();
    assert!(!report.passed);
    assert!(report.violations > 0);
}

#[test]
fn exact_second_moment_matches_monte_carlo() {
    let p = gen_logistic(&RidgeSpec::new(8, 3, 3.0, 0.1, 8)).unwrap();
    let exact = SamplingScheme::importance(p.stats()).unwrap();
    let x = [0.4, -0.3, 1.1];
    let mut r = rng::stream(46);
    let (m, se) = second_moment(&p, &exact, &x, 0, &mut r).unwrap();
    assert_eq!(se, 0.0);
    // Estimate by drawing, bypassing the enumeration path.
    let draws = 100_000;
    let mut g = vec![0.0; 3];
    let (mut s, mut s2) = (0.0, 0.0);
    for _ in 0..draws {
        let v = exact.draw(&mut r);
        grad_stoch_into(&p, &x, &v, &mut g).unwrap();
        let q: f64 = g.iter().map(|a| a * a).sum();
        s += q;
        s2 += q * q;
    }
    let k = draws as f64;
    let mean = s / k;
    let mc_se = ((s2 / k - mean * mean) / k).sqrt();
    assert!((mean - m).abs() <= 4.0 * mc_se);
}

#[test]
fn classical_presets_map_to_constants() {
    type Case<'a> = (&'a str, &'a [f64], (f64, f64, f64));
    let cases: [Case; 5] = [
        ("bounded_gradient", &[2.5], (0.0, 0.0, 2.5)),
        ("bounded_variance", &[2.5], (0.0, 1.0, 2.5)),
        ("expected_smoothness", &[3.0], (6.0, 0.0, 0.0)),
        ("relaxed_growth_rho", &[1.5, 0.2], (0.0, 1.5, 0.2)),
        ("relaxed_growth_alpha", &[0.7, 0.2], (0.7, 0.0, 0.2)),
    ];
    for (name, params, want) in cases {
        let c = er_preset(name, params).unwrap();
        assert_eq!((c.a, c.b, c.c), want, "{name}");
        assert_eq!(c.provenance.to_string(), format!("preset:{name}"));
    }
    assert!(er_preset("bounded_gradient", &[]).is_err());
    assert!(er_preset("bounded_variance", &[-1.0]).is_err());
    assert!(er_preset("no-such-preset", &[]).is_err());
}

#[test]
fn constants_reject_negative_values() {
    assert!(ErConstants::manual(-1.0, 0.0, 0.0).is_err());
    assert!(ErConstants::manual(1.0, f64::NAN, 0.0).is_err());
    assert!(ErConstants::manual(1.0, 0.0, f64::INFINITY).is_err());
    assert!(ErConstants::manual(1.0, 0.0, 0.0).is_ok());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn tau_nice_constants_are_monotone_in_tau(
        l in prop::collection::vec(0.1f64..10.0, 3..12),
        sigma in 0.0f64..5.0,
    ) {
        let n = l.len();
        let mut stats = ProblemStats::from_smoothness(l);
        stats.sigma_star = Some(sigma);
        let mut prev: Option<ErConstants> = None;
        for tau in 1..=n {
            let c = er_constants(&SamplingScheme::tau_nice(n, tau).unwrap(), &stats, false).unwrap();
            if let Some(p) = &prev {
                prop_assert!(c.a <= p.a * (1.0 + 1e-12));
                prop_assert!(c.b >= p.b - 1e-12);
                prop_assert!(c.c <= p.c * (1.0 + 1e-12) + 1e-300);
            }
            prev = Some(c);
        }
        let last = prev.unwrap();
        prop_assert_eq!((last.a, last.b, last.c), (0.0, 1.0, 0.0));
    }

    #[test]
    fn tau_one_matches_uniform(
        l in prop::collection::vec(0.1f64..10.0, 2..12),
        sigma in 0.0f64..5.0,
    ) {
        let n = l.len();
        let mut stats = ProblemStats::from_smoothness(l);
        stats.sigma_star = Some(sigma);
        let t = er_constants(&SamplingScheme::tau_nice(n, 1).unwrap(), &stats, false).unwrap();
        let u = er_constants(&SamplingScheme::uniform(n).unwrap(), &stats, false).unwrap();
        prop_assert!((t.a - u.a).abs() <= 1e-12 * u.a);
        prop_assert!((t.b - u.b).abs() <= 1e-12);
        prop_assert!((t.c - u.c).abs() <= 1e-12 * u.c.max(1e-300));
    }

    #[test]
    fn importance_never_worse_than_uniform(l in prop::collection::vec(0.1f64..10.0, 2..20)) {
        let n = l.len();
        let mut stats = ProblemStats::from_smoothness(l);
        stats.sigma_star = Some(1.0);
        let imp = er_constants(&SamplingScheme::importance(&stats).unwrap(), &stats, false).unwrap();
        let uni = er_constants(&SamplingScheme::uniform(n).unwrap(), &stats, false).unwrap();
        prop_assert!(imp.a <= uni.a * (1.0 + 1e-12));
        // A equals the mean smoothness under importance sampling.
        let mean = stats.l_i.iter().sum::<f64>() / n as f64;
        prop_assert!((imp.a - mean).abs() <= 1e-12 * mean);
    }

    #[test]
    fn draws_are_reproducible(seed in any::<u64>(), n in 2usize..30) {
        let s = SamplingScheme::tau_nice(n, n / 2 + 1).unwrap();
        let (mut a, mut b) = (rng::stream(seed), rng::stream(seed));
        for _ in 0..20 {
            prop_assert_eq!(s.draw(&mut a), s.draw(&mut b));
        }
    }
}
