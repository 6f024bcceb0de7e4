//! Numerically checkable inequalities.
//!
//! Two bounds on the perturbed stochastic gradient `g̃ = g(x + ρ(1−λ+λ/‖g‖)g)`
//! are checked by exact enumeration over single-element sampling:
//!
//! - second moment: `E‖g̃‖² ≤ 4L²ρ²λ² + 2[2L²ρ²(1−λ)² + 1] E‖g‖²`
//! - inner product: `E⟨g̃, ∇f⟩ ≥ (1 − Lρ/2)‖∇f‖² − Lρλ² − Lρ(1−λ)² E‖g‖²`
//!
//! `L` is the smoothness constant of the sampled functions `f_v`.
//!
//! The envelope check compares trial-averaged suboptimality with the
//! linear-rate bound `(1−γμ)^t δ₀ + N`.

use rand::Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg;
use crate::objective::{grad_full, grad_stoch_into, FiniteSum, ProblemStats};
use crate::optimizer::{perturbation_coefficient, RunRecord};
use crate::sampling::{random_point, SamplingScheme, ROUNDING_TOL};
use crate::schedules::PlRates;

/// Largest smoothness constant among the sampled functions `f_v = (1/n)Σ vᵢfᵢ`.
///
/// Equals `L_max` for uniform single-element sampling and for the full batch
/// it is bounded by the mean smoothness.
pub fn sampled_smoothness(scheme: &SamplingScheme, stats: &ProblemStats) -> f64 {
    let n = stats.l_i.len() as f64;
    match scheme {
        SamplingScheme::SingleElement { probs, .. } => stats
            .l_i
            .iter()
            .zip(probs)
            .map(|(l, p)| l / (n * p))
            .fold(f64::NEG_INFINITY, f64::max),
        SamplingScheme::FullBatch { .. } => stats.l_i.iter().sum::<f64>() / n,
        SamplingScheme::TauNice { tau, .. } => {
            let mut l = stats.l_i.clone();
            l.sort_by(|a, b| b.total_cmp(a));
            l.iter().take(*tau).sum::<f64>() / *tau as f64
        }
    }
}

/// Exact expectations at one point.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PerturbedMoments {
    /// `E‖g̃‖²`.
    pub perturbed_second_moment: f64,
    /// `E⟨g̃, ∇f⟩`.
    pub perturbed_inner: f64,
    /// `E‖g‖²`.
    pub second_moment: f64,
    /// `‖∇f‖²`.
    pub full_grad_sq: f64,
}

/// Computes the expectations by enumerating every outcome of `scheme`.
pub fn perturbed_moments<P: FiniteSum + ?Sized>(
    problem: &P,
    scheme: &SamplingScheme,
    x: &[f64],
    rho: f64,
    lambda: f64,
) -> Result<PerturbedMoments> {
    let outcomes = scheme
        .enumerate()
        .ok_or_else(|| Error::invalid("scheme", "exact moments need an enumerable sampling scheme"))?;
    let full = grad_full(problem, x)?;
    let d = problem.dim();
    let (mut g, mut gt, mut point) = (vec![0.0; d], vec![0.0; d], vec![0.0; d]);
    let mut m = PerturbedMoments {
        perturbed_second_moment: 0.0,
        perturbed_inner: 0.0,
        second_moment: 0.0,
        full_grad_sq: linalg::norm_sq(&full),
    };
    for (p, v) in &outcomes {
        grad_stoch_into(problem, x, v, &mut g)?;
        let (coeff, _) = perturbation_coefficient(rho, lambda, linalg::norm(&g));
        point.copy_from_slice(x);
        linalg::axpy(coeff, &g, &mut point);
        grad_stoch_into(problem, &point, v, &mut gt)?;
        m.second_moment += p * linalg::norm_sq(&g);
        m.perturbed_second_moment += p * linalg::norm_sq(&gt);
        m.perturbed_inner += p * linalg::dot(&gt, &full);
    }
    Ok(m)
}

/// `4L²ρ²λ² + 2[2L²ρ²(1−λ)² + 1] E‖g‖²`.
pub fn second_moment_bound(l: f64, rho: f64, lambda: f64, second_moment: f64) -> f64 {
    let lr2 = l * l * rho * rho;
    4.0 * lr2 * lambda * lambda + 2.0 * (2.0 * lr2 * (1.0 - lambda) * (1.0 - lambda) + 1.0) * second_moment
}

/// `(1 − Lρ/2)‖∇f‖² − Lρλ² − Lρ(1−λ)² E‖g‖²`.
pub fn inner_product_bound(l: f64, rho: f64, lambda: f64, full_grad_sq: f64, second_moment: f64) -> f64 {
    let lr = l * rho;
    (1.0 - lr / 2.0) * full_grad_sq - lr * lambda * lambda - lr * (1.0 - lambda) * (1.0 - lambda) * second_moment
}

/// Outcome of one inequality suite.
#[derive(Clone, Debug, Serialize)]
pub struct InequalityReport {
    pub name: &'static str,
    pub passed: bool,
    pub trials: usize,
    pub violations: usize,
    /// Smallest slack (positive means the inequality held with room).
    pub worst_slack: f64,
    pub worst_rho: f64,
    pub worst_lambda: f64,
}

impl InequalityReport {
    fn new(name: &'static str) -> Self {
        InequalityReport {
            name,
            passed: true,
            trials: 0,
            violations: 0,
            worst_slack: f64::INFINITY,
            worst_rho: f64::NAN,
            worst_lambda: f64::NAN,
        }
    }

    fn record(&mut self, slack: f64, scale: f64, rho: f64, lambda: f64) {
        self.trials += 1;
        if slack < -ROUNDING_TOL * scale.max(1.0) {
            self.violations += 1;
            self.passed = false;
        }
        if slack < self.worst_slack {
            self.worst_slack = slack;
            self.worst_rho = rho;
            self.worst_lambda = lambda;
        }
    }
}

/// Runs both perturbed-gradient suites at `triples` random `(x, ρ, λ)`.
///
/// `x` is drawn around `x*` (or the origin), `ρ` log-uniformly in
/// `[10⁻³/L, 10/L]` and `λ` uniformly in `[0, 1]`.
pub fn check_perturbed_gradient_bounds<P: FiniteSum + ?Sized, R: Rng + ?Sized>(
    problem: &P,
    scheme: &SamplingScheme,
    triples: usize,
    rng: &mut R,
) -> Result<[InequalityReport; 2]> {
    let stats = problem.stats();
    let l = sampled_smoothness(scheme, stats);
    let center = stats.x_star.clone().unwrap_or_else(|| vec![0.0; problem.dim()]);
    let mut moment = InequalityReport::new("perturbed-second-moment");
    let mut inner = InequalityReport::new("perturbed-inner-product");
    for _ in 0..triples {
        let x = random_point(&center, rng);
        let rho = 10f64.powf(rng.random_range(-3.0..=1.0)) / l;
        let lambda: f64 = rng.random_range(0.0..=1.0);
        let m = perturbed_moments(problem, scheme, &x, rho, lambda)?;

        let rhs = second_moment_bound(l, rho, lambda, m.second_moment);
        moment.record(rhs - m.perturbed_second_moment, rhs.abs(), rho, lambda);

        let lhs = inner_product_bound(l, rho, lambda, m.full_grad_sq, m.second_moment);
        let scale = m.perturbed_inner.abs().max(m.full_grad_sq).max(l * rho * m.second_moment);
        inner.record(m.perturbed_inner - lhs, scale, rho, lambda);
    }
    Ok([moment, inner])
}

/// Outcome of the linear-rate envelope check.
#[derive(Clone, Debug, Serialize)]
pub struct EnvelopeReport {
    pub passed: bool,
    pub trials: usize,
    pub points: usize,
    pub violations: usize,
    /// Smallest `envelope + k·SE − mean` over logged iterations.
    pub worst_margin: f64,
    pub worst_iteration: u64,
    pub delta0: f64,
    pub neighborhood: f64,
}

/// Checks `mean_t ≤ (1−γμ)^t δ₀ + N + k·SE_t` at every iteration logged by all trials.
pub fn check_envelope(records: &[RunRecord], rates: &PlRates, k_se: f64) -> Result<EnvelopeReport> {
    let first = records.first().ok_or_else(|| Error::invalid("records", "need at least one trial"))?;
    let delta0 = first.delta0.ok_or(Error::MetadataMissing("f_star"))?;
    let common = first.entries.len().min(records.iter().map(|r| r.entries.len()).min().unwrap_or(0));
    let k = records.len() as f64;
    let mut report = EnvelopeReport {
        passed: true,
        trials: records.len(),
        points: common,
        violations: 0,
        worst_margin: f64::INFINITY,
        worst_iteration: 0,
        delta0,
        neighborhood: rates.neighborhood,
    };
    for j in 0..common {
        let t = first.entries[j].iteration;
        let vals: Vec<f64> = records
            .iter()
            .map(|r| {
                let e = &r.entries[j];
                debug_assert_eq!(e.iteration, t);
                e.subopt.ok_or(Error::MetadataMissing("f_star"))
            })
            .collect::<Result<_>>()?;
        let mean = vals.iter().sum::<f64>() / k;
        let se = if vals.len() > 1 {
            (vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (k - 1.0) / k).sqrt()
        } else {
            0.0
        };
        let env = rates.envelope(t, delta0);
        let margin = env + k_se * se - mean;
        if margin < -ROUNDING_TOL * env.abs().max(mean.abs()) {
            report.violations += 1;
            report.passed = false;
        }
        if margin < report.worst_margin {
            report.worst_margin = margin;
            report.worst_iteration = t;
        }
    }
    Ok(report)
}
