//! The Unified SAM iteration, Unified VaSSO, and trajectory recording.
//!
//! One step is
//!
//! ```text
//! x⁺ = x − γ · g(x + ρ(1 − λ + λ/‖g‖) g)
//! ```
//!
//! where the inner and outer stochastic gradients use the same sampling
//! vector. `λ = 0` is USAM, `λ = 1` is SAM and `ρ = 0` is plain SGD.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::objective::{eval_loss, grad_full_into, grad_stoch_into, FiniteSum};
use crate::sampling::SamplingScheme;
use crate::schedules::StepPlan;

/// Below this norm the normalized part of the perturbation is taken as 0.
pub const ZERO_GRAD_TOL: f64 = 1e-12;

/// A run is declared diverged once `|f| > DIVERGENCE_LIMIT` or `f` is not finite.
pub const DIVERGENCE_LIMIT: f64 = 1e100;

/// Scalar multiplying the perturbation direction, and whether the
/// zero-gradient rule fired.
pub fn perturbation_coefficient(rho: f64, lambda: f64, dir_norm: f64) -> (f64, bool) {
    if dir_norm <= ZERO_GRAD_TOL {
        (rho * (1.0 - lambda), true)
    } else {
        (rho * (1.0 - lambda + lambda / dir_norm), false)
    }
}

/// Writes `x − γ·∇(x + c·dir)` into `x_next`, using `point` as scratch.
#[allow(clippy::too_many_arguments)]
fn perturbed_step<F>(
    t: u64,
    x: &[f64],
    dir: &[f64],
    rho: f64,
    gamma: f64,
    lambda: f64,
    point: &mut [f64],
    grad: &mut [f64],
    x_next: &mut [f64],
    grad_at: &mut F,
) -> Result<bool>
where
    F: FnMut(&[f64], &mut [f64]) -> Result<()>,
{
    let (coeff, zero) = perturbation_coefficient(rho, lambda, linalg::norm(dir));
    point.copy_from_slice(x);
    linalg::axpy(coeff, dir, point);
    if !linalg::all_finite(point) {
        return Err(Error::Diverged { iteration: t });
    }
    grad_at(point, grad)?;
    x_next.copy_from_slice(x);
    linalg::axpy(-gamma, grad, x_next);
    if !linalg::all_finite(x_next) {
        return Err(Error::Diverged { iteration: t });
    }
    Ok(zero)
}

/// Result of a single step.
#[derive(Clone, Debug, PartialEq)]
pub struct Step {
    pub x_next: Vec<f64>,
    /// Perturbation direction after the update (`g` for Unified SAM, `d_t` for VaSSO).
    pub direction: Vec<f64>,
    pub zero_grad: bool,
}

/// One Unified SAM step at iteration `t`.
///
/// `grad_at(y, out)` must write the stochastic gradient at `y` for the same
/// sampling draw that produced `g`.
#[allow(clippy::too_many_arguments)]
pub fn unified_sam_step<F>(t: u64, x: &[f64], g: &[f64], rho: f64, gamma: f64, lambda: f64, mut grad_at: F) -> Result<Step>
where
    F: FnMut(&[f64], &mut [f64]) -> Result<()>,
{
    let d = x.len();
    let (mut point, mut grad, mut x_next) = (vec![0.0; d], vec![0.0; d], vec![0.0; d]);
    let zero = perturbed_step(t, x, g, rho, gamma, lambda, &mut point, &mut grad, &mut x_next, &mut grad_at)?;
    Ok(Step { x_next, direction: g.to_vec(), zero_grad: zero })
}

/// `d_t = (1−θ)d_{t−1} + θg`.
pub fn vasso_direction(d_prev: &[f64], g: &[f64], theta: f64, out: &mut [f64]) {
    for ((o, &dp), &gi) in out.iter_mut().zip(d_prev).zip(g) {
        *o = (1.0 - theta) * dp + theta * gi;
    }
}

/// One Unified VaSSO step: the perturbation follows the moving average
/// `d_t` instead of `g`.
#[allow(clippy::too_many_arguments)]
pub fn unified_vasso_step<F>(
    t: u64,
    x: &[f64],
    d_prev: &[f64],
    g: &[f64],
    theta: f64,
    rho: f64,
    gamma: f64,
    lambda: f64,
    mut grad_at: F,
) -> Result<Step>
where
    F: FnMut(&[f64], &mut [f64]) -> Result<()>,
{
    check_theta(theta)?;
    let dim = x.len();
    let mut direction = vec![0.0; dim];
    vasso_direction(d_prev, g, theta, &mut direction);
    let (mut point, mut grad, mut x_next) = (vec![0.0; dim], vec![0.0; dim], vec![0.0; dim]);
    let zero = perturbed_step(t, x, &direction, rho, gamma, lambda, &mut point, &mut grad, &mut x_next, &mut grad_at)?;
    Ok(Step { x_next, direction, zero_grad: zero })
}

fn check_theta(theta: f64) -> Result<()> {
    if !(theta > 0.0 && theta <= 1.0) {
        return Err(Error::invalid("vasso_theta", format!("must lie in (0, 1], got {theta}")));
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct OptimizerConfig {
    pub plan: StepPlan,
    pub scheme: SamplingScheme,
    pub max_iters: u64,
    pub x0: Vec<f64>,
    /// Enables Unified VaSSO with this averaging weight.
    pub vasso_theta: Option<f64>,
    /// Log every this many iterations (the first and last iterate are always logged).
    pub record_every: u64,
}

impl OptimizerConfig {
    pub fn new(plan: StepPlan, scheme: SamplingScheme, max_iters: u64, x0: Vec<f64>) -> Self {
        OptimizerConfig {
            plan,
            scheme,
            max_iters,
            x0,
            vasso_theta: None,
            record_every: 1,
        }
    }

    pub fn validate(&self, dim: usize, n: usize) -> Result<()> {
        if self.max_iters == 0 {
            return Err(Error::invalid("max_iters", "must be at least 1"));
        }
        if self.record_every == 0 {
            return Err(Error::invalid("record_every", "must be at least 1"));
        }
        if let Some(theta) = self.vasso_theta {
            check_theta(theta)?;
        }
        if self.x0.len() != dim {
            return Err(Error::DimensionMismatch { expected: dim, got: self.x0.len() });
        }
        if self.scheme.n() != n {
            return Err(Error::DimensionMismatch { expected: n, got: self.scheme.n() });
        }
        if !linalg::all_finite(&self.x0) {
            return Err(Error::invalid("x0", "must be finite"));
        }
        Ok(())
    }
}

/// One logged iterate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub iteration: u64,
    pub loss: f64,
    /// `f(x^t) − f_ref`, absent when no reference value is known.
    pub subopt: Option<f64>,
    pub grad_norm: f64,
    /// Steps used for the update leaving `x^t`.
    pub rho: f64,
    pub gamma: f64,
    pub lambda: f64,
    /// Zero-gradient events so far.
    pub zero_grad_events: u64,
}

/// Trajectory of one seeded run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub entries: Vec<LogEntry>,
    /// Reference value `f*` (or `f^inf`) used for suboptimality.
    pub f_ref: Option<f64>,
    /// `f(x⁰) − f_ref`.
    pub delta0: Option<f64>,
    /// Iteration at which the run diverged.
    pub diverged: Option<u64>,
    pub zero_grad_events: u64,
    pub iterations: u64,
    pub final_x: Vec<f64>,
}

impl RunRecord {
    pub fn last(&self) -> Option<&LogEntry> {
        self.entries.last()
    }

    pub fn final_subopt(&self) -> Option<f64> {
        self.last().and_then(|e| e.subopt)
    }
}

fn log_point<P: FiniteSum + ?Sized>(
    problem: &P,
    x: &[f64],
    t: u64,
    plan: &StepPlan,
    f_ref: Option<f64>,
    zero_grad_events: u64,
    scratch: &mut [f64],
) -> Result<LogEntry> {
    let loss = eval_loss(problem, x)?;
    if !(loss.abs() <= DIVERGENCE_LIMIT) {
        return Err(Error::Diverged { iteration: t });
    }
    grad_full_into(problem, x, scratch)?;
    let (rho, gamma) = plan.steps_at(t);
    Ok(LogEntry {
        iteration: t,
        loss,
        subopt: f_ref.map(|f| loss - f),
        grad_norm: linalg::norm(scratch),
        rho,
        gamma,
        lambda: plan.lambda_at(t),
        zero_grad_events,
    })
}

/// Runs `config.max_iters` iterations, drawing one sampling vector per iteration.
///
/// Divergence is not an error: the record is returned with `diverged` set
/// and the entries logged up to that point.
pub fn run<P: FiniteSum + ?Sized, R: Rng + ?Sized>(problem: &P, config: &OptimizerConfig, rng: &mut R) -> Result<RunRecord> {
    let dim = problem.dim();
    config.validate(dim, problem.n())?;
    let f_ref = problem.stats().f_ref();
    let plan = &config.plan;

    let mut x = config.x0.clone();
    let mut x_next = vec![0.0; dim];
    let mut g = vec![0.0; dim];
    let mut dir = vec![0.0; dim];
    let mut point = vec![0.0; dim];
    let mut grad = vec![0.0; dim];

    let mut record = RunRecord {
        entries: Vec::new(),
        f_ref,
        delta0: None,
        diverged: None,
        zero_grad_events: 0,
        iterations: 0,
        final_x: Vec::new(),
    };

    let first = log_point(problem, &x, 0, plan, f_ref, 0, &mut grad)?;
    record.delta0 = first.subopt;
    record.entries.push(first);

    for t in 0..config.max_iters {
        let v = config.scheme.draw(rng);
        let (rho, gamma) = plan.steps_at(t);
        let lambda = plan.lambda_at(t);
        let mut grad_at = |y: &[f64], out: &mut [f64]| grad_stoch_into(problem, y, &v, out);

        let outcome = grad_at(&x, &mut g).and_then(|()| match config.vasso_theta {
            None => perturbed_step(t, &x, &g, rho, gamma, lambda, &mut point, &mut grad, &mut x_next, &mut grad_at),
            Some(theta) => {
                for (d, &gi) in dir.iter_mut().zip(&g) {
                    *d = (1.0 - theta) * *d + theta * gi;
                }
                perturbed_step(t, &x, &dir, rho, gamma, lambda, &mut point, &mut grad, &mut x_next, &mut grad_at)
            }
        });
        match outcome {
            Ok(zero) => record.zero_grad_events += u64::from(zero),
            Err(Error::Diverged { .. } | Error::NumericOverflow { .. }) => {
                record.diverged = Some(t);
                break;
            }
            Err(e) => return Err(e),
        }
        std::mem::swap(&mut x, &mut x_next);
        record.iterations = t + 1;

        let t1 = t + 1;
        if t1 % config.record_every == 0 || t1 == config.max_iters {
            match log_point(problem, &x, t1, plan, f_ref, record.zero_grad_events, &mut grad) {
                Ok(entry) => record.entries.push(entry),
                Err(Error::Diverged { .. } | Error::NumericOverflow { .. }) => {
                    record.diverged = Some(t1);
                    break;
                }
                Err(e) => return Err(e),
            }
        }
    }
    record.final_x = x;
    Ok(record)
}
