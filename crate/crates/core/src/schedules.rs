//! Step sizes derived from the convergence theory, and λ schedules.
//!
//! Every ratio follows the convention `1/0 = ∞`. Infinite steps are never
//! used directly: the operating steps are clamped by `γ_cap` and `ρ_cap`
//! (both `1/L` unless overridden) and the clamp is recorded.

use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::sampling::ErConstants;

/// `num / den` with `1/0 = ∞`. A zero numerator stays zero.
fn ratio(num: f64, den: f64) -> f64 {
    if num == 0.0 {
        0.0
    } else if den == 0.0 {
        f64::INFINITY
    } else {
        num / den
    }
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::invalid("lambda", format!("must lie in [0, 1], got {lambda}")));
    }
    Ok(())
}

fn check_cap(field: &'static str, v: f64) -> Result<()> {
    if !(v > 0.0) {
        return Err(Error::invalid(field, format!("must be > 0 (infinity allowed), got {v}")));
    }
    Ok(())
}

fn check_positive(field: &'static str, v: f64) -> Result<()> {
    if !(v > 0.0 && v.is_finite()) {
        return Err(Error::invalid(field, format!("must be finite and > 0, got {v}")));
    }
    Ok(())
}

/// Largest admissible constant perturbation radius under PL:
/// `ρ* = μ / (L(μ + 2[Bμ+A](1−λ)²))`.
pub fn pl_rho_star(c: &ErConstants, l: f64, mu: f64, lambda: f64) -> f64 {
    let q = (1.0 - lambda) * (1.0 - lambda);
    ratio(mu, l * (mu + 2.0 * (c.b * mu + c.a) * q))
}

/// Largest admissible constant step at radius `rho`:
/// `γ* = (μ − Lρ(μ + 2[Bμ+A](1−λ)²)) / (2L(Bμ+A)[2L²ρ²(1−λ)² + 1])`.
///
/// Nonpositive once `rho ≥ ρ*`.
pub fn pl_gamma_star(c: &ErConstants, l: f64, mu: f64, lambda: f64, rho: f64) -> f64 {
    let q = (1.0 - lambda) * (1.0 - lambda);
    let k = c.b * mu + c.a;
    let num = mu - l * rho * (mu + 2.0 * k * q);
    let den = 2.0 * l * k * (2.0 * l * l * rho * rho * q + 1.0);
    ratio(num, den)
}

/// Neighborhood `N = (L/μ)(Cγ + ρ(1 + 2γL²ρ)[λ² + C(1−λ)²])`.
pub fn pl_neighborhood(c: &ErConstants, l: f64, mu: f64, lambda: f64, rho: f64, gamma: f64) -> f64 {
    let q = (1.0 - lambda) * (1.0 - lambda);
    let inner = c.c * gamma + rho * (1.0 + 2.0 * gamma * l * l * rho) * (lambda * lambda + c.c * q);
    ratio(l, mu) * inner
}

/// Options for [`pl_constant_steps`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlOptions {
    /// Operating radius as a fraction of `ρ*` (at `ρ = ρ*` the step vanishes).
    pub rho_fraction: f64,
    /// Explicit radius; overrides `rho_fraction`.
    pub rho: Option<f64>,
    pub gamma_cap: Option<f64>,
    pub rho_cap: Option<f64>,
}

impl Default for PlOptions {
    fn default() -> Self {
        PlOptions {
            rho_fraction: 0.5,
            rho: None,
            gamma_cap: None,
            rho_cap: None,
        }
    }
}

/// Constant steps and linear-rate quantities under PL.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlRates {
    /// Theoretical radius bound `ρ*`.
    pub rho_star: f64,
    /// `γ*` at the operating radius, before clamping (may be `∞`).
    pub gamma_star: f64,
    /// Operating radius.
    pub rho: f64,
    /// Operating step `min(γ*, γ_cap)`.
    pub gamma: f64,
    /// Neighborhood `N` at the operating `(ρ, γ)`.
    pub neighborhood: f64,
    /// Contraction factor `1 − γμ`.
    pub rate: f64,
    pub lambda: f64,
    pub mu: f64,
    pub gamma_clamped: bool,
    pub rho_clamped: bool,
}

impl PlRates {
    /// `(1 − γμ)^t δ₀ + N`.
    pub fn envelope(&self, t: u64, delta0: f64) -> f64 {
        self.rate.powf(t as f64) * delta0 + self.neighborhood
    }
}

/// Constant `(ρ, γ)` for Unified SAM on a `μ`-PL objective.
///
/// `l` is the smoothness constant the bound is applied with (normally `L_max`).
pub fn pl_constant_steps(c: &ErConstants, l: f64, mu: f64, lambda: f64, opts: &PlOptions) -> Result<PlRates> {
    if !(mu > 0.0) {
        return Err(Error::PlRequired { mu });
    }
    check_positive("smoothness", l)?;
    check_lambda(lambda)?;
    let rho_star = pl_rho_star(c, l, mu, lambda);
    let rho_req = match opts.rho {
        Some(r) => r,
        None => {
            if !(opts.rho_fraction >= 0.0 && opts.rho_fraction < 1.0) {
                return Err(Error::invalid("rho_fraction", format!("must lie in [0, 1), got {}", opts.rho_fraction)));
            }
            opts.rho_fraction * rho_star
        }
    };
    if !(rho_req >= 0.0 && rho_req.is_finite()) {
        return Err(Error::invalid("rho", format!("must be finite and >= 0, got {rho_req}")));
    }
    let rho_cap = opts.rho_cap.unwrap_or(1.0 / l);
    let gamma_cap = opts.gamma_cap.unwrap_or(1.0 / l);
    check_cap("gamma_cap", gamma_cap)?;
    if !(rho_cap >= 0.0) {
        return Err(Error::invalid("rho_cap", format!("must be >= 0, got {rho_cap}")));
    }
    let rho = rho_req.min(rho_cap);
    let gamma_star = pl_gamma_star(c, l, mu, lambda, rho);
    if !(gamma_star > 0.0) {
        return Err(Error::invalid(
            "rho",
            format!("radius {rho} is not below rho* = {rho_star}; the admissible step is {gamma_star}"),
        ));
    }
    let gamma = gamma_star.min(gamma_cap);
    Ok(PlRates {
        rho_star,
        gamma_star,
        rho,
        gamma,
        neighborhood: pl_neighborhood(c, l, mu, lambda, rho, gamma),
        rate: 1.0 - gamma * mu,
        lambda,
        mu,
        gamma_clamped: gamma_star > gamma_cap,
        rho_clamped: rho_req > rho_cap,
    })
}

/// Decreasing steps `ρ_t = min{1/(2t+1), ρ}`, `γ_t = min{(2t+1)/((t+1)²μ), γ}`
/// with `(ρ, γ)` the operating constant steps.
pub fn pl_decreasing_steps(t: u64, rates: &PlRates, mu: f64) -> (f64, f64) {
    decreasing_at(t, rates.rho, rates.gamma, mu)
}

fn decreasing_at(t: u64, rho_cap: f64, gamma_cap: f64, mu: f64) -> (f64, f64) {
    let s = 2.0 * t as f64 + 1.0;
    let t1 = t as f64 + 1.0;
    ((1.0 / s).min(rho_cap), (s / (t1 * t1 * mu)).min(gamma_cap))
}

/// Constant steps for general smooth objectives.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NonconvexSteps {
    /// `ρ̄` before clamping (may be `∞`).
    pub rho_bar: f64,
    /// `γ̄` before clamping (may be `∞`).
    pub gamma_bar: f64,
    pub rho: f64,
    pub gamma: f64,
    pub rho_clamped: bool,
    pub gamma_clamped: bool,
}

/// `ρ̄ = min{1/(4L), 1/(8BL(1−λ)²), 1/√T, ε²/(12L(C(1−λ)²+λ²))}`.
pub fn nonconvex_rho_bar(eps: f64, lambda: f64, l: f64, c: &ErConstants, t: u64) -> f64 {
    let q = (1.0 - lambda) * (1.0 - lambda);
    let tf = t as f64;
    [
        ratio(1.0, 4.0 * l),
        ratio(1.0, 8.0 * c.b * l * q),
        ratio(1.0, tf.sqrt()),
        ratio(eps * eps, 12.0 * l * (c.c * q + lambda * lambda)),
    ]
    .into_iter()
    .fold(f64::INFINITY, f64::min)
}

/// `γ̄ = min{1/(8BL), 1/(2L(1−λ)√(3AL)), 1/(6LA(1−λ)²√T), 1/√(6ALT),
/// ε²/(24L³(C(1−λ)²+λ²)), ε²/(12LC)}`.
pub fn nonconvex_gamma_bar(eps: f64, lambda: f64, l: f64, c: &ErConstants, t: u64) -> f64 {
    let q = (1.0 - lambda) * (1.0 - lambda);
    let tf = t as f64;
    let e2 = eps * eps;
    [
        ratio(1.0, 8.0 * c.b * l),
        ratio(1.0, 2.0 * l * (1.0 - lambda) * (3.0 * c.a * l).sqrt()),
        ratio(1.0, 6.0 * l * c.a * q * tf.sqrt()),
        ratio(1.0, (6.0 * c.a * l * tf).sqrt()),
        ratio(e2, 24.0 * l * l * l * (c.c * q + lambda * lambda)),
        ratio(e2, 12.0 * l * c.c),
    ]
    .into_iter()
    .fold(f64::INFINITY, f64::min)
}

/// `(ρ̄, γ̄)` for horizon `t_horizon`, clamped by `ρ_cap`, `γ_cap` (default `1/L`).
pub fn nonconvex_steps(
    eps: f64,
    lambda: f64,
    l: f64,
    c: &ErConstants,
    t_horizon: u64,
    caps: (Option<f64>, Option<f64>),
) -> Result<NonconvexSteps> {
    check_positive("eps", eps)?;
    check_positive("smoothness", l)?;
    check_lambda(lambda)?;
    if t_horizon == 0 {
        return Err(Error::invalid("T", "horizon must be at least 1"));
    }
    let rho_cap = caps.0.unwrap_or(1.0 / l);
    let gamma_cap = caps.1.unwrap_or(1.0 / l);
    check_cap("gamma_cap", gamma_cap)?;
    let rho_bar = nonconvex_rho_bar(eps, lambda, l, c, t_horizon);
    let gamma_bar = nonconvex_gamma_bar(eps, lambda, l, c, t_horizon);
    Ok(NonconvexSteps {
        rho_bar,
        gamma_bar,
        rho: rho_bar.min(rho_cap),
        gamma: gamma_bar.min(gamma_cap),
        rho_clamped: rho_bar > rho_cap,
        gamma_clamped: gamma_bar > gamma_cap,
    })
}

/// Real-valued iteration bound `(δ₀L/ε²)·max{96B, 24(1−λ)√(3LA),
/// 5184LA²(1−λ)⁴δ₀/ε², 864δ₀A/ε², 144C/ε², 288L²(1−λ)²/ε²}`.
pub fn nonconvex_iters_bound(eps: f64, delta0: f64, l: f64, c: &ErConstants, lambda: f64) -> f64 {
    let e2 = eps * eps;
    let m = 1.0 - lambda;
    let terms = [
        96.0 * c.b,
        24.0 * m * (3.0 * l * c.a).sqrt(),
        5184.0 * l * c.a * c.a * m.powi(4) * delta0 / e2,
        864.0 * delta0 * c.a / e2,
        144.0 * c.c / e2,
        288.0 * l * l * m * m / e2,
    ];
    delta0 * l / e2 * terms.into_iter().fold(0.0, f64::max)
}

/// Minimum horizon `T` (the ceiling of [`nonconvex_iters_bound`]).
pub fn nonconvex_min_iters(eps: f64, delta0: f64, l: f64, c: &ErConstants, lambda: f64) -> Result<u64> {
    check_positive("eps", eps)?;
    check_positive("smoothness", l)?;
    check_lambda(lambda)?;
    if !(delta0 >= 0.0 && delta0.is_finite()) {
        return Err(Error::invalid("delta0", format!("must be finite and >= 0, got {delta0}")));
    }
    let bound = nonconvex_iters_bound(eps, delta0, l, c, lambda).ceil();
    if bound >= u64::MAX as f64 {
        return Err(Error::invalid("T", "iteration bound overflows u64"));
    }
    Ok(bound as u64)
}

/// λ as a function of the 1-based iteration count.
///
/// Only the constant schedule carries a convergence guarantee; the
/// time-varying ones are heuristics.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LambdaSchedule {
    Const(f64),
    InvT,
    OneMinusInvT,
}

impl LambdaSchedule {
    pub fn constant(lambda: f64) -> Result<Self> {
        check_lambda(lambda)?;
        Ok(LambdaSchedule::Const(lambda))
    }

    /// λ_t for `t ≥ 1`.
    pub fn at(&self, t: u64) -> Result<f64> {
        match *self {
            LambdaSchedule::Const(l) => Ok(l),
            _ if t == 0 => Err(Error::invalid("t", "time-varying lambda schedules start at t = 1")),
            LambdaSchedule::InvT => Ok(1.0 / t as f64),
            LambdaSchedule::OneMinusInvT => Ok(1.0 - 1.0 / t as f64),
        }
    }

    pub fn is_heuristic(&self) -> bool {
        !matches!(self, LambdaSchedule::Const(_))
    }

    /// λ used to evaluate the step-size formulas: the constant itself, or 0
    /// for time-varying schedules.
    pub fn reference(&self) -> f64 {
        match *self {
            LambdaSchedule::Const(l) => l,
            _ => 0.0,
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim() {
            "inv_t" => Ok(LambdaSchedule::InvT),
            "one_minus_inv_t" => Ok(LambdaSchedule::OneMinusInvT),
            other => {
                let v: f64 = other
                    .parse()
                    .map_err(|_| Error::invalid("lambda", format!("expected a number in [0, 1], `inv_t` or `one_minus_inv_t`, got `{other}`")))?;
                Self::constant(v)
            }
        }
    }
}

impl fmt::Display for LambdaSchedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LambdaSchedule::Const(l) => write!(f, "{l}"),
            LambdaSchedule::InvT => f.write_str("inv_t"),
            LambdaSchedule::OneMinusInvT => f.write_str("one_minus_inv_t"),
        }
    }
}

impl Serialize for LambdaSchedule {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            LambdaSchedule::Const(l) => s.serialize_f64(*l),
            other => s.serialize_str(&other.to_string()),
        }
    }
}

impl<'de> Deserialize<'de> for LambdaSchedule {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Value(f64),
            Name(String),
        }
        let parsed = match Raw::deserialize(d)? {
            Raw::Value(v) => LambdaSchedule::constant(v),
            Raw::Name(s) => LambdaSchedule::parse(&s),
        };
        parsed.map_err(serde::de::Error::custom)
    }
}

/// How `(ρ_t, γ_t)` evolve.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum StepRule {
    Constant { rho: f64, gamma: f64 },
    /// `min{1/(2t+1), ρ}`, `min{(2t+1)/((t+1)²μ), γ}`.
    Decreasing { rho: f64, gamma: f64, mu: f64 },
}

/// Complete step-size plan: radius, step and λ per iteration, with provenance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepPlan {
    pub rule: StepRule,
    pub lambda: LambdaSchedule,
    pub provenance: String,
}

impl StepPlan {
    pub fn manual(rho: f64, gamma: f64, lambda: LambdaSchedule) -> Result<Self> {
        Self::build(StepRule::Constant { rho, gamma }, lambda, "manual".into())
    }

    pub fn pl_constant(rates: &PlRates, lambda: LambdaSchedule) -> Result<Self> {
        let tag = tagged("pl-constant", rates.rho_clamped, rates.gamma_clamped);
        Self::build(StepRule::Constant { rho: rates.rho, gamma: rates.gamma }, lambda, tag)
    }

    pub fn pl_decreasing(rates: &PlRates, lambda: LambdaSchedule) -> Result<Self> {
        let tag = tagged("pl-decreasing", rates.rho_clamped, rates.gamma_clamped);
        Self::build(
            StepRule::Decreasing { rho: rates.rho, gamma: rates.gamma, mu: rates.mu },
            lambda,
            tag,
        )
    }

    pub fn nonconvex(steps: &NonconvexSteps, lambda: LambdaSchedule) -> Result<Self> {
        let tag = tagged("nonconvex-constant", steps.rho_clamped, steps.gamma_clamped);
        Self::build(StepRule::Constant { rho: steps.rho, gamma: steps.gamma }, lambda, tag)
    }

    fn build(rule: StepRule, lambda: LambdaSchedule, mut provenance: String) -> Result<Self> {
        let (rho, gamma) = match rule {
            StepRule::Constant { rho, gamma } => (rho, gamma),
            StepRule::Decreasing { rho, gamma, mu } => {
                check_positive("mu", mu)?;
                (rho, gamma)
            }
        };
        if !(rho >= 0.0 && rho.is_finite()) {
            return Err(Error::invalid("rho", format!("must be finite and >= 0, got {rho}")));
        }
        check_positive("gamma", gamma)?;
        if let LambdaSchedule::Const(l) = lambda {
            check_lambda(l)?;
        }
        if lambda.is_heuristic() {
            provenance.push_str("+heuristic-lambda");
        }
        Ok(StepPlan { rule, lambda, provenance })
    }

    /// `(ρ_t, γ_t)` at the 0-based iteration index `t`.
    pub fn steps_at(&self, t: u64) -> (f64, f64) {
        match self.rule {
            StepRule::Constant { rho, gamma } => (rho, gamma),
            StepRule::Decreasing { rho, gamma, mu } => decreasing_at(t, rho, gamma, mu),
        }
    }

    pub fn rho_at(&self, t: u64) -> f64 {
        self.steps_at(t).0
    }

    pub fn gamma_at(&self, t: u64) -> f64 {
        self.steps_at(t).1
    }

    /// λ at the 0-based iteration index `t` (the schedule sees `t + 1`).
    pub fn lambda_at(&self, t: u64) -> f64 {
        self.lambda.at(t + 1).expect("schedule evaluated at t >= 1")
    }
}

fn tagged(base: &str, rho_clamped: bool, gamma_clamped: bool) -> String {
    let mut s = base.to_string();
    if rho_clamped {
        s.push_str("+rho-clamped");
    }
    if gamma_clamped {
        s.push_str("+gamma-clamped");
    }
    s
}
