//! Sampling schemes, importance probabilities and Expected Residual constants.
//!
//! A scheme is a distribution over sampling vectors `v` with `E[vᵢ] = 1`:
//!
//! - single element: `P[v = eᵢ/pᵢ] = pᵢ`
//! - τ-nice: a uniform subset `S` of size τ, `v = (n/τ) Σ_{i∈S} eᵢ`
//! - full batch: `v = 1`
//!
//! The Expected Residual (ER) condition asks for `A, B, C ≥ 0` with
//! `E‖g(x)‖² ≤ 2A[f(x) − f^inf] + B‖∇f(x)‖² + C` for all `x`.

use std::fmt;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::objective::{eval_loss, grad_full, grad_stoch_into, FiniteSum, ProblemStats, SamplingVector};

const PROB_SUM_TOL: f64 = 1e-12;

#[derive(Clone, Debug)]
pub enum SamplingScheme {
    SingleElement { probs: Vec<f64>, index: WeightedIndex<f64> },
    TauNice { n: usize, tau: usize },
    FullBatch { n: usize },
}

impl SamplingScheme {
    /// Single-element sampling with arbitrary probabilities `pᵢ ∈ (0, 1]`, `Σ pᵢ = 1`.
    pub fn single_element(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::invalid("probabilities", "need at least one component"));
        }
        if let Some(p) = probs.iter().find(|p| !(**p > 0.0 && **p <= 1.0)) {
            return Err(Error::invalid("probabilities", format!("each p_i must lie in (0, 1], got {p}")));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > PROB_SUM_TOL {
            return Err(Error::invalid("probabilities", format!("must sum to 1, got {total}")));
        }
        let index = WeightedIndex::new(&probs).map_err(|e| Error::invalid("probabilities", e.to_string()))?;
        Ok(SamplingScheme::SingleElement { probs, index })
    }

    pub fn uniform(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::invalid("n", "must be at least 1"));
        }
        Self::single_element(vec![1.0 / n as f64; n])
    }

    /// Single-element sampling with `pᵢ ∝ Lᵢ`.
    pub fn importance(stats: &ProblemStats) -> Result<Self> {
        Self::single_element(importance_probs(stats, None)?)
    }

    pub fn tau_nice(n: usize, tau: usize) -> Result<Self> {
        if tau == 0 || tau > n {
            return Err(Error::invalid("tau", format!("need 1 <= tau <= n = {n}, got {tau}")));
        }
        Ok(SamplingScheme::TauNice { n, tau })
    }

    pub fn full_batch(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::invalid("n", "must be at least 1"));
        }
        Ok(SamplingScheme::FullBatch { n })
    }

    pub fn n(&self) -> usize {
        match self {
            SamplingScheme::SingleElement { probs, .. } => probs.len(),
            SamplingScheme::TauNice { n, .. } | SamplingScheme::FullBatch { n } => *n,
        }
    }

    /// Expected batch size.
    pub fn batch_size(&self) -> usize {
        match self {
            SamplingScheme::SingleElement { .. } => 1,
            SamplingScheme::TauNice { tau, .. } => *tau,
            SamplingScheme::FullBatch { n } => *n,
        }
    }

    pub fn is_full_batch(&self) -> bool {
        match self {
            SamplingScheme::FullBatch { .. } => true,
            SamplingScheme::TauNice { n, tau } => n == tau,
            SamplingScheme::SingleElement { probs, .. } => probs.len() == 1,
        }
    }

    /// All outcomes with their probabilities, when the support has at most `n` points.
    pub fn enumerate(&self) -> Option<Vec<(f64, SamplingVector)>> {
        match self {
            SamplingScheme::FullBatch { .. } => Some(vec![(1.0, SamplingVector::Full)]),
            SamplingScheme::TauNice { n, tau } if n == tau => Some(vec![(1.0, SamplingVector::Full)]),
            SamplingScheme::TauNice { .. } => None,
            SamplingScheme::SingleElement { probs, .. } => Some(
                probs
                    .iter()
                    .enumerate()
                    .map(|(i, &p)| (p, SamplingVector::single(i, 1.0 / p)))
                    .collect(),
            ),
        }
    }

    /// Draws one sampling vector.
    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> SamplingVector {
        match self {
            SamplingScheme::SingleElement { probs, index } => {
                let i = index.sample(rng);
                SamplingVector::single(i, 1.0 / probs[i])
            }
            SamplingScheme::TauNice { n, tau } if n == tau => SamplingVector::Full,
            SamplingScheme::TauNice { n, tau } => {
                let mut indices = rand::seq::index::sample(rng, *n, *tau).into_vec();
                indices.sort_unstable();
                let w = *n as f64 / *tau as f64;
                SamplingVector::Sparse {
                    weights: vec![w; indices.len()],
                    indices,
                }
            }
            SamplingScheme::FullBatch { .. } => SamplingVector::Full,
        }
    }

    pub fn label(&self) -> String {
        match self {
            SamplingScheme::SingleElement { probs, .. } => {
                let n = probs.len() as f64;
                if probs.iter().all(|p| (p * n - 1.0).abs() < 1e-12) {
                    "uniform".into()
                } else {
                    "single-element".into()
                }
            }
            SamplingScheme::TauNice { tau, .. } => format!("tau-nice({tau})"),
            SamplingScheme::FullBatch { .. } => "full-batch".into(),
        }
    }
}

/// Scheme description used in configuration files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SchemeSpec {
    FullBatch,
    Uniform,
    /// `pᵢ = Lᵢ / Σⱼ Lⱼ`, with an optional floor on `Lᵢ`.
    Importance {
        #[serde(default)]
        floor: Option<f64>,
    },
    TauNice { tau: usize },
    SingleElement { probs: Vec<f64> },
}

impl SchemeSpec {
    pub fn build(&self, stats: &ProblemStats) -> Result<SamplingScheme> {
        let n = stats.l_i.len();
        match self {
            SchemeSpec::FullBatch => SamplingScheme::full_batch(n),
            SchemeSpec::Uniform => SamplingScheme::uniform(n),
            SchemeSpec::Importance { floor } => SamplingScheme::single_element(importance_probs(stats, *floor)?),
            SchemeSpec::TauNice { tau } => SamplingScheme::tau_nice(n, *tau),
            SchemeSpec::SingleElement { probs } => {
                if probs.len() != n {
                    return Err(Error::DimensionMismatch { expected: n, got: probs.len() });
                }
                SamplingScheme::single_element(probs.clone())
            }
        }
    }

    pub fn label(&self) -> String {
        match self {
            SchemeSpec::FullBatch => "full-batch".into(),
            SchemeSpec::Uniform => "uniform".into(),
            SchemeSpec::Importance { .. } => "importance".into(),
            SchemeSpec::TauNice { tau } => format!("tau-nice({tau})"),
            SchemeSpec::SingleElement { .. } => "single-element".into(),
        }
    }
}

/// Importance probabilities `pᵢ = Lᵢ / Σⱼ Lⱼ`.
///
/// A zero `Lᵢ` (an affine component) is an error unless `floor` is given, in
/// which case every constant is raised to at least `floor`.
pub fn importance_probs(stats: &ProblemStats, floor: Option<f64>) -> Result<Vec<f64>> {
    if stats.l_i.is_empty() {
        return Err(Error::invalid("smoothness constants", "empty"));
    }
    let mut l = stats.l_i.clone();
    for (i, li) in l.iter_mut().enumerate() {
        if let Some(fl) = floor {
            *li = li.max(fl);
        }
        if !(*li > 0.0 && li.is_finite()) {
            return Err(Error::DegenerateConstant { index: i });
        }
    }
    let total: f64 = l.iter().sum();
    Ok(l.into_iter().map(|li| li / total).collect())
}

/// Which result or assumption produced a set of ER constants.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum ErProvenance {
    FullBatch,
    /// Smoothness-based constants for single-element sampling (batch size fixed at 1).
    SingleElement,
    TauNice,
    /// τ-nice sampling with x*-convex components; carries `σ₁`.
    TauNiceConvex { sigma_one: f64 },
    Preset { name: String },
    Manual,
}

impl fmt::Display for ErProvenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ErProvenance::FullBatch => f.write_str("full-batch"),
            ErProvenance::SingleElement => f.write_str("single-element-smoothness"),
            ErProvenance::TauNice => f.write_str("tau-nice-smoothness"),
            ErProvenance::TauNiceConvex { sigma_one } => write!(f, "tau-nice-convex(sigma1={sigma_one:e})"),
            ErProvenance::Preset { name } => write!(f, "preset:{name}"),
            ErProvenance::Manual => f.write_str("manual"),
        }
    }
}

/// ER constants `(A, B, C)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErConstants {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub provenance: ErProvenance,
}

impl ErConstants {
    pub fn new(a: f64, b: f64, c: f64, provenance: ErProvenance) -> Result<Self> {
        for (name, v) in [("A", a), ("B", b), ("C", c)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::invalid("ER constant", format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(ErConstants { a, b, c, provenance })
    }

    pub fn manual(a: f64, b: f64, c: f64) -> Result<Self> {
        Self::new(a, b, c, ErProvenance::Manual)
    }

    pub fn full_batch() -> Self {
        ErConstants { a: 0.0, b: 1.0, c: 0.0, provenance: ErProvenance::FullBatch }
    }

    /// All three constants multiplied by `factor` (used to probe violations).
    pub fn scaled(&self, factor: f64) -> Self {
        ErConstants {
            a: self.a * factor,
            b: self.b * factor,
            c: self.c * factor,
            provenance: self.provenance.clone(),
        }
    }

    /// Right-hand side `2A·gap + B‖∇f‖² + C`.
    pub fn bound(&self, gap: f64, grad_norm_sq: f64) -> f64 {
        2.0 * self.a * gap + self.b * grad_norm_sq + self.c
    }
}

/// ER constants implied by smoothness for the given scheme.
///
/// - single element: `A = (1/n) maxᵢ Lᵢ/pᵢ`, `B = 0`, `C = 2Aσ*`
/// - τ-nice: `A = (n−τ)L_max/(τ(n−1))`, `B = n(τ−1)/(τ(n−1))`, `C = 2Aσ*`
/// - τ-nice with `convexity_hint`: `B = 1`, `C = 2(n−τ)σ₁/(τ(n−1))`
/// - full batch (or τ = n, or n = 1): `(0, 1, 0)`
///
/// `C` is never fabricated: a missing `σ*` (or `σ₁`) is an error.
pub fn er_constants(scheme: &SamplingScheme, stats: &ProblemStats, convexity_hint: bool) -> Result<ErConstants> {
    if scheme.n() != stats.l_i.len() {
        return Err(Error::DimensionMismatch { expected: stats.l_i.len(), got: scheme.n() });
    }
    if scheme.is_full_batch() {
        return Ok(ErConstants::full_batch());
    }
    match scheme {
        SamplingScheme::SingleElement { probs, .. } => {
            let n = probs.len() as f64;
            let max_ratio = stats
                .l_i
                .iter()
                .zip(probs)
                .map(|(l, p)| l / p)
                .fold(f64::NEG_INFINITY, f64::max);
            let a = max_ratio / n;
            let sigma = stats.sigma_star.ok_or(Error::MetadataMissing("sigma_star"))?;
            ErConstants::new(a, 0.0, 2.0 * a * sigma, ErProvenance::SingleElement)
        }
        SamplingScheme::TauNice { n, tau } => {
            let (nf, tf) = (*n as f64, *tau as f64);
            let a = (nf - tf) / (tf * (nf - 1.0)) * stats.l_max;
            if convexity_hint {
                let sigma_one = stats.sigma_one.ok_or(Error::MetadataMissing("sigma_one"))?;
                let c = 2.0 * (nf - tf) / (tf * (nf - 1.0)) * sigma_one;
                ErConstants::new(a, 1.0, c, ErProvenance::TauNiceConvex { sigma_one })
            } else {
                let b = nf * (tf - 1.0) / (tf * (nf - 1.0));
                let sigma = stats.sigma_star.ok_or(Error::MetadataMissing("sigma_star"))?;
                ErConstants::new(a, b, 2.0 * a * sigma, ErProvenance::TauNice)
            }
        }
        SamplingScheme::FullBatch { .. } => unreachable!("handled above"),
    }
}

/// ER constants implied by classical noise assumptions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case", deny_unknown_fields)]
pub enum ErPreset {
    BoundedGradient { sigma_sq: f64 },
    BoundedVariance { sigma_sq: f64 },
    ExpectedSmoothness { smoothness: f64 },
    RelaxedGrowthRho { rho: f64, sigma_sq: f64 },
    RelaxedGrowthAlpha { alpha: f64, sigma_sq: f64 },
}

impl ErPreset {
    /// Builds a preset from its name and positional parameters.
    pub fn parse(name: &str, params: &[f64]) -> Result<Self> {
        let want = |k: usize| -> Result<()> {
            if params.len() == k {
                Ok(())
            } else {
                Err(Error::invalid("preset parameters", format!("`{name}` takes {k} parameter(s), got {}", params.len())))
            }
        };
        Ok(match name {
            "bounded_gradient" => {
                want(1)?;
                ErPreset::BoundedGradient { sigma_sq: params[0] }
            }
            "bounded_variance" => {
                want(1)?;
                ErPreset::BoundedVariance { sigma_sq: params[0] }
            }
            "expected_smoothness" => {
                want(1)?;
                ErPreset::ExpectedSmoothness { smoothness: params[0] }
            }
            "relaxed_growth_rho" => {
                want(2)?;
                ErPreset::RelaxedGrowthRho { rho: params[0], sigma_sq: params[1] }
            }
            "relaxed_growth_alpha" => {
                want(2)?;
                ErPreset::RelaxedGrowthAlpha { alpha: params[0], sigma_sq: params[1] }
            }
            other => return Err(Error::UnknownPreset(other.to_string())),
        })
    }

    fn name(&self) -> &'static str {
        match self {
            ErPreset::BoundedGradient { .. } => "bounded_gradient",
            ErPreset::BoundedVariance { .. } => "bounded_variance",
            ErPreset::ExpectedSmoothness { .. } => "expected_smoothness",
            ErPreset::RelaxedGrowthRho { .. } => "relaxed_growth_rho",
            ErPreset::RelaxedGrowthAlpha { .. } => "relaxed_growth_alpha",
        }
    }

    pub fn constants(&self) -> Result<ErConstants> {
        let (a, b, c) = match *self {
            ErPreset::BoundedGradient { sigma_sq } => (0.0, 0.0, sigma_sq),
            ErPreset::BoundedVariance { sigma_sq } => (0.0, 1.0, sigma_sq),
            ErPreset::ExpectedSmoothness { smoothness } => (2.0 * smoothness, 0.0, 0.0),
            ErPreset::RelaxedGrowthRho { rho, sigma_sq } => (0.0, rho, sigma_sq),
            ErPreset::RelaxedGrowthAlpha { alpha, sigma_sq } => (alpha, 0.0, sigma_sq),
        };
        ErConstants::new(a, b, c, ErProvenance::Preset { name: self.name().to_string() })
    }
}

pub fn er_preset(name: &str, params: &[f64]) -> Result<ErConstants> {
    ErPreset::parse(name, params)?.constants()
}

/// Result of checking the ER inequality at random points.
#[derive(Clone, Debug, Serialize)]
pub struct ErReport {
    pub passed: bool,
    /// `true` when expectations were computed by enumeration.
    pub exact: bool,
    pub points: usize,
    pub violations: usize,
    /// Smallest `RHS − E‖g‖²` over the points.
    pub worst_slack: f64,
    /// Standard error of the estimate at the worst point (0 when exact).
    pub worst_se: f64,
    pub worst_point: Vec<f64>,
}

/// Relative slack allowed for floating-point rounding in exact comparisons.
pub const ROUNDING_TOL: f64 = 1e-12;

/// `E‖g(x)‖²` and its standard error: exact when the scheme's support is
/// enumerable, Monte Carlo over `draws` samples otherwise.
pub fn second_moment<P: FiniteSum + ?Sized, R: Rng + ?Sized>(
    problem: &P,
    scheme: &SamplingScheme,
    x: &[f64],
    draws: usize,
    rng: &mut R,
) -> Result<(f64, f64)> {
    let mut g = vec![0.0; problem.dim()];
    if let Some(outcomes) = scheme.enumerate() {
        let mut m = 0.0;
        for (p, v) in &outcomes {
            grad_stoch_into(problem, x, v, &mut g)?;
            m += p * linalg::norm_sq(&g);
        }
        return Ok((m, 0.0));
    }
    let draws = draws.max(2);
    let (mut sum, mut sum_sq) = (0.0, 0.0);
    for _ in 0..draws {
        let v = scheme.draw(rng);
        grad_stoch_into(problem, x, &v, &mut g)?;
        let s = linalg::norm_sq(&g);
        sum += s;
        sum_sq += s * s;
    }
    let k = draws as f64;
    let mean = sum / k;
    let var = ((sum_sq - k * mean * mean) / (k - 1.0)).max(0.0);
    Ok((mean, (var / k).sqrt()))
}

/// Random evaluation point around `center`.
pub(crate) fn random_point<R: Rng + ?Sized>(center: &[f64], rng: &mut R) -> Vec<f64> {
    let d = center.len();
    let scale = 1.0 + linalg::norm(center) / (d as f64).sqrt();
    center
        .iter()
        .map(|c| {
            let z: f64 = rng.sample(StandardNormal);
            c + scale * z
        })
        .collect()
}

/// Checks the ER inequality at `points` random points.
///
/// Passes when `E‖g(x)‖² ≤ RHS + 4·SE` everywhere (SE = 0 under enumeration,
/// where a relative rounding allowance of [`ROUNDING_TOL`] applies).
pub fn verify_er<P: FiniteSum + ?Sized, R: Rng + ?Sized>(
    problem: &P,
    scheme: &SamplingScheme,
    c: &ErConstants,
    points: usize,
    draws: usize,
    rng: &mut R,
) -> Result<ErReport> {
    let stats = problem.stats();
    let f_inf = stats.f_ref().ok_or(Error::MetadataMissing("f_inf"))?;
    let center = stats.x_star.clone().unwrap_or_else(|| vec![0.0; problem.dim()]);
    let exact = scheme.enumerate().is_some();

    let mut report = ErReport {
        passed: true,
        exact,
        points,
        violations: 0,
        worst_slack: f64::INFINITY,
        worst_se: 0.0,
        worst_point: Vec::new(),
    };
    for _ in 0..points {
        let x = random_point(&center, rng);
        let gap = eval_loss(problem, &x)? - f_inf;
        let grad_sq = linalg::norm_sq(&grad_full(problem, &x)?);
        let rhs = c.bound(gap, grad_sq);
        let (moment, se) = second_moment(problem, scheme, &x, draws, rng)?;
        let slack = rhs - moment;
        let allowance = 4.0 * se + ROUNDING_TOL * rhs.abs().max(moment.abs());
        if slack < -allowance {
            report.violations += 1;
            report.passed = false;
        }
        if slack < report.worst_slack {
            report.worst_slack = slack;
            report.worst_se = se;
            report.worst_point = x;
        }
    }
    Ok(report)
}
