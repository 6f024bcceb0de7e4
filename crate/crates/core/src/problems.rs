//! Synthetic ridge and ℓ₂-logistic regression problems with exact metadata.
//!
//! Both families share a design matrix `A = U·diag(s)·Vᵀ` with random
//! orthogonal factors (QR of Gaussian matrices) and a prescribed spectrum, and
//! a target vector `b`. Components are scaled so that `f = (1/n) Σᵢ fᵢ`:
//!
//! - ridge: `fᵢ(x) = ½(aᵢᵀx − bᵢ)² + (λ_r/2)‖x‖²`
//! - logistic: `fᵢ(x) = ½·log(1 + exp(−bᵢ aᵢᵀx)) + (λ_r/2)‖x‖²`, `bᵢ ∈ {−1, +1}`

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::objective::{eval_loss, grad_full_into, FiniteSum, ProblemStats};
use crate::rng;

/// Singular-value profile of the generated design matrix.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Spectrum {
    /// Deterministic log-uniform spacing from `1/cond` to `1`.
    #[default]
    LogSpaced,
    /// Values drawn uniformly from `[low, high]`; `cond` is ignored.
    Uniform { low: f64, high: f64 },
}

/// Parameters of a generated instance (shared by both families).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RidgeSpec {
    pub n: usize,
    pub d: usize,
    #[serde(default = "one")]
    pub cond: f64,
    #[serde(default)]
    pub lambda_r: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub spectrum: Spectrum,
}

/// Logistic instances use the same generator parameters; labels are the signs
/// of standard Gaussian draws.
pub type LogisticSpec = RidgeSpec;

fn one() -> f64 {
    1.0
}

impl RidgeSpec {
    pub fn new(n: usize, d: usize, cond: f64, lambda_r: f64, seed: u64) -> Self {
        RidgeSpec {
            n,
            d,
            cond,
            lambda_r,
            seed,
            spectrum: Spectrum::LogSpaced,
        }
    }

    pub fn with_spectrum(mut self, spectrum: Spectrum) -> Self {
        self.spectrum = spectrum;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.d == 0 {
            return Err(Error::invalid("problem size", "n and d must be at least 1"));
        }
        if !(self.cond >= 1.0 && self.cond.is_finite()) {
            return Err(Error::invalid("cond", format!("must be finite and >= 1, got {}", self.cond)));
        }
        if !(self.lambda_r >= 0.0 && self.lambda_r.is_finite()) {
            return Err(Error::invalid("lambda_r", format!("must be >= 0, got {}", self.lambda_r)));
        }
        if let Spectrum::Uniform { low, high } = self.spectrum {
            if !(low > 0.0 && low <= high && high.is_finite()) {
                return Err(Error::invalid("spectrum", format!("need 0 < low <= high, got [{low}, {high}]")));
            }
        }
        Ok(())
    }
}

/// Tagged generator spec, as echoed in problem files and experiment configs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ProblemSpec {
    Ridge(RidgeSpec),
    Logistic(LogisticSpec),
}

impl ProblemSpec {
    pub fn generate(&self) -> Result<Problem> {
        match self {
            ProblemSpec::Ridge(s) => gen_ridge(s),
            ProblemSpec::Logistic(s) => gen_logistic(s),
        }
    }

    pub fn generator(&self) -> &RidgeSpec {
        match self {
            ProblemSpec::Ridge(s) | ProblemSpec::Logistic(s) => s,
        }
    }
}

/// Row-major data `(A, b)` plus the ridge weight.
#[derive(Clone, Debug, PartialEq)]
pub struct Design {
    pub n: usize,
    pub d: usize,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub lambda_r: f64,
    row_norm_sq: Vec<f64>,
}

impl Design {
    pub fn new(n: usize, d: usize, a: Vec<f64>, b: Vec<f64>, lambda_r: f64) -> Result<Self> {
        if n == 0 || d == 0 {
            return Err(Error::invalid("problem size", "n and d must be at least 1"));
        }
        if a.len() != n * d {
            return Err(Error::DimensionMismatch { expected: n * d, got: a.len() });
        }
        if b.len() != n {
            return Err(Error::DimensionMismatch { expected: n, got: b.len() });
        }
        if !(lambda_r >= 0.0 && lambda_r.is_finite()) {
            return Err(Error::invalid("lambda_r", format!("must be >= 0, got {lambda_r}")));
        }
        if !linalg::all_finite(&a) || !linalg::all_finite(&b) {
            return Err(Error::invalid("data", "A and b must be finite"));
        }
        let row_norm_sq = a.chunks_exact(d).map(linalg::norm_sq).collect();
        Ok(Design { n, d, a, b, lambda_r, row_norm_sq })
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.a[i * self.d..(i + 1) * self.d]
    }

    pub fn row_norm_sq(&self, i: usize) -> f64 {
        self.row_norm_sq[i]
    }

    pub fn matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.n, self.d, &self.a)
    }

    /// Eigenvalues of `AᵀA/n`, ascending.
    fn gram_eigenvalues(&self) -> Vec<f64> {
        let a = self.matrix();
        let gram = a.transpose() * &a / self.n as f64;
        let mut ev: Vec<f64> = gram.symmetric_eigenvalues().iter().copied().collect();
        ev.sort_by(f64::total_cmp);
        ev
    }
}

fn standard_normal_matrix<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

fn singular_values<R: Rng>(k: usize, cond: f64, spectrum: &Spectrum, rng: &mut R) -> Vec<f64> {
    match *spectrum {
        Spectrum::LogSpaced => {
            if k == 1 {
                return vec![1.0];
            }
            let log_c = cond.ln();
            (0..k)
                .map(|j| (log_c * (j as f64 / (k - 1) as f64 - 1.0)).exp())
                .collect()
        }
        Spectrum::Uniform { low, high } => (0..k).map(|_| rng.random_range(low..=high)).collect(),
    }
}

/// `A = U·diag(s)·Vᵀ` with `U`, `V` the orthonormal factors of Gaussian QRs.
fn design_matrix<R: Rng>(spec: &RidgeSpec, rng: &mut R) -> DMatrix<f64> {
    let k = spec.n.min(spec.d);
    let u = standard_normal_matrix(spec.n, k, rng).qr().q();
    let v = standard_normal_matrix(spec.d, k, rng).qr().q();
    let s = singular_values(k, spec.cond, &spec.spectrum, rng);
    let us = DMatrix::from_fn(spec.n, k, |i, j| u[(i, j)] * s[j]);
    us * v.transpose()
}

fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    let mut out = Vec::with_capacity(m.nrows() * m.ncols());
    for i in 0..m.nrows() {
        out.extend(m.row(i).iter());
    }
    out
}

/// Generates a ridge regression instance.
pub fn gen_ridge(spec: &RidgeSpec) -> Result<Problem> {
    spec.validate()?;
    let mut rng = rng::stream(spec.seed);
    let a = design_matrix(spec, &mut rng);
    let b: Vec<f64> = (0..spec.n).map(|_| rng.sample(StandardNormal)).collect();
    let design = Design::new(spec.n, spec.d, row_major(&a), b, spec.lambda_r)?;
    let mut ridge = Ridge::from_design(design)?;
    ridge.spec = Some(spec.clone());
    Ok(Problem::Ridge(ridge))
}

/// Generates an ℓ₂-regularized logistic regression instance.
pub fn gen_logistic(spec: &LogisticSpec) -> Result<Problem> {
    spec.validate()?;
    let mut rng = rng::stream(spec.seed);
    let a = design_matrix(spec, &mut rng);
    let b: Vec<f64> = (0..spec.n)
        .map(|_| {
            let z: f64 = rng.sample(StandardNormal);
            if z < 0.0 { -1.0 } else { 1.0 }
        })
        .collect();
    let design = Design::new(spec.n, spec.d, row_major(&a), b, spec.lambda_r)?;
    let mut logistic = Logistic::from_design(design)?;
    logistic.spec = Some(spec.clone());
    Ok(Problem::Logistic(logistic))
}

/// `(1/n) Σᵢ (fᵢ(x*) − fᵢ*)`.
pub fn sigma_star(problem: &Problem) -> Result<f64> {
    let x_star = problem
        .stats()
        .x_star
        .as_deref()
        .ok_or(Error::MetadataMissing("x_star"))?;
    Ok(sigma_star_at(problem, |i| problem.component_infimum(i), x_star))
}

fn sigma_star_at<P: FiniteSum + ?Sized>(problem: &P, infimum: impl Fn(usize) -> f64, x_star: &[f64]) -> f64 {
    let n = problem.n();
    let s: f64 = (0..n)
        .map(|i| (problem.component_value(i, x_star) - infimum(i)).max(0.0))
        .sum();
    s / n as f64
}

fn sigma_one_at<P: FiniteSum + ?Sized>(problem: &P, x_star: &[f64]) -> f64 {
    let n = problem.n();
    let s: f64 = (0..n).map(|i| linalg::norm_sq(&problem.component_grad(i, x_star))).sum();
    s / n as f64
}

#[derive(Clone, Debug)]
pub struct Ridge {
    design: Design,
    stats: ProblemStats,
    spec: Option<RidgeSpec>,
}

impl Ridge {
    /// Builds the problem and its metadata from explicit data.
    pub fn from_design(design: Design) -> Result<Self> {
        let n = design.n;
        let lambda_r = design.lambda_r;
        let l_i: Vec<f64> = (0..n).map(|i| design.row_norm_sq(i) + lambda_r).collect();
        let mut ridge = Ridge {
            stats: ProblemStats::from_smoothness(l_i),
            design,
            spec: None,
        };

        let ev = ridge.design.gram_eigenvalues();
        let (ev_min, ev_max) = (ev[0].max(0.0) + lambda_r, ev[ev.len() - 1] + lambda_r);
        ridge.stats.l_full = Some(ev_max.min(ridge.stats.l_max));

        let a = ridge.design.matrix();
        let b = DVector::from_column_slice(&ridge.design.b);
        if ev_min > 1e-12 * ev_max.max(f64::MIN_POSITIVE) {
            let hessian = a.transpose() * &a / n as f64
                + DMatrix::identity(ridge.design.d, ridge.design.d) * lambda_r;
            let rhs = a.transpose() * &b / n as f64;
            let x = hessian
                .clone()
                .cholesky()
                .map(|c| c.solve(&rhs))
                .or_else(|| hessian.lu().solve(&rhs))
                .ok_or(Error::invalid("ridge Hessian", "not invertible"))?;
            let x_star: Vec<f64> = x.iter().copied().collect();
            let f_star = eval_loss(&ridge, &x_star)?;
            ridge.stats.mu = Some(ev_min);
            ridge.stats.f_star = Some(f_star);
            ridge.stats.f_inf = Some(f_star);
            ridge.stats.sigma_one = Some(sigma_one_at(&ridge, &x_star));
            ridge.stats.sigma_star = Some(sigma_star_at(&ridge, |i| ridge.component_infimum(i), &x_star));
            ridge.stats.x_star = Some(x_star);
            Ok(ridge)
        } else {
            // Rank-deficient least squares: keep the infimum, omit x* and mu.
            ridge.stats.singular_hessian = true;
            let x = a
                .svd(true, true)
                .solve(&b, 1e-12)
                .map_err(|e| Error::invalid("ridge least squares", e))?;
            let x_ls: Vec<f64> = x.iter().copied().collect();
            ridge.stats.f_inf = Some(eval_loss(&ridge, &x_ls)?);
            Ok(ridge)
        }
    }

    pub fn design(&self) -> &Design {
        &self.design
    }

    /// Closed form `fᵢ* = ½ bᵢ² λ_r / (λ_r + ‖aᵢ‖²)`.
    pub fn component_infimum(&self, i: usize) -> f64 {
        let s = self.design.row_norm_sq(i);
        let lr = self.design.lambda_r;
        let bi = self.design.b[i];
        if s + lr == 0.0 {
            0.5 * bi * bi
        } else {
            0.5 * bi * bi * lr / (lr + s)
        }
    }
}

impl FiniteSum for Ridge {
    fn n(&self) -> usize {
        self.design.n
    }

    fn dim(&self) -> usize {
        self.design.d
    }

    fn component_value(&self, i: usize, x: &[f64]) -> f64 {
        let r = linalg::dot(self.design.row(i), x) - self.design.b[i];
        0.5 * r * r + 0.5 * self.design.lambda_r * linalg::norm_sq(x)
    }

    fn add_component_grad(&self, i: usize, x: &[f64], scale: f64, out: &mut [f64]) {
        let row = self.design.row(i);
        let r = linalg::dot(row, x) - self.design.b[i];
        linalg::axpy(scale * r, row, out);
        if self.design.lambda_r != 0.0 {
            linalg::axpy(scale * self.design.lambda_r, x, out);
        }
    }

    fn stats(&self) -> &ProblemStats {
        &self.stats
    }
}

/// `log(1 + eᵘ)` without overflow.
#[inline]
fn softplus(u: f64) -> f64 {
    u.max(0.0) + (-u.abs()).exp().ln_1p()
}

/// `1 / (1 + eᶻ)`.
#[inline]
fn sigmoid_neg(z: f64) -> f64 {
    if z >= 0.0 {
        let e = (-z).exp();
        e / (1.0 + e)
    } else {
        1.0 / (1.0 + z.exp())
    }
}

#[derive(Clone, Debug)]
pub struct Logistic {
    design: Design,
    stats: ProblemStats,
    spec: Option<LogisticSpec>,
}

/// Stopping rule for the numeric minimizer of logistic problems.
const LOGISTIC_GRAD_TOL: f64 = 1e-10;
const LOGISTIC_MAX_ITERS: usize = 1_000_000;

impl Logistic {
    pub fn from_design(design: Design) -> Result<Self> {
        if let Some(b) = design.b.iter().find(|b| **b != 1.0 && **b != -1.0) {
            return Err(Error::invalid("labels", format!("must be -1 or +1, got {b}")));
        }
        let n = design.n;
        let lambda_r = design.lambda_r;
        let l_i: Vec<f64> = (0..n).map(|i| design.row_norm_sq(i) / 8.0 + lambda_r).collect();
        let ev = design.gram_eigenvalues();
        let l_full = ev[ev.len() - 1] / 8.0 + lambda_r;
        let mut logistic = Logistic {
            stats: ProblemStats::from_smoothness(l_i),
            design,
            spec: None,
        };
        logistic.stats.l_full = Some(l_full.min(logistic.stats.l_max));

        if lambda_r > 0.0 {
            let x_star = logistic.minimize(l_full)?;
            let f_star = eval_loss(&logistic, &x_star)?;
            logistic.stats.mu = Some(lambda_r);
            logistic.stats.f_star = Some(f_star);
            logistic.stats.f_inf = Some(f_star);
            logistic.stats.sigma_one = Some(sigma_one_at(&logistic, &x_star));
            logistic.stats.sigma_star =
                Some(sigma_star_at(&logistic, |i| logistic.component_infimum(i), &x_star));
            logistic.stats.x_star = Some(x_star);
            Ok(logistic)
        } else {
            Ok(logistic)
        }
    }

    pub fn design(&self) -> &Design {
        &self.design
    }

    /// Full-gradient descent with step `1/L` from the origin.
    fn minimize(&self, l_full: f64) -> Result<Vec<f64>> {
        let d = self.design.d;
        let mut x = vec![0.0; d];
        let mut g = vec![0.0; d];
        let step = 1.0 / l_full;
        for _ in 0..LOGISTIC_MAX_ITERS {
            grad_full_into(self, &x, &mut g)?;
            if linalg::norm(&g) <= LOGISTIC_GRAD_TOL {
                break;
            }
            linalg::axpy(-step, &g, &mut x);
        }
        Ok(x)
    }

    /// `fᵢ*` by bisection on the one-dimensional problem along `bᵢ aᵢ`.
    ///
    /// The minimizer is `x = t·bᵢaᵢ` with `t` solving `2λ_r t = 1/(1 + e^{t‖aᵢ‖²})`
    /// on `[0, 1/(4λ_r)]`. Without regularization the infimum is `0`.
    pub fn component_infimum(&self, i: usize) -> f64 {
        let lr = self.design.lambda_r;
        if lr == 0.0 {
            return 0.0;
        }
        let s = self.design.row_norm_sq(i);
        let phi = |t: f64| 0.5 * softplus(-t * s) + 0.5 * lr * t * t * s;
        let h = |t: f64| 2.0 * lr * t - sigmoid_neg(t * s);
        let (mut lo, mut hi) = (0.0_f64, 0.25 / lr);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi {
                break;
            }
            if h(mid) < 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        phi(0.5 * (lo + hi)).min(phi(lo)).min(phi(hi))
    }
}

impl FiniteSum for Logistic {
    fn n(&self) -> usize {
        self.design.n
    }

    fn dim(&self) -> usize {
        self.design.d
    }

    fn component_value(&self, i: usize, x: &[f64]) -> f64 {
        let z = self.design.b[i] * linalg::dot(self.design.row(i), x);
        0.5 * softplus(-z) + 0.5 * self.design.lambda_r * linalg::norm_sq(x)
    }

    fn add_component_grad(&self, i: usize, x: &[f64], scale: f64, out: &mut [f64]) {
        let row = self.design.row(i);
        let bi = self.design.b[i];
        let z = bi * linalg::dot(row, x);
        linalg::axpy(-0.5 * scale * bi * sigmoid_neg(z), row, out);
        if self.design.lambda_r != 0.0 {
            linalg::axpy(scale * self.design.lambda_r, x, out);
        }
    }

    fn stats(&self) -> &ProblemStats {
        &self.stats
    }
}

/// A concrete problem instance.
#[derive(Clone, Debug)]
pub enum Problem {
    Ridge(Ridge),
    Logistic(Logistic),
}

impl Problem {
    pub fn design(&self) -> &Design {
        match self {
            Problem::Ridge(p) => p.design(),
            Problem::Logistic(p) => p.design(),
        }
    }

    /// `fᵢ* = inf_x fᵢ(x)`.
    pub fn component_infimum(&self, i: usize) -> f64 {
        match self {
            Problem::Ridge(p) => p.component_infimum(i),
            Problem::Logistic(p) => p.component_infimum(i),
        }
    }

    pub fn spec(&self) -> Option<ProblemSpec> {
        match self {
            Problem::Ridge(p) => p.spec.clone().map(ProblemSpec::Ridge),
            Problem::Logistic(p) => p.spec.clone().map(ProblemSpec::Logistic),
        }
    }

    pub fn kind(&self) -> ProblemKind {
        match self {
            Problem::Ridge(_) => ProblemKind::Ridge,
            Problem::Logistic(_) => ProblemKind::Logistic,
        }
    }

    pub fn to_file(&self) -> ProblemFile {
        let d = self.design();
        ProblemFile {
            kind: self.kind(),
            spec: self.spec(),
            n: d.n,
            d: d.d,
            lambda_r: d.lambda_r,
            a: d.a.clone(),
            b: d.b.clone(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.to_file())?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let file: ProblemFile = serde_json::from_str(s)?;
        file.into_problem()
    }
}

impl FiniteSum for Problem {
    fn n(&self) -> usize {
        self.design().n
    }

    fn dim(&self) -> usize {
        self.design().d
    }

    fn component_value(&self, i: usize, x: &[f64]) -> f64 {
        match self {
            Problem::Ridge(p) => p.component_value(i, x),
            Problem::Logistic(p) => p.component_value(i, x),
        }
    }

    fn add_component_grad(&self, i: usize, x: &[f64], scale: f64, out: &mut [f64]) {
        match self {
            Problem::Ridge(p) => p.add_component_grad(i, x, scale, out),
            Problem::Logistic(p) => p.add_component_grad(i, x, scale, out),
        }
    }

    fn stats(&self) -> &ProblemStats {
        match self {
            Problem::Ridge(p) => p.stats(),
            Problem::Logistic(p) => p.stats(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProblemKind {
    Ridge,
    Logistic,
}

/// JSON container: row-major matrix, targets, and the generator spec echoed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemFile {
    pub kind: ProblemKind,
    pub spec: Option<ProblemSpec>,
    pub n: usize,
    pub d: usize,
    pub lambda_r: f64,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
}

impl ProblemFile {
    pub fn into_problem(self) -> Result<Problem> {
        let design = Design::new(self.n, self.d, self.a, self.b, self.lambda_r)?;
        Ok(match (self.kind, self.spec) {
            (ProblemKind::Ridge, spec) => {
                let mut p = Ridge::from_design(design)?;
                p.spec = spec.map(|s| s.generator().clone());
                Problem::Ridge(p)
            }
            (ProblemKind::Logistic, spec) => {
                let mut p = Logistic::from_design(design)?;
                p.spec = spec.map(|s| s.generator().clone());
                Problem::Logistic(p)
            }
        })
    }
}
