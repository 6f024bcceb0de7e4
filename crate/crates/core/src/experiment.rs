//! Experiment configuration, presets, multi-trial orchestration and CSV output.
//!
//! A configuration expands into groups: the cartesian product of sampling
//! schemes, step sources and λ schedules. Every group runs `trials` seeded
//! trials; trial `k` of every group uses the same random stream.
//!
//! CSV columns, in order:
//!
//! ```text
//! experiment_id, preset, trial, epoch, iteration, lambda, rho, gamma,
//! loss, subopt, grad_norm, zero_grad_events
//! ```
//!
//! `experiment_id` is `<id>/<scheme>/<steps>/lambda=<λ>` so that each group
//! is identifiable. Per-trial rows are followed by `trial = mean` and
//! `trial = std` rows (population standard deviation). Lines starting with
//! `#` echo the configuration and the step-size provenance of every group.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checks::{check_envelope, check_perturbed_gradient_bounds};
use crate::error::{Error, Result};
use crate::objective::FiniteSum;
use crate::optimizer::{run, OptimizerConfig, RunRecord};
use crate::problems::{Problem, ProblemSpec, RidgeSpec, Spectrum};
use crate::rng;
use crate::sampling::{er_constants, er_preset, verify_er, ErConstants, SamplingScheme, SchemeSpec};
use crate::schedules::{
    nonconvex_steps, pl_constant_steps, LambdaSchedule, NonconvexSteps, PlOptions, PlRates, StepPlan,
};

/// Environment variable holding the number of worker threads.
pub const WORKERS_ENV: &str = "USAM_WORKERS";

/// Exact CSV column order.
pub const CSV_COLUMNS: [&str; 12] = [
    "experiment_id",
    "preset",
    "trial",
    "epoch",
    "iteration",
    "lambda",
    "rho",
    "gamma",
    "loss",
    "subopt",
    "grad_norm",
    "zero_grad_events",
];

/// Where the ER constants used by theorem step sizes come from.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum ErSource {
    /// Derived from the sampling scheme and the problem's smoothness constants.
    #[default]
    Auto,
    Preset { name: String, params: Vec<f64> },
    Manual { a: f64, b: f64, c: f64 },
}

/// Which smoothness constant the step-size formulas use.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SmoothnessChoice {
    /// Smoothness of `f` for full-batch schemes (the one-component view), `L_max` otherwise.
    #[default]
    Auto,
    LMax,
    LFull,
}

/// How the steps of a group are produced.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum StepSource {
    PlConstant {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        rho_fraction: Option<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        rho: Option<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        gamma_cap: Option<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        rho_cap: Option<f64>,
    },
    PlDecreasing {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        rho_fraction: Option<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        rho: Option<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        gamma_cap: Option<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        rho_cap: Option<f64>,
    },
    Nonconvex {
        eps: f64,
        /// Defaults to the run length.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        horizon: Option<u64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        gamma_cap: Option<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        rho_cap: Option<f64>,
    },
    Manual { rho: f64, gamma: f64 },
}

impl StepSource {
    pub fn pl_constant() -> Self {
        StepSource::PlConstant { rho_fraction: None, rho: None, gamma_cap: None, rho_cap: None }
    }

    pub fn pl_decreasing() -> Self {
        StepSource::PlDecreasing { rho_fraction: None, rho: None, gamma_cap: None, rho_cap: None }
    }

    pub fn label(&self) -> &'static str {
        match self {
            StepSource::PlConstant { .. } => "pl-constant",
            StepSource::PlDecreasing { .. } => "pl-decreasing",
            StepSource::Nonconvex { .. } => "nonconvex",
            StepSource::Manual { .. } => "manual",
        }
    }

    fn pl_options(&self) -> Option<PlOptions> {
        match *self {
            StepSource::PlConstant { rho_fraction, rho, gamma_cap, rho_cap }
            | StepSource::PlDecreasing { rho_fraction, rho, gamma_cap, rho_cap } => Some(PlOptions {
                rho_fraction: rho_fraction.unwrap_or(PlOptions::default().rho_fraction),
                rho,
                gamma_cap,
                rho_cap,
            }),
            _ => None,
        }
    }
}

/// Settings for [`verify`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerifySettings {
    /// Random points for the ER check.
    pub points: usize,
    /// Monte Carlo draws per point when the scheme cannot be enumerated.
    pub draws: usize,
    /// Random `(x, ρ, λ)` triples for the perturbed-gradient suites.
    pub triples: usize,
    /// Trials for the envelope check.
    pub envelope_trials: u64,
    /// Multiplier applied to the ER constants before checking them.
    pub er_scale: f64,
    pub envelope: bool,
}

impl Default for VerifySettings {
    fn default() -> Self {
        VerifySettings {
            points: 100,
            draws: 10_000,
            triples: 100,
            envelope_trials: 20,
            er_scale: 1.0,
            envelope: true,
        }
    }
}

fn default_preset() -> String {
    "custom".into()
}

fn one() -> u64 {
    1
}

fn is_default<T: Default + PartialEq>(v: &T) -> bool {
    *v == T::default()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment_id: String,
    #[serde(default = "default_preset")]
    pub preset: String,
    #[serde(default = "one")]
    pub trials: u64,
    pub epochs: u64,
    /// Overrides `⌈n/τ⌉` (and the single iteration per epoch of the full batch).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub iters_per_epoch: Option<u64>,
    #[serde(default = "one")]
    pub log_every_epochs: u64,
    #[serde(default)]
    pub base_seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vasso_theta: Option<f64>,
    #[serde(default)]
    pub convexity_hint: bool,
    #[serde(default)]
    pub smoothness: SmoothnessChoice,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub problem_file: Option<PathBuf>,
    pub lambdas: Vec<LambdaSchedule>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub problem: Option<ProblemSpec>,
    pub schemes: Vec<SchemeSpec>,
    pub steps: Vec<StepSource>,
    #[serde(default, skip_serializing_if = "is_default")]
    pub er: ErSource,
    #[serde(default)]
    pub verify: VerifySettings,
}

impl ExperimentConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let field = |f: &'static str, msg: &str| Err(Error::invalid(f, msg.to_string()));
        if self.experiment_id.is_empty() {
            return field("experiment_id", "must not be empty");
        }
        if self.trials == 0 {
            return field("trials", "must be at least 1");
        }
        if self.epochs == 0 {
            return field("epochs", "must be at least 1");
        }
        if self.log_every_epochs == 0 {
            return field("log_every_epochs", "must be at least 1");
        }
        if self.iters_per_epoch == Some(0) {
            return field("iters_per_epoch", "must be at least 1");
        }
        if self.lambdas.is_empty() {
            return field("lambdas", "need at least one lambda");
        }
        if self.schemes.is_empty() {
            return field("schemes", "need at least one sampling scheme");
        }
        if self.steps.is_empty() {
            return field("steps", "need at least one step source");
        }
        match (&self.problem, &self.problem_file) {
            (Some(_), Some(_)) => field("problem", "give either `problem` or `problem_file`, not both"),
            (None, None) => field("problem", "missing: give `problem` or `problem_file`"),
            _ => Ok(()),
        }
    }

    pub fn load_problem(&self) -> Result<Problem> {
        match (&self.problem, &self.problem_file) {
            (Some(spec), None) => spec.generate(),
            (None, Some(path)) => {
                let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
                Problem::from_json(&text)
            }
            _ => {
                self.validate()?;
                unreachable!("validate rejects this combination")
            }
        }
    }
}

/// Named configurations reproducing the three synthetic experiments.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    /// Deterministic ridge regression, λ swept over `{0, 0.1, …, 1}`.
    Fig1,
    /// Logistic regression, constant versus decreasing steps.
    Fig2,
    /// Heterogeneous-spectrum ridge, uniform versus importance sampling.
    Fig3,
}

impl Preset {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "fig1" => Ok(Preset::Fig1),
            "fig2" => Ok(Preset::Fig2),
            "fig3" => Ok(Preset::Fig3),
            other => Err(Error::UnknownPreset(other.to_string())),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Preset::Fig1 => "fig1",
            Preset::Fig2 => "fig2",
            Preset::Fig3 => "fig3",
        }
    }

    pub fn config(&self) -> ExperimentConfig {
        let n = 100;
        let base = ExperimentConfig {
            experiment_id: self.name().into(),
            preset: self.name().into(),
            trials: 1,
            epochs: 1,
            iters_per_epoch: None,
            log_every_epochs: 1,
            base_seed: 42,
            vasso_theta: None,
            convexity_hint: false,
            smoothness: SmoothnessChoice::Auto,
            output: Some(PathBuf::from(format!("{}.csv", self.name()))),
            problem_file: None,
            lambdas: Vec::new(),
            problem: None,
            schemes: Vec::new(),
            steps: vec![StepSource::pl_constant()],
            er: ErSource::Auto,
            verify: VerifySettings::default(),
        };
        let lambda_r = 3.0 / n as f64;
        let three = [0.0, 0.5, 1.0].map(LambdaSchedule::Const).to_vec();
        match self {
            Preset::Fig1 => ExperimentConfig {
                epochs: 50,
                // n full-gradient steps per epoch, the same work as n single-element steps.
                iters_per_epoch: Some(n as u64),
                lambdas: (0..=10).map(|k| LambdaSchedule::Const(k as f64 / 10.0)).collect(),
                problem: Some(ProblemSpec::Ridge(RidgeSpec::new(n, n, 10.0, 0.0, 1))),
                schemes: vec![SchemeSpec::FullBatch],
                ..base
            },
            Preset::Fig2 => ExperimentConfig {
                trials: 5,
                epochs: 10_000,
                log_every_epochs: 10,
                lambdas: three,
                problem: Some(ProblemSpec::Logistic(RidgeSpec::new(n, n, 10.0, lambda_r, 2))),
                schemes: vec![SchemeSpec::Uniform],
                steps: vec![StepSource::pl_constant(), StepSource::pl_decreasing()],
                ..base
            },
            Preset::Fig3 => ExperimentConfig {
                trials: 5,
                epochs: 3_000,
                log_every_epochs: 10,
                lambdas: three,
                problem: Some(ProblemSpec::Ridge(
                    RidgeSpec::new(n, n, 10.0, lambda_r, 3).with_spectrum(Spectrum::Uniform { low: 1.0, high: 10.0 }),
                )),
                schemes: vec![SchemeSpec::Uniform, SchemeSpec::Importance { floor: None }],
                ..base
            },
        }
    }
}

/// Everything needed to reproduce one group's steps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupInfo {
    pub experiment_id: String,
    pub scheme: String,
    pub steps: String,
    pub lambda: LambdaSchedule,
    pub provenance: String,
    pub er: Option<ErConstants>,
    /// Smoothness constant fed to the step-size formulas.
    pub smoothness: f64,
    pub mu: Option<f64>,
    pub pl: Option<PlRates>,
    pub nonconvex: Option<NonconvexSteps>,
    pub iters_per_epoch: u64,
    pub max_iters: u64,
    pub record_every: u64,
    pub diverged_trials: Vec<u64>,
}

#[derive(Clone, Debug)]
pub struct Group {
    pub info: GroupInfo,
    pub plan: StepPlan,
    pub scheme: SamplingScheme,
}

impl Group {
    pub fn optimizer_config(&self, x0: Vec<f64>, vasso_theta: Option<f64>) -> OptimizerConfig {
        OptimizerConfig {
            plan: self.plan.clone(),
            scheme: self.scheme.clone(),
            max_iters: self.info.max_iters,
            x0,
            vasso_theta,
            record_every: self.info.record_every,
        }
    }
}

/// ER constants for a scheme according to the configured source.
pub fn resolve_er(cfg: &ExperimentConfig, scheme: &SamplingScheme, problem: &Problem) -> Result<ErConstants> {
    match &cfg.er {
        ErSource::Auto => er_constants(scheme, problem.stats(), cfg.convexity_hint),
        ErSource::Preset { name, params } => er_preset(name, params),
        ErSource::Manual { a, b, c } => ErConstants::manual(*a, *b, *c),
    }
}

fn smoothness_for(cfg: &ExperimentConfig, scheme: &SamplingScheme, problem: &Problem) -> Result<f64> {
    let stats = problem.stats();
    match cfg.smoothness {
        SmoothnessChoice::LMax => Ok(stats.l_max),
        SmoothnessChoice::LFull => stats.l_full.ok_or(Error::MetadataMissing("l_full")),
        SmoothnessChoice::Auto if scheme.is_full_batch() => Ok(stats.l_full.unwrap_or(stats.l_max)),
        SmoothnessChoice::Auto => Ok(stats.l_max),
    }
}

/// Expands a configuration into its groups.
pub fn build_groups(cfg: &ExperimentConfig, problem: &Problem) -> Result<Vec<Group>> {
    cfg.validate()?;
    let stats = problem.stats();
    let mut groups = Vec::new();
    for scheme_spec in &cfg.schemes {
        let scheme = scheme_spec.build(stats)?;
        let ipe = cfg
            .iters_per_epoch
            .unwrap_or_else(|| if scheme.is_full_batch() { 1 } else { problem.n().div_ceil(scheme.batch_size()) as u64 });
        let max_iters = cfg
            .epochs
            .checked_mul(ipe)
            .ok_or_else(|| Error::invalid("epochs", "run length overflows"))?;
        let l = smoothness_for(cfg, &scheme, problem)?;
        for source in &cfg.steps {
            for lambda in &cfg.lambdas {
                let lam_ref = lambda.reference();
                let needs_er = !matches!(source, StepSource::Manual { .. });
                let er = match resolve_er(cfg, &scheme, problem) {
                    Ok(er) => Some(er),
                    Err(e) if needs_er => return Err(e),
                    Err(_) => None,
                };
                let (mut pl, mut nc) = (None, None);
                let plan = match source {
                    StepSource::PlConstant { .. } | StepSource::PlDecreasing { .. } => {
                        let mu = stats.mu.ok_or(Error::PlRequired { mu: 0.0 })?;
                        let opts = source.pl_options().expect("pl source");
                        let rates = pl_constant_steps(er.as_ref().expect("er resolved"), l, mu, lam_ref, &opts)?;
                        let plan = if matches!(source, StepSource::PlConstant { .. }) {
                            StepPlan::pl_constant(&rates, *lambda)?
                        } else {
                            StepPlan::pl_decreasing(&rates, *lambda)?
                        };
                        pl = Some(rates);
                        plan
                    }
                    StepSource::Nonconvex { eps, horizon, gamma_cap, rho_cap } => {
                        let steps = nonconvex_steps(
                            *eps,
                            lam_ref,
                            l,
                            er.as_ref().expect("er resolved"),
                            horizon.unwrap_or(max_iters),
                            (*rho_cap, *gamma_cap),
                        )?;
                        let plan = StepPlan::nonconvex(&steps, *lambda)?;
                        nc = Some(steps);
                        plan
                    }
                    StepSource::Manual { rho, gamma } => StepPlan::manual(*rho, *gamma, *lambda)?,
                };
                let mut provenance = plan.provenance.clone();
                if let Some(er) = &er {
                    if needs_er {
                        provenance.push_str(&format!(";er={}", er.provenance));
                    }
                }
                let info = GroupInfo {
                    experiment_id: format!("{}/{}/{}/lambda={}", cfg.experiment_id, scheme_spec.label(), source.label(), lambda),
                    scheme: scheme_spec.label(),
                    steps: source.label().into(),
                    lambda: *lambda,
                    provenance,
                    er,
                    smoothness: l,
                    mu: stats.mu,
                    pl,
                    nonconvex: nc,
                    iters_per_epoch: ipe,
                    max_iters,
                    record_every: cfg.log_every_epochs.saturating_mul(ipe),
                    diverged_trials: Vec::new(),
                };
                groups.push(Group { info, plan, scheme: scheme.clone() });
            }
        }
    }
    Ok(groups)
}

/// Thread pool sized by [`WORKERS_ENV`] (rayon's default when unset).
pub fn worker_pool() -> Result<rayon::ThreadPool> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var(WORKERS_ENV) {
        let n: usize = v
            .trim()
            .parse()
            .ok()
            .filter(|&n| n >= 1)
            .ok_or_else(|| Error::Config(format!("{WORKERS_ENV} must be a positive integer, got `{v}`")))?;
        builder = builder.num_threads(n);
    }
    builder.build().map_err(|e| Error::Config(e.to_string()))
}

/// Runs `trials` seeded trials of every group in parallel; results keep group
/// and trial order.
pub fn run_groups(problem: &Problem, groups: &[Group], trials: u64, base_seed: u64, vasso_theta: Option<f64>) -> Result<Vec<Vec<RunRecord>>> {
    let x0 = vec![0.0; problem.dim()];
    let tasks: Vec<(usize, u64)> = (0..groups.len()).flat_map(|g| (0..trials).map(move |t| (g, t))).collect();
    let pool = worker_pool()?;
    let flat: Vec<Result<RunRecord>> = pool.install(|| {
        tasks
            .par_iter()
            .map(|&(g, trial)| {
                let config = groups[g].optimizer_config(x0.clone(), vasso_theta);
                run(problem, &config, &mut rng::trial_stream(base_seed, trial))
            })
            .collect()
    });
    let mut out: Vec<Vec<RunRecord>> = groups.iter().map(|_| Vec::with_capacity(trials as usize)).collect();
    for ((g, _), rec) in tasks.into_iter().zip(flat) {
        out[g].push(rec?);
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct GroupResult {
    pub info: GroupInfo,
    pub records: Vec<RunRecord>,
}

#[derive(Clone, Debug)]
pub struct ExperimentResult {
    pub config: ExperimentConfig,
    pub groups: Vec<GroupResult>,
}

impl ExperimentResult {
    pub fn group(&self, experiment_id: &str) -> Option<&GroupResult> {
        self.groups.iter().find(|g| g.info.experiment_id == experiment_id)
    }
}

/// Runs every group without writing anything.
pub fn execute(cfg: &ExperimentConfig) -> Result<ExperimentResult> {
    cfg.validate()?;
    let problem = cfg.load_problem()?;
    let groups = build_groups(cfg, &problem)?;
    let records = run_groups(&problem, &groups, cfg.trials, cfg.base_seed, cfg.vasso_theta)?;
    let groups = groups
        .into_iter()
        .zip(records)
        .map(|(g, records)| {
            let mut info = g.info;
            info.diverged_trials = records
                .iter()
                .enumerate()
                .filter(|(_, r)| r.diverged.is_some())
                .map(|(k, _)| k as u64)
                .collect();
            GroupResult { info, records }
        })
        .collect();
    Ok(ExperimentResult { config: cfg.clone(), groups })
}

/// Runs the experiment and writes the CSV to `cfg.output` when set.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentResult> {
    let result = execute(cfg)?;
    if let Some(path) = &cfg.output {
        write_csv(&result, path)?;
    }
    Ok(result)
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let k = values.len() as f64;
    let mean = values.iter().sum::<f64>() / k;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / k;
    (mean, var.sqrt())
}

/// Cross-trial statistics at one logged iteration.
#[derive(Clone, Debug, PartialEq)]
pub struct AggregatePoint {
    pub iteration: u64,
    pub lambda: f64,
    pub rho: f64,
    pub gamma: f64,
    pub loss: (f64, f64),
    pub subopt: Option<(f64, f64)>,
    pub grad_norm: (f64, f64),
}

/// Aggregates the iterations logged by every trial.
pub fn aggregate(records: &[RunRecord]) -> Vec<AggregatePoint> {
    let Some(first) = records.first() else { return Vec::new() };
    let common = records.iter().map(|r| r.entries.len()).min().unwrap_or(0);
    (0..common)
        .map(|j| {
            let e = &first.entries[j];
            let col = |f: &dyn Fn(&crate::optimizer::LogEntry) -> f64| -> Vec<f64> {
                records.iter().map(|r| f(&r.entries[j])).collect()
            };
            let subs: Option<Vec<f64>> = records.iter().map(|r| r.entries[j].subopt).collect();
            AggregatePoint {
                iteration: e.iteration,
                lambda: e.lambda,
                rho: e.rho,
                gamma: e.gamma,
                loss: mean_std(&col(&|e| e.loss)),
                subopt: subs.map(|s| mean_std(&s)),
                grad_norm: mean_std(&col(&|e| e.grad_norm)),
            }
        })
        .collect()
}

fn fmt_f(v: f64) -> String {
    format!("{v:.16e}")
}

/// One CSV data row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CsvRow {
    pub experiment_id: String,
    pub preset: String,
    pub trial: String,
    pub epoch: u64,
    pub iteration: u64,
    pub lambda: f64,
    pub rho: f64,
    pub gamma: f64,
    pub loss: f64,
    pub subopt: Option<f64>,
    pub grad_norm: f64,
    pub zero_grad_events: Option<u64>,
}

/// Writes the result as CSV with `#` header lines.
pub fn write_csv(result: &ExperimentResult, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = std::io::BufWriter::new(file);
    write_csv_to(result, &mut out)?;
    out.flush().map_err(|e| Error::io(path, e))
}

pub fn write_csv_to<W: Write>(result: &ExperimentResult, out: &mut W) -> Result<()> {
    let cfg = &result.config;
    let mut header = String::new();
    header.push_str(&format!("# experiment_id {}\n# preset {}\n", cfg.experiment_id, cfg.preset));
    for line in cfg.to_toml()?.lines() {
        header.push_str("# config ");
        header.push_str(line);
        header.push('\n');
    }
    for g in &result.groups {
        header.push_str("# group ");
        header.push_str(&serde_json::to_string(&g.info)?);
        header.push('\n');
    }
    out.write_all(header.as_bytes()).map_err(|e| Error::Config(format!("write failed: {e}")))?;

    let mut w = csv::Writer::from_writer(out);
    w.write_record(CSV_COLUMNS)?;
    for g in &result.groups {
        let ipe = g.info.iters_per_epoch;
        let id = &g.info.experiment_id;
        for (trial, rec) in g.records.iter().enumerate() {
            for e in &rec.entries {
                w.write_record([
                    id.clone(),
                    cfg.preset.clone(),
                    trial.to_string(),
                    (e.iteration / ipe).to_string(),
                    e.iteration.to_string(),
                    fmt_f(e.lambda),
                    fmt_f(e.rho),
                    fmt_f(e.gamma),
                    fmt_f(e.loss),
                    e.subopt.map(fmt_f).unwrap_or_default(),
                    fmt_f(e.grad_norm),
                    e.zero_grad_events.to_string(),
                ])?;
            }
        }
        let agg = aggregate(&g.records);
        for (label, pick) in [("mean", 0usize), ("std", 1usize)] {
            let sel = |p: (f64, f64)| if pick == 0 { p.0 } else { p.1 };
            for a in &agg {
                w.write_record([
                    id.clone(),
                    cfg.preset.clone(),
                    label.to_string(),
                    (a.iteration / ipe).to_string(),
                    a.iteration.to_string(),
                    fmt_f(a.lambda),
                    fmt_f(a.rho),
                    fmt_f(a.gamma),
                    fmt_f(sel(a.loss)),
                    a.subopt.map(|s| fmt_f(sel(s))).unwrap_or_default(),
                    fmt_f(sel(a.grad_norm)),
                    String::new(),
                ])?;
            }
        }
    }
    w.flush().map_err(|e| Error::Config(format!("write failed: {e}")))?;
    Ok(())
}

/// Parsed CSV: `#` lines and data rows.
#[derive(Clone, Debug)]
pub struct CsvFile {
    pub comments: Vec<String>,
    pub rows: Vec<CsvRow>,
}

impl CsvFile {
    /// Group provenance records from the header.
    pub fn groups(&self) -> Result<Vec<GroupInfo>> {
        self.comments
            .iter()
            .filter_map(|l| l.strip_prefix("# group "))
            .map(|j| serde_json::from_str(j).map_err(Error::from))
            .collect()
    }
}

pub fn parse_csv(text: &str) -> Result<CsvFile> {
    let comments = text.lines().filter(|l| l.starts_with('#')).map(str::to_string).collect();
    let mut reader = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(text.as_bytes());
    let headers = reader.headers()?.clone();
    if headers.iter().ne(CSV_COLUMNS.iter().copied()) {
        return Err(Error::Config(format!("unexpected CSV columns: {headers:?}")));
    }
    let rows = reader.deserialize().collect::<std::result::Result<Vec<CsvRow>, _>>()?;
    Ok(CsvFile { comments, rows })
}

pub fn read_csv(path: &Path) -> Result<CsvFile> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_csv(&text)
}

/// One verification outcome.
#[derive(Clone, Debug, Serialize)]
pub struct CheckOutcome {
    pub name: String,
    pub passed: bool,
    pub details: serde_json::Value,
}

#[derive(Clone, Debug, Serialize)]
pub struct VerifyReport {
    pub passed: bool,
    pub checks: Vec<CheckOutcome>,
}

const VERIFY_STREAM: u64 = 1 << 40;

/// Checks the ER inequality and the perturbed-gradient bounds for every
/// scheme, and the linear-rate envelope for every PL constant-step group.
pub fn verify(cfg: &ExperimentConfig) -> Result<VerifyReport> {
    cfg.validate()?;
    let problem = cfg.load_problem()?;
    let settings = &cfg.verify;
    let mut checks = Vec::new();
    for (k, spec) in cfg.schemes.iter().enumerate() {
        let scheme = spec.build(problem.stats())?;
        let mut stream = rng::trial_stream(cfg.base_seed, VERIFY_STREAM + k as u64);
        let er = resolve_er(cfg, &scheme, &problem)?.scaled(settings.er_scale);
        let report = verify_er(&problem, &scheme, &er, settings.points, settings.draws, &mut stream)?;
        checks.push(CheckOutcome {
            name: format!("expected-residual/{}", spec.label()),
            passed: report.passed,
            details: serde_json::json!({ "constants": er, "report": report }),
        });
        if scheme.enumerate().is_some() {
            for r in check_perturbed_gradient_bounds(&problem, &scheme, settings.triples, &mut stream)? {
                checks.push(CheckOutcome {
                    name: format!("{}/{}", r.name, spec.label()),
                    passed: r.passed,
                    details: serde_json::to_value(&r)?,
                });
            }
        }
    }
    if settings.envelope && problem.stats().f_star.is_some() {
        let groups: Vec<Group> = build_groups(cfg, &problem)?
            .into_iter()
            .filter(|g| g.info.steps == "pl-constant" && !g.info.lambda.is_heuristic() && g.info.pl.is_some())
            .collect();
        let records = run_groups(&problem, &groups, settings.envelope_trials, cfg.base_seed, None)?;
        for (g, recs) in groups.iter().zip(&records) {
            let report = check_envelope(recs, g.info.pl.as_ref().expect("filtered"), 3.0)?;
            checks.push(CheckOutcome {
                name: format!("envelope/{}", g.info.experiment_id),
                passed: report.passed,
                details: serde_json::to_value(&report)?,
            });
        }
    }
    Ok(VerifyReport { passed: checks.iter().all(|c| c.passed), checks })
}
