//! `usam`: generate problems, run experiments and presets, verify the
//! theory-side inequalities, and print step-size bounds.
//!
//! Exit codes: 0 on success, 1 on configuration or I/O errors, 2 when
//! `verify` finds a violated inequality.

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use unified_sam::experiment::{run_experiment, verify, ExperimentConfig, ExperimentResult, Preset, StepSource, WORKERS_ENV};
use unified_sam::problems::ProblemSpec;
use unified_sam::schedules::{nonconvex_min_iters, nonconvex_steps, pl_constant_steps, PlOptions};
use unified_sam::{ErConstants, LambdaSchedule, RidgeSpec, Spectrum};

#[derive(Parser)]
#[command(name = "usam", version, about = "Unified SAM experiment harness")]
struct Cli {
    /// Worker threads for trial execution.
    #[arg(long, global = true, env = WORKERS_ENV)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a problem instance and write it as JSON.
    Gen(GenArgs),
    /// Run an experiment described by a TOML file.
    Run(RunArgs),
    /// Deterministic ridge regression, λ sweep.
    Fig1(PresetArgs),
    /// Logistic regression, constant versus decreasing steps.
    Fig2(PresetArgs),
    /// Ridge regression, uniform versus importance sampling.
    Fig3(PresetArgs),
    /// Check ER constants, perturbed-gradient bounds and the linear-rate envelope.
    Verify(VerifyArgs),
    /// Print step sizes and iteration bounds for given constants.
    Bounds(BoundsArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    Ridge,
    Logistic,
}

#[derive(Args)]
struct GenArgs {
    #[arg(long, value_enum)]
    kind: Kind,
    #[arg(long)]
    n: usize,
    #[arg(long)]
    d: usize,
    #[arg(long, default_value_t = 1.0)]
    cond: f64,
    #[arg(long, default_value_t = 0.0)]
    lambda_r: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Draw singular values uniformly from `LOW,HIGH` instead of log-spacing.
    #[arg(long, value_name = "LOW,HIGH", value_parser = parse_pair)]
    uniform_spectrum: Option<(f64, f64)>,
    /// Output file (stdout when omitted).
    #[arg(long, short)]
    out: Option<PathBuf>,
}

/// Overrides shared by `run` and the presets; flags win over the file.
#[derive(Args)]
struct Overrides {
    #[arg(long)]
    trials: Option<u64>,
    #[arg(long)]
    epochs: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, short)]
    output: Option<PathBuf>,
    /// Comma-separated λ values or schedules (`inv_t`, `one_minus_inv_t`).
    #[arg(long, value_delimiter = ',')]
    lambdas: Option<Vec<String>>,
    /// Replace the step sources with a manual `RHO,GAMMA` pair.
    #[arg(long, value_name = "RHO,GAMMA", value_parser = parse_pair)]
    manual_steps: Option<(f64, f64)>,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long, short)]
    config: PathBuf,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args)]
struct PresetArgs {
    #[command(flatten)]
    overrides: Overrides,
    /// Print the effective configuration as TOML instead of running.
    #[arg(long)]
    print_config: bool,
}

#[derive(Args)]
struct VerifyArgs {
    /// Experiment config; `--preset` may be given instead.
    #[arg(long, short, conflicts_with = "preset", required_unless_present = "preset")]
    config: Option<PathBuf>,
    #[arg(long)]
    preset: Option<String>,
    /// Multiply the ER constants before checking them.
    #[arg(long)]
    er_scale: Option<f64>,
    #[arg(long)]
    points: Option<usize>,
    #[arg(long)]
    no_envelope: bool,
    /// Trials for the envelope check.
    #[arg(long)]
    envelope_trials: Option<u64>,
}

#[derive(Args)]
struct BoundsArgs {
    #[arg(long)]
    a: f64,
    #[arg(long)]
    b: f64,
    #[arg(long)]
    c: f64,
    /// Smoothness constant.
    #[arg(long)]
    l: f64,
    #[arg(long, default_value_t = 0.0)]
    lambda: f64,
    /// PL constant; enables the constant-step PL output.
    #[arg(long)]
    mu: Option<f64>,
    /// Operating radius as a fraction of ρ*.
    #[arg(long)]
    rho_fraction: Option<f64>,
    /// Target gradient norm; enables the non-convex output.
    #[arg(long)]
    eps: Option<f64>,
    /// Initial gap `f(x⁰) − f^inf` for the iteration bound.
    #[arg(long)]
    delta0: Option<f64>,
    /// Horizon for the non-convex steps (defaults to the iteration bound).
    #[arg(long)]
    horizon: Option<u64>,
}

fn parse_pair(s: &str) -> std::result::Result<(f64, f64), String> {
    let (a, b) = s.split_once(',').ok_or_else(|| format!("expected two comma-separated numbers, got `{s}`"))?;
    let parse = |v: &str| v.trim().parse::<f64>().map_err(|e| format!("`{v}`: {e}"));
    Ok((parse(a)?, parse(b)?))
}

impl Overrides {
    fn apply(&self, cfg: &mut ExperimentConfig) -> Result<()> {
        if let Some(t) = self.trials {
            cfg.trials = t;
        }
        if let Some(e) = self.epochs {
            cfg.epochs = e;
        }
        if let Some(s) = self.seed {
            cfg.base_seed = s;
        }
        if let Some(o) = &self.output {
            cfg.output = Some(o.clone());
        }
        if let Some(ls) = &self.lambdas {
            cfg.lambdas = ls.iter().map(|s| LambdaSchedule::parse(s)).collect::<unified_sam::Result<_>>()?;
        }
        if let Some((rho, gamma)) = self.manual_steps {
            cfg.steps = vec![StepSource::Manual { rho, gamma }];
        }
        cfg.validate()?;
        Ok(())
    }
}

fn gen(args: &GenArgs) -> Result<()> {
    let mut spec = RidgeSpec::new(args.n, args.d, args.cond, args.lambda_r, args.seed);
    if let Some((low, high)) = args.uniform_spectrum {
        spec = spec.with_spectrum(Spectrum::Uniform { low, high });
    }
    let spec = match args.kind {
        Kind::Ridge => ProblemSpec::Ridge(spec),
        Kind::Logistic => ProblemSpec::Logistic(spec),
    };
    let json = spec.generate()?.to_json()?;
    match &args.out {
        Some(path) => fs::write(path, json).with_context(|| format!("writing {}", path.display()))?,
        None => println!("{json}"),
    }
    Ok(())
}

fn summarize(result: &ExperimentResult) {
    for g in &result.groups {
        let finals: Vec<f64> = g.records.iter().filter_map(|r| r.final_subopt()).collect();
        let mean = finals.iter().sum::<f64>() / finals.len().max(1) as f64;
        let diverged = if g.info.diverged_trials.is_empty() {
            String::new()
        } else {
            format!("  diverged trials {:?}", g.info.diverged_trials)
        };
        println!("{}  steps {}  final subopt {mean:.3e}{diverged}", g.info.experiment_id, g.info.provenance);
    }
    if let Some(path) = &result.config.output {
        println!("wrote {}", path.display());
    }
}

fn run_config(cfg: &ExperimentConfig) -> Result<()> {
    let result = run_experiment(cfg)?;
    summarize(&result);
    Ok(())
}

fn preset(p: Preset, args: &PresetArgs) -> Result<()> {
    let mut cfg = p.config();
    args.overrides.apply(&mut cfg)?;
    if args.print_config {
        print!("{}", cfg.to_toml()?);
        return Ok(());
    }
    run_config(&cfg)
}

fn run_verify(args: &VerifyArgs) -> Result<bool> {
    let mut cfg = match (&args.config, &args.preset) {
        (Some(path), _) => ExperimentConfig::load(path)?,
        (None, Some(name)) => Preset::parse(name)?.config(),
        (None, None) => bail!("give --config or --preset"),
    };
    if let Some(s) = args.er_scale {
        cfg.verify.er_scale = s;
    }
    if let Some(p) = args.points {
        cfg.verify.points = p;
    }
    if let Some(t) = args.envelope_trials {
        cfg.verify.envelope_trials = t;
    }
    if args.no_envelope {
        cfg.verify.envelope = false;
    }
    let report = verify(&cfg)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(report.passed)
}

fn bounds(args: &BoundsArgs) -> Result<()> {
    let c = ErConstants::manual(args.a, args.b, args.c)?;
    let mut out = serde_json::Map::new();
    out.insert("er".into(), serde_json::to_value(&c)?);
    if let Some(mu) = args.mu {
        let mut opts = PlOptions::default();
        if let Some(f) = args.rho_fraction {
            opts.rho_fraction = f;
        }
        let rates = pl_constant_steps(&c, args.l, mu, args.lambda, &opts)?;
        out.insert("pl".into(), serde_json::to_value(&rates)?);
    }
    if let Some(eps) = args.eps {
        let t_bound = match args.delta0 {
            Some(d0) => Some(nonconvex_min_iters(eps, d0, args.l, &c, args.lambda)?),
            None => None,
        };
        let horizon = args.horizon.or(t_bound).context("non-convex steps need --horizon or --delta0")?;
        let steps = nonconvex_steps(eps, args.lambda, args.l, &c, horizon.max(1), (None, None))?;
        out.insert("iteration_bound".into(), serde_json::to_value(t_bound)?);
        out.insert("horizon".into(), horizon.into());
        out.insert("nonconvex".into(), serde_json::to_value(&steps)?);
    }
    println!("{}", serde_json::to_string_pretty(&serde_json::Value::Object(out))?);
    Ok(())
}

fn main() -> ExitCode {
    // Usage errors count as configuration errors; 2 is reserved for `verify`.
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Some(w) = cli.workers {
        // Single-threaded at this point; the pool reads the variable later.
        std::env::set_var(WORKERS_ENV, w.to_string());
    }
    let outcome = match &cli.command {
        Command::Gen(a) => gen(a).map(|()| true),
        Command::Run(a) => ExperimentConfig::load(&a.config)
            .map_err(anyhow::Error::from)
            .and_then(|mut cfg| {
                a.overrides.apply(&mut cfg)?;
                run_config(&cfg)
            })
            .map(|()| true),
        Command::Fig1(a) => preset(Preset::Fig1, a).map(|()| true),
        Command::Fig2(a) => preset(Preset::Fig2, a).map(|()| true),
        Command::Fig3(a) => preset(Preset::Fig3, a).map(|()| true),
        Command::Verify(a) => run_verify(a),
        Command::Bounds(a) => bounds(a).map(|()| true),
    };
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
