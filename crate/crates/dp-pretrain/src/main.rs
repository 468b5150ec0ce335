//! Command-line runner: train, account, calibrate, probe, efficiency-report.

use clap::{Args, Parser, Subcommand};
use dp_pretrain::accountant::{
    account_schedule, calibrate_sigma, default_orders, PrivacyReport,
};
use dp_pretrain::config::{preset, RunConfig, PRESET_NAMES};
use dp_pretrain::data::SamplingMode;
use dp_pretrain::error::{Error, Result};
use dp_pretrain::instrument::{scale_invariance_probe, ProbeReport, ScaleGroup};
use dp_pretrain::metrics::read_metrics;
use dp_pretrain::model::init_parameters;
use dp_pretrain::tensor::Precision;
use dp_pretrain::trainer::run_training_until;
use serde::Serialize;
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(name = "dp-pretrain", version, about = "Differentially private MLM pretraining at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every subcommand that resolves a run configuration.
#[derive(Args)]
struct ConfigArgs {
    /// Config file path, or a preset name (reference_preset, desk_preset)
    #[arg(long)]
    config: String,
    /// Override a config key, e.g. --set train.steps=100 (repeatable)
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Shorthand for --set train.seed=<int>
    #[arg(long)]
    seed: Option<u64>,
    /// Shorthand for --set train.sampling=<mode>
    #[arg(long, value_name = "poisson|fixed")]
    mode: Option<String>,
    /// Shorthand for --set train.precision=<p>
    #[arg(long, value_name = "f32|f64")]
    precision: Option<String>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let text = match preset(&self.config) {
            Some(cfg) => cfg.to_text(),
            None => {
                std::fs::read_to_string(&self.config).map_err(|e| {
                    Error::config(
                        "config",
                        format!(
                            "{} is neither a preset ({}) nor a readable file: {e}",
                            self.config,
                            PRESET_NAMES.join(", ")
                        ),
                    )
                })?
            }
        };
        let mut overrides = Vec::new();
        for kv in &self.set {
            let (k, v) = kv.split_once('=').ok_or_else(|| {
                Error::config("set", format!("expected KEY=VALUE, got {kv:?}"))
            })?;
            overrides.push((k.to_string(), v.to_string()));
        }
        if let Some(seed) = self.seed {
            overrides.push(("train.seed".into(), seed.to_string()));
        }
        if let Some(mode) = &self.mode {
            overrides.push(("train.sampling".into(), mode.clone()));
        }
        if let Some(p) = &self.precision {
            overrides.push(("train.precision".into(), p.clone()));
        }
        RunConfig::from_text(&text, &overrides)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run (or resume) a training run into an output directory
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        /// Run directory for the config snapshot, metrics, checkpoints, report
        #[arg(long)]
        out: PathBuf,
        /// Continue from the latest checkpoint in --out
        #[arg(long)]
        resume: bool,
        /// Pause after this step (a checkpoint is forced; no final report)
        #[arg(long, value_name = "STEP")]
        stop_after: Option<u64>,
        /// Validate and account only: no corpus generation, no training
        #[arg(long)]
        dry_run: bool,
    },
    /// Privacy accounting for a config's full schedule
    Account {
        #[command(flatten)]
        config: ConfigArgs,
        /// Also write the report JSON here
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Find the noise multiplier that spends the target epsilon exactly
    Calibrate {
        #[command(flatten)]
        config: ConfigArgs,
        /// Target epsilon (defaults to the config's privacy.target_epsilon)
        #[arg(long)]
        target_epsilon: Option<f64>,
        /// Also write the result JSON here
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Scale-invariance probe on a freshly initialized model
    Probe {
        #[command(flatten)]
        config: ConfigArgs,
        /// Embedding group to rescale (repeatable; defaults to all four)
        #[arg(long, value_name = "conjoint|word|position|token-type")]
        group: Vec<String>,
        /// Scale factor to apply (repeatable; defaults to 0.5, 2, 10)
        #[arg(long, value_name = "ALPHA")]
        alpha: Vec<f64>,
        /// Also write the probe table JSON here
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare examples-to-target-accuracy between two metrics logs
    EfficiencyReport {
        /// Metrics log of the baseline run
        baseline: PathBuf,
        /// Metrics log of the candidate run
        candidate: PathBuf,
        /// MLM accuracy both runs must reach
        #[arg(long)]
        target_accuracy: f64,
        /// Also write the comparison JSON here
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    match run(cli) {
        Ok(()) => {}
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(if e.is_usage() { 1 } else { 2 });
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { config, out, resume, stop_after, dry_run } => {
            let cfg = config.resolve()?;
            if dry_run {
                return account(&cfg, Some(&out));
            }
            train(&cfg, &out, resume, stop_after)
        }
        Command::Account { config, out } => account(&config.resolve()?, out.as_deref()),
        Command::Calibrate { config, target_epsilon, out } => {
            calibrate(&config.resolve()?, target_epsilon, out.as_deref())
        }
        Command::Probe { config, group, alpha, out } => {
            probe(&config.resolve()?, &group, &alpha, out.as_deref())
        }
        Command::EfficiencyReport { baseline, candidate, target_accuracy, out } => {
            efficiency_report(&baseline, &candidate, target_accuracy, out.as_deref())
        }
    }
}

fn train(cfg: &RunConfig, out: &Path, resume: bool, stop_after: Option<u64>) -> Result<()> {
    let total = cfg.steps;
    let mut show = |step: u64, stats: &dp_pretrain::model::EvalStats, eps: Option<f64>| {
        let eps = eps.map_or("-".to_string(), |e| format!("{e:.4}"));
        eprintln!(
            "step {step}/{total}  eval loss {:.4}  mlm acc {:.4}  eps {eps}",
            stats.mean_loss, stats.accuracy
        );
    };
    let report = match cfg.precision {
        Precision::F32 => {
            run_training_until::<f32>(cfg, out, resume, stop_after, Some(&mut show))?
        }
        Precision::F64 => {
            run_training_until::<f64>(cfg, out, resume, stop_after, Some(&mut show))?
        }
    };
    match report {
        Some(report) => println!("{}", serde_json::to_string(&report)?),
        None => eprintln!(
            "paused after step {}; resume with --resume",
            stop_after.unwrap_or(total).min(total)
        ),
    }
    Ok(())
}

fn schedule_report(cfg: &RunConfig) -> Result<PrivacyReport> {
    if cfg.optim.noise_multiplier <= 0.0 {
        return Err(Error::parameter(
            "optim.noise_multiplier is zero; there is nothing to account",
        ));
    }
    let segments = cfg.segments(cfg.optim.noise_multiplier)?;
    account_schedule(
        &segments,
        cfg.delta,
        &default_orders(),
        cfg.sampling == SamplingMode::Poisson,
    )
}

/// Write one structured record to `path` and echo it as the final stdout line.
fn emit<T: Serialize>(report: &T, out: Option<&Path>, filename: &str) -> Result<()> {
    let mut line = serde_json::to_string(report)?;
    line.push('\n');
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join(filename), &line)?;
    }
    print!("{line}");
    Ok(())
}

fn account(cfg: &RunConfig, out: Option<&Path>) -> Result<()> {
    let report = schedule_report(cfg)?;
    let orders = default_orders();
    let mut curve = dp_pretrain::accountant::RdpCurve::zero(&orders)?;
    for seg in cfg.segments(cfg.optim.noise_multiplier)? {
        let c = dp_pretrain::accountant::RdpCurve::subsampled_gaussian(
            seg.sampling_rate,
            seg.noise_multiplier,
            &orders,
        )?;
        curve.accumulate(&c, seg.steps)?;
    }
    println!("{:>6}  {:>18}  {:>18}", "order", "rdp", "epsilon");
    let ln_inv_delta = (1.0 / cfg.delta).ln();
    for (&alpha, &rdp) in orders.iter().zip(curve.values()) {
        let eps = rdp + ln_inv_delta / (alpha as f64 - 1.0);
        let marker = if alpha == report.optimal_order { " *" } else { "" };
        println!("{alpha:>6}  {rdp:>18.12}  {eps:>18.12}{marker}");
    }
    println!(
        "epsilon {:.6} at delta {:e} (order {}{})",
        report.epsilon,
        report.delta,
        report.optimal_order,
        if report.poisson_sampling { "" } else { "; fixed-size sampling, Poisson approximation" },
    );
    emit(&report, out, "account.json")
}

#[derive(Serialize)]
struct CalibrationReport {
    noise_multiplier: f64,
    epsilon: f64,
    target_epsilon: f64,
    delta: f64,
    optimal_order: u64,
    poisson_sampling: bool,
}

fn calibrate(cfg: &RunConfig, target: Option<f64>, out: Option<&Path>) -> Result<()> {
    let target = target.unwrap_or(cfg.target_epsilon);
    let shape: Vec<(u64, f64)> = cfg
        .segments(1.0)?
        .iter()
        .map(|seg| (seg.steps, seg.sampling_rate))
        .collect();
    let orders = default_orders();
    let sigma = calibrate_sigma(&shape, target, cfg.delta, &orders)?;
    let report = {
        let mut with_sigma = cfg.clone();
        with_sigma.optim.noise_multiplier = sigma;
        schedule_report(&with_sigma)?
    };
    println!(
        "noise multiplier {sigma:.12} spends epsilon {:.9} of target {target} at delta {:e}",
        report.epsilon, report.delta
    );
    emit(
        &CalibrationReport {
            noise_multiplier: sigma,
            epsilon: report.epsilon,
            target_epsilon: target,
            delta: report.delta,
            optimal_order: report.optimal_order,
            poisson_sampling: report.poisson_sampling,
        },
        out,
        "calibrate.json",
    )
}

fn probe(cfg: &RunConfig, groups: &[String], alphas: &[f64], out: Option<&Path>) -> Result<()> {
    let groups: Vec<ScaleGroup> = if groups.is_empty() {
        ScaleGroup::ALL.to_vec()
    } else {
        groups.iter().map(|g| g.parse()).collect::<Result<_>>()?
    };
    let alphas: &[f64] = if alphas.is_empty() { &[0.5, 2.0, 10.0] } else { alphas };
    let params = init_parameters::<f64>(&cfg.model, cfg.seed)?;
    let mut reports: Vec<ProbeReport> = Vec::new();
    println!(
        "{:>10}  {:>6}  {:>14}  {:>14}  {:>14}",
        "group", "alpha", "max logit dev", "grad ratio", "expect 1/alpha"
    );
    for &group in &groups {
        for &alpha in alphas {
            let r = scale_invariance_probe(&cfg.model, &params, group, alpha, cfg.seed)?;
            println!(
                "{:>10}  {:>6}  {:>14.3e}  {:>14.9}  {:>14.9}",
                group.name(),
                alpha,
                r.max_logit_deviation,
                r.grad_norm_ratio,
                1.0 / alpha
            );
            reports.push(r);
        }
    }
    emit(&reports, out, "probe.json")
}

#[derive(Serialize)]
struct EfficiencyReport {
    target_accuracy: f64,
    baseline_examples: u64,
    candidate_examples: u64,
    reduction_percent: f64,
}

/// Examples seen by the first evaluation row at or above the target.
fn examples_at_target(path: &Path, target: f64) -> Result<u64> {
    let rows = read_metrics(path)?;
    rows.iter()
        .find(|r| r.mlm_acc.is_some_and(|a| a >= target))
        .map(|r| r.examples_seen)
        .ok_or_else(|| {
            Error::data(format!(
                "{} never reaches mlm accuracy {target}",
                path.display()
            ))
        })
}

fn efficiency_report(
    baseline: &Path,
    candidate: &Path,
    target: f64,
    out: Option<&Path>,
) -> Result<()> {
    let base = examples_at_target(baseline, target)?;
    let cand = examples_at_target(candidate, target)?;
    let reduction = (base as f64 - cand as f64) / base as f64 * 100.0;
    println!(
        "target mlm accuracy {target}: baseline {base} examples, candidate {cand} examples, reduction {reduction:.2}%"
    );
    emit(
        &EfficiencyReport {
            target_accuracy: target,
            baseline_examples: base,
            candidate_examples: cand,
            reduction_percent: reduction,
        },
        out,
        "efficiency.json",
    )
}
