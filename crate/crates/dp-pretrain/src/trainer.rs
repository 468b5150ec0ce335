//! Training orchestration: per-example gradients clipped into a private sum,
//! DP-Adam updates, per-step privacy spend, metrics, checkpoints, and
//! bit-exact resume.

use crate::accountant::{default_orders, SpendTracker};
use crate::checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta};
use crate::config::RunConfig;
use crate::data::{apply_masking, sample_batch, Corpus, MaskedExample, SamplingMode};
use crate::error::{Error, Result};
use crate::instrument::weight_norm_report;
use crate::metrics::{read_metrics, MetricsRow, MetricsSink};
use crate::model::{evaluate, init_parameters, per_example_gradient, EvalStats, ParameterSet};
use crate::optim::{ClippedAccumulator, OptimizerState};
use crate::rng::{Purpose, RngStream};
use crate::tensor::Element;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

/// Fraction of each sequence hidden behind MASK during training and eval.
pub const MASK_RATE: f64 = 0.15;

/// Resolved-config snapshot filename inside a run directory.
pub const CONFIG_SNAPSHOT: &str = "config.txt";
/// Metrics log filename inside a run directory.
pub const METRICS_LOG: &str = "metrics.jsonl";
/// Final report filename inside a run directory.
pub const FINAL_REPORT: &str = "report.json";

/// What a finished run hands back (also written to `report.json`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub steps: u64,
    pub examples_seen: u64,
    pub final_loss: f64,
    pub final_accuracy: f64,
    /// None when the noise multiplier is zero (nothing to account).
    pub epsilon_spent: Option<f64>,
    pub optimal_order: Option<u64>,
    pub delta: f64,
    /// False means the spend was computed under the Poisson assumption for a
    /// fixed-size sampler and is approximate.
    pub poisson_sampling: bool,
    pub config_path: String,
    pub metrics_path: String,
    pub checkpoint_path: String,
}

fn checkpoint_name(step: u64) -> String {
    format!("checkpoint-{step:08}.ckpt")
}

/// Highest-step checkpoint in a run directory, if any.
pub fn latest_checkpoint(dir: &Path) -> Result<Option<(u64, PathBuf)>> {
    let mut best: Option<(u64, PathBuf)> = None;
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        let Some(name) = path.file_name().and_then(|n| n.to_str()) else { continue };
        let Some(step) = name
            .strip_prefix("checkpoint-")
            .and_then(|s| s.strip_suffix(".ckpt"))
            .and_then(|s| s.parse::<u64>().ok())
        else {
            continue;
        };
        if best.as_ref().is_none_or(|(b, _)| step > *b) {
            best = Some((step, path));
        }
    }
    Ok(best)
}

/// Drop metrics rows past `step` so an interrupted run can resume cleanly
/// from its last checkpoint.
fn trim_metrics(path: &Path, step: u64) -> Result<()> {
    let rows = read_metrics(path)?;
    if rows.last().is_some_and(|r| r.step <= step) {
        return Ok(());
    }
    let mut sink = MetricsSink::create(path)?;
    for row in rows.into_iter().filter(|r| r.step <= step) {
        sink.append(&row)?;
    }
    Ok(())
}

struct RunState<E: Element> {
    start_step: u64,
    params: ParameterSet<E>,
    opt: OptimizerState<E>,
    examples_seen: u64,
    sink: MetricsSink,
    tracker: Option<SpendTracker>,
    last_checkpoint: Option<PathBuf>,
}

fn fresh_state<E: Element>(cfg: &RunConfig, out_dir: &Path) -> Result<RunState<E>> {
    let metrics_path = out_dir.join(METRICS_LOG);
    if metrics_path.exists() {
        return Err(Error::config(
            "out",
            format!(
                "{} already exists; pass --resume or choose a new directory",
                metrics_path.display()
            ),
        ));
    }
    std::fs::write(out_dir.join(CONFIG_SNAPSHOT), cfg.to_text())?;
    let params = init_parameters::<E>(&cfg.model, cfg.seed)?;
    let opt = OptimizerState::new(&params);
    let tracker = if cfg.optim.noise_multiplier > 0.0 {
        Some(SpendTracker::new(cfg.delta, &default_orders())?)
    } else {
        None
    };
    Ok(RunState {
        start_step: 0,
        params,
        opt,
        examples_seen: 0,
        sink: MetricsSink::create(&metrics_path)?,
        tracker,
        last_checkpoint: None,
    })
}

fn resumed_state<E: Element>(cfg: &RunConfig, out_dir: &Path) -> Result<RunState<E>> {
    let snapshot_path = out_dir.join(CONFIG_SNAPSHOT);
    let prior = std::fs::read_to_string(&snapshot_path).map_err(|e| {
        Error::config("out", format!("cannot read {}: {e}", snapshot_path.display()))
    })?;
    if prior != cfg.to_text() {
        return Err(Error::config(
            "out",
            "resolved config differs from the run directory's snapshot",
        ));
    }
    let (step, ckpt_path) = latest_checkpoint(out_dir)?.ok_or_else(|| {
        Error::config("out", format!("no checkpoint found in {}", out_dir.display()))
    })?;
    let (meta, params, opt) = load_checkpoint::<E>(&ckpt_path)?;
    if meta.step != step {
        return Err(Error::checkpoint(format!(
            "{} carries step {} in its manifest",
            ckpt_path.display(),
            meta.step
        )));
    }
    if meta.seed != cfg.seed {
        return Err(Error::config(
            "train.seed",
            format!("checkpoint was written with seed {}", meta.seed),
        ));
    }
    if meta.step > cfg.steps {
        return Err(Error::config(
            "train.steps",
            format!("checkpoint is at step {} but the run ends at {}", meta.step, cfg.steps),
        ));
    }
    // replay the accountant up to the checkpoint; the spend sequence is
    // deterministic, so the stored value must be reproduced exactly
    let tracker = if cfg.optim.noise_multiplier > 0.0 {
        let mut tr = SpendTracker::new(cfg.delta, &default_orders())?;
        let n = cfg.corpus_size as f64;
        for t in 1..=meta.step {
            tr.record_step(cfg.batch.batch_size(t) as f64 / n, cfg.optim.noise_multiplier)?;
        }
        let replayed = if meta.step > 0 { Some(tr.epsilon()?.0) } else { None };
        if replayed != meta.eps_spent {
            return Err(Error::contract(format!(
                "replayed privacy spend {replayed:?} does not match the checkpoint's {:?}",
                meta.eps_spent
            )));
        }
        Some(tr)
    } else {
        None
    };
    let metrics_path = out_dir.join(METRICS_LOG);
    trim_metrics(&metrics_path, meta.step)?;
    let sink = MetricsSink::resume(&metrics_path)?;
    Ok(RunState {
        start_step: meta.step,
        params,
        opt,
        examples_seen: meta.examples_seen,
        sink,
        tracker,
        last_checkpoint: Some(ckpt_path),
    })
}

/// Run (or resume) training to `cfg.steps`, writing the config snapshot,
/// per-step metrics, cadenced checkpoints, and the final report into
/// `out_dir`. A non-finite loss aborts with the last checkpoint retained.
pub fn run_training<E: Element>(
    cfg: &RunConfig,
    out_dir: &Path,
    resume: bool,
) -> Result<TrainReport> {
    run_training_until::<E>(cfg, out_dir, resume, None, None).map(|r| {
        r.expect("a run without a stop point always produces a report")
    })
}

/// Observer invoked at eval cadence with (step, eval stats, ε spent so far).
pub type Progress<'a> = &'a mut dyn FnMut(u64, &EvalStats, Option<f64>);

/// Like [`run_training`], but optionally pause after `stop_after` steps: a
/// checkpoint is forced there and no final report is produced (`Ok(None)`).
/// The paused run is picked up later with `resume`. The learning-rate and
/// batch schedules still span the full `cfg.steps`, so pausing never changes
/// the trajectory.
pub fn run_training_until<E: Element>(
    cfg: &RunConfig,
    out_dir: &Path,
    resume: bool,
    stop_after: Option<u64>,
    mut progress: Option<Progress<'_>>,
) -> Result<Option<TrainReport>> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir)?;
    let mut state = if resume {
        resumed_state::<E>(cfg, out_dir)?
    } else {
        fresh_state::<E>(cfg, out_dir)?
    };

    let corpus = Corpus::generate(&cfg.corpus_spec())?;
    let n = cfg.corpus_size as usize;
    let stream = RngStream::new(cfg.seed);
    // the held-out slice sits past the training population and its masks are
    // fixed for the whole run
    let eval_set: Vec<MaskedExample> = (n..n + cfg.eval_examples as usize)
        .map(|i| apply_masking(corpus.sequence(i), MASK_RATE, stream.key(0, i as u64, Purpose::EvalMask)))
        .collect::<Result<_>>()?;

    let lr_schedule = cfg.lr_schedule();
    let sigma = cfg.optim.noise_multiplier;
    let mut last_eval: Option<EvalStats> = None;
    let end = stop_after.unwrap_or(cfg.steps).min(cfg.steps);

    for t in state.start_step + 1..=end {
        let expected = cfg.batch.batch_size(t);
        let batch = sample_batch(n, expected, cfg.sampling, stream.key(t, 0, Purpose::Batch))?;
        state.examples_seen += batch.len() as u64;

        let mut acc = ClippedAccumulator::new(&state.params, cfg.optim.clip_norm)?;
        let mut loss_sum = 0.0;
        for &i in &batch {
            let ex =
                apply_masking(corpus.sequence(i), MASK_RATE, stream.key(t, i as u64, Purpose::Mask))?;
            let (grad, out) =
                per_example_gradient(&state.params, &cfg.model, &ex).map_err(|e| {
                    abort_error(e, t, state.last_checkpoint.as_deref())
                })?;
            acc.absorb(&grad)?;
            loss_sum += out.loss;
        }

        // an empty draw still counts as a sampling round for the accountant,
        // but performs no update
        let (loss, grad_snr) = if batch.is_empty() {
            (None, None)
        } else {
            let (noisy, snr) = acc.privatize(sigma, stream.key(t, 0, Purpose::Noise))?;
            state.opt.adam_step(&mut state.params, &noisy, &cfg.optim, lr_schedule.lr(t))?;
            (Some(loss_sum / batch.len() as f64), snr.ratio())
        };

        if let Some(tr) = state.tracker.as_mut() {
            tr.record_step(expected as f64 / n as f64, sigma)?;
        }
        let eps_spent = match state.tracker.as_ref() {
            Some(tr) => Some(tr.epsilon()?.0),
            None => None,
        };

        let mlm_acc = if t.is_multiple_of(cfg.eval_every) || t == cfg.steps {
            let stats = evaluate(&state.params, &cfg.model, &eval_set)?;
            last_eval = Some(stats);
            if let Some(p) = progress.as_mut() {
                p(t, &stats, eps_spent);
            }
            Some(stats.accuracy)
        } else {
            None
        };

        let mut row = MetricsRow {
            step: t,
            examples_seen: state.examples_seen,
            loss,
            mlm_acc,
            lr: lr_schedule.lr(t),
            batch_size: batch.len() as u64,
            eps_spent,
            grad_snr,
            weight_norms: Default::default(),
        };
        row.set_weight_norms(&weight_norm_report(&state.params));
        state.sink.append(&row)?;

        if t.is_multiple_of(cfg.checkpoint_every) || t == cfg.steps || t == end {
            let meta = CheckpointMeta {
                step: t,
                optimizer_steps: state.opt.step(),
                examples_seen: state.examples_seen,
                seed: cfg.seed,
                eps_spent,
            };
            let path = out_dir.join(checkpoint_name(t));
            save_checkpoint(&path, &meta, &state.params, &state.opt)?;
            state.last_checkpoint = Some(path);
        }
    }

    if end < cfg.steps {
        return Ok(None);
    }

    // resuming a finished run re-derives the report without training
    let final_stats = match last_eval {
        Some(stats) => stats,
        None => evaluate(&state.params, &cfg.model, &eval_set)?,
    };
    let (epsilon_spent, optimal_order) = match state.tracker.as_ref() {
        Some(tr) => {
            let (eps, order) = tr.epsilon()?;
            (Some(eps), Some(order))
        }
        None => (None, None),
    };
    let checkpoint_path = state.last_checkpoint.ok_or_else(|| {
        Error::contract("run finished without writing any checkpoint")
    })?;
    let report = TrainReport {
        steps: cfg.steps,
        examples_seen: state.examples_seen,
        final_loss: final_stats.mean_loss,
        final_accuracy: final_stats.accuracy,
        epsilon_spent,
        optimal_order,
        delta: cfg.delta,
        poisson_sampling: cfg.sampling == SamplingMode::Poisson,
        config_path: out_dir.join(CONFIG_SNAPSHOT).display().to_string(),
        metrics_path: out_dir.join(METRICS_LOG).display().to_string(),
        checkpoint_path: checkpoint_path.display().to_string(),
    };
    let mut line = serde_json::to_string(&report)?;
    line.push('\n');
    std::fs::write(out_dir.join(FINAL_REPORT), line)?;
    Ok(Some(report))
}

fn abort_error(e: Error, step: u64, last_checkpoint: Option<&Path>) -> Error {
    if matches!(e, Error::NonFinite(_)) {
        let retained = match last_checkpoint {
            Some(p) => format!("last good checkpoint retained at {}", p.display()),
            None => "no checkpoint had been written yet".to_string(),
        };
        Error::NonFinite(format!("aborted at step {step}: {e}; {retained}"))
    } else {
        e
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::desk_preset;
    use crate::schedule::BatchSchedule;

    /// Tiny config that trains in well under a second.
    fn tiny_config() -> RunConfig {
        let mut cfg = desk_preset();
        cfg.model.vocab_size = 32;
        cfg.model.seq_len = 16;
        cfg.model.width = 16;
        cfg.model.blocks = 1;
        cfg.model.heads = 2;
        cfg.model.ff_width = 32;
        cfg.batch = BatchSchedule::Fixed { size: 4 };
        cfg.corpus_size = 64;
        cfg.delta = 1.0 / 64.0;
        cfg.steps = 6;
        cfg.lr_warmup_steps = 2;
        cfg.eval_every = 3;
        cfg.eval_examples = 8;
        cfg.checkpoint_every = 3;
        cfg.validate().unwrap();
        cfg
    }

    #[test]
    fn run_directory_is_fully_populated() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_config();
        let report = run_training::<f64>(&cfg, dir.path(), false).unwrap();
        assert!(dir.path().join(CONFIG_SNAPSHOT).exists());
        assert!(dir.path().join(METRICS_LOG).exists());
        assert!(dir.path().join(FINAL_REPORT).exists());
        assert!(PathBuf::from(&report.checkpoint_path).exists());
        let rows = read_metrics(dir.path().join(METRICS_LOG)).unwrap();
        assert_eq!(rows.len(), cfg.steps as usize);
        assert_eq!(rows.last().unwrap().step, cfg.steps);
        assert!(report.epsilon_spent.unwrap() > 0.0);
        assert_eq!(report.examples_seen, rows.last().unwrap().examples_seen);
        // the report is one structured line
        let text = std::fs::read_to_string(dir.path().join(FINAL_REPORT)).unwrap();
        let back: TrainReport = serde_json::from_str(text.trim_end()).unwrap();
        assert_eq!(back, report);
    }

    #[test]
    fn single_step_run_writes_one_row_with_single_step_spend() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_config();
        cfg.steps = 1;
        cfg.lr_warmup_steps = 0;
        let report = run_training::<f64>(&cfg, dir.path(), false).unwrap();
        let rows = read_metrics(dir.path().join(METRICS_LOG)).unwrap();
        assert_eq!(rows.len(), 1);
        let mut tracker = SpendTracker::new(cfg.delta, &default_orders()).unwrap();
        tracker
            .record_step(4.0 / 64.0, cfg.optim.noise_multiplier)
            .unwrap();
        let (eps, _) = tracker.epsilon().unwrap();
        assert_eq!(report.epsilon_spent.unwrap(), eps);
    }

    #[test]
    fn resume_matches_straight_run_bit_for_bit() {
        let straight = tempfile::tempdir().unwrap();
        let split = tempfile::tempdir().unwrap();
        let cfg = tiny_config();
        let full = run_training::<f64>(&cfg, straight.path(), false).unwrap();

        // pause at a step that is not on the checkpoint cadence
        let paused =
            run_training_until::<f64>(&cfg, split.path(), false, Some(4), None).unwrap();
        assert!(paused.is_none());
        let resumed = run_training::<f64>(&cfg, split.path(), true).unwrap();

        assert_eq!(resumed.final_accuracy, full.final_accuracy);
        assert_eq!(resumed.epsilon_spent, full.epsilon_spent);
        assert_eq!(resumed.examples_seen, full.examples_seen);
        let a = std::fs::read(straight.path().join(METRICS_LOG)).unwrap();
        let b = std::fs::read(split.path().join(METRICS_LOG)).unwrap();
        assert_eq!(
            String::from_utf8(a).unwrap(),
            String::from_utf8(b).unwrap()
        );
    }

    #[test]
    fn fresh_run_refuses_an_occupied_directory() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_config();
        run_training::<f64>(&cfg, dir.path(), false).unwrap();
        let err = run_training::<f64>(&cfg, dir.path(), false).unwrap_err();
        assert!(matches!(err, Error::Config { .. }), "{err:?}");
    }

    #[test]
    fn resume_rejects_a_changed_config() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_config();
        run_training::<f64>(&cfg, dir.path(), false).unwrap();
        let mut changed = cfg.clone();
        changed.lr_peak *= 2.0;
        let err = run_training::<f64>(&changed, dir.path(), true).unwrap_err();
        assert!(matches!(err, Error::Config { .. }), "{err:?}");
    }

    #[test]
    fn zero_noise_runs_without_accounting() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_config();
        cfg.optim.noise_multiplier = 0.0;
        let report = run_training::<f64>(&cfg, dir.path(), false).unwrap();
        assert_eq!(report.epsilon_spent, None);
        let rows = read_metrics(dir.path().join(METRICS_LOG)).unwrap();
        assert!(rows.iter().all(|r| r.eps_spent.is_none()));
    }

    #[test]
    fn trim_metrics_drops_rows_past_the_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(METRICS_LOG);
        let mut sink = MetricsSink::create(&path).unwrap();
        for t in 1..=5 {
            let row = MetricsRow {
                step: t,
                examples_seen: t,
                loss: Some(1.0),
                mlm_acc: None,
                lr: 0.1,
                batch_size: 1,
                eps_spent: None,
                grad_snr: None,
                weight_norms: Default::default(),
            };
            sink.append(&row).unwrap();
        }
        drop(sink);
        trim_metrics(&path, 3).unwrap();
        let rows = read_metrics(&path).unwrap();
        assert_eq!(rows.len(), 3);
        assert_eq!(rows.last().unwrap().step, 3);
    }
}
