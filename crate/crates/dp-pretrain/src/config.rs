//! Run configuration: a flat key = value document with dotted sections,
//! strict parsing (every key required exactly once, unknown keys rejected),
//! embedded presets, and canonical snapshots that reparse identically.

use crate::data::{CorpusSpec, SamplingMode};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::optim::DpOptimizerConfig;
use crate::schedule::{BatchSchedule, LrSchedule};
use crate::tensor::Precision;
use std::collections::BTreeMap;
use std::fmt::Write as _;

/// Everything a run needs, fully resolved and validated as a whole.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub optim: DpOptimizerConfig,
    pub batch: BatchSchedule,
    pub lr_peak: f64,
    pub lr_warmup_steps: u64,
    /// Training population size n; the accountant's sampling rates are
    /// batch / n and the default privacy delta is 1/n.
    pub corpus_size: u64,
    pub corpus_concentration: f64,
    pub corpus_seed: u64,
    pub delta: f64,
    pub target_epsilon: f64,
    pub steps: u64,
    pub seed: u64,
    pub eval_every: u64,
    pub eval_examples: u64,
    pub checkpoint_every: u64,
    pub precision: Precision,
    pub sampling: SamplingMode,
}

/// Names accepted by `--config` in place of a file path.
pub const PRESET_NAMES: [&str; 2] = ["reference_preset", "desk_preset"];

/// Accounting-only reference configuration: the full-scale model and
/// schedule. Far too large to train here; pair it with --dry-run.
pub fn reference_preset() -> RunConfig {
    RunConfig {
        model: ModelConfig {
            vocab_size: 32_000,
            seq_len: 128,
            width: 1024,
            blocks: 24,
            heads: 16,
            ff_width: 4096,
            ln_eps: 1e-12,
            init_std: 0.02,
        },
        optim: DpOptimizerConfig {
            clip_norm: 3.2429e-3,
            noise_multiplier: 0.547556103157,
            beta1: 0.75,
            beta2: 0.9,
            weight_decay: 1.0,
            adam_eps: 1e-11,
        },
        batch: BatchSchedule::Fixed { size: 65_536 },
        lr_peak: 6.0902e-4,
        lr_warmup_steps: 7500,
        corpus_size: 346_000_000,
        corpus_concentration: 48.0,
        corpus_seed: 0,
        delta: 2.89e-9,
        target_epsilon: 5.36,
        steps: 20_000,
        seed: 0,
        eval_every: 50,
        eval_examples: 10_000,
        checkpoint_every: 1000,
        precision: Precision::F32,
        sampling: SamplingMode::Poisson,
    }
}

/// 1/1024-scaled configuration that trains in minutes on one core: the same
/// sampling rate and step structure at desk size.
pub fn desk_preset() -> RunConfig {
    RunConfig {
        model: ModelConfig::default(),
        optim: DpOptimizerConfig {
            clip_norm: 1.0,
            // Spends the 5.36 budget exactly over the 2000-step schedule.
            noise_multiplier: 0.46404498611057077,
            beta1: 0.75,
            beta2: 0.9,
            weight_decay: 1.0,
            adam_eps: 1e-11,
        },
        batch: BatchSchedule::Fixed { size: 64 },
        lr_peak: 5e-3,
        lr_warmup_steps: 750,
        corpus_size: 337_891,
        corpus_concentration: 2048.0,
        corpus_seed: 0,
        delta: 1.0 / 337_891.0,
        target_epsilon: 5.36,
        steps: 2000,
        seed: 0,
        eval_every: 50,
        eval_examples: 1024,
        checkpoint_every: 500,
        precision: Precision::F32,
        sampling: SamplingMode::Poisson,
    }
}

/// Look up an embedded preset by name.
pub fn preset(name: &str) -> Option<RunConfig> {
    match name {
        "reference_preset" => Some(reference_preset()),
        "desk_preset" => Some(desk_preset()),
        _ => None,
    }
}

fn fmt_f64(x: f64) -> String {
    // shortest representation that reparses to the same bits
    format!("{x:?}")
}

struct Parser {
    map: BTreeMap<String, String>,
}

impl Parser {
    fn from_text(text: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = match raw.find('#') {
                Some(i) => &raw[..i],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::config(
                    format!("line {}", lineno + 1),
                    format!("expected `key = value`, got {line:?}"),
                )
            })?;
            let key = key.trim().to_string();
            let value = value.trim().to_string();
            if map.insert(key.clone(), value).is_some() {
                return Err(Error::config(key, "key appears more than once"));
            }
        }
        Ok(Parser { map })
    }

    fn apply_overrides(&mut self, overrides: &[(String, String)]) {
        for (k, v) in overrides {
            self.map.insert(k.trim().to_string(), v.trim().to_string());
        }
    }

    fn take(&mut self, key: &str) -> Result<String> {
        self.map
            .remove(key)
            .ok_or_else(|| Error::config(key, "required key is missing"))
    }

    fn take_parsed<T: std::str::FromStr>(&mut self, key: &str) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        let raw = self.take(key)?;
        raw.parse::<T>().map_err(|e| Error::config(key, format!("cannot parse {raw:?}: {e}")))
    }

    fn finish(self) -> Result<()> {
        if let Some(key) = self.map.into_keys().next() {
            return Err(Error::config(key, "unknown key"));
        }
        Ok(())
    }
}

impl RunConfig {
    /// Parse a config document, apply `key=value` overrides, and validate.
    pub fn from_text(text: &str, overrides: &[(String, String)]) -> Result<RunConfig> {
        let mut p = Parser::from_text(text)?;
        p.apply_overrides(overrides);
        let model = ModelConfig {
            vocab_size: p.take_parsed("model.vocab_size")?,
            seq_len: p.take_parsed("model.seq_len")?,
            width: p.take_parsed("model.width")?,
            blocks: p.take_parsed("model.blocks")?,
            heads: p.take_parsed("model.heads")?,
            ff_width: p.take_parsed("model.ff_width")?,
            ln_eps: p.take_parsed("model.ln_eps")?,
            init_std: p.take_parsed("model.init_std")?,
        };
        let optim = DpOptimizerConfig {
            clip_norm: p.take_parsed("optim.clip_norm")?,
            noise_multiplier: p.take_parsed("optim.noise_multiplier")?,
            beta1: p.take_parsed("optim.beta1")?,
            beta2: p.take_parsed("optim.beta2")?,
            weight_decay: p.take_parsed("optim.weight_decay")?,
            adam_eps: p.take_parsed("optim.adam_eps")?,
        };
        let batch = match p.take("batch.kind")?.as_str() {
            "fixed" => BatchSchedule::Fixed { size: p.take_parsed("batch.size")? },
            "increasing" => BatchSchedule::Increasing {
                start: p.take_parsed("batch.start")?,
                end: p.take_parsed("batch.end")?,
                ramp_steps: p.take_parsed("batch.ramp_steps")?,
                stages: p.take_parsed("batch.stages")?,
            },
            other => {
                return Err(Error::config(
                    "batch.kind",
                    format!("unknown kind {other:?} (expected fixed or increasing)"),
                ));
            }
        };
        let lr_peak = p.take_parsed("lr.peak")?;
        let lr_warmup_steps = p.take_parsed("lr.warmup_steps")?;
        let corpus_size: u64 = p.take_parsed("corpus.size")?;
        let corpus_concentration = p.take_parsed("corpus.concentration")?;
        let corpus_seed = p.take_parsed("corpus.seed")?;
        let delta_raw = p.take("privacy.delta")?;
        let delta = if delta_raw == "auto" {
            if corpus_size == 0 {
                return Err(Error::config("privacy.delta", "auto requires corpus.size >= 1"));
            }
            1.0 / corpus_size as f64
        } else {
            delta_raw.parse::<f64>().map_err(|e| {
                Error::config("privacy.delta", format!("cannot parse {delta_raw:?}: {e}"))
            })?
        };
        let cfg = RunConfig {
            model,
            optim,
            batch,
            lr_peak,
            lr_warmup_steps,
            corpus_size,
            corpus_concentration,
            corpus_seed,
            delta,
            target_epsilon: p.take_parsed("privacy.target_epsilon")?,
            steps: p.take_parsed("train.steps")?,
            seed: p.take_parsed("train.seed")?,
            eval_every: p.take_parsed("train.eval_every")?,
            eval_examples: p.take_parsed("train.eval_examples")?,
            checkpoint_every: p.take_parsed("train.checkpoint_every")?,
            precision: p.take_parsed("train.precision")?,
            sampling: p.take_parsed("train.sampling")?,
        };
        p.finish()?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Canonical snapshot; `from_text` on the output reproduces `self`.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let m = &self.model;
        let _ = writeln!(s, "model.vocab_size = {}", m.vocab_size);
        let _ = writeln!(s, "model.seq_len = {}", m.seq_len);
        let _ = writeln!(s, "model.width = {}", m.width);
        let _ = writeln!(s, "model.blocks = {}", m.blocks);
        let _ = writeln!(s, "model.heads = {}", m.heads);
        let _ = writeln!(s, "model.ff_width = {}", m.ff_width);
        let _ = writeln!(s, "model.ln_eps = {}", fmt_f64(m.ln_eps));
        let _ = writeln!(s, "model.init_std = {}", fmt_f64(m.init_std));
        s.push('\n');
        let o = &self.optim;
        let _ = writeln!(s, "optim.clip_norm = {}", fmt_f64(o.clip_norm));
        let _ = writeln!(s, "optim.noise_multiplier = {}", fmt_f64(o.noise_multiplier));
        let _ = writeln!(s, "optim.beta1 = {}", fmt_f64(o.beta1));
        let _ = writeln!(s, "optim.beta2 = {}", fmt_f64(o.beta2));
        let _ = writeln!(s, "optim.weight_decay = {}", fmt_f64(o.weight_decay));
        let _ = writeln!(s, "optim.adam_eps = {}", fmt_f64(o.adam_eps));
        s.push('\n');
        match self.batch {
            BatchSchedule::Fixed { size } => {
                let _ = writeln!(s, "batch.kind = fixed");
                let _ = writeln!(s, "batch.size = {size}");
            }
            BatchSchedule::Increasing { start, end, ramp_steps, stages } => {
                let _ = writeln!(s, "batch.kind = increasing");
                let _ = writeln!(s, "batch.start = {start}");
                let _ = writeln!(s, "batch.end = {end}");
                let _ = writeln!(s, "batch.ramp_steps = {ramp_steps}");
                let _ = writeln!(s, "batch.stages = {stages}");
            }
        }
        s.push('\n');
        let _ = writeln!(s, "lr.peak = {}", fmt_f64(self.lr_peak));
        let _ = writeln!(s, "lr.warmup_steps = {}", self.lr_warmup_steps);
        s.push('\n');
        let _ = writeln!(s, "corpus.size = {}", self.corpus_size);
        let _ = writeln!(s, "corpus.concentration = {}", fmt_f64(self.corpus_concentration));
        let _ = writeln!(s, "corpus.seed = {}", self.corpus_seed);
        s.push('\n');
        let _ = writeln!(s, "privacy.delta = {}", fmt_f64(self.delta));
        let _ = writeln!(s, "privacy.target_epsilon = {}", fmt_f64(self.target_epsilon));
        s.push('\n');
        let _ = writeln!(s, "train.steps = {}", self.steps);
        let _ = writeln!(s, "train.seed = {}", self.seed);
        let _ = writeln!(s, "train.eval_every = {}", self.eval_every);
        let _ = writeln!(s, "train.eval_examples = {}", self.eval_examples);
        let _ = writeln!(s, "train.checkpoint_every = {}", self.checkpoint_every);
        let _ = writeln!(s, "train.precision = {}", self.precision.name());
        let _ = writeln!(s, "train.sampling = {}", self.sampling.name());
        s
    }

    /// Whole-config consistency check; the error names the offending key.
    pub fn validate(&self) -> Result<()> {
        self.model.validate().map_err(|e| Error::config("model", e.to_string()))?;
        self.optim.validate().map_err(|e| Error::config("optim", e.to_string()))?;
        self.batch.validate().map_err(|e| Error::config("batch", e.to_string()))?;
        if self.steps == 0 {
            return Err(Error::config("train.steps", "must be >= 1"));
        }
        self.lr_schedule().validate().map_err(|e| Error::config("lr", e.to_string()))?;
        if self.corpus_size == 0 {
            return Err(Error::config("corpus.size", "must be >= 1"));
        }
        // generation feasibility (table memory) is checked when a corpus is
        // actually built; here only value sanity
        if !(self.corpus_concentration > 0.0) || !self.corpus_concentration.is_finite() {
            return Err(Error::config(
                "corpus.concentration",
                format!("must be positive, got {}", self.corpus_concentration),
            ));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(Error::config(
                "privacy.delta",
                format!("must be in (0, 1), got {}", self.delta),
            ));
        }
        if !(self.target_epsilon > 0.0) || !self.target_epsilon.is_finite() {
            return Err(Error::config(
                "privacy.target_epsilon",
                format!("must be positive, got {}", self.target_epsilon),
            ));
        }
        if self.eval_every == 0 {
            return Err(Error::config("train.eval_every", "must be >= 1"));
        }
        if self.eval_examples == 0 {
            return Err(Error::config("train.eval_examples", "must be >= 1"));
        }
        if self.checkpoint_every == 0 {
            return Err(Error::config("train.checkpoint_every", "must be >= 1"));
        }
        // the schedule peaks at the final step; expected batches may never
        // exceed the population
        let peak_batch = self.batch.batch_size(self.steps);
        if peak_batch > self.corpus_size {
            return Err(Error::config(
                "batch",
                format!("batch size {peak_batch} exceeds corpus.size {}", self.corpus_size),
            ));
        }
        Ok(())
    }

    pub fn lr_schedule(&self) -> LrSchedule {
        LrSchedule {
            peak: self.lr_peak,
            warmup_steps: self.lr_warmup_steps,
            total_steps: self.steps,
        }
    }

    /// Corpus covering the training population plus the held-out slice.
    pub fn corpus_spec(&self) -> CorpusSpec {
        CorpusSpec {
            num_examples: (self.corpus_size + self.eval_examples) as usize,
            seq_len: self.model.seq_len,
            vocab_size: self.model.vocab_size,
            seed: self.corpus_seed,
            concentration: self.corpus_concentration,
        }
    }

    /// Accounting segments for the configured schedule at a given noise
    /// multiplier.
    pub fn segments(
        &self,
        noise_multiplier: f64,
    ) -> Result<Vec<crate::accountant::ScheduleSegment>> {
        self.batch.segments(self.steps, self.corpus_size, noise_multiplier)
    }
}
