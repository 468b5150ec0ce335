//! Append-only metrics log: one self-describing JSON record per line, with
//! strictly increasing steps, crash-tolerant appends, and a reader that
//! recovers every complete line from a truncated file.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

/// Prefix on the per-group weight-norm columns.
pub const WNORM_PREFIX: &str = "wnorm.";

/// One logged training step. Optional fields serialize as null when the
/// quantity is undefined at that step (no loss on an empty batch, accuracy
/// only on evaluation steps, no privacy spend or SNR without noise).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: u64,
    pub examples_seen: u64,
    pub loss: Option<f64>,
    pub mlm_acc: Option<f64>,
    pub lr: f64,
    pub batch_size: u64,
    pub eps_spent: Option<f64>,
    pub grad_snr: Option<f64>,
    /// Frobenius norms keyed `wnorm.<group>`, flattened into the record.
    #[serde(flatten)]
    pub weight_norms: BTreeMap<String, f64>,
}

impl MetricsRow {
    /// Install weight norms from an unprefixed group -> norm map.
    pub fn set_weight_norms(&mut self, norms: &BTreeMap<String, f64>) {
        self.weight_norms =
            norms.iter().map(|(k, v)| (format!("{WNORM_PREFIX}{k}"), *v)).collect();
    }

    fn validate(&self) -> Result<()> {
        for (name, value) in [
            ("loss", self.loss),
            ("mlm_acc", self.mlm_acc),
            ("eps_spent", self.eps_spent),
            ("grad_snr", self.grad_snr),
            ("lr", Some(self.lr)),
        ] {
            if let Some(v) = value {
                if !v.is_finite() {
                    return Err(Error::parameter(format!("{name} must be finite, got {v}")));
                }
            }
        }
        for (k, v) in &self.weight_norms {
            if !v.is_finite() {
                return Err(Error::parameter(format!("{k} must be finite, got {v}")));
            }
        }
        Ok(())
    }
}

/// Serialized writer for the metrics log. Each append is one full line
/// written in a single call and flushed, so a crash can only ever lose or
/// truncate the final line.
#[derive(Debug)]
pub struct MetricsSink {
    file: File,
    path: PathBuf,
    last_step: Option<u64>,
}

impl MetricsSink {
    /// Start a fresh log, truncating anything already at `path`.
    pub fn create(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let file = File::create(&path)?;
        Ok(MetricsSink { file, path, last_step: None })
    }

    /// Reopen an existing log for appending: truncate back to the last
    /// newline-terminated line, then continue from the last step on disk.
    pub fn resume(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let complete_len = {
            let mut f = File::open(&path)?;
            let mut bytes = Vec::new();
            f.read_to_end(&mut bytes)?;
            match bytes.iter().rposition(|&b| b == b'\n') {
                Some(i) => i as u64 + 1,
                None => 0,
            }
        };
        let mut file = OpenOptions::new().write(true).open(&path)?;
        file.set_len(complete_len)?;
        file.seek(SeekFrom::End(0))?;
        let last_step = read_metrics(&path)?.last().map(|r| r.step);
        Ok(MetricsSink { file, path, last_step })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn last_step(&self) -> Option<u64> {
        self.last_step
    }

    /// Append one row. Steps must strictly increase across the whole log.
    pub fn append(&mut self, row: &MetricsRow) -> Result<()> {
        row.validate()?;
        if let Some(last) = self.last_step {
            if row.step <= last {
                return Err(Error::contract(format!(
                    "metrics step {} does not follow last logged step {last}",
                    row.step
                )));
            }
        }
        let mut line = serde_json::to_string(row)?;
        line.push('\n');
        self.file.write_all(line.as_bytes())?;
        self.file.flush()?;
        self.last_step = Some(row.step);
        Ok(())
    }
}

/// Read every complete row of a log. A final line that was torn by a crash
/// (no newline, or incomplete JSON) is dropped; an unparsable line anywhere
/// else is data corruption and errors.
pub fn read_metrics(path: impl AsRef<Path>) -> Result<Vec<MetricsRow>> {
    let text = std::fs::read_to_string(path.as_ref())?;
    let lines: Vec<&str> = text.split('\n').filter(|l| !l.trim().is_empty()).collect();
    let mut rows = Vec::with_capacity(lines.len());
    for (i, line) in lines.iter().enumerate() {
        match serde_json::from_str::<MetricsRow>(line) {
            Ok(row) => rows.push(row),
            Err(_) if i + 1 == lines.len() => break,
            Err(e) => {
                return Err(Error::data(format!(
                    "metrics line {} is corrupt: {e}",
                    i + 1
                )));
            }
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn sample_row(step: u64) -> MetricsRow {
        let mut row = MetricsRow {
            step,
            examples_seen: step * 32,
            loss: Some(6.2 - step as f64 * 0.01),
            mlm_acc: if step.is_multiple_of(50) { Some(0.1) } else { None },
            lr: 1e-3,
            batch_size: 32,
            eps_spent: Some(0.5 + step as f64 * 1e-3),
            grad_snr: Some(1.5),
            weight_norms: BTreeMap::new(),
        };
        let mut norms = BTreeMap::new();
        norms.insert("embeddings_conjoint".to_string(), 3.25);
        norms.insert("mlm_head.weight".to_string(), 1.5);
        row.set_weight_norms(&norms);
        row
    }

    #[test]
    fn rows_round_trip_in_order() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("metrics.jsonl");
        let mut sink = MetricsSink::create(&path).unwrap();
        let rows: Vec<MetricsRow> = (1..=10_000).map(sample_row).collect();
        for row in &rows {
            sink.append(row).unwrap();
        }
        let back = read_metrics(&path).unwrap();
        assert_eq!(back, rows);
    }

    #[test]
    fn null_fields_and_prefixes_appear_in_the_record() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("metrics.jsonl");
        let mut sink = MetricsSink::create(&path).unwrap();
        let mut row = sample_row(1);
        row.loss = None;
        row.grad_snr = None;
        sink.append(&row).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.contains("\"loss\":null"), "{text}");
        assert!(text.contains("\"grad_snr\":null"), "{text}");
        assert!(text.contains("\"wnorm.embeddings_conjoint\":3.25"), "{text}");
        assert!(text.starts_with("{\"step\":1,\"examples_seen\":32,"), "{text}");
    }

    #[test]
    fn out_of_order_steps_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("metrics.jsonl");
        let mut sink = MetricsSink::create(&path).unwrap();
        sink.append(&sample_row(5)).unwrap();
        assert!(matches!(sink.append(&sample_row(5)), Err(Error::Contract(_))));
        assert!(matches!(sink.append(&sample_row(4)), Err(Error::Contract(_))));
        sink.append(&sample_row(6)).unwrap();
    }

    #[test]
    fn non_finite_values_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("metrics.jsonl");
        let mut sink = MetricsSink::create(&path).unwrap();
        let mut row = sample_row(1);
        row.loss = Some(f64::NAN);
        assert!(sink.append(&row).is_err());
        let mut row = sample_row(1);
        row.lr = f64::INFINITY;
        assert!(sink.append(&row).is_err());
    }

    #[test]
    fn truncation_at_any_byte_keeps_complete_lines() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("metrics.jsonl");
        let mut sink = MetricsSink::create(&path).unwrap();
        for step in 1..=50 {
            sink.append(&sample_row(step)).unwrap();
        }
        let full = std::fs::read(&path).unwrap();
        let newlines: Vec<usize> =
            full.iter().enumerate().filter(|(_, &b)| b == b'\n').map(|(i, _)| i).collect();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(99);
        let mut cuts: Vec<usize> = (0..40).map(|_| rng.random_range(1..full.len())).collect();
        cuts.push(full.len());
        cuts.push(newlines[0] + 1);
        cuts.push(newlines[10]);
        for cut in cuts {
            let torn = dir.path().join("torn.jsonl");
            std::fs::write(&torn, &full[..cut]).unwrap();
            let complete = newlines.iter().filter(|&&i| i < cut).count();
            // a cut that removes only the newline leaves a parseable tail,
            // which the reader rightly keeps
            let tail_start = if complete == 0 { 0 } else { newlines[complete - 1] + 1 };
            let tail_parses = cut > tail_start
                && serde_json::from_slice::<MetricsRow>(&full[tail_start..cut]).is_ok();
            let rows = read_metrics(&torn).unwrap();
            assert_eq!(rows.len(), complete + tail_parses as usize, "cut at byte {cut}");
            for (i, row) in rows.iter().enumerate() {
                assert_eq!(row, &sample_row(i as u64 + 1));
            }
        }
    }

    #[test]
    fn resume_recovers_and_extends_a_torn_log() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("metrics.jsonl");
        let mut sink = MetricsSink::create(&path).unwrap();
        for step in 1..=10 {
            sink.append(&sample_row(step)).unwrap();
        }
        drop(sink);
        // tear the file mid-way through the final line
        let full = std::fs::read(&path).unwrap();
        std::fs::write(&path, &full[..full.len() - 7]).unwrap();
        let mut sink = MetricsSink::resume(&path).unwrap();
        assert_eq!(sink.last_step(), Some(9));
        assert!(matches!(sink.append(&sample_row(9)), Err(Error::Contract(_))));
        sink.append(&sample_row(11)).unwrap();
        let rows = read_metrics(&path).unwrap();
        assert_eq!(rows.len(), 10);
        assert_eq!(rows[9].step, 11);
        assert_eq!(rows[..9], (1..=9).map(sample_row).collect::<Vec<_>>()[..]);
    }

    #[test]
    fn mid_file_corruption_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("metrics.jsonl");
        let mut sink = MetricsSink::create(&path).unwrap();
        for step in 1..=3 {
            sink.append(&sample_row(step)).unwrap();
        }
        let text = std::fs::read_to_string(&path).unwrap();
        let mangled = text.replacen("\"examples_seen\"", "\"examples_SEEN\"", 1);
        std::fs::write(&path, mangled).unwrap();
        assert!(matches!(read_metrics(&path), Err(Error::Data(_))));
    }
}
