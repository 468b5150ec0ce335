//! Binary checkpoints: a JSON manifest describing tensor layout and training
//! position, followed by a payload of concatenated little-endian IEEE-754
//! values. Save and load round-trip parameters and optimizer state
//! bit-for-bit.

use crate::error::{Error, Result};
use crate::model::ParameterSet;
use crate::optim::OptimizerState;
use crate::tensor::{Element, Precision, Tensor, TensorMap};
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Leading bytes of every checkpoint file.
pub const MAGIC: &[u8; 8] = b"DPCKPT\x00\x01";
/// Manifest schema version this build reads and writes.
pub const FORMAT_VERSION: u32 = 1;

/// Training position stored alongside the tensors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    /// Steps of the schedule completed (including any skipped empty batches).
    pub step: u64,
    /// Optimizer updates applied; trails `step` when batches came up empty.
    pub optimizer_steps: u64,
    pub examples_seen: u64,
    /// Master seed; with `step` this pins every random stream.
    pub seed: u64,
    /// Privacy spent so far; None for non-private runs.
    pub eps_spent: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Entry {
    section: String,
    name: String,
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    version: u32,
    precision: Precision,
    step: u64,
    optimizer_steps: u64,
    examples_seen: u64,
    seed: u64,
    eps_spent: Option<f64>,
    payload_bytes: u64,
    entries: Vec<Entry>,
}

fn span<E: Element>(shape: &[usize]) -> u64 {
    shape.iter().product::<usize>() as u64 * E::BYTE_WIDTH as u64
}

/// Write parameters and optimizer state to `path`.
pub fn save_checkpoint<E: Element>(
    path: impl AsRef<Path>,
    meta: &CheckpointMeta,
    params: &ParameterSet<E>,
    opt: &OptimizerState<E>,
) -> Result<()> {
    let (m, v) = opt.moments();
    params.same_layout(m)?;
    params.same_layout(v)?;
    if opt.step() != meta.optimizer_steps {
        return Err(Error::contract(format!(
            "optimizer reports {} steps but the manifest says {}",
            opt.step(),
            meta.optimizer_steps
        )));
    }
    let sections: [(&str, &TensorMap<E>); 3] = [("params", params), ("adam_m", m), ("adam_v", v)];
    let mut entries = Vec::new();
    let mut offset = 0u64;
    for (section, map) in sections {
        for (name, t) in map.iter() {
            entries.push(Entry {
                section: section.to_string(),
                name: name.to_string(),
                shape: t.shape().to_vec(),
                offset,
            });
            offset += span::<E>(t.shape());
        }
    }
    let manifest = Manifest {
        version: FORMAT_VERSION,
        precision: E::PRECISION,
        step: meta.step,
        optimizer_steps: meta.optimizer_steps,
        examples_seen: meta.examples_seen,
        seed: meta.seed,
        eps_spent: meta.eps_spent,
        payload_bytes: offset,
        entries,
    };
    let manifest_json = serde_json::to_vec(&manifest)?;
    let mut out =
        Vec::with_capacity(MAGIC.len() + 8 + manifest_json.len() + offset as usize);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(manifest_json.len() as u64).to_le_bytes());
    out.extend_from_slice(&manifest_json);
    for (_, map) in sections {
        for (_, t) in map.iter() {
            for &x in t.data() {
                x.write_le(&mut out);
            }
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Read a checkpoint back. Fails with a named defect on version or precision
/// mismatch, truncation, or entries that do not tile the payload exactly.
pub fn load_checkpoint<E: Element>(
    path: impl AsRef<Path>,
) -> Result<(CheckpointMeta, ParameterSet<E>, OptimizerState<E>)> {
    let bytes = std::fs::read(path.as_ref())?;
    if bytes.len() < MAGIC.len() + 8 {
        return Err(Error::checkpoint("file too short for the header"));
    }
    if &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::checkpoint("bad magic; not a checkpoint file"));
    }
    let mlen =
        u64::from_le_bytes(bytes[MAGIC.len()..MAGIC.len() + 8].try_into().unwrap()) as usize;
    let manifest_start = MAGIC.len() + 8;
    let payload_start = manifest_start.checked_add(mlen).ok_or_else(|| {
        Error::checkpoint("manifest length overflows")
    })?;
    if bytes.len() < payload_start {
        return Err(Error::checkpoint("truncated inside the manifest"));
    }
    let manifest: Manifest = serde_json::from_slice(&bytes[manifest_start..payload_start])
        .map_err(|e| Error::checkpoint(format!("manifest does not parse: {e}")))?;
    if manifest.version != FORMAT_VERSION {
        return Err(Error::checkpoint(format!(
            "format version {} unsupported; this build reads {FORMAT_VERSION}",
            manifest.version
        )));
    }
    if manifest.precision != E::PRECISION {
        return Err(Error::checkpoint(format!(
            "precision {} does not match the requested {}",
            manifest.precision.name(),
            E::PRECISION.name()
        )));
    }
    let payload = &bytes[payload_start..];
    if (payload.len() as u64) < manifest.payload_bytes {
        return Err(Error::checkpoint(format!(
            "payload truncated: {} bytes on disk, manifest claims {}",
            payload.len(),
            manifest.payload_bytes
        )));
    }
    if payload.len() as u64 > manifest.payload_bytes {
        return Err(Error::checkpoint(format!(
            "trailing bytes: {} on disk, manifest claims {}",
            payload.len(),
            manifest.payload_bytes
        )));
    }
    let mut expected_offset = 0u64;
    for e in &manifest.entries {
        if e.offset != expected_offset {
            return Err(Error::checkpoint(format!(
                "entry {}/{} at offset {} does not tile the payload (expected {})",
                e.section, e.name, e.offset, expected_offset
            )));
        }
        expected_offset = expected_offset
            .checked_add(span::<E>(&e.shape))
            .ok_or_else(|| Error::checkpoint("entry spans overflow"))?;
    }
    if expected_offset != manifest.payload_bytes {
        return Err(Error::checkpoint(format!(
            "entries cover {expected_offset} bytes but the payload holds {}",
            manifest.payload_bytes
        )));
    }
    let mut sections: [TensorMap<E>; 3] = [TensorMap::new(), TensorMap::new(), TensorMap::new()];
    for e in &manifest.entries {
        let idx = match e.section.as_str() {
            "params" => 0,
            "adam_m" => 1,
            "adam_v" => 2,
            other => {
                return Err(Error::checkpoint(format!("unknown section {other:?}")));
            }
        };
        let count: usize = e.shape.iter().product();
        let start = e.offset as usize;
        let data: Vec<E> = (0..count)
            .map(|i| E::read_le(&payload[start + i * E::BYTE_WIDTH..]))
            .collect();
        let t = Tensor::from_vec(&e.shape, data)?;
        sections[idx].insert(&e.name, t)?;
    }
    let [params, m, v] = sections;
    params.same_layout(&m).map_err(|_| {
        Error::checkpoint("first-moment section does not mirror the parameters")
    })?;
    params.same_layout(&v).map_err(|_| {
        Error::checkpoint("second-moment section does not mirror the parameters")
    })?;
    let meta = CheckpointMeta {
        step: manifest.step,
        optimizer_steps: manifest.optimizer_steps,
        examples_seen: manifest.examples_seen,
        seed: manifest.seed,
        eps_spent: manifest.eps_spent,
    };
    let opt = OptimizerState::from_parts(manifest.optimizer_steps, m, v)?;
    Ok((meta, params, opt))
}
