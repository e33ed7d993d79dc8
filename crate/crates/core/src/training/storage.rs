//! On-disk trajectory logs.
//!
//! A log directory holds
//!
//! - `manifest.json`: format version, model spec, schedule, batch plan, seed,
//!   dataset fingerprint, `K`, `p` and the hex SHA-256 of `states.bin`;
//! - `states.bin`: little-endian `f64` values `θ_0, v_0, …, θ_K, v_K`;
//! - `steps.csv`: one row `k,lr,loss,grad_norm` per update.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{BatchPlan, HyperSchedule, State, StepRecord, TrajectoryLog};
use crate::error::{Error, Result};
use crate::model::{ModelSpec, ParameterVector};

pub const FORMAT_VERSION: u32 = 1;

pub(crate) const MANIFEST: &str = "manifest.json";
pub(crate) const STATES: &str = "states.bin";
pub(crate) const STEPS: &str = "steps.csv";

#[derive(Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    model_spec: ModelSpec,
    schedule: HyperSchedule,
    batches: BatchPlan,
    seed: u64,
    dataset_fingerprint: String,
    #[serde(rename = "K")]
    k: usize,
    p: usize,
    states_sha256: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    skipped_steps: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    skipped_stage: Option<usize>,
}

#[derive(Serialize, Deserialize)]
struct StepRow {
    k: usize,
    lr: f64,
    loss: f64,
    grad_norm: f64,
}

/// Writes `log` into directory `dir`, creating it if needed.
pub fn save_log(log: &TrajectoryLog, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;

    let bytes = log.states_bytes();
    let states_path = dir.join(STATES);
    fs::write(&states_path, &bytes).map_err(|e| Error::io(&states_path, e))?;

    let steps_path = dir.join(STEPS);
    let mut w = csv::Writer::from_path(&steps_path).map_err(|e| Error::malformed(&steps_path, e))?;
    for s in &log.steps {
        w.serialize(StepRow {
            k: s.k,
            lr: s.lr,
            loss: s.loss,
            grad_norm: s.grad_norm,
        })
        .map_err(|e| Error::malformed(&steps_path, e))?;
    }
    w.flush().map_err(|e| Error::io(&steps_path, e))?;

    let manifest = Manifest {
        format_version: log.format_version,
        model_spec: log.model_spec.clone(),
        schedule: log.schedule.clone(),
        batches: log.batches.clone(),
        seed: log.seed,
        dataset_fingerprint: format!("{:016x}", log.dataset_fingerprint),
        k: log.num_steps(),
        p: log.param_count(),
        states_sha256: hex::encode(Sha256::digest(&bytes)),
        skipped_steps: log.skipped_steps.clone(),
        skipped_stage: log.skipped_stage,
    };
    let manifest_path = dir.join(MANIFEST);
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&manifest_path, json).map_err(|e| Error::io(&manifest_path, e))
}

/// Reads and integrity-checks a log directory written by [`save_log`].
pub fn load_log(dir: impl AsRef<Path>) -> Result<TrajectoryLog> {
    let dir = dir.as_ref();
    let manifest_path = dir.join(MANIFEST);
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let raw: serde_json::Value = serde_json::from_str(&text).map_err(|e| Error::malformed(&manifest_path, e))?;
    let version = raw
        .get("format_version")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| Error::malformed(&manifest_path, "missing format_version"))?;
    if version != u64::from(FORMAT_VERSION) {
        return Err(Error::UnsupportedVersion {
            found: u32::try_from(version).unwrap_or(u32::MAX),
            supported: FORMAT_VERSION,
        });
    }
    let m: Manifest = serde_json::from_value(raw).map_err(|e| Error::malformed(&manifest_path, e))?;
    m.model_spec.validate()?;
    m.schedule.validate()?;
    let p = m.model_spec.param_count();
    if m.p != p || m.schedule.len() != m.k || m.batches.len() != m.k {
        return Err(Error::malformed(&manifest_path, "K/p disagree with the spec, schedule or batch plan"));
    }
    let fingerprint = u64::from_str_radix(&m.dataset_fingerprint, 16)
        .map_err(|e| Error::malformed(&manifest_path, format!("dataset_fingerprint: {e}")))?;

    let states_path = dir.join(STATES);
    let bytes = fs::read(&states_path).map_err(|e| Error::io(&states_path, e))?;
    let expected = ((m.k + 1) * 2 * p * 8) as u64;
    let actual = bytes.len() as u64;
    if actual < expected {
        return Err(Error::Truncated {
            path: states_path,
            expected,
            actual,
        });
    }
    if actual > expected {
        return Err(Error::malformed(&states_path, format!("{actual} bytes, expected {expected}")));
    }
    let digest = hex::encode(Sha256::digest(&bytes));
    if digest != m.states_sha256 {
        return Err(Error::ChecksumMismatch {
            path: states_path,
            expected: m.states_sha256,
            actual: digest,
        });
    }
    let states = bytes
        .chunks_exact(2 * p * 8)
        .map(|c| {
            Ok(State {
                theta: ParameterVector::from_le_bytes(&c[..p * 8])?,
                velocity: ParameterVector::from_le_bytes(&c[p * 8..])?,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let steps_path = dir.join(STEPS);
    let mut r = csv::Reader::from_path(&steps_path).map_err(|e| Error::malformed(&steps_path, e))?;
    let mut steps = Vec::with_capacity(m.k);
    for (i, row) in r.deserialize::<StepRow>().enumerate() {
        let row = row.map_err(|e| Error::malformed(&steps_path, e))?;
        if row.k != i || i >= m.k || row.lr.to_bits() != m.schedule.lr[i].to_bits() {
            return Err(Error::malformed(&steps_path, format!("row {i} disagrees with the manifest")));
        }
        steps.push(StepRecord {
            k: i,
            batch_indices: m.batches.batch(i).to_vec(),
            lr: row.lr,
            loss: row.loss,
            grad_norm: row.grad_norm,
        });
    }
    if steps.len() != m.k {
        return Err(Error::malformed(&steps_path, format!("{} rows, expected {}", steps.len(), m.k)));
    }

    Ok(TrajectoryLog {
        format_version: m.format_version,
        model_spec: m.model_spec,
        dataset_fingerprint: fingerprint,
        schedule: m.schedule,
        batches: m.batches,
        states,
        steps,
        seed: m.seed,
        skipped_steps: m.skipped_steps,
        skipped_stage: m.skipped_stage,
    })
}
