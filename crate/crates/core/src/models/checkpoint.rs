//! Checkpoint files: one JSON header line followed by little-endian `f64`
//! blocks (parameters in flattening order, then optional Adam moments).

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Arch, ModelParams};
use crate::error::{Error, Result};
use crate::io::{f64_from_le_bytes, f64_le_bytes, sha256_hex, write_atomic};
use crate::scalar::Real;

const FORMAT: &str = "ntk-features-checkpoint/1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format: String,
    pub arch: Arch,
    pub shapes: Vec<Vec<usize>>,
    pub epoch: usize,
    pub seed: u64,
    /// Hash of the generator state the run was initialised from.
    pub rng_state_hash: String,
    /// Adam step count when moments are stored.
    pub optimizer_step: Option<u64>,
    pub payload_len: usize,
    pub payload_sha256: String,
}

/// First and second Adam moments in flattening order.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    pub params: ModelParams<T>,
    pub epoch: usize,
    pub seed: u64,
    pub optimizer: Option<OptimizerState>,
}

pub fn rng_state_hash(seed: u64) -> String {
    sha256_hex(&ChaCha8Rng::seed_from_u64(seed).get_seed())
}

fn corrupt(path: &Path, reason: impl Into<String>) -> Error {
    Error::Corrupt {
        path: path.display().to_string(),
        reason: reason.into(),
    }
}

/// Writes atomically (temp file + rename).
pub fn save_checkpoint<T: Real>(path: &Path, ckpt: &Checkpoint<T>) -> Result<()> {
    let mut values: Vec<f64> = ckpt
        .params
        .flatten()
        .iter()
        .map(|v| v.to_f64_lossy())
        .collect();
    if let Some(opt) = &ckpt.optimizer {
        if opt.m.len() != values.len() || opt.v.len() != values.len() {
            return Err(Error::Shape(
                "optimizer moments do not match parameter count".into(),
            ));
        }
        values.extend_from_slice(&opt.m);
        values.extend_from_slice(&opt.v);
    }
    let payload = f64_le_bytes(values);
    let header = CheckpointHeader {
        format: FORMAT.into(),
        arch: ckpt.params.arch(),
        shapes: ckpt.params.shapes(),
        epoch: ckpt.epoch,
        seed: ckpt.seed,
        rng_state_hash: rng_state_hash(ckpt.seed),
        optimizer_step: ckpt.optimizer.as_ref().map(|o| o.step),
        payload_len: payload.len(),
        payload_sha256: sha256_hex(&payload),
    };
    let mut bytes = serde_json::to_vec(&header)?;
    bytes.push(b'\n');
    bytes.extend_from_slice(&payload);
    write_atomic(path, &bytes)
}

pub fn read_header(path: &Path) -> Result<CheckpointHeader> {
    let bytes = fs::read(path)?;
    Ok(split(path, &bytes)?.0)
}

fn split<'a>(path: &Path, bytes: &'a [u8]) -> Result<(CheckpointHeader, &'a [u8])> {
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| corrupt(path, "missing header line"))?;
    let header: CheckpointHeader = serde_json::from_slice(&bytes[..nl])
        .map_err(|e| corrupt(path, format!("bad header: {e}")))?;
    if header.format != FORMAT {
        return Err(corrupt(path, format!("unknown format {:?}", header.format)));
    }
    Ok((header, &bytes[nl + 1..]))
}

/// Reads and verifies a checkpoint; any mismatch is reported as `Corrupt`.
pub fn load_checkpoint<T: Real>(path: &Path) -> Result<Checkpoint<T>> {
    let bytes = fs::read(path)?;
    let (header, payload) = split(path, &bytes)?;
    if payload.len() != header.payload_len {
        return Err(corrupt(
            path,
            format!(
                "payload is {} bytes, header says {}",
                payload.len(),
                header.payload_len
            ),
        ));
    }
    if sha256_hex(payload) != header.payload_sha256 {
        return Err(corrupt(path, "payload checksum mismatch"));
    }
    let values = f64_from_le_bytes(payload)
        .ok_or_else(|| corrupt(path, "payload not a whole number of f64"))?;
    let n: usize = header
        .shapes
        .iter()
        .map(|s| s.iter().product::<usize>())
        .sum();
    let expected = if header.optimizer_step.is_some() {
        3 * n
    } else {
        n
    };
    if values.len() != expected {
        return Err(corrupt(
            path,
            format!("{} values, expected {expected}", values.len()),
        ));
    }
    let flat: Vec<T> = values[..n].iter().map(|&v| T::lit(v)).collect();
    let params = ModelParams::unflatten(header.arch, &header.shapes, &flat)
        .map_err(|e| corrupt(path, e.to_string()))?;
    let optimizer = header.optimizer_step.map(|step| OptimizerState {
        step,
        m: values[n..2 * n].to_vec(),
        v: values[2 * n..].to_vec(),
    });
    Ok(Checkpoint {
        params,
        epoch: header.epoch,
        seed: header.seed,
        optimizer,
    })
}
