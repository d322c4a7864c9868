//! Training checkpoints.
//!
//! Layout: the 8-byte magic `PDVAECKP`, a little-endian `u32` version, a
//! little-endian `u64` header length, the JSON header, then the parameters,
//! Adam first moments and Adam second moments as little-endian `f64` in slot
//! order.

use std::fs;
use std::path::{Path, PathBuf};

use pidvae_core::experiment::RunConfig;
use pidvae_core::linalg::ParamSet;
use pidvae_core::optim::Adam;
use pidvae_core::train::TrainState;
use pidvae_core::Matrix;
use serde::{Deserialize, Serialize};

use crate::error::{io, Error, Result};

pub const MAGIC: &[u8; 8] = b"PDVAECKP";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Slot {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub config: RunConfig,
    pub seed: u64,
    pub epoch: usize,
    pub adam_steps: u64,
    /// Elapsed training time when the checkpoint was written.
    pub wallclock_s: f64,
    pub slots: Vec<Slot>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: Header,
    pub state: TrainState,
}

fn fail(path: &Path, reason: impl Into<String>) -> Error {
    Error::Checkpoint {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

pub fn file_name(epoch: usize) -> String {
    format!("epoch_{epoch:06}.ckpt")
}

/// Writes through a temporary file so an interrupted run never leaves a
/// truncated checkpoint behind.
pub fn save(path: &Path, config: &RunConfig, state: &TrainState, wallclock_s: f64) -> Result<()> {
    let header = Header {
        config: config.clone(),
        seed: config.seed,
        epoch: state.epoch,
        adam_steps: state.adam.t,
        wallclock_s,
        slots: state
            .params
            .shapes()
            .into_iter()
            .map(|(name, (rows, cols))| Slot { name, rows, cols })
            .collect(),
    };
    let header = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(20 + header.len() + 24 * state.params.num_scalars());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for set in [&state.params, &state.adam.m, &state.adam.v] {
        for v in set.flatten() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, out).map_err(io(&tmp))?;
    fs::rename(&tmp, path).map_err(io(path))
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(io(path))?;
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(fail(path, "not a checkpoint file"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(fail(path, format!("unsupported version {version}")));
    }
    let len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let body = bytes.get(20..20 + len).ok_or_else(|| fail(path, "truncated header"))?;
    let header: Header = serde_json::from_slice(body).map_err(|e| fail(path, format!("header: {e}")))?;
    let count: usize = header.slots.iter().map(|s| s.rows * s.cols).sum();
    let payload = &bytes[20 + len..];
    if payload.len() != 24 * count {
        return Err(fail(path, format!("expected {} payload bytes, found {}", 24 * count, payload.len())));
    }
    let mut values = payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
    let mut read_set = || -> Result<ParamSet> {
        let mut set = ParamSet::new();
        for s in &header.slots {
            let data: Vec<f64> = values.by_ref().take(s.rows * s.cols).collect();
            set.insert(&s.name, Matrix::from_raw(s.rows, s.cols, data))?;
        }
        Ok(set)
    };
    let params = read_set()?;
    let m = read_set()?;
    let v = read_set()?;
    let state = TrainState {
        epoch: header.epoch,
        params,
        adam: Adam { m, v, t: header.adam_steps },
    };
    Ok(Checkpoint { header, state })
}

/// Checkpoints in `dir` sorted by epoch.
pub fn list(dir: &Path) -> Result<Vec<(usize, PathBuf)>> {
    if !dir.exists() {
        return Ok(Vec::new());
    }
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(io(dir))? {
        let path = entry.map_err(io(dir))?.path();
        let epoch = path
            .file_name()
            .and_then(|n| n.to_str())
            .and_then(|n| n.strip_prefix("epoch_")?.strip_suffix(".ckpt")?.parse().ok());
        if let Some(e) = epoch {
            out.push((e, path));
        }
    }
    out.sort();
    Ok(out)
}

/// Accepts a checkpoint file or a run directory, in which case the latest
/// checkpoint under `checkpoints/` is used.
pub fn locate(path: &Path) -> Result<PathBuf> {
    if path.is_dir() {
        list(&path.join("checkpoints"))?
            .pop()
            .map(|(_, p)| p)
            .ok_or_else(|| fail(path, "run directory holds no checkpoints"))
    } else {
        Ok(path.to_path_buf())
    }
}

/// Errors unless `params` has exactly the slot layout `expected`.
pub fn check_layout(path: &Path, params: &ParamSet, expected: &ParamSet) -> Result<()> {
    if params.shapes() == expected.shapes() {
        return Ok(());
    }
    let describe = |p: &ParamSet| {
        p.shapes()
            .iter()
            .map(|(n, (r, c))| format!("{n}:{r}x{c}"))
            .collect::<Vec<_>>()
            .join(" ")
    };
    Err(fail(
        path,
        format!(
            "architecture mismatch: checkpoint has [{}], configuration needs [{}]",
            describe(params),
            describe(expected)
        ),
    ))
}
