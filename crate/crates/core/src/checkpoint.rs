//! Single-file checkpoint: magic, format version, a JSON header describing
//! the run and every tensor, then all tensors as little-endian f64.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corruption::{action_layout, CorruptionTable};
use crate::error::{Error, Result};
use crate::nn::{Adam, ParamSet};
use crate::trainer::{RngState, TrainConfig, TrainState};

pub const MAGIC: &[u8; 8] = b"BALISTD\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub config: TrainConfig,
    pub step: u64,
    pub rng: RngState,
    pub reward_baseline: Option<f64>,
    pub adam_step: u64,
    /// Flat action index to `kind:level`.
    pub action_layout: Vec<String>,
    pub corruption_table: CorruptionTable,
    pub corruption_table_hash: String,
    pub detector_arch: String,
    pub strategy_arch: String,
    pub detector_tensors: Vec<TensorEntry>,
    pub strategy_tensors: Vec<TensorEntry>,
}

fn entries<P: ParamSet>(set: &P) -> Vec<TensorEntry> {
    set.params()
        .iter()
        .map(|p| TensorEntry {
            name: p.name.clone(),
            shape: p.shape.clone(),
        })
        .collect()
}

pub fn header_for(state: &TrainState, cfg: &TrainConfig, table: &CorruptionTable) -> CheckpointHeader {
    CheckpointHeader {
        format_version: FORMAT_VERSION,
        config: cfg.clone(),
        step: state.step,
        rng: state.rng_state(),
        reward_baseline: state.reward_baseline,
        adam_step: state.adam.step,
        action_layout: action_layout(),
        corruption_table: table.clone(),
        corruption_table_hash: table.hash(),
        detector_arch: cfg.detector.fingerprint(),
        strategy_arch: cfg.strategy.fingerprint(),
        detector_tensors: entries(&state.detector),
        strategy_tensors: entries(&state.strategy),
    }
}

/// Serialized bytes of a checkpoint.
pub fn encode(state: &TrainState, cfg: &TrainConfig, table: &CorruptionTable) -> Result<Vec<u8>> {
    let header = serde_json::to_vec(&header_for(state, cfg, table))
        .map_err(|e| Error::Checkpoint(format!("header encoding: {e}")))?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    let blobs = [
        state.detector.flat_values(),
        state.strategy.flat_values(),
        state.adam.m.clone(),
        state.adam.v.clone(),
    ];
    for blob in &blobs {
        for v in blob {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

/// Writes atomically through a sibling temporary file.
pub fn save(path: &Path, state: &TrainState, cfg: &TrainConfig, table: &CorruptionTable) -> Result<()> {
    let bytes = encode(state, cfg, table)?;
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub state: TrainState,
}

fn take<'a>(bytes: &'a [u8], at: &mut usize, n: usize) -> Result<&'a [u8]> {
    let end = at.checked_add(n).filter(|&e| e <= bytes.len());
    let end = end.ok_or_else(|| Error::Checkpoint("truncated file".into()))?;
    let s = &bytes[*at..end];
    *at = end;
    Ok(s)
}

fn check_tensors<P: ParamSet>(set: &P, stored: &[TensorEntry], what: &str) -> Result<()> {
    if entries(set) != stored {
        return Err(Error::Checkpoint(format!("{what} tensor layout does not match its architecture")));
    }
    Ok(())
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let mut at = 0;
    if take(bytes, &mut at, 8)? != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
    }
    let version = u32::from_le_bytes(take(bytes, &mut at, 4)?.try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported format version {version}")));
    }
    let hlen = u64::from_le_bytes(take(bytes, &mut at, 8)?.try_into().expect("8 bytes")) as usize;
    let header: CheckpointHeader = serde_json::from_slice(take(bytes, &mut at, hlen)?)
        .map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
    let cfg = &header.config;
    if header.detector_arch != cfg.detector.fingerprint() || header.strategy_arch != cfg.strategy.fingerprint() {
        return Err(Error::Checkpoint("architecture fingerprint does not match stored config".into()));
    }
    if header.action_layout != action_layout() {
        return Err(Error::Checkpoint("action layout differs from this build".into()));
    }
    if header.corruption_table.hash() != header.corruption_table_hash {
        return Err(Error::Checkpoint("corruption table hash mismatch".into()));
    }
    let mut state = TrainState::new(cfg);
    check_tensors(&state.detector, &header.detector_tensors, "detector")?;
    check_tensors(&state.strategy, &header.strategy_tensors, "strategy")?;
    let mut read = |n: usize| -> Result<Vec<f64>> {
        Ok(take(bytes, &mut at, n * 8)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    };
    let nd = state.detector.num_params();
    let ns = state.strategy.num_params();
    state.detector.set_flat_values(&read(nd)?);
    state.strategy.set_flat_values(&read(ns)?);
    let m = read(nd)?;
    let v = read(nd)?;
    if at != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - at)));
    }
    state.adam = Adam { step: header.adam_step, m, v, ..Adam::new(cfg.lr_d, nd) };
    state.step = header.step;
    state.seed = header.rng.seed;
    state.reward_baseline = header.reward_baseline;
    if !state.detector.all_finite() || !state.strategy.all_finite() {
        return Err(Error::NonFinite("checkpoint weights".into()));
    }
    Ok(Checkpoint { header, state })
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    decode(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::DetectorConfig;
    use crate::policy::StrategyNetConfig;

    fn cfg() -> TrainConfig {
        TrainConfig {
            detector: DetectorConfig { channels: [2, 3, 4], sfim: true },
            strategy: StrategyNetConfig { base_channels: 2 },
            ..Default::default()
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let c = cfg();
        let mut state = TrainState::new(&c);
        state.step = 17;
        state.reward_baseline = Some(0.1 + 0.2);
        state.adam.step = 17;
        state.adam.m.iter_mut().enumerate().for_each(|(i, v)| *v = (i as f64).sin() / 3.0);
        let table = CorruptionTable::default();
        let bytes = encode(&state, &c, &table).unwrap();
        let ck = decode(&bytes).unwrap();
        assert_eq!(ck.state, state);
        assert_eq!(encode(&ck.state, &ck.header.config, &ck.header.corruption_table).unwrap(), bytes);
    }

    #[test]
    fn corrupt_files_rejected() {
        let c = cfg();
        let bytes = encode(&TrainState::new(&c), &c, &CorruptionTable::default()).unwrap();
        assert!(decode(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode(&bad).is_err());
        let mut extra = bytes;
        extra.push(0);
        assert!(decode(&extra).is_err());
    }
}
