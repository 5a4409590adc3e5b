//! On-disk checkpoints: `params.bin` (little-endian f64) next to
//! `config.json`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::{LossConfig, TrunkConfig};
use super::net::{ModelState, Segment};
use super::train::{History, TrainConfig};
use crate::error::{Error, Result};
use crate::filter::TargetTransform;
use crate::patches::ChannelStats;
use crate::rng::sha256_hex;

const FORMAT: &str = "stexpr-checkpoint/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointConfig {
    pub format: String,
    pub trunk: TrunkConfig,
    pub k_main: usize,
    pub k_aux: usize,
    pub seed: u64,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub main_genes: Vec<String>,
    pub aux_genes: Vec<String>,
    pub main_transform: TargetTransform,
    pub aux_transform: TargetTransform,
    /// Fingerprint of the target table the model was trained against.
    pub targets_fingerprint: String,
    pub channel_stats: ChannelStats,
    pub segments: Vec<Segment>,
    pub params_sha256: String,
    /// Hashes of the stage inputs, keyed by role.
    pub inputs: BTreeMap<String, String>,
    pub history: History,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub state: ModelState,
    pub config: CheckpointConfig,
}

pub fn params_to_bytes(p: &[f64]) -> Vec<u8> {
    p.iter().flat_map(|v| v.to_le_bytes()).collect()
}

impl Checkpoint {
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let bytes = params_to_bytes(&self.state.params);
        let mut cfg = self.config.clone();
        cfg.format = FORMAT.into();
        cfg.params_sha256 = sha256_hex(&bytes);
        cfg.segments = self.state.layout.segments.clone();
        let p = dir.join("params.bin");
        fs::write(&p, &bytes).map_err(|e| Error::io(&p, e))?;
        let p = dir.join("config.json");
        fs::write(&p, serde_json::to_vec_pretty(&cfg)?).map_err(|e| Error::io(&p, e))?;
        Ok(())
    }

    pub fn read(dir: &Path) -> Result<Checkpoint> {
        let p = dir.join("config.json");
        let config: CheckpointConfig =
            serde_json::from_slice(&fs::read(&p).map_err(|e| Error::io(&p, e))?)?;
        if config.format != FORMAT {
            return Err(Error::Schema(format!(
                "unsupported checkpoint format `{}`",
                config.format
            )));
        }
        let p = dir.join("params.bin");
        let bytes = fs::read(&p).map_err(|e| Error::io(&p, e))?;
        if sha256_hex(&bytes) != config.params_sha256 {
            return Err(Error::Integrity(
                "params.bin does not match the recorded hash".into(),
            ));
        }
        if bytes.len() % 8 != 0 {
            return Err(Error::Integrity(
                "params.bin length is not a multiple of 8".into(),
            ));
        }
        let params = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let state = ModelState::from_parts(
            params,
            config.trunk,
            config.k_main,
            config.k_aux,
            config.seed,
        )?;
        if state.layout.segments != config.segments {
            return Err(Error::Schema(
                "checkpoint segment table does not match its trunk config".into(),
            ));
        }
        Ok(Checkpoint { state, config })
    }
}
