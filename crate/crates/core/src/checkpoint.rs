//! Versioned single-file checkpoints.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::nn::hex;
use crate::trainer::TrainState;

pub const FORMAT_TAG: &str = "posefill-checkpoint/1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    /// Resolved configuration, as TOML.
    pub config_toml: String,
    pub config_hash: String,
    pub state: TrainState,
}

impl Checkpoint {
    pub fn config(&self) -> Result<RunConfig> {
        RunConfig::load(&self.config_toml, None)
    }
}

/// SHA-256 of the checkpoint file's bytes.
pub fn checkpoint_id(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}

pub fn encode(config: &RunConfig, state: &TrainState) -> Result<Vec<u8>> {
    let ckpt = Checkpoint {
        format: FORMAT_TAG.into(),
        config_toml: config.to_toml(),
        config_hash: config.hash(),
        state: state.clone(),
    };
    bincode::serialize(&ckpt).map_err(|e| Error::Checkpoint(e.to_string()))
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let ckpt: Checkpoint = bincode::deserialize(bytes).map_err(|e| Error::Checkpoint(format!("unreadable checkpoint: {e}")))?;
    if ckpt.format != FORMAT_TAG {
        return Err(Error::Checkpoint(format!(
            "format `{}` is not supported (expected `{FORMAT_TAG}`)",
            ckpt.format
        )));
    }
    Ok(ckpt)
}

/// Writes through a temporary file and returns the checkpoint id.
pub fn save(path: &Path, config: &RunConfig, state: &TrainState) -> Result<String> {
    let bytes = encode(config, state)?;
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, &bytes)?;
    fs::rename(&tmp, path)?;
    Ok(checkpoint_id(&bytes))
}

/// Loads a checkpoint and returns it with its id.
pub fn load(path: &Path) -> Result<(Checkpoint, String)> {
    let bytes = fs::read(path)?;
    let ckpt = decode(&bytes)?;
    Ok((ckpt, checkpoint_id(&bytes)))
}
