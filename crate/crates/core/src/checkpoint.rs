//! Weight archive (safetensors) plus a JSON sidecar with the model config.
//!
//! For a checkpoint at `model.safetensors` the sidecar lives at `model.json`.

use std::path::{Path, PathBuf};

use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;

pub const SCHEMA_VERSION: &str = "uranker-checkpoint/1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    URanker,
    Nu2Net,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Sidecar {
    pub schema_version: String,
    pub kind: ModelKind,
    pub config: serde_json::Value,
}

pub fn sidecar_path(weights: &Path) -> PathBuf {
    weights.with_extension("json")
}

pub fn save<C: Serialize>(weights: &Path, kind: ModelKind, config: &C, params: &ParamStore) -> Result<()> {
    if let Some(dir) = weights.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    params.save(weights)?;
    let sidecar = Sidecar {
        schema_version: SCHEMA_VERSION.to_string(),
        kind,
        config: serde_json::to_value(config)?,
    };
    let path = sidecar_path(weights);
    let text = serde_json::to_string_pretty(&sidecar)?;
    std::fs::write(&path, text).map_err(|e| Error::io(path, e))
}

/// Reads and checks the sidecar, returning the decoded config.
pub fn read_config<C: DeserializeOwned>(weights: &Path, expected: ModelKind) -> Result<C> {
    let path = sidecar_path(weights);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let sidecar: Sidecar = serde_json::from_str(&text)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    if sidecar.schema_version != SCHEMA_VERSION {
        return Err(Error::Checkpoint(format!(
            "{}: schema {} unsupported (expected {SCHEMA_VERSION})",
            path.display(),
            sidecar.schema_version
        )));
    }
    if sidecar.kind != expected {
        return Err(Error::Checkpoint(format!(
            "{}: holds a {:?} model, expected {expected:?}",
            path.display(),
            sidecar.kind
        )));
    }
    serde_json::from_value(sidecar.config)
        .map_err(|e| Error::Checkpoint(format!("{}: bad config: {e}", path.display())))
}
