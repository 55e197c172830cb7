//! Trained models on disk: one JSON document holding the encoder
//! configuration and weights, the cluster vocabulary, and the training
//! configuration that produced them.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dfc::{ClusterModel, TrainConfig, TrainedModel};
use crate::encoder::{EncoderConfig, EncoderParams};
use crate::error::{Error, Result};

pub const ATLAS_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Atlas {
    pub version: u32,
    pub encoder: EncoderConfig,
    pub params: EncoderParams,
    pub clusters: ClusterModel,
    pub train_config: TrainConfig,
    pub seed: u64,
    /// Free-form creation stamp; absent unless supplied, so that retraining
    /// with the same seed reproduces the file byte for byte.
    pub created: Option<String>,
}

impl Atlas {
    pub fn new(model: TrainedModel, train_config: TrainConfig, created: Option<String>) -> Self {
        Atlas {
            version: ATLAS_VERSION,
            encoder: model.encoder,
            params: model.params,
            clusters: model.clusters,
            seed: train_config.seed,
            train_config,
            created,
        }
    }

    pub fn model(&self) -> TrainedModel {
        TrainedModel {
            encoder: self.encoder.clone(),
            params: self.params.clone(),
            clusters: self.clusters.clone(),
        }
    }

    pub fn check(&self) -> Result<()> {
        self.model().check()
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text)?;
        let found = value
            .get("version")
            .and_then(serde_json::Value::as_u64)
            .ok_or_else(|| Error::Schema("atlas has no version".into()))?;
        if found != u64::from(ATLAS_VERSION) {
            return Err(Error::VersionMismatch {
                expected: ATLAS_VERSION,
                found: u32::try_from(found).unwrap_or(u32::MAX),
            });
        }
        let atlas: Atlas = serde_json::from_value(value).map_err(|e| Error::Schema(e.to_string()))?;
        atlas.check()?;
        Ok(atlas)
    }
}

/// Writes the atlas next to its destination and renames it into place, so
/// the destination is never left half-written.
pub fn save_atlas(atlas: &Atlas, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    atlas.check()?;
    let text = atlas.to_json()?;
    let name = path
        .file_name()
        .ok_or_else(|| Error::invalid(format!("{} is not a file path", path.display())))?;
    let mut tmp_name = std::ffi::OsString::from(".");
    tmp_name.push(name);
    tmp_name.push(format!(".{}.tmp", std::process::id()));
    let tmp = path.with_file_name(tmp_name);
    let write = || -> std::io::Result<()> {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(text.as_bytes())?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    };
    write().map_err(|e| {
        let _ = fs::remove_file(&tmp);
        Error::io(path, e)
    })
}

pub fn load_atlas(path: impl AsRef<Path>) -> Result<Atlas> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Atlas::from_json(&text)
}
