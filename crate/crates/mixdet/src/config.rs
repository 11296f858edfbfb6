//! Run configuration: one TOML file covering training, data generation and
//! the head, with CLI flags layered on top.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::DataGenConfig;
use crate::error::{Error, Result};
use crate::training::TrainConfig;

#[derive(Clone, Debug, Default, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub data: DataGenConfig,
    /// Dataset root (contains `images/`, `annotations/`, `manifest.txt`).
    pub dataset_dir: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let config: RunConfig = toml::from_str(&text).map_err(|e| Error::Parse {
        path: path.display().to_string(),
        line: e.span().map(|s| text[..s.start].lines().count()).unwrap_or(0),
        msg: e.message().to_string(),
    })?;
    config.train.validate()?;
    config.data.validate()?;
    Ok(config)
}

pub fn save_config(config: &RunConfig, path: &Path) -> Result<()> {
    let text = toml::to_string_pretty(config)
        .map_err(|e| Error::Config(format!("serialize config: {e}")))?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Head-toggle presets mirroring the decode-component ablations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum AblationPreset {
    Full,
    NoLtrb,
    NoCenterLimit,
    NoLevelScale,
}

impl AblationPreset {
    pub const ALL: [AblationPreset; 4] = [
        AblationPreset::Full,
        AblationPreset::NoLtrb,
        AblationPreset::NoCenterLimit,
        AblationPreset::NoLevelScale,
    ];

    pub fn apply(&self, config: &mut TrainConfig) {
        match self {
            AblationPreset::Full => {}
            AblationPreset::NoLtrb => config.head.use_ltrb = false,
            AblationPreset::NoCenterLimit => config.head.use_center_limit = false,
            AblationPreset::NoLevelScale => config.head.use_level_scale = false,
        }
    }
}
