use std::path::Path;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error in {path} at line {line}: {msg}")]
    Parse { path: String, line: usize, msg: String },

    #[error("checkpoint error in {path}: {msg}")]
    Checkpoint { path: String, msg: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("image error on {path}: {msg}")]
    Image { path: String, msg: String },

    #[error("non-finite loss at scene {scene_id} (step {step}): {detail}")]
    NonFiniteLoss { scene_id: String, step: usize, detail: String },

    #[error("dataset is empty: {0}")]
    EmptyDataset(String),
}

impl Error {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Error::Io { path: path.display().to_string(), source }
    }
}
