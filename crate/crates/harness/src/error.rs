use std::path::PathBuf;

use sdtr_core::dataset::DatasetError;
use sdtr_core::metrics::MetricsError;
use sdtr_core::scene::SceneError;
use sdtr_model::ModelError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("non-finite loss {value} at step {step} (epoch {epoch}, scene seed {scene_seed})")]
    NonFiniteLoss {
        step: usize,
        epoch: usize,
        scene_seed: u64,
        value: f64,
    },
    #[error("report {path}: missing field `{key}`")]
    MissingField { path: String, key: String },
    #[error("io error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("malformed {what}: {reason}")]
    Parse { what: String, reason: String },
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

pub type Result<T> = std::result::Result<T, HarnessError>;

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> HarnessError {
    let path = path.into();
    move |source| HarnessError::Io { path, source }
}
