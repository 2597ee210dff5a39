//! SDTR model: a camera-only multi-view 3D detector and BEV segmenter with an
//! auxiliary semantic/depth encoder, on a small reverse-mode autodiff tape.

pub mod autodiff;
pub mod boxcode;
pub mod config;
pub mod hungarian;
pub mod losses;
pub mod network;
pub mod state;
pub mod tensor;

pub use autodiff::{ConvSpec, Graph, Var};
pub use config::{ModelConfig, BOX_CODE_LEN, FEATURE_STRIDE};
pub use losses::{LossComponents, LossReport, LossWeights, Targets};
pub use network::{forward, run, ForwardOutput};
pub use state::{CheckpointMeta, ModelState, ParamVars};
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("bad checkpoint: {0}")]
    Checkpoint(String),
    #[error("i/o error on {0}: {1}")]
    Io(String, #[source] std::io::Error),
}
