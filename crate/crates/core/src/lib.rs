//! Geometry, synthetic scenes, supervision targets and evaluation metrics for
//! multi-camera 3D perception experiments.

pub mod dataset;
pub mod geometry;
pub mod labels;
pub mod metrics;
pub mod plane;
pub mod scene;

pub use dataset::{build_sample, read_dataset, write_dataset, DatasetMeta, SampleDims, TrainingSample};
pub use geometry::{Camera, CameraRig, Extrinsics, Intrinsics};
pub use labels::{LabelConfig, Task};
pub use metrics::EvalReport;
pub use scene::{generate_scene, Box3D, Scene, SceneConfig};
