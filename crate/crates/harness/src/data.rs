//! Train/validation splits on disk and in memory.

use std::path::Path;

use sdtr_core::dataset::{
    generate_samples, read_dataset, write_dataset, DatasetMeta, SampleDims, TrainingSample, FORMAT_VERSION,
};
use sdtr_model::Tensor;

use crate::config::RunConfig;
use crate::error::{HarnessError, Result};

pub const TRAIN_DIR: &str = "train";
pub const VAL_DIR: &str = "val";

#[derive(Debug, Clone)]
pub struct Split {
    pub meta: DatasetMeta,
    pub samples: Vec<TrainingSample>,
}

#[derive(Debug, Clone)]
pub struct Splits {
    pub train: Split,
    pub val: Split,
}

fn make_split(cfg: &RunConfig, seeds: Vec<u64>) -> Result<Split> {
    let labels = cfg.label_config();
    let scene = &cfg.data.scene;
    let samples = generate_samples(scene, &labels, &seeds)?;
    Ok(Split {
        meta: DatasetMeta {
            version: FORMAT_VERSION,
            scene: scene.clone(),
            labels: labels.clone(),
            dims: SampleDims::new(scene, &labels),
            seeds,
        },
        samples,
    })
}

/// Renders and labels every scene of both splits.
pub fn generate_splits(cfg: &RunConfig) -> Result<Splits> {
    Ok(Splits {
        train: make_split(cfg, cfg.data.train_seeds())?,
        val: make_split(cfg, cfg.data.val_seeds())?,
    })
}

pub fn write_splits(dir: &Path, splits: &Splits) -> Result<()> {
    write_dataset(&dir.join(TRAIN_DIR), &splits.train.meta, &splits.train.samples)?;
    write_dataset(&dir.join(VAL_DIR), &splits.val.meta, &splits.val.samples)?;
    Ok(())
}

pub fn read_split(dir: &Path) -> Result<Split> {
    let (meta, samples) = read_dataset(dir)?;
    Ok(Split { meta, samples })
}

pub fn load_splits(dir: &Path) -> Result<Splits> {
    Ok(Splits {
        train: read_split(&dir.join(TRAIN_DIR))?,
        val: read_split(&dir.join(VAL_DIR))?,
    })
}

/// Rejects a dataset whose scenes or labels differ from what `cfg` trains on.
pub fn check_compatible(cfg: &RunConfig, meta: &DatasetMeta) -> Result<()> {
    if meta.scene != cfg.data.scene {
        return Err(HarnessError::Config(
            "dataset scene settings differ from the run config".into(),
        ));
    }
    if meta.labels != cfg.label_config() {
        return Err(HarnessError::Config(format!(
            "dataset labels ({:?} task) differ from the run config ({:?} task)",
            meta.labels.task, cfg.task
        )));
    }
    Ok(())
}

/// `N x 3 x H x W` model input.
pub fn images_tensor(s: &TrainingSample) -> Tensor {
    let d = s.dims;
    Tensor::new(
        vec![d.num_views, 3, d.image_height, d.image_width],
        s.images.iter().map(|&v| f64::from(v)).collect(),
    )
}
