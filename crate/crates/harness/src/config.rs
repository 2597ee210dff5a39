//! Run configuration: one JSON document drives data generation, training,
//! evaluation, ablation and robustness sweeps.

use std::fs;
use std::path::{Path, PathBuf};

use sdtr_core::labels::{LabelConfig, Task};
use sdtr_core::scene::SceneConfig;
use sdtr_model::losses::LossWeights;
use sdtr_model::ModelConfig;
use serde::{Deserialize, Serialize};

use crate::error::{io_err, HarnessError, Result};

/// Environment variable that overrides [`RunConfig::seed`].
pub const SEED_ENV: &str = "SDTR_SEED";

/// Scene seeds of the validation split start here so they never collide
/// with training seeds.
pub const VAL_SEED_OFFSET: u64 = 1_000_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub scene: SceneConfig,
    pub labels: LabelConfig,
    pub train_scenes: usize,
    pub val_scenes: usize,
    /// First training scene seed; scene `i` uses `seed_base + i`.
    pub seed_base: u64,
}

impl DataConfig {
    pub fn train_seeds(&self) -> Vec<u64> {
        (0..self.train_scenes as u64).map(|i| self.seed_base + i).collect()
    }

    pub fn val_seeds(&self) -> Vec<u64> {
        (0..self.val_scenes as u64)
            .map(|i| self.seed_base + VAL_SEED_OFFSET + i)
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    Constant,
    /// Half-cosine decay from `lr` to `min_lr` over all steps.
    Cosine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub min_lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub schedule: Schedule,
    /// Global gradient-norm clip; `None` disables clipping.
    pub grad_clip: Option<f64>,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            min_lr: 0.0,
            weight_decay: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            schedule: Schedule::Cosine,
            grad_clip: Some(35.0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Toggles {
    pub seg_branch: bool,
    pub depth_branch: bool,
    pub pqb: bool,
}

impl Toggles {
    pub const FULL: Toggles = Toggles {
        seg_branch: true,
        depth_branch: true,
        pqb: true,
    };
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    /// Detections kept per frame, highest scores first over all
    /// (query, class) pairs.
    pub max_detections: usize,
    pub bev_threshold: f64,
    /// Seed of test-time perturbations.
    pub noise_seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            max_detections: 100,
            bev_threshold: 0.5,
            noise_seed: 7,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationConfig {
    /// Training seeds each lattice row is repeated with.
    pub seeds: Vec<u64>,
    /// Training seeds of the gamma sweep and the joint grid rows.
    pub sweep_seeds: Vec<u64>,
    pub lattice: bool,
    pub gamma_sweep: bool,
    pub joint_grid: bool,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            seeds: vec![0, 1, 2],
            sweep_seeds: vec![0],
            lattice: true,
            gamma_sweep: true,
            joint_grid: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RobustnessConfig {
    /// Noise levels, paired index by index with `sigma_trans`.
    pub sigma_rot: Vec<f64>,
    pub sigma_trans: Vec<f64>,
    /// Numbers of randomly dropped cameras.
    pub drop_counts: Vec<usize>,
}

impl Default for RobustnessConfig {
    fn default() -> Self {
        Self {
            sigma_rot: vec![0.0, 0.01, 0.02, 0.05],
            sigma_trans: vec![0.0, 0.05, 0.1, 0.25],
            drop_counts: vec![1, 3],
        }
    }
}

/// Everything one run needs. `task` and `toggles` are authoritative: the
/// corresponding fields of `model` and `data.labels` are overwritten by
/// [`RunConfig::model_config`] and [`RunConfig::label_config`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Directory holding `train/` and `val/` datasets.
    pub dataset: PathBuf,
    pub task: Task,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub losses: LossWeights,
    pub optimizer: OptimizerConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub toggles: Toggles,
    pub eval: EvalConfig,
    pub ablation: AblationConfig,
    pub robustness: RobustnessConfig,
}

impl RunConfig {
    /// Desk-scale run: 200 training and 50 validation scenes, 60 epochs of
    /// batch 4 at peak learning rate 2e-3. The small model needs the higher
    /// rate and longer schedule before localization starts to generalize.
    pub fn desk(task: Task) -> Self {
        let scene = SceneConfig::default();
        let labels = LabelConfig {
            task,
            range: scene.range,
            ..LabelConfig::default()
        };
        let model = ModelConfig::desk(&scene, &labels);
        let losses = LossWeights {
            bev_pos_weights: default_bev_weights(labels.bev_channels()),
            w_bev: if task.has_bev() { 1.0 } else { 0.0 },
            w_det: if task.has_detection() { 1.0 } else { 0.0 },
            ..LossWeights::default()
        };
        Self {
            dataset: PathBuf::from("data"),
            task,
            data: DataConfig {
                scene,
                labels,
                train_scenes: 200,
                val_scenes: 50,
                seed_base: 0,
            },
            model,
            losses,
            optimizer: OptimizerConfig {
                lr: 2e-3,
                ..OptimizerConfig::default()
            },
            epochs: 60,
            batch_size: 4,
            seed: 0,
            toggles: Toggles::FULL,
            eval: EvalConfig::default(),
            ablation: AblationConfig::default(),
            robustness: RobustnessConfig::default(),
        }
    }

    pub fn label_config(&self) -> LabelConfig {
        LabelConfig {
            task: self.task,
            ..self.data.labels.clone()
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            task: self.task,
            seg_branch: self.toggles.seg_branch,
            depth_branch: self.toggles.depth_branch,
            pqb: self.toggles.pqb,
            ..self.model.clone()
        }
    }

    /// Same run retargeted to another task. Label-derived model sizes are
    /// recomputed, architecture sizes are kept, and query counts fall back
    /// to the desk defaults when they no longer divide evenly.
    pub fn with_task(&self, task: Task) -> Self {
        let mut out = self.clone();
        out.task = task;
        out.data.labels.task = task;
        let labels = out.label_config();
        let desk = ModelConfig::desk(&out.data.scene, &labels);
        let m = &mut out.model;
        m.task = task;
        m.semantic_channels = desk.semantic_channels;
        m.bev_channels = desk.bev_channels;
        if !m.num_det_queries.is_multiple_of(m.semantic_channels) {
            m.num_det_queries = desk.num_det_queries;
        }
        if !m.num_bev_queries.is_multiple_of(m.semantic_channels) || m.bev_grid * m.bev_patch != labels.bev_size {
            m.num_bev_queries = desk.num_bev_queries;
            m.bev_grid = desk.bev_grid;
            m.bev_patch = desk.bev_patch;
        }
        out.losses.bev_pos_weights = default_bev_weights(labels.bev_channels());
        out
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(HarnessError::Config(m));
        self.data.scene.validate()?;
        let labels = self.label_config();
        labels.validate().map_err(|e| HarnessError::Config(e.to_string()))?;
        let model = self.model_config();
        model.validate()?;
        model.check_bev_size(labels.bev_size)?;
        self.losses.validate().map_err(HarnessError::Config)?;
        let scene = &self.data.scene;
        let expect = [
            ("num_views", model.num_views, scene.num_cameras),
            ("image_height", model.image_height, scene.image_height),
            ("image_width", model.image_width, scene.image_width),
            ("semantic_channels", model.semantic_channels, labels.semantic_channels()),
            ("depth_bins", model.depth_bins, labels.num_depth_bins),
            ("num_classes", model.num_classes, scene.num_classes()),
            ("num_attributes", model.num_attributes, scene.num_attributes),
            ("bev_channels", model.bev_channels, labels.bev_channels()),
        ];
        for (name, got, want) in expect {
            if got != want {
                return bad(format!("model.{name} = {got} but the data implies {want}"));
            }
        }
        if labels.num_object_classes != scene.num_classes() {
            return bad("labels.num_object_classes must equal the number of scene classes".into());
        }
        if self.task.has_bev() && self.losses.bev_pos_weights.len() != labels.bev_channels() {
            return bad(format!(
                "losses.bev_pos_weights needs {} entries",
                labels.bev_channels()
            ));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be positive".into());
        }
        if self.data.train_scenes == 0 {
            return bad("need at least one training scene".into());
        }
        let o = &self.optimizer;
        if !(o.lr > 0.0 && o.min_lr >= 0.0 && o.min_lr <= o.lr && o.weight_decay >= 0.0 && o.eps > 0.0) {
            return bad("optimizer needs lr > 0, 0 <= min_lr <= lr, weight_decay >= 0, eps > 0".into());
        }
        if !((0.0..1.0).contains(&o.beta1) && (0.0..1.0).contains(&o.beta2)) {
            return bad("optimizer betas must lie in [0, 1)".into());
        }
        if self.robustness.sigma_rot.len() != self.robustness.sigma_trans.len() {
            return bad("robustness.sigma_rot and sigma_trans must pair up".into());
        }
        if self.eval.max_detections == 0 {
            return bad("eval.max_detections must be positive".into());
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| HarnessError::Parse {
            what: "run config".into(),
            reason: e.to_string(),
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("run config serializes")
    }

    /// Reads a config file and applies the `SDTR_SEED` override.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let mut cfg = Self::from_json(&text)?;
        if let Some(seed) = seed_override()? {
            cfg.seed = seed;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()).map_err(io_err(path))
    }
}

/// Positive weight 1 for drivable area and 3 for the sparser lane and
/// object channels.
fn default_bev_weights(channels: usize) -> Vec<f64> {
    (0..channels).map(|c| if c == 0 { 1.0 } else { 3.0 }).collect()
}

/// Seed from `SDTR_SEED`, if set.
pub fn seed_override() -> Result<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| HarnessError::Config(format!("{SEED_ENV}={v} is not a u64"))),
        Err(std::env::VarError::NotPresent) => Ok(None),
        Err(e) => Err(HarnessError::Config(format!("{SEED_ENV}: {e}"))),
    }
}
