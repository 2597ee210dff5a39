use sdtr_core::labels::{LabelConfig, Task};
use sdtr_core::scene::SceneConfig;
use serde::{Deserialize, Serialize};

use crate::ModelError;

/// Feature stride of both backbone outputs.
pub const FEATURE_STRIDE: usize = 16;
/// Width of the detection regression vector.
pub const BOX_CODE_LEN: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub task: Task,
    pub num_views: usize,
    pub image_height: usize,
    pub image_width: usize,
    /// Output channels of the stride-4 stem, the stride-8 stage and the
    /// stride-16 stage; the last is the feature width `C` of F4 and F5.
    pub backbone_channels: [usize; 3],
    pub embed_dim: usize,
    pub decoder_layers: usize,
    pub decoder_heads: usize,
    pub ffn_dim: usize,
    pub num_det_queries: usize,
    pub num_bev_queries: usize,
    pub semantic_channels: usize,
    pub depth_bins: usize,
    pub num_classes: usize,
    pub num_attributes: usize,
    pub bev_channels: usize,
    /// BEV queries form a `bev_grid x bev_grid` layout.
    pub bev_grid: usize,
    /// Side of the BEV patch each query decodes.
    pub bev_patch: usize,
    /// Half-extent of the x/y box-center range in meters.
    pub range: f64,
    /// Half-extent of the z box-center range in meters.
    pub z_range: f64,
    pub seg_branch: bool,
    pub depth_branch: bool,
    pub pqb: bool,
}

impl ModelConfig {
    /// Desk-scale network sized to the given scene and label settings.
    pub fn desk(scene: &SceneConfig, labels: &LabelConfig) -> Self {
        let grid = 10;
        Self {
            task: labels.task,
            num_views: scene.num_cameras,
            image_height: scene.image_height,
            image_width: scene.image_width,
            backbone_channels: [12, 24, 32],
            embed_dim: 32,
            decoder_layers: 6,
            decoder_heads: 4,
            ffn_dim: 64,
            num_det_queries: match labels.task {
                Task::Detection => 90,
                _ => 100,
            },
            num_bev_queries: grid * grid,
            semantic_channels: labels.semantic_channels(),
            depth_bins: labels.num_depth_bins,
            num_classes: labels.num_object_classes,
            num_attributes: scene.num_attributes,
            bev_channels: labels.bev_channels(),
            bev_grid: grid,
            bev_patch: labels.bev_size / grid,
            range: scene.range,
            z_range: scene.z_range,
            seg_branch: true,
            depth_branch: true,
            pqb: true,
        }
    }

    pub fn feature_size(&self) -> (usize, usize) {
        (self.image_height / FEATURE_STRIDE, self.image_width / FEATURE_STRIDE)
    }

    pub fn feat_channels(&self) -> usize {
        self.backbone_channels[2]
    }

    pub fn bev_size(&self) -> usize {
        self.bev_grid * self.bev_patch
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::Config(m));
        if self.decoder_layers == 0 {
            return bad("decoder_layers must be >= 1".into());
        }
        if self.decoder_heads == 0 || !self.embed_dim.is_multiple_of(self.decoder_heads) {
            return bad(format!(
                "embed_dim {} not divisible by {} heads",
                self.embed_dim, self.decoder_heads
            ));
        }
        if self.num_views == 0 {
            return bad("need at least one view".into());
        }
        if !self.image_height.is_multiple_of(FEATURE_STRIDE)
            || !self.image_width.is_multiple_of(FEATURE_STRIDE)
            || self.image_height == 0
        {
            return bad(format!(
                "image size {}x{} must be a positive multiple of {FEATURE_STRIDE}",
                self.image_height, self.image_width
            ));
        }
        if self.backbone_channels.contains(&0) || self.semantic_channels == 0 || self.depth_bins < 2 {
            return bad("channel counts must be positive".into());
        }
        if self.task.has_detection() {
            if self.num_det_queries == 0 || !self.num_det_queries.is_multiple_of(self.semantic_channels) {
                return bad(format!(
                    "{} detection queries not divisible by {} semantic channels",
                    self.num_det_queries, self.semantic_channels
                ));
            }
            if self.num_classes == 0 || self.num_attributes == 0 {
                return bad("detection needs classes and attributes".into());
            }
        }
        if self.task.has_bev() {
            if self.num_bev_queries != self.bev_grid * self.bev_grid {
                return bad(format!(
                    "{} BEV queries do not form a {}x{} grid",
                    self.num_bev_queries, self.bev_grid, self.bev_grid
                ));
            }
            if !self.num_bev_queries.is_multiple_of(self.semantic_channels) {
                return bad(format!(
                    "{} BEV queries not divisible by {} semantic channels",
                    self.num_bev_queries, self.semantic_channels
                ));
            }
            if self.bev_patch == 0 || self.bev_channels == 0 {
                return bad("BEV patch and channels must be positive".into());
            }
        }
        if !(self.range > 0.0 && self.z_range > 0.0) {
            return bad("ranges must be positive".into());
        }
        Ok(())
    }

    /// Checks that the BEV output tiles a label grid of side `bev_size`.
    pub fn check_bev_size(&self, bev_size: usize) -> Result<(), ModelError> {
        if self.task.has_bev() && self.bev_size() != bev_size {
            return Err(ModelError::Config(format!(
                "BEV head covers {} cells per side ({} x {}), labels have {}",
                self.bev_size(),
                self.bev_grid,
                self.bev_patch,
                bev_size
            )));
        }
        Ok(())
    }

    pub fn det_queries(&self) -> usize {
        if self.task.has_detection() {
            self.num_det_queries
        } else {
            0
        }
    }

    pub fn bev_queries(&self) -> usize {
        if self.task.has_bev() {
            self.num_bev_queries
        } else {
            0
        }
    }
}
