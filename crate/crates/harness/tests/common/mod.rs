#![allow(dead_code)]

use sdtr::config::RunConfig;
use sdtr_core::labels::Task;

/// A run small enough to train in well under a second per epoch: three
/// 32x48 cameras, a width-8 two-layer decoder and an 8x8 BEV grid.
pub fn tiny_run_config(task: Task) -> RunConfig {
    let mut cfg = RunConfig::desk(task);
    let s = &mut cfg.data.scene;
    s.num_cameras = 3;
    s.image_height = 32;
    s.image_width = 48;
    s.hfov_deg = 120.0;
    s.num_points = 400;
    let l = &mut cfg.data.labels;
    l.num_depth_bins = 4;
    l.bev_size = 8;
    l.bev_cell = 5.0;
    cfg.data.train_scenes = 4;
    cfg.data.val_scenes = 2;
    let labels = cfg.label_config();
    let mut m = sdtr_model::ModelConfig::desk(&cfg.data.scene, &labels);
    m.backbone_channels = [4, 6, 8];
    m.embed_dim = 8;
    m.decoder_layers = 2;
    m.decoder_heads = 2;
    m.ffn_dim = 16;
    m.num_det_queries = 12;
    m.bev_grid = 2;
    m.num_bev_queries = 4;
    m.bev_patch = 4;
    cfg.model = m;
    cfg.epochs = 2;
    cfg.batch_size = 2;
    cfg.optimizer.lr = 1e-3;
    cfg.validate().expect("tiny config is valid");
    cfg
}
