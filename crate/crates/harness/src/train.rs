//! Deterministic training loop with per-epoch validation.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sdtr_core::dataset::TrainingSample;
use sdtr_core::metrics::EvalReport;
use sdtr_model::losses::{objective, LossComponents, Targets};
use sdtr_model::{CheckpointMeta, ModelState};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::data::{check_compatible, images_tensor, load_splits, Split};
use crate::error::{io_err, HarnessError, Result};
use crate::eval::{evaluate, ModelPredictor, TestPerturbation};
use crate::optim::{clip_global_norm, learning_rate, AdamW};

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const HISTORY_FILE: &str = "history.json";
pub const CONFIG_FILE: &str = "config.json";
pub const REPORT_FILE: &str = "report.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Optimizer steps taken so far.
    pub step: usize,
    /// Learning rate of the last step of the epoch.
    pub lr: f64,
    /// Mean total loss over the epoch's samples.
    pub train_loss: f64,
    pub train_components: LossComponents,
    /// Validation metrics by flat report key, timing excluded.
    pub val: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub state: ModelState,
    pub history: History,
    /// Validation report after the last epoch.
    pub report: EvalReport,
}

/// Validation metrics without wall-clock fields, so histories of equal
/// runs compare equal.
pub fn deterministic_metrics(r: &EvalReport) -> BTreeMap<String, f64> {
    r.flat()
        .into_iter()
        .filter(|(k, _)| !k.starts_with("timing."))
        .collect()
}

fn targets(s: &TrainingSample) -> Targets<'_> {
    Targets {
        semantic: &s.semantic,
        depth: &s.depth,
        depth_mask: &s.depth_mask,
        bev: &s.bev,
        boxes: &s.boxes,
    }
}

/// Loss and parameter gradients of one sample.
pub fn sample_gradients(
    state: &ModelState,
    cfg: &RunConfig,
    s: &TrainingSample,
) -> Result<(sdtr_model::LossReport, BTreeMap<String, Vec<f64>>)> {
    let (mut g, p, out) = sdtr_model::run(state, &images_tensor(s))?;
    let (total, report) = objective(&mut g, &out, &state.config, &targets(s), &cfg.losses);
    if !report.total.is_finite() {
        return Ok((report, BTreeMap::new()));
    }
    g.backward(total);
    Ok((report, p.gradients(&g)))
}

/// Trains from a fresh initialization on in-memory splits. `on_epoch` sees
/// every epoch record as soon as it is complete.
pub fn train_on(
    cfg: &RunConfig,
    train: &[TrainingSample],
    val: &Split,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    check_compatible(cfg, &val.meta)?;
    if train.is_empty() {
        return Err(HarnessError::Config("empty training split".into()));
    }
    let mut state = ModelState::init(&cfg.model_config(), cfg.seed)?;
    let mut opt = AdamW::new(cfg.optimizer.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let steps_per_epoch = train.len().div_ceil(cfg.batch_size);
    let total_steps = steps_per_epoch * cfg.epochs;
    let mut history = History::default();
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut step = 0;
    let mut report = None;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut comp_sum = LossComponents::default();
        let mut lr = cfg.optimizer.lr;
        for batch in order.chunks(cfg.batch_size) {
            let mut acc: BTreeMap<String, Vec<f64>> = BTreeMap::new();
            for &i in batch {
                let s = &train[i];
                let (rep, grads) = sample_gradients(&state, cfg, s)?;
                if !rep.total.is_finite() {
                    return Err(HarnessError::NonFiniteLoss {
                        step,
                        epoch,
                        scene_seed: s.seed,
                        value: rep.total,
                    });
                }
                loss_sum += rep.total;
                comp_sum.det += rep.components.det;
                comp_sum.bev += rep.components.bev;
                comp_sum.seg += rep.components.seg;
                comp_sum.dep += rep.components.dep;
                for (k, g) in grads {
                    match acc.get_mut(&k) {
                        Some(a) => a.iter_mut().zip(&g).for_each(|(x, y)| *x += y),
                        None => {
                            acc.insert(k, g);
                        }
                    }
                }
            }
            let inv = 1.0 / batch.len() as f64;
            acc.values_mut().flatten().for_each(|g| *g *= inv);
            if let Some(max_norm) = cfg.optimizer.grad_clip {
                let norm = clip_global_norm(&mut acc, max_norm);
                if !norm.is_finite() {
                    return Err(HarnessError::NonFiniteLoss {
                        step,
                        epoch,
                        scene_seed: train[batch[0]].seed,
                        value: norm,
                    });
                }
            }
            lr = learning_rate(&cfg.optimizer, step, total_steps);
            opt.step(&mut state, &acc, lr);
            step += 1;
        }
        let n = train.len() as f64;
        let mut predictor = ModelPredictor {
            state: &state,
            max_detections: cfg.eval.max_detections,
        };
        let r = evaluate(
            &mut predictor,
            &val.samples,
            &val.meta,
            &TestPerturbation::None,
            &cfg.eval,
        )?;
        let record = EpochRecord {
            epoch,
            step,
            lr,
            train_loss: loss_sum / n,
            train_components: LossComponents {
                det: comp_sum.det / n,
                bev: comp_sum.bev / n,
                seg: comp_sum.seg / n,
                dep: comp_sum.dep / n,
            },
            val: deterministic_metrics(&r),
        };
        on_epoch(&record);
        history.epochs.push(record);
        report = Some(r);
    }
    Ok(TrainOutcome {
        state,
        history,
        report: report.expect("at least one epoch"),
    })
}

/// Trains on the on-disk dataset named by the config.
pub fn train(cfg: &RunConfig, on_epoch: &mut dyn FnMut(&EpochRecord)) -> Result<TrainOutcome> {
    let splits = load_splits(&cfg.dataset)?;
    check_compatible(cfg, &splits.train.meta)?;
    train_on(cfg, &splits.train.samples, &splits.val, on_epoch)
}

/// Writes checkpoint, history, config and final report into `dir`.
pub fn write_outputs(dir: &Path, cfg: &RunConfig, outcome: &TrainOutcome) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let step = outcome.history.epochs.last().map_or(0, |e| e.step);
    let meta = CheckpointMeta {
        step: step as u64,
        seed: cfg.seed,
        extra: serde_json::json!({ "run_config": cfg }),
    };
    outcome.state.save(&dir.join(CHECKPOINT_FILE), &meta)?;
    write_json(
        &dir.join(HISTORY_FILE),
        &serde_json::to_value(&outcome.history).expect("history serializes"),
    )?;
    cfg.save(&dir.join(CONFIG_FILE))?;
    write_json(&dir.join(REPORT_FILE), &outcome.report.to_json())
}

pub(crate) fn write_json(path: &Path, v: &serde_json::Value) -> Result<()> {
    let text = serde_json::to_string_pretty(v).expect("json serializes");
    fs::write(path, text + "\n").map_err(io_err(path))
}
