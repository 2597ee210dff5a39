//! Inference, test-time perturbations and report assembly.

use std::time::Instant;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sdtr_core::dataset::{DatasetMeta, TrainingSample};
use sdtr_core::geometry::perturb_extrinsics;
use sdtr_core::labels::{BEV_DRIVABLE, BEV_LANE};
use sdtr_core::metrics::{evaluate_detections, BevIouAccumulator, Detection, EvalReport, Frame, Perturbation};
use sdtr_core::scene::{generate_scene, render_views, SceneConfig};
use sdtr_model::boxcode::{decode, BoxRanges};
use sdtr_model::{ModelState, Tensor, BOX_CODE_LEN};

use crate::config::EvalConfig;
use crate::data::images_tensor;
use crate::error::{HarnessError, Result};

/// Test-time corruption of the camera input.
#[derive(Debug, Clone, PartialEq)]
pub enum TestPerturbation {
    None,
    /// Gaussian rotation (rad) and translation (m) noise on every camera.
    ExtrinsicNoise {
        sigma_rot: f64,
        sigma_trans: f64,
    },
    /// Zero the listed views in every sample.
    DropCameras(Vec<usize>),
    /// Zero `count` views chosen independently per sample.
    DropRandom {
        count: usize,
    },
}

impl TestPerturbation {
    pub fn validate(&self, num_views: usize) -> Result<()> {
        let bad = |m: String| Err(HarnessError::Config(m));
        match self {
            Self::None => Ok(()),
            Self::ExtrinsicNoise { sigma_rot, sigma_trans } => {
                if *sigma_rot >= 0.0 && *sigma_trans >= 0.0 {
                    Ok(())
                } else {
                    bad("noise sigmas must be non-negative".into())
                }
            }
            Self::DropCameras(views) => {
                if let Some(v) = views.iter().find(|&&v| v >= num_views) {
                    return bad(format!("camera {v} does not exist ({num_views} views)"));
                }
                let mut unique = views.clone();
                unique.sort_unstable();
                unique.dedup();
                if unique.len() >= num_views {
                    return bad("dropping every camera leaves nothing to evaluate".into());
                }
                Ok(())
            }
            Self::DropRandom { count } => {
                if *count >= num_views {
                    bad(format!(
                        "dropping {count} of {num_views} cameras leaves nothing to evaluate"
                    ))
                } else {
                    Ok(())
                }
            }
        }
    }

    /// Metadata recorded in the report.
    pub fn describe(&self) -> Perturbation {
        match self {
            Self::None => Perturbation::none(),
            Self::ExtrinsicNoise { sigma_rot, sigma_trans } => Perturbation {
                kind: "extrinsic_noise".into(),
                sigma_rot: *sigma_rot,
                sigma_trans: *sigma_trans,
                dropped_cameras: vec![],
            },
            Self::DropCameras(views) => Perturbation {
                kind: "camera_drop".into(),
                dropped_cameras: views.clone(),
                ..Perturbation::none()
            },
            Self::DropRandom { count } => Perturbation {
                kind: format!("camera_drop_random:{count}"),
                ..Perturbation::none()
            },
        }
    }
}

fn sample_rng(noise_seed: u64, scene_seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(noise_seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ scene_seed)
}

/// Applies `p` to one sample in place. Extrinsic noise re-renders the scene
/// from its seed through the perturbed rig; labels stay in the ego frame.
pub fn perturb_sample(
    sample: &mut TrainingSample,
    p: &TestPerturbation,
    scene_cfg: &SceneConfig,
    noise_seed: u64,
) -> Result<()> {
    match p {
        TestPerturbation::None => {}
        TestPerturbation::ExtrinsicNoise { sigma_rot, sigma_trans } => {
            if *sigma_rot > 0.0 || *sigma_trans > 0.0 {
                let mut scene = generate_scene(scene_cfg, sample.seed)?;
                let seed = noise_seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ sample.seed;
                scene.rig = perturb_extrinsics(&scene.rig, *sigma_rot, *sigma_trans, seed);
                sample.images = render_views(&scene, scene_cfg).images;
            }
        }
        TestPerturbation::DropCameras(views) => sample.drop_views(views),
        TestPerturbation::DropRandom { count } => {
            let mut rng = sample_rng(noise_seed, sample.seed);
            let views = index::sample(&mut rng, sample.dims.num_views, *count).into_vec();
            sample.drop_views(&views);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Default)]
pub struct Prediction {
    pub detections: Vec<Detection>,
    /// `C_b x H_b x W_b` probabilities.
    pub bev: Option<Vec<f64>>,
}

pub trait Predictor {
    fn predict(&mut self, sample: &TrainingSample) -> Result<Prediction>;
}

/// Keeps the `k` highest-scoring (query, class) pairs of one decoder layer.
/// Ties keep the lower flat index first.
pub fn decode_detections(cls: &Tensor, reg: &Tensor, attr: &Tensor, ranges: BoxRanges, k: usize) -> Vec<Detection> {
    let (n_q, n_cls) = cls.dims2();
    let n_attr = attr.dims2().1;
    let mut order: Vec<usize> = (0..n_q * n_cls).collect();
    order.sort_by(|&a, &b| cls.data[b].total_cmp(&cls.data[a]).then(a.cmp(&b)));
    order
        .into_iter()
        .take(k)
        .map(|flat| {
            let (q, c) = (flat / n_cls, flat % n_cls);
            let a = &attr.data[q * n_attr..(q + 1) * n_attr];
            let attribute = (0..n_attr).fold(0, |best, i| if a[i] > a[best] { i } else { best });
            Detection {
                bbox: decode(
                    &reg.data[q * BOX_CODE_LEN..(q + 1) * BOX_CODE_LEN],
                    c,
                    attribute,
                    ranges,
                ),
                score: sdtr_model::autodiff::sigmoid(cls.data[flat]),
            }
        })
        .collect()
}

pub struct ModelPredictor<'a> {
    pub state: &'a ModelState,
    pub max_detections: usize,
}

impl Predictor for ModelPredictor<'_> {
    fn predict(&mut self, sample: &TrainingSample) -> Result<Prediction> {
        let (g, _, out) = sdtr_model::run(self.state, &images_tensor(sample))?;
        let cfg = &self.state.config;
        let ranges = BoxRanges {
            range: cfg.range,
            z_range: cfg.z_range,
        };
        let detections = match out.det.last() {
            Some(d) => decode_detections(
                g.value(d.cls),
                g.value(d.reg),
                g.value(d.attr),
                ranges,
                self.max_detections,
            ),
            None => vec![],
        };
        let bev = out.bev_logits.map(|b| {
            g.value(b)
                .data
                .iter()
                .map(|&x| sdtr_model::autodiff::sigmoid(x))
                .collect()
        });
        Ok(Prediction { detections, bev })
    }
}

pub fn class_names(scene: &SceneConfig) -> Vec<String> {
    scene.classes.iter().map(|c| c.name.clone()).collect()
}

/// BEV channel names in channel order.
pub fn bev_names(scene: &SceneConfig) -> Vec<String> {
    let mut names = vec![String::new(); 2];
    names[BEV_DRIVABLE] = "drivable".into();
    names[BEV_LANE] = "lane".into();
    names.extend(class_names(scene));
    names
}

/// Evaluates `predictor` on `samples` under perturbation `p`.
pub fn evaluate<P: Predictor + ?Sized>(
    predictor: &mut P,
    samples: &[TrainingSample],
    meta: &DatasetMeta,
    p: &TestPerturbation,
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    p.validate(meta.dims.num_views)?;
    let task = meta.labels.task;
    let mut frames = Vec::with_capacity(samples.len());
    let mut bev_acc = BevIouAccumulator::new(meta.dims.bev_channels);
    let mut predict_secs = 0.0;
    for s in samples {
        let mut s = s.clone();
        perturb_sample(&mut s, p, &meta.scene, cfg.noise_seed)?;
        let start = Instant::now();
        let pred = predictor.predict(&s)?;
        predict_secs += start.elapsed().as_secs_f64();
        if task.has_bev() {
            let probs = pred
                .bev
                .as_ref()
                .ok_or_else(|| HarnessError::Config("predictor produced no BEV map for a BEV task".into()))?;
            bev_acc.add(probs, &s.bev, cfg.bev_threshold);
        }
        frames.push(Frame {
            preds: pred.detections,
            gts: s.boxes.clone(),
        });
    }
    let num_classes = meta.scene.num_classes();
    Ok(EvalReport {
        class_names: class_names(&meta.scene),
        detection: task.has_detection().then(|| evaluate_detections(&frames, num_classes)),
        bev_names: if task.has_bev() { bev_names(&meta.scene) } else { vec![] },
        bev_iou: if task.has_bev() { bev_acc.iou() } else { vec![] },
        samples_per_s: if predict_secs > 0.0 {
            samples.len() as f64 / predict_secs
        } else {
            0.0
        },
        num_samples: samples.len(),
        perturbation: p.describe(),
    })
}
