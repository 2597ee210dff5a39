//! nuScenes-style detection metrics and BEV IoU.
//!
//! Matching is greedy in descending score order on BEV center distance; AP
//! integrates a 101-point interpolated precision curve above 10% recall and
//! 10% precision; the five TP errors are averaged over true positives at the
//! 2 m threshold and fall back to 1 when a class has none.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::scene::Box3D;

pub const DIST_THRESHOLDS: [f64; 4] = [0.5, 1.0, 2.0, 4.0];
pub const TP_THRESHOLD: f64 = 2.0;
pub const TP_NAMES: [&str; 5] = ["ate", "ase", "aoe", "ave", "aae"];
const MIN_RECALL: f64 = 0.1;
const MIN_PRECISION: f64 = 0.1;
const RECALL_POINTS: usize = 101;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("missing report field `{0}`")]
    MissingField(String),
    #[error("malformed report field `{0}`")]
    Malformed(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: Box3D,
    pub score: f64,
}

/// Outcome for one prediction of the evaluated class.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatchRecord {
    pub pred: usize,
    pub score: f64,
    /// Index of the matched ground-truth box, `None` for a false positive.
    pub gt: Option<usize>,
}

pub fn center_distance(a: &Box3D, b: &Box3D) -> f64 {
    (a.center[0] - b.center[0]).hypot(a.center[1] - b.center[1])
}

/// Greedy matching of one frame for one class. Predictions are visited in
/// descending score (ties by index); each takes the nearest still-unmatched
/// ground truth of its class within `threshold`.
pub fn match_for_eval(preds: &[Detection], gts: &[Box3D], class_id: usize, threshold: f64) -> Vec<MatchRecord> {
    let mut order: Vec<usize> = (0..preds.len())
        .filter(|&i| preds[i].bbox.class_id == class_id)
        .collect();
    order.sort_by(|&a, &b| preds[b].score.total_cmp(&preds[a].score).then(a.cmp(&b)));
    let mut taken = vec![false; gts.len()];
    let mut out = Vec::with_capacity(order.len());
    for i in order {
        let mut best: Option<(f64, usize)> = None;
        for (j, g) in gts.iter().enumerate() {
            if taken[j] || g.class_id != class_id {
                continue;
            }
            let d = center_distance(&preds[i].bbox, g);
            if d <= threshold && best.is_none_or(|(bd, _)| d < bd) {
                best = Some((d, j));
            }
        }
        if let Some((_, j)) = best {
            taken[j] = true;
        }
        out.push(MatchRecord {
            pred: i,
            score: preds[i].score,
            gt: best.map(|(_, j)| j),
        });
    }
    out
}

/// Precision at `RECALL_POINTS` evenly spaced recall levels, linearly
/// interpolated over the raw curve and zero beyond the maximum recall.
fn interpolated_precision(records: &[MatchRecord], n_gt: usize) -> Vec<f64> {
    let mut sorted: Vec<&MatchRecord> = records.iter().collect();
    sorted.sort_by(|a, b| b.score.total_cmp(&a.score));
    let mut tp = 0.0;
    let mut fp = 0.0;
    let mut recall = Vec::with_capacity(sorted.len());
    let mut precision = Vec::with_capacity(sorted.len());
    for r in sorted {
        if r.gt.is_some() {
            tp += 1.0;
        } else {
            fp += 1.0;
        }
        recall.push(tp / n_gt as f64);
        precision.push(tp / (tp + fp));
    }
    (0..RECALL_POINTS)
        .map(|k| {
            let x = k as f64 / (RECALL_POINTS - 1) as f64;
            interp(x, &recall, &precision)
        })
        .collect()
}

/// Piecewise-linear interpolation with constant extension on the left and
/// zero on the right (numpy `interp(..., right=0)`).
fn interp(x: f64, xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len();
    if n == 0 || x > xs[n - 1] {
        return 0.0;
    }
    if x < xs[0] {
        return ys[0];
    }
    // First index with xs[i] >= x; xs is non-decreasing.
    let i = xs.partition_point(|&v| v < x);
    if xs[i] == x {
        // Among equal abscissae numpy picks the last one.
        let last = xs[i..].partition_point(|&v| v <= x) + i - 1;
        return ys[last];
    }
    let (x0, x1, y0, y1) = (xs[i - 1], xs[i], ys[i - 1], ys[i]);
    y0 + (x - x0) * (y1 - y0) / (x1 - x0)
}

/// nuScenes AP: mean of the interpolated precision above 10% recall, with
/// precision shifted down by 10% and rescaled back to `[0, 1]`.
pub fn average_precision(records: &[MatchRecord], n_gt: usize) -> f64 {
    if n_gt == 0 {
        return 0.0;
    }
    let prec = interpolated_precision(records, n_gt);
    let start = (100.0 * MIN_RECALL).round() as usize + 1;
    let tail = &prec[start..];
    tail.iter()
        .map(|p| (p - MIN_PRECISION).max(0.0) / (1.0 - MIN_PRECISION))
        .sum::<f64>()
        / tail.len() as f64
}

pub fn wrap_angle(a: f64) -> f64 {
    let mut x = (a + PI).rem_euclid(2.0 * PI) - PI;
    if x <= -PI {
        x += 2.0 * PI;
    }
    x
}

/// Absolute yaw difference in `[0, pi]`.
pub fn yaw_difference(a: f64, b: f64) -> f64 {
    wrap_angle(a - b).abs()
}

/// IoU of two boxes after aligning centers and headings.
pub fn aligned_volume_iou(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let inter: f64 = (0..3).map(|k| a[k].min(b[k])).product();
    let va: f64 = a.iter().product();
    let vb: f64 = b.iter().product();
    inter / (va + vb - inter)
}

/// Per-TP errors `(ATE, ASE, AOE, AVE, AAE)` for one prediction/GT pair.
pub fn pair_errors(pred: &Box3D, gt: &Box3D) -> [f64; 5] {
    [
        center_distance(pred, gt),
        1.0 - aligned_volume_iou(&pred.size, &gt.size),
        yaw_difference(pred.yaw, gt.yaw),
        (pred.velocity[0] - gt.velocity[0]).hypot(pred.velocity[1] - gt.velocity[1]),
        if pred.attribute_id == gt.attribute_id { 0.0 } else { 1.0 },
    ]
}

/// Mean TP errors over matched pairs; each error is 1 when there are none.
pub fn tp_errors(pairs: &[(Box3D, Box3D)]) -> [f64; 5] {
    if pairs.is_empty() {
        return [1.0; 5];
    }
    let mut acc = [0.0; 5];
    for (p, g) in pairs {
        for (a, e) in acc.iter_mut().zip(pair_errors(p, g)) {
            *a += e;
        }
    }
    acc.map(|a| a / pairs.len() as f64)
}

/// `(1/10) * [5 mAP + sum(1 - min(1, mTP))]`.
pub fn compose_nds(map: f64, tp_means: &[f64; 5]) -> f64 {
    let tp_score: f64 = tp_means.iter().map(|e| 1.0 - e.min(1.0)).sum();
    (5.0 * map + tp_score) / 10.0
}

/// One evaluated frame: predictions and ground truth in the ego frame.
#[derive(Debug, Clone, Default)]
pub struct Frame {
    pub preds: Vec<Detection>,
    pub gts: Vec<Box3D>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionMetrics {
    /// `ap[class][threshold]` over [`DIST_THRESHOLDS`].
    pub ap: Vec<[f64; 4]>,
    pub map: f64,
    /// Per-class TP errors.
    pub class_tp: Vec<[f64; 5]>,
    pub tp: [f64; 5],
    pub nds: f64,
}

pub fn evaluate_detections(frames: &[Frame], num_classes: usize) -> DetectionMetrics {
    let mut ap = vec![[0.0; 4]; num_classes];
    let mut class_tp = vec![[1.0; 5]; num_classes];
    for class in 0..num_classes {
        let n_gt: usize = frames
            .iter()
            .map(|f| f.gts.iter().filter(|g| g.class_id == class).count())
            .sum();
        for (t, &thr) in DIST_THRESHOLDS.iter().enumerate() {
            let records: Vec<MatchRecord> = frames
                .iter()
                .flat_map(|f| match_for_eval(&f.preds, &f.gts, class, thr))
                .collect();
            ap[class][t] = average_precision(&records, n_gt);
        }
        let mut pairs = Vec::new();
        for f in frames {
            for r in match_for_eval(&f.preds, &f.gts, class, TP_THRESHOLD) {
                if let Some(g) = r.gt {
                    pairs.push((f.preds[r.pred].bbox, f.gts[g]));
                }
            }
        }
        class_tp[class] = tp_errors(&pairs);
    }
    let map = ap.iter().flatten().sum::<f64>() / (4 * num_classes.max(1)) as f64;
    let mut tp = [0.0; 5];
    for e in &class_tp {
        for k in 0..5 {
            tp[k] += e[k] / num_classes.max(1) as f64;
        }
    }
    let nds = compose_nds(map, &tp);
    DetectionMetrics {
        ap,
        map,
        class_tp,
        tp,
        nds,
    }
}

/// Per-channel IoU of binarized predictions; 1 when both masks are empty.
pub fn bev_iou(pred: &[f64], gt: &[u8], channels: usize, threshold: f64) -> Vec<f64> {
    let mut acc = BevIouAccumulator::new(channels);
    acc.add(pred, gt, threshold);
    acc.iou()
}

/// Accumulates intersections and unions over many grids.
#[derive(Debug, Clone)]
pub struct BevIouAccumulator {
    inter: Vec<u64>,
    union: Vec<u64>,
}

impl BevIouAccumulator {
    pub fn new(channels: usize) -> Self {
        Self {
            inter: vec![0; channels],
            union: vec![0; channels],
        }
    }

    pub fn add(&mut self, pred: &[f64], gt: &[u8], threshold: f64) {
        assert_eq!(pred.len(), gt.len(), "prediction and ground-truth grids differ in size");
        let c = self.inter.len();
        let plane = gt.len() / c;
        for ch in 0..c {
            for i in ch * plane..(ch + 1) * plane {
                let p = pred[i] >= threshold;
                let g = gt[i] != 0;
                self.inter[ch] += (p && g) as u64;
                self.union[ch] += (p || g) as u64;
            }
        }
    }

    pub fn iou(&self) -> Vec<f64> {
        self.inter
            .iter()
            .zip(&self.union)
            .map(|(&i, &u)| if u == 0 { 1.0 } else { i as f64 / u as f64 })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Perturbation {
    pub kind: String,
    pub sigma_rot: f64,
    pub sigma_trans: f64,
    pub dropped_cameras: Vec<usize>,
}

impl Perturbation {
    pub fn none() -> Self {
        Self {
            kind: "none".into(),
            sigma_rot: 0.0,
            sigma_trans: 0.0,
            dropped_cameras: vec![],
        }
    }
}

/// Full evaluation result. Serialized as a flat JSON object with keys
/// `ap.<class>.<thr>`, `map`, `tp.<name>`, `nds`, `iou.<class>`.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub class_names: Vec<String>,
    pub detection: Option<DetectionMetrics>,
    pub bev_names: Vec<String>,
    pub bev_iou: Vec<f64>,
    pub samples_per_s: f64,
    pub num_samples: usize,
    pub perturbation: Perturbation,
}

fn thr_key(t: f64) -> String {
    format!("{t:.1}")
}

impl EvalReport {
    pub fn nds(&self) -> Option<f64> {
        self.detection.as_ref().map(|d| d.nds)
    }

    pub fn to_json(&self) -> Value {
        let mut m = Map::new();
        m.insert("classes".into(), Value::from(self.class_names.clone()));
        m.insert("bev_classes".into(), Value::from(self.bev_names.clone()));
        if let Some(d) = &self.detection {
            for (c, name) in self.class_names.iter().enumerate() {
                for (t, thr) in DIST_THRESHOLDS.iter().enumerate() {
                    m.insert(format!("ap.{name}.{}", thr_key(*thr)), Value::from(d.ap[c][t]));
                }
                for (k, tp) in TP_NAMES.iter().enumerate() {
                    m.insert(format!("class_tp.{name}.{tp}"), Value::from(d.class_tp[c][k]));
                }
            }
            m.insert("map".into(), Value::from(d.map));
            for (k, tp) in TP_NAMES.iter().enumerate() {
                m.insert(format!("tp.{tp}"), Value::from(d.tp[k]));
            }
            m.insert("nds".into(), Value::from(d.nds));
        }
        for (name, iou) in self.bev_names.iter().zip(&self.bev_iou) {
            m.insert(format!("iou.{name}"), Value::from(*iou));
        }
        m.insert("timing.samples_per_s".into(), Value::from(self.samples_per_s));
        m.insert("num_samples".into(), Value::from(self.num_samples));
        m.insert("perturbation.kind".into(), Value::from(self.perturbation.kind.clone()));
        m.insert(
            "perturbation.sigma_rot".into(),
            Value::from(self.perturbation.sigma_rot),
        );
        m.insert(
            "perturbation.sigma_trans".into(),
            Value::from(self.perturbation.sigma_trans),
        );
        m.insert(
            "perturbation.dropped_cameras".into(),
            Value::from(self.perturbation.dropped_cameras.clone()),
        );
        Value::Object(m)
    }

    pub fn from_json(v: &Value) -> Result<Self, MetricsError> {
        let obj = v.as_object().ok_or_else(|| MetricsError::Malformed("<root>".into()))?;
        let get = |k: &str| obj.get(k).ok_or_else(|| MetricsError::MissingField(k.to_string()));
        let num = |k: &str| -> Result<f64, MetricsError> {
            get(k)?.as_f64().ok_or_else(|| MetricsError::Malformed(k.to_string()))
        };
        let strings = |k: &str| -> Result<Vec<String>, MetricsError> {
            get(k)?
                .as_array()
                .and_then(|a| a.iter().map(|s| s.as_str().map(String::from)).collect())
                .ok_or_else(|| MetricsError::Malformed(k.to_string()))
        };
        let class_names = strings("classes")?;
        let bev_names = strings("bev_classes")?;
        let detection = if obj.contains_key("nds") {
            let mut ap = vec![[0.0; 4]; class_names.len()];
            let mut class_tp = vec![[0.0; 5]; class_names.len()];
            for (c, name) in class_names.iter().enumerate() {
                for (t, thr) in DIST_THRESHOLDS.iter().enumerate() {
                    ap[c][t] = num(&format!("ap.{name}.{}", thr_key(*thr)))?;
                }
                for (k, tp) in TP_NAMES.iter().enumerate() {
                    class_tp[c][k] = num(&format!("class_tp.{name}.{tp}"))?;
                }
            }
            let mut tp = [0.0; 5];
            for (k, name) in TP_NAMES.iter().enumerate() {
                tp[k] = num(&format!("tp.{name}"))?;
            }
            Some(DetectionMetrics {
                ap,
                map: num("map")?,
                class_tp,
                tp,
                nds: num("nds")?,
            })
        } else {
            None
        };
        let bev_iou = bev_names
            .iter()
            .map(|n| num(&format!("iou.{n}")))
            .collect::<Result<Vec<_>, _>>()?;
        let dropped = get("perturbation.dropped_cameras")?
            .as_array()
            .and_then(|a| a.iter().map(|x| x.as_u64().map(|v| v as usize)).collect())
            .ok_or_else(|| MetricsError::Malformed("perturbation.dropped_cameras".into()))?;
        Ok(Self {
            class_names,
            detection,
            bev_names,
            bev_iou,
            samples_per_s: num("timing.samples_per_s")?,
            num_samples: num("num_samples")? as usize,
            perturbation: Perturbation {
                kind: get("perturbation.kind")?
                    .as_str()
                    .ok_or_else(|| MetricsError::Malformed("perturbation.kind".into()))?
                    .to_string(),
                sigma_rot: num("perturbation.sigma_rot")?,
                sigma_trans: num("perturbation.sigma_trans")?,
                dropped_cameras: dropped,
            },
        })
    }

    /// Scalar lookup by flat key, e.g. `nds` or `tp.ate`.
    pub fn scalar(&self, key: &str) -> Result<f64, MetricsError> {
        let v = self.to_json();
        v.get(key)
            .and_then(Value::as_f64)
            .ok_or_else(|| MetricsError::MissingField(key.to_string()))
    }

    pub fn flat(&self) -> BTreeMap<String, f64> {
        self.to_json()
            .as_object()
            .map(|m| {
                m.iter()
                    .filter_map(|(k, v)| v.as_f64().map(|x| (k.clone(), x)))
                    .collect()
            })
            .unwrap_or_default()
    }
}
