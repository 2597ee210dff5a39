//! Training objectives: query matching, detection, BEV and auxiliary losses.
//!
//! Each loss is evaluated outside the tape together with its derivative and
//! attached through `Graph::fused_scalar`.

use sdtr_core::scene::Box3D;
use serde::{Deserialize, Serialize};

use crate::autodiff::{sigmoid, Graph, Var};
use crate::boxcode::{pred_code, target_code, BoxRanges};
use crate::config::{ModelConfig, BOX_CODE_LEN};
use crate::hungarian;
use crate::network::{DetOutput, ForwardOutput};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub gamma_seg: f64,
    pub gamma_dep: f64,
    pub w_det: f64,
    pub w_bev: f64,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
    /// Matching-cost weight of the focal classification term.
    pub match_cls: f64,
    /// Matching-cost weight of the box L1 term.
    pub match_l1: f64,
    /// Coefficients of the classification, regression and attribute terms of `L_det`.
    pub cls_weight: f64,
    pub reg_weight: f64,
    pub attr_weight: f64,
    /// Per-entry weights of the box code in both the matching cost and the
    /// regression loss. Velocity is not observable from a single frame, so
    /// it is down-weighted by default.
    pub code_weights: [f64; BOX_CODE_LEN],
    /// Positive-class weight per BEV channel.
    pub bev_pos_weights: Vec<f64>,
    /// Supervise every decoder layer rather than only the last.
    pub aux_layers: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            gamma_seg: 3.0,
            gamma_dep: 1.0,
            w_det: 1.0,
            w_bev: 1.0,
            focal_alpha: 0.25,
            focal_gamma: 2.0,
            match_cls: 2.0,
            match_l1: 0.25,
            cls_weight: 2.0,
            reg_weight: 0.25,
            attr_weight: 1.0,
            code_weights: [1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 0.2, 0.2],
            bev_pos_weights: vec![1.0, 3.0, 3.0, 3.0, 3.0],
            aux_layers: true,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), String> {
        let scalars = [
            self.gamma_seg,
            self.gamma_dep,
            self.w_det,
            self.w_bev,
            self.focal_gamma,
            self.match_cls,
            self.match_l1,
            self.cls_weight,
            self.reg_weight,
            self.attr_weight,
        ];
        if scalars
            .iter()
            .chain(&self.bev_pos_weights)
            .chain(&self.code_weights)
            .any(|w| w.is_nan() || *w < 0.0)
        {
            return Err("loss weights must be non-negative".into());
        }
        if !(0.0..=1.0).contains(&self.focal_alpha) {
            return Err("focal_alpha must lie in [0, 1]".into());
        }
        Ok(())
    }
}

/// `ln(1 + e^x)` without overflow.
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Sigmoid focal loss of one logit and its derivative.
pub fn focal(x: f64, target: bool, alpha: f64, gamma: f64) -> (f64, f64) {
    let p = sigmoid(x);
    if target {
        let log_p = -softplus(-x);
        let q = 1.0 - p;
        let loss = -alpha * q.powf(gamma) * log_p;
        let d = alpha * (gamma * q.powf(gamma) * p * log_p - q.powf(gamma + 1.0));
        (loss, d)
    } else {
        let log_q = -softplus(x);
        let loss = -(1.0 - alpha) * p.powf(gamma) * log_q;
        let d = (1.0 - alpha) * (p.powf(gamma + 1.0) - gamma * p.powf(gamma) * (1.0 - p) * log_q);
        (loss, d)
    }
}

/// Binary cross-entropy on a logit with positive weight `wp`, and its derivative.
pub fn bce_logit(x: f64, target: bool, wp: f64) -> (f64, f64) {
    if target {
        (wp * softplus(-x), wp * (sigmoid(x) - 1.0))
    } else {
        (softplus(x), sigmoid(x))
    }
}

/// `sum_k w_k |a_k - b_k|`.
fn weighted_l1(a: &[f64], b: &[f64], w: &[f64]) -> f64 {
    a.iter().zip(b).zip(w).map(|((x, y), w)| w * (x - y).abs()).sum()
}

fn ranges(cfg: &ModelConfig) -> BoxRanges {
    BoxRanges {
        range: cfg.range,
        z_range: cfg.z_range,
    }
}

/// Matching cost `match_cls * focal_cost + match_l1 * L1(code)` (L1 weighted
/// by `code_weights`) for every
/// (GT, query) pair, `|GT| x N_q`.
pub fn matching_cost(
    cls_logits: &[f64],
    num_classes: usize,
    reg: &[f64],
    gts: &[Box3D],
    r: BoxRanges,
    w: &LossWeights,
) -> Vec<Vec<f64>> {
    let n_q = cls_logits.len() / num_classes;
    let codes: Vec<[f64; BOX_CODE_LEN]> = (0..n_q)
        .map(|q| pred_code(&reg[q * BOX_CODE_LEN..(q + 1) * BOX_CODE_LEN], r).0)
        .collect();
    gts.iter()
        .map(|gt| {
            let t = target_code(gt);
            (0..n_q)
                .map(|q| {
                    let x = cls_logits[q * num_classes + gt.class_id];
                    let cls = focal(x, true, w.focal_alpha, w.focal_gamma).0
                        - focal(x, false, w.focal_alpha, w.focal_gamma).0;
                    w.match_cls * cls + w.match_l1 * weighted_l1(&codes[q], &t, &w.code_weights)
                })
                .collect()
        })
        .collect()
}

/// Query index assigned to each GT box by minimum-cost bipartite matching.
pub fn match_queries(
    cls_logits: &[f64],
    num_classes: usize,
    reg: &[f64],
    gts: &[Box3D],
    r: BoxRanges,
    w: &LossWeights,
) -> Vec<usize> {
    hungarian::assign(&matching_cost(cls_logits, num_classes, reg, gts, r, w))
}

/// Detection loss terms of one decoder layer.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct DetTerms {
    pub cls: f64,
    pub reg: f64,
    pub attr: f64,
}

/// Weighted `L_det` of one layer attached to the tape, plus its unweighted terms.
pub fn detection_loss(
    g: &mut Graph,
    head: &DetOutput,
    gts: &[Box3D],
    r: BoxRanges,
    w: &LossWeights,
) -> (Var, DetTerms) {
    let cls = g.value(head.cls).clone();
    let reg = g.value(head.reg).clone();
    let attr = g.value(head.attr).clone();
    let (n_q, n_cls) = cls.dims2();
    let n_attr = attr.dims2().1;
    let assignment = match_queries(&cls.data, n_cls, &reg.data, gts, r, w);
    let norm = gts.len().max(1) as f64;

    let mut target = vec![false; n_q * n_cls];
    for (gt, &q) in gts.iter().zip(&assignment) {
        target[q * n_cls + gt.class_id] = true;
    }
    let mut cls_loss = 0.0;
    let mut d_cls = vec![0.0; n_q * n_cls];
    for i in 0..n_q * n_cls {
        let (l, d) = focal(cls.data[i], target[i], w.focal_alpha, w.focal_gamma);
        cls_loss += l;
        d_cls[i] = d / norm;
    }
    cls_loss /= norm;

    let mut reg_loss = 0.0;
    let mut d_reg = vec![0.0; n_q * BOX_CODE_LEN];
    let mut attr_loss = 0.0;
    let mut d_attr = vec![0.0; n_q * n_attr];
    for (gt, &q) in gts.iter().zip(&assignment) {
        let raw = &reg.data[q * BOX_CODE_LEN..(q + 1) * BOX_CODE_LEN];
        let (code, deriv) = pred_code(raw, r);
        let t = target_code(gt);
        for k in 0..BOX_CODE_LEN {
            let diff = code[k] - t[k];
            let cw = w.code_weights[k];
            reg_loss += cw * diff.abs();
            let sign = if diff > 0.0 {
                1.0
            } else if diff < 0.0 {
                -1.0
            } else {
                0.0
            };
            d_reg[q * BOX_CODE_LEN + k] = cw * sign * deriv[k] / norm;
        }
        let logits = &attr.data[q * n_attr..(q + 1) * n_attr];
        let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logits.iter().map(|l| (l - mx).exp()).sum();
        attr_loss += mx + z.ln() - logits[gt.attribute_id];
        for (a, l) in logits.iter().enumerate() {
            let p = (l - mx).exp() / z;
            d_attr[q * n_attr + a] = (p - if a == gt.attribute_id { 1.0 } else { 0.0 }) / norm;
        }
    }
    reg_loss /= norm;
    attr_loss /= norm;

    let scale = |d: &mut Vec<f64>, s: f64| d.iter_mut().for_each(|v| *v *= s);
    scale(&mut d_cls, w.cls_weight);
    scale(&mut d_reg, w.reg_weight);
    scale(&mut d_attr, w.attr_weight);
    let a = g.fused_scalar(head.cls, w.cls_weight * cls_loss, d_cls);
    let b = g.fused_scalar(head.reg, w.reg_weight * reg_loss, d_reg);
    let c = g.fused_scalar(head.attr, w.attr_weight * attr_loss, d_attr);
    let ab = g.add(a, b);
    (
        g.add(ab, c),
        DetTerms {
            cls: cls_loss,
            reg: reg_loss,
            attr: attr_loss,
        },
    )
}

/// Weighted BCE over all BEV cells, averaged over `C_b x H_b x W_b`.
pub fn bev_loss(g: &mut Graph, logits: Var, gt: &[u8], pos_weights: &[f64]) -> Var {
    let t = g.value(logits);
    let c = t.shape[0];
    assert_eq!(pos_weights.len(), c, "one positive weight per BEV channel");
    assert_eq!(gt.len(), t.len(), "BEV target size mismatch");
    let plane = t.len() / c;
    let n = t.len() as f64;
    let mut total = 0.0;
    let mut d = vec![0.0; t.len()];
    for i in 0..t.len() {
        let (l, dl) = bce_logit(t.data[i], gt[i] == 1, pos_weights[i / plane]);
        total += l;
        d[i] = dl / n;
    }
    g.fused_scalar(logits, total / n, d)
}

/// BCE averaged over every semantic channel and pixel.
pub fn seg_loss(g: &mut Graph, logits: Var, labels: &[u8]) -> Var {
    let t = g.value(logits);
    assert_eq!(labels.len(), t.len(), "semantic target size mismatch");
    let n = t.len() as f64;
    let mut total = 0.0;
    let mut d = vec![0.0; t.len()];
    for i in 0..t.len() {
        let (l, dl) = bce_logit(t.data[i], labels[i] == 1, 1.0);
        total += l;
        d[i] = dl / n;
    }
    g.fused_scalar(logits, total / n, d)
}

/// BCE summed over depth bins at valid pixels, divided by the number of
/// valid pixels; 0 when none are valid.
pub fn depth_loss(g: &mut Graph, logits: Var, one_hot: &[u8], mask: &[u8]) -> Var {
    let t = g.value(logits);
    let (n, c_d, h, w) = t.dims4();
    let plane = h * w;
    assert_eq!(one_hot.len(), t.len(), "depth target size mismatch");
    assert_eq!(mask.len(), n * plane, "depth mask size mismatch");
    let valid = mask.iter().filter(|&&m| m == 1).count();
    let mut d = vec![0.0; t.len()];
    if valid == 0 {
        return g.fused_scalar(logits, 0.0, d);
    }
    let mut total = 0.0;
    for v in 0..n {
        for px in 0..plane {
            if mask[v * plane + px] != 1 {
                continue;
            }
            for k in 0..c_d {
                let i = (v * c_d + k) * plane + px;
                let (l, dl) = bce_logit(t.data[i], one_hot[i] == 1, 1.0);
                total += l;
                d[i] = dl / valid as f64;
            }
        }
    }
    g.fused_scalar(logits, total / valid as f64, d)
}

/// Unweighted loss components of one sample.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub det: f64,
    pub bev: f64,
    pub seg: f64,
    pub dep: f64,
}

/// `w_det L_det + w_bev L_bev + gamma_seg L_seg + gamma_dep L_dep`.
pub fn total_loss(c: &LossComponents, w: &LossWeights) -> f64 {
    w.w_det * c.det + w.w_bev * c.bev + w.gamma_seg * c.seg + w.gamma_dep * c.dep
}

/// Per-sample supervision.
#[derive(Debug, Clone, Copy)]
pub struct Targets<'a> {
    pub semantic: &'a [u8],
    pub depth: &'a [u8],
    pub depth_mask: &'a [u8],
    pub bev: &'a [u8],
    pub boxes: &'a [Box3D],
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub components: LossComponents,
    /// Detection terms of the last decoder layer.
    pub last_layer: DetTerms,
    pub total: f64,
}

/// Attaches the full objective of one forward pass to the tape.
pub fn objective(
    g: &mut Graph,
    out: &ForwardOutput,
    cfg: &ModelConfig,
    t: &Targets,
    w: &LossWeights,
) -> (Var, LossReport) {
    let r = ranges(cfg);
    let mut report = LossReport::default();
    let mut terms: Vec<Var> = Vec::new();
    if !out.det.is_empty() {
        let layers: Vec<DetOutput> = if w.aux_layers {
            out.det.clone()
        } else {
            vec![*out.det.last().expect("nonempty")]
        };
        let mut det_vars = Vec::new();
        for (i, head) in layers.iter().enumerate() {
            let (v, terms) = detection_loss(g, head, t.boxes, r, w);
            report.components.det += g.value(v).item();
            if i + 1 == layers.len() {
                report.last_layer = terms;
            }
            det_vars.push(v);
        }
        let det = sum_vars(g, &det_vars);
        terms.push(g.scale(det, w.w_det));
    }
    if let Some(bev) = out.bev_logits {
        let v = bev_loss(g, bev, t.bev, &w.bev_pos_weights);
        report.components.bev = g.value(v).item();
        terms.push(g.scale(v, w.w_bev));
    }
    if let Some(seg) = out.sd.seg_logits {
        let v = seg_loss(g, seg, t.semantic);
        report.components.seg = g.value(v).item();
        terms.push(g.scale(v, w.gamma_seg));
    }
    if let Some(dep) = out.sd.dep_logits {
        let v = depth_loss(g, dep, t.depth, t.depth_mask);
        report.components.dep = g.value(v).item();
        terms.push(g.scale(v, w.gamma_dep));
    }
    let total = sum_vars(g, &terms);
    report.total = g.value(total).item();
    (total, report)
}

fn sum_vars(g: &mut Graph, vars: &[Var]) -> Var {
    let mut acc = vars[0];
    for &v in &vars[1..] {
        acc = g.add(acc, v);
    }
    acc
}
