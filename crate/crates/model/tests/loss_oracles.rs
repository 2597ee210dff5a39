//! Matcher against exhaustive search; losses against hand-evaluated values.

mod common;

use common::*;
use proptest::prelude::*;
use rand::Rng;
use sdtr_core::labels::Task;
use sdtr_core::scene::Box3D;
use sdtr_model::boxcode::{encode, BoxRanges};
use sdtr_model::hungarian::assign;
use sdtr_model::losses::{self, total_loss, LossComponents, LossWeights};
use sdtr_model::network::DetOutput;
use sdtr_model::{Graph, Tensor};
use sdtr_testkit::exhaustive_assignment;

const R: BoxRanges = BoxRanges {
    range: 20.0,
    z_range: 3.0,
};

fn gt_box() -> Box3D {
    Box3D {
        center: [2.0, -3.0, 0.5],
        size: [2.0, 4.0, 1.5],
        yaw: 0.3,
        velocity: [1.0, 0.0],
        class_id: 1,
        attribute_id: 0,
    }
}

fn sig(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn focal_pos(x: f64) -> f64 {
    -0.25 * (1.0 - sig(x)).powi(2) * sig(x).ln()
}

fn focal_neg(x: f64) -> f64 {
    -0.75 * sig(x).powi(2) * (1.0 - sig(x)).ln()
}

fn head(g: &mut Graph, cls: Vec<f64>, reg: Vec<f64>, attr: Vec<f64>, n_q: usize) -> DetOutput {
    DetOutput {
        cls: g.param(Tensor::new(vec![n_q, cls.len() / n_q], cls)),
        reg: g.param(Tensor::new(vec![n_q, 10], reg)),
        attr: g.param(Tensor::new(vec![n_q, attr.len() / n_q], attr)),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn hungarian_equals_exhaustive_search(seed in any::<u64>()) {
        let mut r = rng(seed);
        let n_gt = r.random_range(0..=5);
        let n_q = r.random_range(n_gt.max(1)..=8);
        let cost: Vec<Vec<f64>> = (0..n_gt)
            .map(|_| (0..n_q).map(|_| r.random_range(-5.0..5.0)).collect())
            .collect();
        let got = assign(&cost);
        let (best, oracle) = exhaustive_assignment(&cost);
        let total: f64 = got.iter().enumerate().map(|(i, &j)| cost[i][j]).sum();
        prop_assert_eq!(got.len(), n_gt);
        prop_assert!((total - best).abs() < 1e-9 || n_gt == 0);
        prop_assert_eq!(got, oracle);
    }

    #[test]
    fn match_queries_equals_exhaustive_search(seed in any::<u64>()) {
        let mut r = rng(seed);
        let cfg = tiny_config(Task::Detection);
        let n_gt = r.random_range(0..=5);
        let n_q = r.random_range(n_gt.max(1)..=8);
        let gts: Vec<Box3D> = (0..n_gt).map(|_| random_box(&mut r, &cfg)).collect();
        let cls = rand_tensor(&mut r, vec![n_q, 2], 3.0).data;
        let reg = rand_tensor(&mut r, vec![n_q, 10], 2.0).data;
        let w = LossWeights::default();
        let cost = losses::matching_cost(&cls, 2, &reg, &gts, R, &w);
        let got = losses::match_queries(&cls, 2, &reg, &gts, R, &w);
        prop_assert_eq!(got, exhaustive_assignment(&cost).1);
    }

    #[test]
    fn losses_are_non_negative(seed in any::<u64>()) {
        let cfg = tiny_config(Task::Joint);
        let t = OwnedTargets::random(&cfg, seed);
        let mut r = rng(seed);
        let mut g = Graph::new();
        let h = head(
            &mut g,
            rand_tensor(&mut r, vec![8], 5.0).data,
            rand_tensor(&mut r, vec![40], 3.0).data,
            rand_tensor(&mut r, vec![8], 3.0).data,
            4,
        );
        let (d, terms) = losses::detection_loss(&mut g, &h, &t.boxes, R, &LossWeights::default());
        prop_assert!(g.value(d).item() >= 0.0);
        prop_assert!(terms.cls >= 0.0 && terms.reg >= 0.0 && terms.attr >= 0.0);
        let bev = g.param(rand_tensor(&mut r, vec![4, 4, 4], 5.0));
        let b = losses::bev_loss(&mut g, bev, &t.bev, &[1.0, 2.0, 3.0, 4.0]);
        let (fh, fw) = cfg.feature_size();
        let seg = g.param(rand_tensor(&mut r, vec![2, 2, fh, fw], 5.0));
        let s = losses::seg_loss(&mut g, seg, &t.semantic);
        let dep = g.param(rand_tensor(&mut r, vec![2, 3, fh, fw], 5.0));
        let dl = losses::depth_loss(&mut g, dep, &t.depth, &t.depth_mask);
        for v in [b, s, dl] {
            prop_assert!(g.value(v).item() >= 0.0);
        }
    }
}

#[test]
fn trivial_matches() {
    let w = LossWeights::default();
    let gt = gt_box();
    let raw = encode(&gt, R).to_vec();
    assert_eq!(losses::match_queries(&[-3.0, 3.0], 2, &raw, &[gt], R, &w), vec![0]);
    let mut three = vec![0.0; 30];
    three[20..].copy_from_slice(&raw);
    assert_eq!(losses::match_queries(&[0.0; 6], 2, &three, &[gt], R, &w), vec![2]);
    assert!(losses::match_queries(&[0.0; 6], 2, &three, &[], R, &w).is_empty());
}

#[test]
fn two_gt_three_queries_matches_brute_force() {
    let cost = vec![vec![4.0, 1.0, 3.0], vec![2.0, 0.0, 5.0]];
    // Injections: (0,1)->4+0, (1,0)->1+2=3 best, (2,0)->5, (2,1)->3+0=3 tie broken by column order.
    let (best, oracle) = exhaustive_assignment(&cost);
    assert_eq!(best, 3.0);
    let got = assign(&cost);
    assert_eq!(got.iter().enumerate().map(|(i, &j)| cost[i][j]).sum::<f64>(), 3.0);
    assert_eq!(got, oracle);
}

#[test]
fn no_ground_truth_leaves_only_small_negative_focal_terms() {
    let mut g = Graph::new();
    let x = -4.595;
    let h = head(&mut g, vec![x; 8], vec![0.3; 40], vec![0.0; 8], 4);
    let (v, terms) = losses::detection_loss(&mut g, &h, &[], R, &LossWeights::default());
    let want = 8.0 * focal_neg(x);
    assert!((terms.cls - want).abs() < 1e-15);
    assert!(terms.cls < 1e-4);
    assert_eq!((terms.reg, terms.attr), (0.0, 0.0));
    assert!((g.value(v).item() - 2.0 * want).abs() < 1e-15);
}

#[test]
fn perfect_predictions_give_vanishing_loss() {
    let gt = gt_box();
    let mut reg = vec![0.0; 20];
    reg[10..].copy_from_slice(&encode(&gt, R));
    let mut g = Graph::new();
    let h = head(
        &mut g,
        vec![-30.0, -30.0, -30.0, 30.0],
        reg,
        vec![-30.0, -30.0, 30.0, -30.0],
        2,
    );
    let (v, _) = losses::detection_loss(&mut g, &h, &[gt], R, &LossWeights::default());
    assert!(g.value(v).item() < 1e-9, "{}", g.value(v).item());

    let bev = g.param(Tensor::new(vec![1, 2, 2], vec![40.0, -40.0, -40.0, 40.0]));
    let b = losses::bev_loss(&mut g, bev, &[1, 0, 0, 1], &[2.0]);
    assert!(g.value(b).item() < 1e-15);
}

#[test]
fn two_query_one_gt_hand_case() {
    let gt = gt_box();
    let exact = encode(&gt, R);
    let mut reg = Vec::new();
    for (q, off) in [(0, 0.1), (1, 2.0)] {
        let mut raw = exact;
        for v in raw.iter_mut().skip(3) {
            *v += if q == 0 { off } else { -off };
        }
        reg.extend_from_slice(&raw);
    }
    let cls = vec![-1.0, 2.0, 0.5, -3.0];
    let attr = vec![0.2, -0.4, 1.0, 1.0];
    let mut g = Graph::new();
    let h = head(&mut g, cls, reg, attr, 2);
    let w = LossWeights::default();
    let (v, terms) = losses::detection_loss(&mut g, &h, &[gt], R, &w);

    // Query 0 is both closer and more confident in class 1, so it is matched.
    let cls_want = focal_neg(-1.0) + focal_pos(2.0) + focal_neg(0.5) + focal_neg(-3.0);
    // Five unit-weight entries and two velocity entries at weight 0.2.
    let reg_want = (5.0 + 2.0 * 0.2) * 0.1;
    let attr_want = (0.2f64.exp() + (-0.4f64).exp()).ln() - 0.2;
    assert!((terms.cls - cls_want).abs() < 1e-12);
    assert!((terms.reg - reg_want).abs() < 1e-9);
    assert!((terms.attr - attr_want).abs() < 1e-12);
    let total = w.cls_weight * cls_want + w.reg_weight * reg_want + w.attr_weight * attr_want;
    assert!((g.value(v).item() - total).abs() < 1e-9);
}

#[test]
fn total_loss_is_linear_in_each_component() {
    let w = LossWeights {
        w_bev: 0.7,
        ..LossWeights::default()
    };
    let base = LossComponents {
        det: 1.1,
        bev: 0.4,
        seg: 0.5,
        dep: 0.2,
    };
    let coef = [w.w_det, w.w_bev, w.gamma_seg, w.gamma_dep];
    for (i, c) in coef.iter().enumerate() {
        let mut scaled = base;
        let slot = match i {
            0 => &mut scaled.det,
            1 => &mut scaled.bev,
            2 => &mut scaled.seg,
            _ => &mut scaled.dep,
        };
        let old = *slot;
        *slot *= 3.0;
        let delta = total_loss(&scaled, &w) - total_loss(&base, &w);
        assert!((delta - 2.0 * old * c).abs() < 1e-12);
    }
}

#[test]
fn no_valid_depth_pixels_give_zero_depth_loss() {
    let mut g = Graph::new();
    let x = g.param(Tensor::new(vec![1, 2, 1, 2], vec![0.3, -2.0, 1.0, 4.0]));
    let d = losses::depth_loss(&mut g, x, &[1, 0, 0, 1], &[0, 0]);
    assert_eq!(g.value(d).item(), 0.0);
    g.backward(d);
    assert!(g.grad(x).unwrap().iter().all(|&v| v == 0.0));
}
