//! Central finite-difference checks of every tape op, every network stage
//! and every loss, in f64 on small instances.

mod common;

use common::*;
use sdtr_core::labels::Task;
use sdtr_model::autodiff::ConvSpec;
use sdtr_model::losses::{self, LossWeights};
use sdtr_model::{Graph, ModelState, Tensor, Var};

fn assert_op(name: &str, inputs: &[Tensor], f: &dyn Fn(&mut Graph, &[Var]) -> Var) {
    let err = check_op(inputs, f);
    assert!(err < GRAD_TOL, "{name}: relative error {err:e}");
}

#[test]
fn elementwise_ops() {
    let mut r = rng(1);
    let a = rand_tensor(&mut r, vec![3, 4], 2.0);
    let b = rand_tensor(&mut r, vec![3, 4], 2.0);
    let ab = [a.clone(), b];
    assert_op("add", &ab, &|g, v| g.add(v[0], v[1]));
    assert_op("sub", &ab, &|g, v| g.sub(v[0], v[1]));
    assert_op("mul", &ab, &|g, v| g.mul(v[0], v[1]));
    let one = [a];
    assert_op("scale", &one, &|g, v| g.scale(v[0], -1.7));
    assert_op("relu", &one, &|g, v| g.relu(v[0]));
    assert_op("sigmoid", &one, &|g, v| g.sigmoid(v[0]));
    assert_op("exp", &one, &|g, v| g.exp(v[0]));
    assert_op("sum", &one, &|g, v| g.sum(v[0]));
    assert_op("mean", &one, &|g, v| g.mean(v[0]));
}

#[test]
fn matrix_ops() {
    let mut r = rng(2);
    let a = rand_tensor(&mut r, vec![3, 4], 1.0);
    let b = rand_tensor(&mut r, vec![4, 5], 1.0);
    let bt = rand_tensor(&mut r, vec![5, 4], 1.0);
    let at = rand_tensor(&mut r, vec![4, 3], 1.0);
    assert_op("matmul", &[a.clone(), b.clone()], &|g, v| g.matmul(v[0], v[1]));
    assert_op("matmul a^T", &[at.clone(), b.clone()], &|g, v| {
        g.matmul_t(v[0], v[1], true, false)
    });
    assert_op("matmul b^T", &[a.clone(), bt.clone()], &|g, v| {
        g.matmul_t(v[0], v[1], false, true)
    });
    assert_op("matmul a^T b^T", &[at, bt], &|g, v| g.matmul_t(v[0], v[1], true, true));
    let bias = rand_tensor(&mut r, vec![5], 1.0);
    assert_op("linear", &[a.clone(), b, bias], &|g, v| g.linear(v[0], v[1], v[2]));
    let gamma = rand_tensor(&mut r, vec![4], 1.5);
    let beta = rand_tensor(&mut r, vec![4], 1.0);
    assert_op("layer_norm", &[a.clone(), gamma, beta], &|g, v| {
        g.layer_norm(v[0], v[1], v[2])
    });
    assert_op("softmax_rows", std::slice::from_ref(&a), &|g, v| g.softmax_rows(v[0]));
    let c = rand_tensor(&mut r, vec![3, 2], 1.0);
    assert_op("concat_cols", &[a.clone(), c], &|g, v| g.concat_cols(&[v[0], v[1]]));
    let d = rand_tensor(&mut r, vec![2, 4], 1.0);
    assert_op("concat_rows", &[a.clone(), d], &|g, v| g.concat_rows(&[v[0], v[1]]));
    assert_op("slice_cols", std::slice::from_ref(&a), &|g, v| g.slice_cols(v[0], 1, 2));
    assert_op("slice_rows", std::slice::from_ref(&a), &|g, v| g.slice_rows(v[0], 1, 2));
    assert_op("reshape", &[a], &|g, v| g.reshape(v[0], vec![2, 6]));
}

#[test]
fn convolution_ops() {
    let mut r = rng(3);
    let x = rand_tensor(&mut r, vec![2, 2, 4, 4], 1.0);
    let w3 = rand_tensor(&mut r, vec![3, 2, 3, 3], 1.0);
    let w2 = rand_tensor(&mut r, vec![3, 2, 2, 2], 1.0);
    let b = rand_tensor(&mut r, vec![3], 1.0);
    for spec in [
        ConvSpec::new(1, 1, 1),
        ConvSpec::new(2, 1, 1),
        ConvSpec::new(1, 2, 2),
        ConvSpec::new(1, 0, 1),
    ] {
        assert_op(
            &format!("conv3 {spec:?}"),
            &[x.clone(), w3.clone(), b.clone()],
            &|g, v| g.conv2d(v[0], v[1], v[2], spec),
        );
    }
    assert_op("conv2 stride 2", &[x.clone(), w2, b], &|g, v| {
        g.conv2d(v[0], v[1], v[2], ConvSpec::new(2, 0, 1))
    });
    assert_op("nchw_to_tokens", std::slice::from_ref(&x), &|g, v| {
        g.nchw_to_tokens(v[0])
    });
    assert_op("group_channels", &[x], &|g, v| g.group_channels(v[0]));
}

#[test]
fn query_builder_ops() {
    let mut r = rng(4);
    let rows = rand_tensor(&mut r, vec![3, 7], 1.0);
    for k in [1, 2, 3, 7, 10] {
        assert_op(
            &format!("adaptive_pool_rows {k}"),
            std::slice::from_ref(&rows),
            &|g, v| g.adaptive_pool_rows(v[0], k),
        );
    }
    let s = rand_tensor(&mut r, vec![3], 1.0);
    assert_op("scale_rows", &[rows.clone(), s.clone()], &|g, v| {
        g.scale_rows(v[0], v[1])
    });
    assert_op("add_col_broadcast", &[rows, s], &|g, v| g.add_col_broadcast(v[0], v[1]));
    let views = rand_tensor(&mut r, vec![2, 4], 1.0);
    let grid = rand_tensor(&mut r, vec![3, 4], 1.0);
    assert_op("view_grid_sum", &[views, grid], &|g, v| g.view_grid_sum(v[0], v[1]));
    let patches = rand_tensor(&mut r, vec![4, 2 * 3 * 3], 1.0);
    assert_op("tile_patches", &[patches], &|g, v| g.tile_patches(v[0], 2, 3));
}

fn state(task: Task, seed: u64) -> ModelState {
    ModelState::init(&tiny_config(task), seed).unwrap()
}

fn assert_params(name: &str, task: Task, head: &Head, prefixes: &[&str]) {
    let st = state(task, 10);
    let images = images_for(&st.config, 11);
    let (err, largest) = check_params(&st, &images, head, prefixes, 4, 12);
    assert!(err < GRAD_TOL, "{name}: relative error {err:e}");
    assert!(largest > 1e-6, "{name}: every checked gradient vanished");
}

#[test]
fn backbone_gradients() {
    assert_params(
        "backbone",
        Task::Detection,
        &|g, _, out| {
            let a = project(g, out.f4, 1);
            let b = project(g, out.f5, 2);
            g.add(a, b)
        },
        &["backbone."],
    );
}

#[test]
fn sd_encoder_gradients() {
    assert_params(
        "sd encoder",
        Task::Detection,
        &|g, _, out| {
            let a = project(g, out.sd.p_seg.unwrap(), 3);
            let b = project(g, out.sd.p_dep.unwrap(), 4);
            g.add(a, b)
        },
        &["seg.", "dep.", "backbone.f5"],
    );
}

#[test]
fn query_builder_gradients() {
    assert_params(
        "pqb",
        Task::Joint,
        &|g, _, out| project(g, out.q1, 5),
        &["pqb.", "query.", "seg.", "backbone.stage3"],
    );
}

#[test]
fn decoder_gradients() {
    assert_params(
        "decoder",
        Task::Detection,
        &|g, _, out| {
            let a = project(g, out.layers[0], 6);
            let b = project(g, out.layers[1], 7);
            g.add(a, b)
        },
        &["dec.", "query.", "pqb."],
    );
}

#[test]
fn detection_head_gradients() {
    assert_params(
        "det head",
        Task::Detection,
        &|g, _, out| {
            let d = out.det[1];
            let a = project(g, d.cls, 8);
            let b = project(g, d.reg, 9);
            let c = project(g, d.attr, 10);
            let ab = g.add(a, b);
            g.add(ab, c)
        },
        &["det.", "dec.1.", "query.ref"],
    );
}

#[test]
fn bev_head_gradients() {
    assert_params(
        "bev head",
        Task::Bev,
        &|g, _, out| project(g, out.bev_logits.unwrap(), 11),
        &["bev.", "dec.1.", "query.bev"],
    );
}

#[test]
fn full_objective_gradients_every_task() {
    for task in [Task::Detection, Task::Bev, Task::Joint] {
        let cfg = tiny_config(task);
        let targets = OwnedTargets::random(&cfg, 13);
        let w = LossWeights {
            bev_pos_weights: vec![1.0, 2.0, 3.0, 4.0],
            ..LossWeights::default()
        };
        let head = |g: &mut Graph, _: &sdtr_model::ParamVars, out: &sdtr_model::ForwardOutput| {
            losses::objective(g, out, &cfg, &targets.view(), &w).0
        };
        assert_params(&format!("objective {task:?}"), task, &head, &[""]);
    }
}

#[test]
fn loss_functions_against_their_inputs() {
    let mut r = rng(14);
    let cfg = tiny_config(Task::Joint);
    let t = OwnedTargets::random(&cfg, 15);
    let w = LossWeights::default();
    let ranges = sdtr_model::boxcode::BoxRanges {
        range: cfg.range,
        z_range: cfg.z_range,
    };
    let cls = rand_tensor(&mut r, vec![4, 2], 2.0);
    let reg = rand_tensor(&mut r, vec![4, 10], 1.0);
    let attr = rand_tensor(&mut r, vec![4, 2], 1.0);
    let det = |g: &mut Graph, v: &[Var]| {
        let head = sdtr_model::network::DetOutput {
            cls: v[0],
            reg: v[1],
            attr: v[2],
        };
        losses::detection_loss(g, &head, &t.boxes, ranges, &w).0
    };
    assert_op("detection_loss", &[cls.clone(), reg.clone(), attr.clone()], &det);
    assert_op("detection_loss no gt", &[cls, reg, attr], &|g, v| {
        let head = sdtr_model::network::DetOutput {
            cls: v[0],
            reg: v[1],
            attr: v[2],
        };
        losses::detection_loss(g, &head, &[], ranges, &w).0
    });

    let bev = rand_tensor(&mut r, vec![4, 4, 4], 2.0);
    assert_op("bev_loss", &[bev], &|g, v| {
        losses::bev_loss(g, v[0], &t.bev, &[1.0, 2.0, 3.0, 0.5])
    });
    let (h, wd) = cfg.feature_size();
    let seg = rand_tensor(&mut r, vec![2, 2, h, wd], 2.0);
    assert_op("seg_loss", &[seg], &|g, v| losses::seg_loss(g, v[0], &t.semantic));
    let dep = rand_tensor(&mut r, vec![2, 3, h, wd], 2.0);
    assert_op("depth_loss", &[dep], &|g, v| {
        losses::depth_loss(g, v[0], &t.depth, &t.depth_mask)
    });
}

#[test]
fn checker_rejects_a_wrong_derivative() {
    let x = Tensor::new(vec![3], vec![0.3, -1.2, 2.0]);
    // d/dx x^2 reported as x instead of 2x.
    let err = check_op(&[x], &|g, v| {
        let t = g.value(v[0]).clone();
        let val = t.data.iter().map(|a| a * a).sum();
        g.fused_scalar(v[0], val, t.data.clone())
    });
    assert!(err > 0.1, "a halved derivative slipped through: {err:e}");
}
