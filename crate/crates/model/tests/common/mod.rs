//! Shared fixtures for the model integration tests.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sdtr_core::labels::Task;
use sdtr_core::scene::Box3D;
use sdtr_model::losses::Targets;
use sdtr_model::{ForwardOutput, Graph, ModelConfig, ModelState, ParamVars, Tensor, Var};
use sdtr_testkit::{central_difference, relative_error};

/// Finite-difference step; small enough that ReLU kinks are almost never crossed.
pub const FD_STEP: f64 = 1e-6;
pub const GRAD_TOL: f64 = 1e-4;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>, scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-scale..scale)).collect())
}

/// Two views of 32x48 pixels (2x3 features), `d = 8`, two decoder layers.
pub fn tiny_config(task: Task) -> ModelConfig {
    ModelConfig {
        task,
        num_views: 2,
        image_height: 32,
        image_width: 48,
        backbone_channels: [3, 4, 5],
        embed_dim: 8,
        decoder_layers: 2,
        decoder_heads: 2,
        ffn_dim: 8,
        num_det_queries: 4,
        num_bev_queries: 4,
        semantic_channels: 2,
        depth_bins: 3,
        num_classes: 2,
        num_attributes: 2,
        bev_channels: 4,
        bev_grid: 2,
        bev_patch: 2,
        range: 20.0,
        z_range: 3.0,
        seg_branch: true,
        depth_branch: true,
        pqb: true,
    }
}

pub fn images_for(cfg: &ModelConfig, seed: u64) -> Tensor {
    rand_tensor(
        &mut rng(seed),
        vec![cfg.num_views, 3, cfg.image_height, cfg.image_width],
        1.0,
    )
}

/// Owned supervision matching `cfg`.
pub struct OwnedTargets {
    pub semantic: Vec<u8>,
    pub depth: Vec<u8>,
    pub depth_mask: Vec<u8>,
    pub bev: Vec<u8>,
    pub boxes: Vec<Box3D>,
}

impl OwnedTargets {
    pub fn random(cfg: &ModelConfig, seed: u64) -> Self {
        let mut r = rng(seed);
        let (h, w) = cfg.feature_size();
        let plane = h * w;
        let n = cfg.num_views;
        let semantic = (0..n * cfg.semantic_channels * plane)
            .map(|_| r.random_range(0..2u8))
            .collect();
        let depth_mask: Vec<u8> = (0..n * plane).map(|_| r.random_range(0..2u8)).collect();
        let mut depth = vec![0u8; n * cfg.depth_bins * plane];
        for v in 0..n {
            for px in 0..plane {
                if depth_mask[v * plane + px] == 1 {
                    let k = r.random_range(0..cfg.depth_bins);
                    depth[(v * cfg.depth_bins + k) * plane + px] = 1;
                }
            }
        }
        let side = cfg.bev_size();
        let bev = (0..cfg.bev_channels * side * side)
            .map(|_| r.random_range(0..2u8))
            .collect();
        let boxes = (0..2).map(|_| random_box(&mut r, cfg)).collect();
        Self {
            semantic,
            depth,
            depth_mask,
            bev,
            boxes,
        }
    }

    pub fn view(&self) -> Targets<'_> {
        Targets {
            semantic: &self.semantic,
            depth: &self.depth,
            depth_mask: &self.depth_mask,
            bev: &self.bev,
            boxes: &self.boxes,
        }
    }
}

pub fn random_box(r: &mut ChaCha8Rng, cfg: &ModelConfig) -> Box3D {
    Box3D {
        center: [
            r.random_range(-0.9 * cfg.range..0.9 * cfg.range),
            r.random_range(-0.9 * cfg.range..0.9 * cfg.range),
            r.random_range(-0.9 * cfg.z_range..0.9 * cfg.z_range),
        ],
        size: [
            r.random_range(0.5..3.0),
            r.random_range(0.5..5.0),
            r.random_range(0.5..2.0),
        ],
        yaw: r.random_range(-3.0..3.0),
        velocity: [r.random_range(-2.0..2.0), r.random_range(-2.0..2.0)],
        class_id: r.random_range(0..cfg.num_classes),
        attribute_id: r.random_range(0..cfg.num_attributes),
    }
}

/// `sum(x * R)` for a fixed random `R`, turning any tensor into a scalar
/// whose gradient exercises every output entry.
pub fn project(g: &mut Graph, x: Var, seed: u64) -> Var {
    let shape = g.shape(x).to_vec();
    let r = rand_tensor(&mut rng(seed), shape, 1.0);
    let r = g.constant(r);
    let m = g.mul(x, r);
    g.sum(m)
}

/// Max relative error between tape gradients and central differences of
/// `f` with respect to every entry of every input.
pub fn check_op(inputs: &[Tensor], f: &dyn Fn(&mut Graph, &[Var]) -> Var) -> f64 {
    let eval = |ts: &[Tensor]| {
        let mut g = Graph::new();
        let vars: Vec<Var> = ts.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars);
        let s = project(&mut g, out, 99);
        g.value(s).item()
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars);
    let s = project(&mut g, out, 99);
    g.backward(s);
    let mut worst: f64 = 0.0;
    for (i, t) in inputs.iter().enumerate() {
        let analytic = g
            .grad(vars[i])
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; t.len()]);
        let mut fx = |x: &[f64]| {
            let mut ts = inputs.to_vec();
            ts[i] = Tensor::new(t.shape.clone(), x.to_vec());
            eval(&ts)
        };
        for (j, &a) in analytic.iter().enumerate() {
            let numeric = central_difference(&mut fx, &t.data, j, FD_STEP);
            worst = worst.max(relative_error(a, numeric));
        }
    }
    worst
}

/// Scalar objective built on top of a forward pass.
pub type Head<'a> = dyn Fn(&mut Graph, &ParamVars, &ForwardOutput) -> Var + 'a;

pub fn eval_head(state: &ModelState, images: &Tensor, head: &Head) -> f64 {
    let (mut g, p, out) = sdtr_model::run(state, images).unwrap();
    let s = head(&mut g, &p, &out);
    g.value(s).item()
}

/// Checks up to `per_param` random entries of every parameter whose name
/// starts with one of `prefixes`. Returns (max relative error, max |grad| seen).
pub fn check_params(
    state: &ModelState,
    images: &Tensor,
    head: &Head,
    prefixes: &[&str],
    per_param: usize,
    seed: u64,
) -> (f64, f64) {
    let (mut g, p, out) = sdtr_model::run(state, images).unwrap();
    let s = head(&mut g, &p, &out);
    g.backward(s);
    let grads = p.gradients(&g);
    let mut r = rng(seed);
    let mut worst: f64 = 0.0;
    let mut largest: f64 = 0.0;
    let mut checked = 0;
    for (name, t) in &state.params {
        if !prefixes.iter().any(|pre| name.starts_with(pre)) {
            continue;
        }
        let picks: Vec<usize> = if t.len() <= per_param {
            (0..t.len()).collect()
        } else {
            (0..per_param).map(|_| r.random_range(0..t.len())).collect()
        };
        for j in picks {
            let mut fx = |x: &[f64]| {
                let mut st = state.clone();
                st.get_mut(name).data.copy_from_slice(x);
                eval_head(&st, images, head)
            };
            let numeric = central_difference(&mut fx, &t.data, j, FD_STEP);
            let analytic = grads[name][j];
            let err = relative_error(analytic, numeric);
            if err > GRAD_TOL {
                eprintln!("{name}[{j}]: analytic {analytic:e} numeric {numeric:e}");
            }
            worst = worst.max(err);
            largest = largest.max(analytic.abs());
            checked += 1;
        }
    }
    assert!(checked > 0, "no parameters matched {prefixes:?}");
    (worst, largest)
}
