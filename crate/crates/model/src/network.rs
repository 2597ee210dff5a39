//! Forward pass: backbone, semantic/depth encoder, prior-guided query
//! builder, transformer decoder and task heads.

use crate::autodiff::{ConvSpec, Graph, Var};
use crate::config::{ModelConfig, BOX_CODE_LEN};
use crate::state::{ModelState, ParamVars};
use crate::tensor::Tensor;
use crate::ModelError;

const SAME3: ConvSpec = ConvSpec::new(1, 1, 1);
const DOWN3: ConvSpec = ConvSpec::new(2, 1, 1);
const POINT: ConvSpec = ConvSpec::new(1, 0, 1);

fn conv(g: &mut Graph, p: &ParamVars, name: &str, x: Var, spec: ConvSpec) -> Var {
    g.conv2d(x, p.get(&format!("{name}.w")), p.get(&format!("{name}.b")), spec)
}

fn linear(g: &mut Graph, p: &ParamVars, name: &str, x: Var) -> Var {
    g.linear(x, p.get(&format!("{name}.w")), p.get(&format!("{name}.b")))
}

/// Returns `(F4, F5)`, both `N x C x H/16 x W/16`.
pub fn backbone_forward(
    g: &mut Graph,
    p: &ParamVars,
    cfg: &ModelConfig,
    images: Var,
) -> Result<(Var, Var), ModelError> {
    let shape = g.shape(images).to_vec();
    let want = [cfg.num_views, 3, cfg.image_height, cfg.image_width];
    if shape != want {
        return Err(ModelError::Shape(format!(
            "images have shape {shape:?}, expected {want:?}"
        )));
    }
    let x = conv(g, p, "backbone.stem", images, ConvSpec::new(4, 0, 1));
    let x = g.relu(x);
    let x = conv(g, p, "backbone.stage2", x, DOWN3);
    let x = g.relu(x);
    let x = conv(g, p, "backbone.stage3", x, DOWN3);
    let f4 = g.relu(x);
    let x = conv(g, p, "backbone.f5", f4, SAME3);
    let f5 = g.relu(x);
    Ok((f4, f5))
}

/// Pre-activation residual unit `x + conv(relu(conv(relu(x))))`.
fn res_unit(g: &mut Graph, p: &ParamVars, name: &str, x: Var) -> Var {
    let h = g.relu(x);
    let h = conv(g, p, &format!("{name}.c1"), h, SAME3);
    let h = g.relu(h);
    let h = conv(g, p, &format!("{name}.c2"), h, SAME3);
    g.add(x, h)
}

/// Segmentation branch logits: one residual unit and a 1x1 projection.
pub fn seg_branch(g: &mut Graph, p: &ParamVars, f5: Var) -> Var {
    let h = res_unit(g, p, "seg.ru", f5);
    conv(g, p, "seg.proj", h, POINT)
}

/// Depth branch logits: three residual units with dilated convolutions
/// (rates 1 and 2) between them, then a 1x1 projection.
pub fn depth_branch(g: &mut Graph, p: &ParamVars, f5: Var) -> Var {
    let h = res_unit(g, p, "dep.ru1", f5);
    let h = conv(g, p, "dep.dcl1", h, ConvSpec::new(1, 1, 1));
    let h = g.relu(h);
    let h = res_unit(g, p, "dep.ru2", h);
    let h = conv(g, p, "dep.dcl2", h, ConvSpec::new(1, 2, 2));
    let h = g.relu(h);
    let h = res_unit(g, p, "dep.ru3", h);
    conv(g, p, "dep.proj", h, POINT)
}

/// Encoder outputs; each is `None` when its branch is disabled.
#[derive(Debug, Clone, Copy)]
pub struct SdOutput {
    pub seg_logits: Option<Var>,
    pub p_seg: Option<Var>,
    pub dep_logits: Option<Var>,
    pub p_dep: Option<Var>,
}

pub fn sd_encoder_forward(g: &mut Graph, p: &ParamVars, cfg: &ModelConfig, f5: Var) -> SdOutput {
    let (seg_logits, p_seg) = if cfg.seg_branch {
        let l = seg_branch(g, p, f5);
        (Some(l), Some(g.sigmoid(l)))
    } else {
        (None, None)
    };
    let (dep_logits, p_dep) = if cfg.depth_branch {
        let l = depth_branch(g, p, f5);
        (Some(l), Some(g.sigmoid(l)))
    } else {
        (None, None)
    };
    SdOutput {
        seg_logits,
        p_seg,
        dep_logits,
        p_dep,
    }
}

/// Prior-guided query builder. Regroups `p_seg: N x C_s x H x W` to
/// `C_s x (N*H*W)`, average-pools each class row to `N_q / C_s` values,
/// weights row `c` by `s_w[c]`, flattens to `S_p` (length `N_q`) and adds
/// `S_p[q]` to every channel of query `q`. Returns `(Q1, S_p)`.
pub fn pqb_forward(g: &mut Graph, p_seg: Var, s_w: Var, q0: Var) -> Result<(Var, Var), ModelError> {
    let c_s = g.shape(p_seg)[1];
    let n_q = g.shape(q0)[0];
    if c_s == 0 || !n_q.is_multiple_of(c_s) {
        return Err(ModelError::Config(format!(
            "{n_q} queries not divisible by {c_s} semantic channels"
        )));
    }
    let grouped = g.group_channels(p_seg);
    let pooled = g.adaptive_pool_rows(grouped, n_q / c_s);
    let weighted = g.scale_rows(pooled, s_w);
    let s_p = g.reshape(weighted, vec![n_q]);
    let q1 = g.add_col_broadcast(q0, s_p);
    Ok((q1, s_p))
}

/// Plain-value version of [`pqb_forward`].
pub fn pqb_values(p_seg: &Tensor, s_w: &[f64], q0: &Tensor) -> Result<(Tensor, Vec<f64>), ModelError> {
    let mut g = Graph::new();
    let ps = g.constant(p_seg.clone());
    let sw = g.constant(Tensor::new(vec![s_w.len()], s_w.to_vec()));
    let q = g.constant(q0.clone());
    let (q1, sp) = pqb_forward(&mut g, ps, sw, q)?;
    Ok((g.value(q1).clone(), g.value(sp).data.clone()))
}

/// Multi-head attention output and the per-head attention matrices.
pub struct Attention {
    pub out: Var,
    pub weights: Vec<Var>,
}

/// Multi-head scaled dot-product attention with parameters under `name`.
pub fn attention(
    g: &mut Graph,
    p: &ParamVars,
    name: &str,
    heads: usize,
    queries: Var,
    keys: Var,
    values: Var,
) -> Attention {
    let q = linear(g, p, &format!("{name}.q"), queries);
    let k = linear(g, p, &format!("{name}.k"), keys);
    let v = linear(g, p, &format!("{name}.v"), values);
    let d = g.shape(q)[1];
    let dh = d / heads;
    let mut outs = Vec::with_capacity(heads);
    let mut weights = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = g.slice_cols(q, h * dh, dh);
        let kh = g.slice_cols(k, h * dh, dh);
        let vh = g.slice_cols(v, h * dh, dh);
        let s = g.matmul_t(qh, kh, false, true);
        let s = g.scale(s, 1.0 / (dh as f64).sqrt());
        let a = g.softmax_rows(s);
        outs.push(g.matmul(a, vh));
        weights.push(a);
    }
    let cat = if heads == 1 { outs[0] } else { g.concat_cols(&outs) };
    Attention {
        out: linear(g, p, &format!("{name}.o"), cat),
        weights,
    }
}

/// Flattened multi-view keys: `(memory, positional)` where memory is the
/// projected F4 tokens and positional is view embedding + 2D position.
pub fn decoder_memory(g: &mut Graph, p: &ParamVars, f4: Var) -> (Var, Var) {
    let tokens = g.nchw_to_tokens(f4);
    let mem = linear(g, p, "dec.input", tokens);
    let pos = g.view_grid_sum(p.get("dec.view_embed"), p.get("dec.pos_embed"));
    (mem, pos)
}

/// Positional embedding of every query: an MLP of the detection reference
/// points, zero rows for BEV queries. `None` for BEV-only models.
pub fn query_positions(g: &mut Graph, p: &ParamVars, cfg: &ModelConfig) -> Option<Var> {
    if !cfg.task.has_detection() {
        return None;
    }
    let r = g.sigmoid(p.get("query.ref"));
    let h = linear(g, p, "query.pos1", r);
    let h = g.relu(h);
    let pos = linear(g, p, "query.pos2", h);
    if !cfg.task.has_bev() {
        return Some(pos);
    }
    let zeros = g.constant(Tensor::zeros(vec![cfg.num_bev_queries, cfg.embed_dim]));
    Some(g.concat_rows(&[pos, zeros]))
}

/// One post-norm decoder layer. `qpos` is added to the attention queries
/// (and self-attention keys), never to the values.
#[allow(clippy::too_many_arguments)]
pub fn decoder_layer(
    g: &mut Graph,
    p: &ParamVars,
    cfg: &ModelConfig,
    l: usize,
    q: Var,
    qpos: Option<Var>,
    mem: Var,
    pos: Var,
) -> Var {
    let pre = format!("dec.{l}");
    let with_pos = |g: &mut Graph, x: Var| match qpos {
        Some(qp) => g.add(x, qp),
        None => x,
    };
    let qk = with_pos(g, q);
    let sa = attention(g, p, &format!("{pre}.self"), cfg.decoder_heads, qk, qk, q).out;
    let x = g.add(q, sa);
    let x = g.layer_norm(x, p.get(&format!("{pre}.ln1.g")), p.get(&format!("{pre}.ln1.b")));
    let keys = g.add(mem, pos);
    let xq = with_pos(g, x);
    let ca = attention(g, p, &format!("{pre}.cross"), cfg.decoder_heads, xq, keys, mem).out;
    let x2 = g.add(x, ca);
    let x2 = g.layer_norm(x2, p.get(&format!("{pre}.ln2.g")), p.get(&format!("{pre}.ln2.b")));
    let h = linear(g, p, &format!("{pre}.ffn1"), x2);
    let h = g.relu(h);
    let h = linear(g, p, &format!("{pre}.ffn2"), h);
    let x3 = g.add(x2, h);
    g.layer_norm(x3, p.get(&format!("{pre}.ln3.g")), p.get(&format!("{pre}.ln3.b")))
}

/// Query states after every decoder layer.
pub fn decoder_forward(g: &mut Graph, p: &ParamVars, cfg: &ModelConfig, q1: Var, f4: Var) -> Vec<Var> {
    let (mem, pos) = decoder_memory(g, p, f4);
    let qpos = query_positions(g, p, cfg);
    let mut q = q1;
    let mut states = Vec::with_capacity(cfg.decoder_layers);
    for l in 0..cfg.decoder_layers {
        q = decoder_layer(g, p, cfg, l, q, qpos, mem, pos);
        states.push(q);
    }
    states
}

/// Detection outputs of one decoder layer.
#[derive(Debug, Clone, Copy)]
pub struct DetOutput {
    /// `N_q x C_cls` logits.
    pub cls: Var,
    /// `N_q x 10` raw regression (see `boxcode`).
    pub reg: Var,
    /// `N_q x A` logits.
    pub attr: Var,
}

/// Regression raw x/y are offsets from the query's reference point in
/// logit space, so a zero offset decodes to the reference point itself.
pub fn det_head_forward(g: &mut Graph, p: &ParamVars, queries: Var) -> DetOutput {
    let cls = linear(g, p, "det.cls", queries);
    let h = linear(g, p, "det.reg1", queries);
    let h = g.relu(h);
    let offsets = linear(g, p, "det.reg2", h);
    debug_assert_eq!(g.shape(offsets)[1], BOX_CODE_LEN);
    let mut select = Tensor::zeros(vec![2, BOX_CODE_LEN]);
    select.data[0] = 1.0;
    select.data[BOX_CODE_LEN + 1] = 1.0;
    let select = g.constant(select);
    let anchors = g.matmul(p.get("query.ref"), select);
    let reg = g.add(offsets, anchors);
    let attr = linear(g, p, "det.attr", queries);
    DetOutput { cls, reg, attr }
}

/// BEV logits `C_b x (G*s) x (G*s)`; query `q` decodes grid cell `(q / G, q % G)`.
pub fn bev_head_forward(g: &mut Graph, p: &ParamVars, cfg: &ModelConfig, queries: Var) -> Var {
    let h = linear(g, p, "bev.fc1", queries);
    let h = g.relu(h);
    let patches = linear(g, p, "bev.fc2", h);
    g.tile_patches(patches, cfg.bev_grid, cfg.bev_patch)
}

/// Everything a forward pass produces, as graph handles.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub f4: Var,
    pub f5: Var,
    pub sd: SdOutput,
    /// Learnable query table (detection rows first, then BEV rows).
    pub q0: Var,
    /// Queries entering the decoder.
    pub q1: Var,
    /// Semantic prior per query when the builder is active.
    pub s_p: Option<Var>,
    pub layers: Vec<Var>,
    /// Detection outputs per decoder layer.
    pub det: Vec<DetOutput>,
    pub bev_logits: Option<Var>,
}

fn build_queries(
    g: &mut Graph,
    p: &ParamVars,
    cfg: &ModelConfig,
    p_seg: Option<Var>,
) -> Result<(Var, Var, Option<Var>), ModelError> {
    let mut tables = Vec::new();
    if cfg.task.has_detection() {
        tables.push(p.get("query.det"));
    }
    if cfg.task.has_bev() {
        tables.push(p.get("query.bev"));
    }
    let q0 = if tables.len() == 1 {
        tables[0]
    } else {
        g.concat_rows(&tables)
    };
    let Some(p_seg) = p_seg.filter(|_| cfg.pqb) else {
        return Ok((q0, q0, None));
    };
    let s_w = p.get("pqb.sw");
    let mut q1s = Vec::new();
    let mut sps = Vec::new();
    for &t in &tables {
        let (q1, sp) = pqb_forward(g, p_seg, s_w, t)?;
        q1s.push(q1);
        sps.push(sp);
    }
    if q1s.len() == 1 {
        return Ok((q0, q1s[0], Some(sps[0])));
    }
    let q1 = g.concat_rows(&q1s);
    let n: usize = sps.iter().map(|&s| g.value(s).len()).sum();
    let cols: Vec<Var> = sps
        .iter()
        .map(|&s| {
            let len = g.value(s).len();
            g.reshape(s, vec![len, 1])
        })
        .collect();
    let sp = g.concat_rows(&cols);
    let sp = g.reshape(sp, vec![n]);
    Ok((q0, q1, Some(sp)))
}

/// Full forward pass over one sample's `N x 3 x H x W` images.
pub fn forward(g: &mut Graph, p: &ParamVars, cfg: &ModelConfig, images: Var) -> Result<ForwardOutput, ModelError> {
    let (f4, f5) = backbone_forward(g, p, cfg, images)?;
    let sd = sd_encoder_forward(g, p, cfg, f5);
    let (q0, q1, s_p) = build_queries(g, p, cfg, sd.p_seg)?;
    let layers = decoder_forward(g, p, cfg, q1, f4);
    let n_det = cfg.det_queries();
    let n_bev = cfg.bev_queries();
    let mut det = Vec::new();
    if n_det > 0 {
        for &l in &layers {
            let rows = if n_bev > 0 { g.slice_rows(l, 0, n_det) } else { l };
            det.push(det_head_forward(g, p, rows));
        }
    }
    let bev_logits = (n_bev > 0).then(|| {
        let last = *layers.last().expect("at least one layer");
        let rows = if n_det > 0 {
            g.slice_rows(last, n_det, n_bev)
        } else {
            last
        };
        bev_head_forward(g, p, cfg, rows)
    });
    Ok(ForwardOutput {
        f4,
        f5,
        sd,
        q0,
        q1,
        s_p,
        layers,
        det,
        bev_logits,
    })
}

/// Binds `state` into a fresh graph and runs [`forward`] on `images`.
pub fn run(state: &ModelState, images: &Tensor) -> Result<(Graph, ParamVars, ForwardOutput), ModelError> {
    let mut g = Graph::new();
    let p = state.bind(&mut g);
    let x = g.constant(images.clone());
    let out = forward(&mut g, &p, &state.config, x)?;
    Ok((g, p, out))
}
