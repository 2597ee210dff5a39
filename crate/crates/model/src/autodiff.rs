//! Tape-based reverse-mode differentiation. Every operation appends a node;
//! `backward` walks the tape once in reverse.

use crate::tensor::{gemm, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: usize,
    pub pad: usize,
    pub dilation: usize,
}

impl ConvSpec {
    pub const fn new(stride: usize, pad: usize, dilation: usize) -> Self {
        Self { stride, pad, dilation }
    }

    pub fn out_size(&self, input: usize, kernel: usize) -> usize {
        let span = self.dilation * (kernel - 1) + 1;
        (input + 2 * self.pad).saturating_sub(span) / self.stride + 1
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    Exp(Var),
    MatMul {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
    },
    AddRowBias(Var, Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    SoftmaxRows(Var),
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    SliceRows {
        x: Var,
        start: usize,
    },
    ConcatRows(Vec<Var>),
    Reshape(Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        spec: ConvSpec,
    },
    NchwToTokens(Var),
    GroupChannels(Var),
    AdaptivePoolRows {
        x: Var,
        bounds: Vec<(usize, usize)>,
    },
    ScaleRows {
        x: Var,
        s: Var,
    },
    AddColBroadcast {
        x: Var,
        s: Var,
    },
    ViewGridSum {
        views: Var,
        grid: Var,
    },
    TilePatches {
        x: Var,
        grid: usize,
        patch: usize,
    },
    Sum(Var),
    Fused {
        x: Var,
        dlocal: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

/// Adaptive-pooling chunk `i` of `k` over a row of length `len`:
/// `[floor(i*len/k), ceil((i+1)*len/k))`.
pub fn adaptive_bounds(len: usize, k: usize) -> Vec<(usize, usize)> {
    (0..k)
        .map(|i| {
            let start = i * len / k;
            let end = ((i + 1) * len).div_ceil(k);
            (start, end.max(start + 1).min(len.max(1)))
        })
        .collect()
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        debug_assert!(value.data.iter().all(|v| !v.is_nan()), "NaN produced by {op:?}");
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// A learnable leaf.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    /// Gradient of the last `backward` target with respect to `v`, if any flowed.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let t = &self.nodes[a.0].value;
        let out = Tensor::new(t.shape.clone(), t.data.iter().map(|&x| f(x)).collect());
        let ng = self.any_grad(&[a]);
        self.push(out, op, ng)
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(ta.shape, tb.shape, "elementwise shape mismatch");
        let out = Tensor::new(
            ta.shape.clone(),
            ta.data.iter().zip(&tb.data).map(|(&x, &y)| f(x, y)).collect(),
        );
        let ng = self.any_grad(&[a, b]);
        self.push(out, op, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.unary(a, |x| x * s, Op::Scale(a, s))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    /// `op(a) * op(b)` where `op` optionally transposes a matrix.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Var {
        let (ra, ca) = self.value(a).dims2();
        let (rb, cb) = self.value(b).dims2();
        let (m, k, sa) = if ta { (ca, ra, (1, ca)) } else { (ra, ca, (ca, 1)) };
        let (k2, n, sb) = if tb { (cb, rb, (1, cb)) } else { (rb, cb, (cb, 1)) };
        assert_eq!(k, k2, "matmul inner dimension mismatch");
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            &self.value(a).data,
            sa,
            &self.value(b).data,
            sb,
            0.0,
            &mut out,
            (n, 1),
        );
        let ng = self.any_grad(&[a, b]);
        self.push(Tensor::new(vec![m, n], out), Op::MatMul { a, b, ta, tb }, ng)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.matmul_t(a, b, false, false)
    }

    /// `x + bias` with `bias` broadcast over rows.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Var {
        let (m, n) = self.value(x).dims2();
        assert_eq!(self.value(bias).len(), n, "bias length mismatch");
        let b = &self.value(bias).data;
        let mut out = self.value(x).data.clone();
        for row in out.chunks_mut(n) {
            for (o, bb) in row.iter_mut().zip(b) {
                *o += bb;
            }
        }
        let ng = self.any_grad(&[x, bias]);
        self.push(Tensor::new(vec![m, n], out), Op::AddRowBias(x, bias), ng)
    }

    /// `x W + b` for `W: in x out`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let y = self.matmul(x, w);
        self.add_row_bias(y, b)
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        const EPS: f64 = 1e-5;
        let (m, n) = self.value(x).dims2();
        let xs = &self.value(x).data;
        let (g, b) = (&self.value(gamma).data, &self.value(beta).data);
        let mut xhat = vec![0.0; m * n];
        let mut rstd = vec![0.0; m];
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &xs[i * n..(i + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
            let r = 1.0 / (var + EPS).sqrt();
            rstd[i] = r;
            for j in 0..n {
                let h = (row[j] - mean) * r;
                xhat[i * n + j] = h;
                out[i * n + j] = h * g[j] + b[j];
            }
        }
        let ng = self.any_grad(&[x, gamma, beta]);
        self.push(
            Tensor::new(vec![m, n], out),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            ng,
        )
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let (m, n) = self.value(x).dims2();
        let mut out = self.value(x).data.clone();
        for row in out.chunks_mut(n) {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        let ng = self.any_grad(&[x]);
        self.push(Tensor::new(vec![m, n], out), Op::SoftmaxRows(x), ng)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let (m, n) = self.value(x).dims2();
        assert!(start + len <= n, "column slice out of range");
        let src = &self.value(x).data;
        let mut out = Vec::with_capacity(m * len);
        for i in 0..m {
            out.extend_from_slice(&src[i * n + start..i * n + start + len]);
        }
        let ng = self.any_grad(&[x]);
        self.push(Tensor::new(vec![m, len], out), Op::SliceCols { x, start }, ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let m = self.value(parts[0]).dims2().0;
        let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).dims2().1).collect();
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; m * total];
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let t = self.value(p);
            assert_eq!(t.dims2().0, m, "concat_cols row mismatch");
            for i in 0..m {
                out[i * total + off..i * total + off + w].copy_from_slice(&t.data[i * w..(i + 1) * w]);
            }
            off += w;
        }
        let ng = self.any_grad(parts);
        self.push(Tensor::new(vec![m, total], out), Op::ConcatCols(parts.to_vec()), ng)
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Var {
        let (m, n) = self.value(x).dims2();
        assert!(start + len <= m, "row slice out of range");
        let out = self.value(x).data[start * n..(start + len) * n].to_vec();
        let ng = self.any_grad(&[x]);
        self.push(Tensor::new(vec![len, n], out), Op::SliceRows { x, start }, ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let n = self.value(parts[0]).dims2().1;
        let mut out = Vec::new();
        let mut m = 0;
        for &p in parts {
            let (r, c) = self.value(p).dims2();
            assert_eq!(c, n, "concat_rows column mismatch");
            out.extend_from_slice(&self.value(p).data);
            m += r;
        }
        let ng = self.any_grad(parts);
        self.push(Tensor::new(vec![m, n], out), Op::ConcatRows(parts.to_vec()), ng)
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Var {
        let data = self.value(x).data.clone();
        let ng = self.any_grad(&[x]);
        self.push(Tensor::new(shape, data), Op::Reshape(x), ng)
    }

    /// 2D convolution of `x: N x Cin x H x W` with `w: Cout x Cin x k x k`
    /// and per-output-channel bias `b`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, spec: ConvSpec) -> Var {
        let (n, cin, h, wd) = self.value(x).dims4();
        let (cout, cin2, k, k2) = self.value(w).dims4();
        assert_eq!((cin, k), (cin2, k2), "conv weight shape mismatch");
        assert_eq!(self.value(b).len(), cout, "conv bias length mismatch");
        let (ho, wo) = (spec.out_size(h, k), spec.out_size(wd, k));
        let hw = ho * wo;
        let ckk = cin * k * k;
        let mut out = vec![0.0; n * cout * hw];
        let mut col = vec![0.0; ckk * hw];
        let xs = &self.value(x).data;
        let ws = &self.value(w).data;
        let bs = &self.value(b).data;
        for img in 0..n {
            im2col(
                &xs[img * cin * h * wd..(img + 1) * cin * h * wd],
                (cin, h, wd),
                k,
                spec,
                (ho, wo),
                &mut col,
            );
            let o = &mut out[img * cout * hw..(img + 1) * cout * hw];
            for (c, chunk) in o.chunks_mut(hw).enumerate() {
                chunk.fill(bs[c]);
            }
            gemm(cout, ckk, hw, ws, (ckk, 1), &col, (hw, 1), 1.0, o, (hw, 1));
        }
        let ng = self.any_grad(&[x, w, b]);
        self.push(
            Tensor::new(vec![n, cout, ho, wo], out),
            Op::Conv2d { x, w, b, spec },
            ng,
        )
    }

    /// `N x C x H x W` to `(N*H*W) x C` tokens, view-major then row-major.
    pub fn nchw_to_tokens(&mut self, x: Var) -> Var {
        let (n, c, h, w) = self.value(x).dims4();
        let src = &self.value(x).data;
        let hw = h * w;
        let mut out = vec![0.0; n * hw * c];
        for img in 0..n {
            for ch in 0..c {
                for p in 0..hw {
                    out[(img * hw + p) * c + ch] = src[(img * c + ch) * hw + p];
                }
            }
        }
        let ng = self.any_grad(&[x]);
        self.push(Tensor::new(vec![n * hw, c], out), Op::NchwToTokens(x), ng)
    }

    /// `N x C x H x W` regrouped to `C x (N*H*W)`, views concatenated per channel.
    pub fn group_channels(&mut self, x: Var) -> Var {
        let (n, c, h, w) = self.value(x).dims4();
        let src = &self.value(x).data;
        let hw = h * w;
        let mut out = vec![0.0; c * n * hw];
        for img in 0..n {
            for ch in 0..c {
                out[ch * n * hw + img * hw..ch * n * hw + (img + 1) * hw]
                    .copy_from_slice(&src[(img * c + ch) * hw..(img * c + ch + 1) * hw]);
            }
        }
        let ng = self.any_grad(&[x]);
        self.push(Tensor::new(vec![c, n * hw], out), Op::GroupChannels(x), ng)
    }

    /// Adaptive average pooling of every row of `x: R x L` to length `k`.
    pub fn adaptive_pool_rows(&mut self, x: Var, k: usize) -> Var {
        let (r, l) = self.value(x).dims2();
        let bounds = adaptive_bounds(l, k);
        let src = &self.value(x).data;
        let mut out = vec![0.0; r * k];
        for i in 0..r {
            for (j, &(s, e)) in bounds.iter().enumerate() {
                out[i * k + j] = src[i * l + s..i * l + e].iter().sum::<f64>() / (e - s) as f64;
            }
        }
        let ng = self.any_grad(&[x]);
        self.push(Tensor::new(vec![r, k], out), Op::AdaptivePoolRows { x, bounds }, ng)
    }

    /// Row `i` of `x` multiplied by `s[i]`.
    pub fn scale_rows(&mut self, x: Var, s: Var) -> Var {
        let (r, k) = self.value(x).dims2();
        assert_eq!(self.value(s).len(), r, "row scale length mismatch");
        let sv = &self.value(s).data;
        let mut out = self.value(x).data.clone();
        for (i, row) in out.chunks_mut(k).enumerate() {
            for v in row {
                *v *= sv[i];
            }
        }
        let ng = self.any_grad(&[x, s]);
        self.push(Tensor::new(vec![r, k], out), Op::ScaleRows { x, s }, ng)
    }

    /// `out[i, j] = x[i, j] + s[i]`: one scalar per row, broadcast across columns.
    pub fn add_col_broadcast(&mut self, x: Var, s: Var) -> Var {
        let (r, k) = self.value(x).dims2();
        assert_eq!(self.value(s).len(), r, "broadcast length mismatch");
        let sv = &self.value(s).data;
        let mut out = self.value(x).data.clone();
        for (i, row) in out.chunks_mut(k).enumerate() {
            for v in row {
                *v += sv[i];
            }
        }
        let ng = self.any_grad(&[x, s]);
        self.push(Tensor::new(vec![r, k], out), Op::AddColBroadcast { x, s }, ng)
    }

    /// `out[v*P + p] = views[v] + grid[p]` for `views: V x d`, `grid: P x d`.
    pub fn view_grid_sum(&mut self, views: Var, grid: Var) -> Var {
        let (nv, d) = self.value(views).dims2();
        let (np, d2) = self.value(grid).dims2();
        assert_eq!(d, d2, "embedding width mismatch");
        let (vs, gs) = (&self.value(views).data, &self.value(grid).data);
        let mut out = vec![0.0; nv * np * d];
        for v in 0..nv {
            for p in 0..np {
                let o = &mut out[(v * np + p) * d..(v * np + p + 1) * d];
                for j in 0..d {
                    o[j] = vs[v * d + j] + gs[p * d + j];
                }
            }
        }
        let ng = self.any_grad(&[views, grid]);
        self.push(Tensor::new(vec![nv * np, d], out), Op::ViewGridSum { views, grid }, ng)
    }

    /// Tiles per-cell patches `x: (G*G) x (C*s*s)` into a `C x (G*s) x (G*s)` map;
    /// row `q` of `x` fills grid cell `(q / G, q % G)`.
    pub fn tile_patches(&mut self, x: Var, grid: usize, patch: usize) -> Var {
        let (q, f) = self.value(x).dims2();
        assert_eq!(q, grid * grid, "need one row per grid cell");
        assert_eq!(f % (patch * patch), 0, "patch width mismatch");
        let c = f / (patch * patch);
        let side = grid * patch;
        let src = &self.value(x).data;
        let mut out = vec![0.0; c * side * side];
        for cell in 0..q {
            let (gr, gc) = (cell / grid, cell % grid);
            for ch in 0..c {
                for i in 0..patch {
                    for j in 0..patch {
                        out[ch * side * side + (gr * patch + i) * side + gc * patch + j] =
                            src[cell * f + ch * patch * patch + i * patch + j];
                    }
                }
            }
        }
        let ng = self.any_grad(&[x]);
        self.push(
            Tensor::new(vec![c, side, side], out),
            Op::TilePatches { x, grid, patch },
            ng,
        )
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data.iter().sum();
        let ng = self.any_grad(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// A scalar computed outside the tape whose derivative with respect to
    /// each element of `x` is `dlocal`.
    pub fn fused_scalar(&mut self, x: Var, value: f64, dlocal: Vec<f64>) -> Var {
        assert_eq!(self.value(x).len(), dlocal.len(), "local derivative length mismatch");
        let ng = self.any_grad(&[x]);
        self.push(Tensor::scalar(value), Op::Fused { x, dlocal }, ng)
    }

    /// Reverse sweep from scalar `out`. Replaces any earlier gradients.
    pub fn backward(&mut self, out: Var) {
        assert_eq!(self.value(out).len(), 1, "backward needs a scalar output");
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[out.0] = Some(vec![1.0]);
        for i in (0..=out.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if self.nodes[i].needs_grad {
                self.propagate(i, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        self.grads = grads;
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let y = &node.value.data;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc(grads, *a, |d| axpy(d, g, 1.0));
                self.acc(grads, *b, |d| axpy(d, g, 1.0));
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, |d| axpy(d, g, 1.0));
                self.acc(grads, *b, |d| axpy(d, g, -1.0));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (&self.value(*a).data, &self.value(*b).data);
                self.acc(grads, *a, |d| {
                    d.iter_mut().zip(g).zip(vb).for_each(|((d, g), v)| *d += g * v)
                });
                self.acc(grads, *b, |d| {
                    d.iter_mut().zip(g).zip(va).for_each(|((d, g), v)| *d += g * v)
                });
            }
            Op::Scale(a, s) => self.acc(grads, *a, |d| axpy(d, g, *s)),
            Op::Relu(a) => self.acc(grads, *a, |d| {
                for ((d, g), y) in d.iter_mut().zip(g).zip(y) {
                    if *y > 0.0 {
                        *d += g;
                    }
                }
            }),
            Op::Sigmoid(a) => self.acc(grads, *a, |d| {
                d.iter_mut()
                    .zip(g)
                    .zip(y)
                    .for_each(|((d, g), y)| *d += g * y * (1.0 - y))
            }),
            Op::Exp(a) => self.acc(grads, *a, |d| {
                d.iter_mut().zip(g).zip(y).for_each(|((d, g), y)| *d += g * y)
            }),
            Op::MatMul { a, b, ta, tb } => {
                let (ra, ca) = self.value(*a).dims2();
                let (rb, cb) = self.value(*b).dims2();
                let (m, k) = if *ta { (ca, ra) } else { (ra, ca) };
                let n = if *tb { rb } else { cb };
                let sa = if *ta { (1, ca) } else { (ca, 1) };
                let sb = if *tb { (1, cb) } else { (cb, 1) };
                let (va, vb) = (&self.value(*a).data, &self.value(*b).data);
                // dA' = dC B'^T, written through A's layout.
                self.acc(grads, *a, |d| gemm(m, n, k, g, (n, 1), vb, (sb.1, sb.0), 1.0, d, sa));
                // dB' = A'^T dC.
                self.acc(grads, *b, |d| gemm(k, m, n, va, (sa.1, sa.0), g, (n, 1), 1.0, d, sb));
            }
            Op::AddRowBias(x, b) => {
                self.acc(grads, *x, |d| axpy(d, g, 1.0));
                let n = self.value(*b).len();
                self.acc(grads, *b, |d| {
                    for row in g.chunks(n) {
                        axpy(d, row, 1.0);
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let (m, n) = self.value(*x).dims2();
                let gm = &self.value(*gamma).data;
                self.acc(grads, *x, |d| {
                    for i in 0..m {
                        let (gr, hr) = (&g[i * n..(i + 1) * n], &xhat[i * n..(i + 1) * n]);
                        let mut s1 = 0.0;
                        let mut s2 = 0.0;
                        for j in 0..n {
                            let gh = gr[j] * gm[j];
                            s1 += gh;
                            s2 += gh * hr[j];
                        }
                        for j in 0..n {
                            let gh = gr[j] * gm[j];
                            d[i * n + j] += rstd[i] / n as f64 * (n as f64 * gh - s1 - hr[j] * s2);
                        }
                    }
                });
                self.acc(grads, *gamma, |d| {
                    for i in 0..m {
                        for j in 0..n {
                            d[j] += g[i * n + j] * xhat[i * n + j];
                        }
                    }
                });
                self.acc(grads, *beta, |d| {
                    for row in g.chunks(n) {
                        axpy(d, row, 1.0);
                    }
                });
            }
            Op::SoftmaxRows(x) => {
                let n = self.value(*x).dims2().1;
                self.acc(grads, *x, |d| {
                    for ((dr, gr), yr) in d.chunks_mut(n).zip(g.chunks(n)).zip(y.chunks(n)) {
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for j in 0..n {
                            dr[j] += yr[j] * (gr[j] - dot);
                        }
                    }
                });
            }
            Op::SliceCols { x, start } => {
                let n = self.value(*x).dims2().1;
                let len = node.value.dims2().1;
                self.acc(grads, *x, |d| {
                    for (i, gr) in g.chunks(len).enumerate() {
                        axpy(&mut d[i * n + start..i * n + start + len], gr, 1.0);
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let total = node.value.dims2().1;
                let mut off = 0;
                for &p in parts {
                    let w = self.value(p).dims2().1;
                    self.acc(grads, p, |d| {
                        for (i, dr) in d.chunks_mut(w).enumerate() {
                            axpy(dr, &g[i * total + off..i * total + off + w], 1.0);
                        }
                    });
                    off += w;
                }
            }
            Op::SliceRows { x, start } => {
                let n = self.value(*x).dims2().1;
                self.acc(grads, *x, |d| axpy(&mut d[start * n..start * n + g.len()], g, 1.0));
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    self.acc(grads, p, |d| axpy(d, &g[off..off + len], 1.0));
                    off += len;
                }
            }
            Op::Reshape(x) => self.acc(grads, *x, |d| axpy(d, g, 1.0)),
            Op::Conv2d { x, w, b, spec } => self.conv_backward(*x, *w, *b, *spec, g, grads),
            Op::NchwToTokens(x) => {
                let (n, c, h, w) = self.value(*x).dims4();
                let hw = h * w;
                self.acc(grads, *x, |d| {
                    for img in 0..n {
                        for ch in 0..c {
                            for p in 0..hw {
                                d[(img * c + ch) * hw + p] += g[(img * hw + p) * c + ch];
                            }
                        }
                    }
                });
            }
            Op::GroupChannels(x) => {
                let (n, c, h, w) = self.value(*x).dims4();
                let hw = h * w;
                self.acc(grads, *x, |d| {
                    for img in 0..n {
                        for ch in 0..c {
                            axpy(
                                &mut d[(img * c + ch) * hw..(img * c + ch + 1) * hw],
                                &g[ch * n * hw + img * hw..ch * n * hw + (img + 1) * hw],
                                1.0,
                            );
                        }
                    }
                });
            }
            Op::AdaptivePoolRows { x, bounds } => {
                let l = self.value(*x).dims2().1;
                let k = bounds.len();
                self.acc(grads, *x, |d| {
                    for (i, gr) in g.chunks(k).enumerate() {
                        for (j, &(s, e)) in bounds.iter().enumerate() {
                            let share = gr[j] / (e - s) as f64;
                            for v in &mut d[i * l + s..i * l + e] {
                                *v += share;
                            }
                        }
                    }
                });
            }
            Op::ScaleRows { x, s } => {
                let k = self.value(*x).dims2().1;
                let (xv, sv) = (&self.value(*x).data, &self.value(*s).data);
                self.acc(grads, *x, |d| {
                    for (i, (dr, gr)) in d.chunks_mut(k).zip(g.chunks(k)).enumerate() {
                        axpy(dr, gr, sv[i]);
                    }
                });
                self.acc(grads, *s, |d| {
                    for (i, (gr, xr)) in g.chunks(k).zip(xv.chunks(k)).enumerate() {
                        d[i] += gr.iter().zip(xr).map(|(a, b)| a * b).sum::<f64>();
                    }
                });
            }
            Op::AddColBroadcast { x, s } => {
                let k = self.value(*x).dims2().1;
                self.acc(grads, *x, |d| axpy(d, g, 1.0));
                self.acc(grads, *s, |d| {
                    for (i, gr) in g.chunks(k).enumerate() {
                        d[i] += gr.iter().sum::<f64>();
                    }
                });
            }
            Op::ViewGridSum { views, grid } => {
                let (nv, dd) = self.value(*views).dims2();
                let np = self.value(*grid).dims2().0;
                self.acc(grads, *views, |d| {
                    for v in 0..nv {
                        for p in 0..np {
                            axpy(
                                &mut d[v * dd..(v + 1) * dd],
                                &g[(v * np + p) * dd..(v * np + p + 1) * dd],
                                1.0,
                            );
                        }
                    }
                });
                self.acc(grads, *grid, |d| {
                    for v in 0..nv {
                        axpy(d, &g[v * np * dd..(v + 1) * np * dd], 1.0);
                    }
                });
            }
            Op::TilePatches { x, grid, patch } => {
                let (q, f) = self.value(*x).dims2();
                let c = f / (patch * patch);
                let side = grid * patch;
                self.acc(grads, *x, |d| {
                    for cell in 0..q {
                        let (gr, gc) = (cell / grid, cell % grid);
                        for ch in 0..c {
                            for i in 0..*patch {
                                for j in 0..*patch {
                                    d[cell * f + ch * patch * patch + i * patch + j] +=
                                        g[ch * side * side + (gr * patch + i) * side + gc * patch + j];
                                }
                            }
                        }
                    }
                });
            }
            Op::Sum(x) => self.acc(grads, *x, |d| d.iter_mut().for_each(|v| *v += g[0])),
            Op::Fused { x, dlocal } => self.acc(grads, *x, |d| axpy(d, dlocal, g[0])),
        }
    }

    fn acc(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        let len = self.nodes[v.0].value.len();
        let d = grads[v.0].get_or_insert_with(|| vec![0.0; len]);
        f(d);
    }

    fn conv_backward(&self, x: Var, w: Var, b: Var, spec: ConvSpec, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let (n, cin, h, wd) = self.value(x).dims4();
        let (cout, _, k, _) = self.value(w).dims4();
        let (ho, wo) = (spec.out_size(h, k), spec.out_size(wd, k));
        let hw = ho * wo;
        let ckk = cin * k * k;
        let xs = &self.value(x).data;
        let ws = &self.value(w).data;
        self.acc(grads, b, |d| {
            for img in 0..n {
                for c in 0..cout {
                    d[c] += g[(img * cout + c) * hw..(img * cout + c + 1) * hw].iter().sum::<f64>();
                }
            }
        });
        let mut col = vec![0.0; ckk * hw];
        if self.nodes[w.0].needs_grad {
            self.acc(grads, w, |d| {
                for img in 0..n {
                    im2col(
                        &xs[img * cin * h * wd..(img + 1) * cin * h * wd],
                        (cin, h, wd),
                        k,
                        spec,
                        (ho, wo),
                        &mut col,
                    );
                    let go = &g[img * cout * hw..(img + 1) * cout * hw];
                    gemm(cout, hw, ckk, go, (hw, 1), &col, (1, hw), 1.0, d, (ckk, 1));
                }
            });
        }
        self.acc(grads, x, |d| {
            for img in 0..n {
                let go = &g[img * cout * hw..(img + 1) * cout * hw];
                gemm(ckk, cout, hw, ws, (1, ckk), go, (hw, 1), 0.0, &mut col, (hw, 1));
                col2im(
                    &col,
                    (cin, h, wd),
                    k,
                    spec,
                    (ho, wo),
                    &mut d[img * cin * h * wd..(img + 1) * cin * h * wd],
                );
            }
        });
    }
}

fn axpy(d: &mut [f64], g: &[f64], s: f64) {
    for (d, g) in d.iter_mut().zip(g) {
        *d += s * g;
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Source pixel offsets along one axis for kernel tap `t`, or `None` when
/// the tap falls into padding.
#[inline]
fn src_index(o: usize, t: usize, spec: ConvSpec, size: usize) -> Option<usize> {
    let p = (o * spec.stride + t * spec.dilation) as isize - spec.pad as isize;
    (p >= 0 && (p as usize) < size).then_some(p as usize)
}

fn im2col(
    x: &[f64],
    (cin, h, w): (usize, usize, usize),
    k: usize,
    spec: ConvSpec,
    (ho, wo): (usize, usize),
    col: &mut [f64],
) {
    let hw = ho * wo;
    for c in 0..cin {
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut col[((c * k + ky) * k + kx) * hw..((c * k + ky) * k + kx + 1) * hw];
                for oy in 0..ho {
                    let sy = src_index(oy, ky, spec, h);
                    for ox in 0..wo {
                        row[oy * wo + ox] = match (sy, src_index(ox, kx, spec, w)) {
                            (Some(sy), Some(sx)) => x[(c * h + sy) * w + sx],
                            _ => 0.0,
                        };
                    }
                }
            }
        }
    }
}

fn col2im(
    col: &[f64],
    (cin, h, w): (usize, usize, usize),
    k: usize,
    spec: ConvSpec,
    (ho, wo): (usize, usize),
    dx: &mut [f64],
) {
    let hw = ho * wo;
    for c in 0..cin {
        for ky in 0..k {
            for kx in 0..k {
                let row = &col[((c * k + ky) * k + kx) * hw..((c * k + ky) * k + kx + 1) * hw];
                for oy in 0..ho {
                    let Some(sy) = src_index(oy, ky, spec, h) else { continue };
                    for ox in 0..wo {
                        if let Some(sx) = src_index(ox, kx, spec, w) {
                            dx[(c * h + sy) * w + sx] += row[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}
