//! Dense f64 tensors with tape-based reverse-mode automatic differentiation.
//!
//! A [`Tape`] owns every node of one computation graph; a [`Tensor`] is a
//! cheap handle (node id + shape) into it. The graph is rebuilt from scratch
//! for every training step. Nodes are immutable once created, parents always
//! precede children, and `backward` walks the node list in reverse, so the
//! traversal is topological by construction.
//!
//! One tape is confined to one thread. Inside individual ops the heavy
//! kernels (convolution) fan out over the batch dimension via `crate::par`,
//! which is bit-deterministic regardless of thread count.

mod linalg;
mod nn;
mod param;

pub use nn::BnStats;
pub use param::{ParamId, ParamKind, ParamStore, Parameter};

use crate::error::{Error, Result};

/// Handle to one node of a [`Tape`].
#[derive(Debug, Clone)]
pub struct Tensor {
    pub(crate) id: usize,
    shape: Vec<usize>,
}

impl Tensor {
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub(crate) fn dims4(&self) -> (usize, usize, usize, usize) {
        assert_eq!(self.shape.len(), 4, "expected rank-4 tensor");
        (self.shape[0], self.shape[1], self.shape[2], self.shape[3])
    }
}

pub(crate) struct Node {
    pub(crate) data: Vec<f64>,
    pub(crate) shape: Vec<usize>,
    pub(crate) requires_grad: bool,
    pub(crate) grad: Option<Vec<f64>>,
    pub(crate) step: Option<BackStep>,
    /// Set on leaves created from a registered parameter; `accumulate_param_grads`
    /// scatters this node's gradient back into the store.
    pub(crate) param: Option<ParamId>,
}

/// One recorded operation, holding whatever the backward pass needs.
#[derive(Clone)]
pub(crate) enum BackStep {
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Div { a: usize, b: usize },
    Neg { x: usize },
    Relu { x: usize },
    Exp { x: usize },
    Ln { x: usize },
    Sqrt { x: usize },
    Sigmoid { x: usize },
    Abs { x: usize },
    ClampMin { x: usize, min: f64 },
    Scale { x: usize, s: f64 },
    AddScalar { x: usize },
    SumAll { x: usize },
    MeanAll { x: usize },
    Reshape { x: usize },
    Permute { x: usize, perm: Vec<usize> },
    ConcatDim1 { a: usize, b: usize, outer: usize, ca: usize, cb: usize, inner: usize },
    SplitPart { x: usize, outer: usize, c_src: usize, c_start: usize, c_len: usize, inner: usize },
    MeanSeq { x: usize, t: usize },
    Diag { x: usize, n: usize },
    MatMul { a: usize, b: usize, m: usize, k: usize, n: usize },
    Bmm { a: usize, b: usize, nb: usize, m: usize, k: usize, p: usize },
    Linear { x: usize, w: usize, b: usize, rows: usize, d_in: usize, d_out: usize },
    SoftmaxLast { rows: usize, cols: usize, x: usize },
    LogSumExpRows { x: usize, rows: usize, cols: usize },
    Conv2d { input: usize, weight: usize, bias: usize, stride: usize, pad: usize },
    BatchNorm { x: usize, gamma: usize, beta: usize, mu: Vec<f64>, inv: Vec<f64> },
    AdaptivePool { x: usize, s: usize },
    GlobalPool { x: usize },
    Upsample2x { x: usize },
    BceLogits { z: usize, t: usize },
    SmoothL1 { p: usize, t: usize },
    Cosine { u: usize, v: usize, eps: f64 },
    RowCosine { a: usize, b: usize, eps: f64 },
    CosineMatrix { a: usize, b: usize, eps: f64 },
}

/// Owner of one computation graph.
pub struct Tape {
    pub(crate) nodes: Vec<Node>,
    grad_enabled: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), grad_enabled: true }
    }

    /// A tape that records no backward steps; used for inference.
    pub fn new_no_grad() -> Self {
        Tape { nodes: Vec::new(), grad_enabled: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, data: Vec<f64>, shape: &[usize], requires_grad: bool) -> Tensor {
        let numel: usize = shape.iter().product();
        assert_eq!(numel, data.len(), "shape {:?} does not match data length {}", shape, data.len());
        self.push(data, shape.to_vec(), requires_grad && self.grad_enabled, None, None)
    }

    pub fn constant(&mut self, data: Vec<f64>, shape: &[usize]) -> Tensor {
        self.leaf(data, shape, false)
    }

    pub fn scalar(&mut self, v: f64) -> Tensor {
        self.constant(vec![v], &[1])
    }

    /// Leaf backed by a registered parameter. Gradients flow back into the
    /// store via [`Tape::accumulate_param_grads`].
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Tensor {
        let p = store.get(id);
        let rg = p.kind == ParamKind::Weight && self.grad_enabled;
        self.push(p.data.clone(), p.shape.clone(), rg, None, Some(id))
    }

    pub fn data(&self, t: &Tensor) -> &[f64] {
        &self.nodes[t.id].data
    }

    pub fn grad(&self, t: &Tensor) -> Option<&[f64]> {
        self.nodes[t.id].grad.as_deref()
    }

    pub fn requires_grad(&self, t: &Tensor) -> bool {
        self.nodes[t.id].requires_grad
    }

    /// Replace a node's forward value in place. This is a diagnostic hook
    /// (e.g. probing that perturbing a feature map cannot reach the output);
    /// it does not touch recorded backward steps.
    pub fn overwrite_data(&mut self, t: &Tensor, data: &[f64]) {
        assert_eq!(self.nodes[t.id].data.len(), data.len());
        self.nodes[t.id].data.copy_from_slice(data);
    }

    pub(crate) fn push(
        &mut self,
        data: Vec<f64>,
        shape: Vec<usize>,
        requires_grad: bool,
        step: Option<BackStep>,
        param: Option<ParamId>,
    ) -> Tensor {
        let id = self.nodes.len();
        self.nodes.push(Node {
            data,
            shape: shape.clone(),
            requires_grad,
            grad: None,
            step: if requires_grad { step } else { None },
            param,
        });
        Tensor { id, shape }
    }

    /// Record `step` only when some parent needs gradients.
    pub(crate) fn push_op(
        &mut self,
        data: Vec<f64>,
        shape: Vec<usize>,
        parents: &[usize],
        step: BackStep,
    ) -> Tensor {
        let rg = self.grad_enabled && parents.iter().any(|&p| self.nodes[p].requires_grad);
        self.push(data, shape, rg, Some(step), None)
    }

    // ── backward ─────────────────────────────────────────────────────────

    /// Reverse-topological gradient accumulation from a scalar loss.
    /// Gradients add into whatever is already present, so two calls without
    /// an intervening zeroing double every gradient.
    pub fn backward(&mut self, loss: &Tensor) -> Result<()> {
        if loss.numel() != 1 {
            return Err(Error::config(format!(
                "backward requires a scalar loss, got shape {:?}",
                loss.shape()
            )));
        }
        // Leaf gradients accumulate across calls; interior gradients are
        // recomputed fresh each call.
        for node in self.nodes.iter_mut() {
            if node.step.is_some() {
                node.grad = None;
            }
        }
        self.accum(loss.id, &[1.0]);
        for i in (0..=loss.id).rev() {
            if self.nodes[i].grad.is_none() || self.nodes[i].step.is_none() {
                continue;
            }
            let step = self.nodes[i].step.clone().unwrap();
            let gout = self.nodes[i].grad.clone().unwrap();
            self.apply_step(i, &step, &gout);
        }
        Ok(())
    }

    /// Add gradients of parameter-backed leaves into the store.
    pub fn accumulate_param_grads(&self, store: &mut ParamStore) {
        for node in &self.nodes {
            if let (Some(pid), Some(g)) = (node.param, node.grad.as_ref()) {
                store.get_mut(pid).accumulate_grad(g);
            }
        }
    }

    pub(crate) fn accum(&mut self, id: usize, contrib: &[f64]) {
        let node = &mut self.nodes[id];
        if !node.requires_grad {
            return;
        }
        let g = node.grad.get_or_insert_with(|| vec![0.0; node.data.len()]);
        debug_assert_eq!(g.len(), contrib.len());
        for (gi, ci) in g.iter_mut().zip(contrib.iter()) {
            *gi += ci;
        }
    }

    fn apply_step(&mut self, node: usize, step: &BackStep, gout: &[f64]) {
        match *step {
            BackStep::Add { a, b } => {
                self.accum(a, gout);
                self.accum(b, gout);
            }
            BackStep::Sub { a, b } => {
                self.accum(a, gout);
                let gb: Vec<f64> = gout.iter().map(|g| -g).collect();
                self.accum(b, &gb);
            }
            BackStep::Mul { a, b } => {
                let (ga, gb) = {
                    let ad = &self.nodes[a].data;
                    let bd = &self.nodes[b].data;
                    let ga: Vec<f64> = gout.iter().zip(bd.iter()).map(|(g, x)| g * x).collect();
                    let gb: Vec<f64> = gout.iter().zip(ad.iter()).map(|(g, x)| g * x).collect();
                    (ga, gb)
                };
                self.accum(a, &ga);
                self.accum(b, &gb);
            }
            BackStep::Div { a, b } => {
                let (ga, gb) = {
                    let ad = &self.nodes[a].data;
                    let bd = &self.nodes[b].data;
                    let ga: Vec<f64> = gout.iter().zip(bd.iter()).map(|(g, y)| g / y).collect();
                    let gb: Vec<f64> = gout
                        .iter()
                        .zip(ad.iter().zip(bd.iter()))
                        .map(|(g, (x, y))| -g * x / (y * y))
                        .collect();
                    (ga, gb)
                };
                self.accum(a, &ga);
                self.accum(b, &gb);
            }
            BackStep::Neg { x } => {
                let gx: Vec<f64> = gout.iter().map(|g| -g).collect();
                self.accum(x, &gx);
            }
            BackStep::Relu { x } => {
                let gx: Vec<f64> = {
                    let xd = &self.nodes[x].data;
                    gout.iter().zip(xd.iter()).map(|(g, v)| if *v > 0.0 { *g } else { 0.0 }).collect()
                };
                self.accum(x, &gx);
            }
            BackStep::Exp { x } => {
                let gx: Vec<f64> = {
                    let out = &self.nodes[node].data;
                    gout.iter().zip(out.iter()).map(|(g, y)| g * y).collect()
                };
                self.accum(x, &gx);
            }
            BackStep::Ln { x } => {
                let gx: Vec<f64> = {
                    let xd = &self.nodes[x].data;
                    gout.iter().zip(xd.iter()).map(|(g, v)| g / v).collect()
                };
                self.accum(x, &gx);
            }
            BackStep::Sqrt { x } => {
                let gx: Vec<f64> = {
                    let out = &self.nodes[node].data;
                    gout.iter().zip(out.iter()).map(|(g, y)| g * 0.5 / y).collect()
                };
                self.accum(x, &gx);
            }
            BackStep::Sigmoid { x } => {
                let gx: Vec<f64> = {
                    let out = &self.nodes[node].data;
                    gout.iter().zip(out.iter()).map(|(g, y)| g * y * (1.0 - y)).collect()
                };
                self.accum(x, &gx);
            }
            BackStep::Abs { x } => {
                let gx: Vec<f64> = {
                    let xd = &self.nodes[x].data;
                    gout.iter()
                        .zip(xd.iter())
                        .map(|(g, v)| g * if *v > 0.0 { 1.0 } else if *v < 0.0 { -1.0 } else { 0.0 })
                        .collect()
                };
                self.accum(x, &gx);
            }
            BackStep::ClampMin { x, min } => {
                let gx: Vec<f64> = {
                    let xd = &self.nodes[x].data;
                    gout.iter().zip(xd.iter()).map(|(g, v)| if *v > min { *g } else { 0.0 }).collect()
                };
                self.accum(x, &gx);
            }
            BackStep::Scale { x, s } => {
                let gx: Vec<f64> = gout.iter().map(|g| g * s).collect();
                self.accum(x, &gx);
            }
            BackStep::AddScalar { x } => {
                self.accum(x, gout);
            }
            BackStep::SumAll { x } => {
                let n = self.nodes[x].data.len();
                self.accum(x, &vec![gout[0]; n]);
            }
            BackStep::MeanAll { x } => {
                let n = self.nodes[x].data.len();
                self.accum(x, &vec![gout[0] / n as f64; n]);
            }
            BackStep::Reshape { x } => {
                self.accum(x, gout);
            }
            BackStep::Permute { x, ref perm } => {
                let in_shape = self.nodes[x].shape.clone();
                let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
                let mut inv = vec![0usize; perm.len()];
                for (k, &p) in perm.iter().enumerate() {
                    inv[p] = k;
                }
                let gx = permute_copy(gout, &out_shape, &inv);
                self.accum(x, &gx);
            }
            BackStep::ConcatDim1 { a, b, outer, ca, cb, inner } => {
                let mut ga = vec![0.0; outer * ca * inner];
                let mut gb = vec![0.0; outer * cb * inner];
                let row = (ca + cb) * inner;
                for o in 0..outer {
                    let src = &gout[o * row..(o + 1) * row];
                    ga[o * ca * inner..(o + 1) * ca * inner].copy_from_slice(&src[..ca * inner]);
                    gb[o * cb * inner..(o + 1) * cb * inner].copy_from_slice(&src[ca * inner..]);
                }
                self.accum(a, &ga);
                self.accum(b, &gb);
            }
            BackStep::SplitPart { x, outer, c_src, c_start, c_len, inner } => {
                let mut gx = vec![0.0; outer * c_src * inner];
                for o in 0..outer {
                    let dst = &mut gx[(o * c_src + c_start) * inner..(o * c_src + c_start + c_len) * inner];
                    dst.copy_from_slice(&gout[o * c_len * inner..(o + 1) * c_len * inner]);
                }
                self.accum(x, &gx);
            }
            BackStep::MeanSeq { x, t } => {
                let (bsz, l) = {
                    let s = &self.nodes[x].shape;
                    (s[0], s[2])
                };
                let mut gx = vec![0.0; bsz * t * l];
                let inv_t = 1.0 / t as f64;
                for b in 0..bsz {
                    for ti in 0..t {
                        for li in 0..l {
                            gx[(b * t + ti) * l + li] = gout[b * l + li] * inv_t;
                        }
                    }
                }
                self.accum(x, &gx);
            }
            BackStep::Diag { x, n } => {
                let mut gx = vec![0.0; n * n];
                for i in 0..n {
                    gx[i * n + i] = gout[i];
                }
                self.accum(x, &gx);
            }
            BackStep::MatMul { a, b, m, k, n } => {
                let (ga, gb) = {
                    let ad = &self.nodes[a].data;
                    let bd = &self.nodes[b].data;
                    linalg::matmul_backward(gout, ad, bd, m, k, n)
                };
                self.accum(a, &ga);
                self.accum(b, &gb);
            }
            BackStep::Bmm { a, b, nb, m, k, p } => {
                let (ga, gb) = {
                    let ad = &self.nodes[a].data;
                    let bd = &self.nodes[b].data;
                    linalg::bmm_backward(gout, ad, bd, nb, m, k, p)
                };
                self.accum(a, &ga);
                self.accum(b, &gb);
            }
            BackStep::Linear { x, w, b, rows, d_in, d_out } => {
                let (gx, gw, gb) = {
                    let xd = &self.nodes[x].data;
                    let wd = &self.nodes[w].data;
                    linalg::linear_backward(gout, xd, wd, rows, d_in, d_out)
                };
                self.accum(x, &gx);
                self.accum(w, &gw);
                self.accum(b, &gb);
            }
            BackStep::SoftmaxLast { rows, cols, x } => {
                let gx = {
                    let out = &self.nodes[node].data;
                    linalg::softmax_backward(gout, out, rows, cols)
                };
                self.accum(x, &gx);
            }
            BackStep::LogSumExpRows { x, rows, cols } => {
                let gx = {
                    let xd = &self.nodes[x].data;
                    let out = &self.nodes[node].data;
                    linalg::logsumexp_backward(gout, xd, out, rows, cols)
                };
                self.accum(x, &gx);
            }
            BackStep::Conv2d { input, weight, bias, stride, pad } => {
                let (gi, gw, gb) = {
                    let xd = &self.nodes[input].data;
                    let x_shape = &self.nodes[input].shape;
                    let wd = &self.nodes[weight].data;
                    let w_shape = &self.nodes[weight].shape;
                    nn::conv2d_backward(gout, xd, x_shape, wd, w_shape, stride, pad)
                };
                self.accum(input, &gi);
                self.accum(weight, &gw);
                self.accum(bias, &gb);
            }
            BackStep::BatchNorm { x, gamma, beta, ref mu, ref inv } => {
                let (gx, gg, gb) = {
                    let xd = &self.nodes[x].data;
                    let x_shape = &self.nodes[x].shape;
                    let gd = &self.nodes[gamma].data;
                    nn::batch_norm_backward(gout, xd, x_shape, gd, mu, inv)
                };
                self.accum(x, &gx);
                self.accum(gamma, &gg);
                self.accum(beta, &gb);
            }
            BackStep::AdaptivePool { x, s } => {
                let gx = {
                    let shape = &self.nodes[x].shape;
                    nn::adaptive_pool_backward(gout, shape, s)
                };
                self.accum(x, &gx);
            }
            BackStep::GlobalPool { x } => {
                let gx = {
                    let shape = &self.nodes[x].shape;
                    nn::global_pool_backward(gout, shape)
                };
                self.accum(x, &gx);
            }
            BackStep::Upsample2x { x } => {
                let gx = {
                    let shape = &self.nodes[x].shape;
                    nn::upsample2x_backward(gout, shape)
                };
                self.accum(x, &gx);
            }
            BackStep::BceLogits { z, t } => {
                let (gz, gt) = {
                    let zd = &self.nodes[z].data;
                    let td = &self.nodes[t].data;
                    nn::bce_logits_backward(gout, zd, td)
                };
                self.accum(z, &gz);
                self.accum(t, &gt);
            }
            BackStep::SmoothL1 { p, t } => {
                let (gp, gt) = {
                    let pd = &self.nodes[p].data;
                    let td = &self.nodes[t].data;
                    nn::smooth_l1_backward(gout, pd, td)
                };
                self.accum(p, &gp);
                self.accum(t, &gt);
            }
            BackStep::Cosine { u, v, eps } => {
                let (gu, gv) = {
                    let ud = &self.nodes[u].data;
                    let vd = &self.nodes[v].data;
                    linalg::cosine_backward(gout[0], ud, vd, eps)
                };
                self.accum(u, &gu);
                self.accum(v, &gv);
            }
            BackStep::RowCosine { a, b, eps } => {
                let (ga, gb) = {
                    let ad = &self.nodes[a].data;
                    let bd = &self.nodes[b].data;
                    let l = self.nodes[a].shape[1];
                    linalg::row_cosine_backward(gout, ad, bd, l, eps)
                };
                self.accum(a, &ga);
                self.accum(b, &gb);
            }
            BackStep::CosineMatrix { a, b, eps } => {
                let (ga, gb) = {
                    let ad = &self.nodes[a].data;
                    let bd = &self.nodes[b].data;
                    let n = self.nodes[a].shape[0];
                    let m = self.nodes[b].shape[0];
                    let l = self.nodes[a].shape[1];
                    linalg::cosine_matrix_backward(gout, ad, bd, n, m, l, eps)
                };
                self.accum(a, &ga);
                self.accum(b, &gb);
            }
        }
    }

    // ── elementwise ──────────────────────────────────────────────────────

    fn binary(&mut self, a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64, step: BackStep) -> Tensor {
        assert_eq!(a.shape(), b.shape(), "elementwise op on mismatched shapes");
        let data: Vec<f64> = self.nodes[a.id]
            .data
            .iter()
            .zip(self.nodes[b.id].data.iter())
            .map(|(x, y)| f(*x, *y))
            .collect();
        self.push_op(data, a.shape.clone(), &[a.id, b.id], step)
    }

    pub fn add(&mut self, a: &Tensor, b: &Tensor) -> Tensor {
        self.binary(a, b, |x, y| x + y, BackStep::Add { a: a.id, b: b.id })
    }

    pub fn sub(&mut self, a: &Tensor, b: &Tensor) -> Tensor {
        self.binary(a, b, |x, y| x - y, BackStep::Sub { a: a.id, b: b.id })
    }

    pub fn mul(&mut self, a: &Tensor, b: &Tensor) -> Tensor {
        self.binary(a, b, |x, y| x * y, BackStep::Mul { a: a.id, b: b.id })
    }

    pub fn div(&mut self, a: &Tensor, b: &Tensor) -> Tensor {
        self.binary(a, b, |x, y| x / y, BackStep::Div { a: a.id, b: b.id })
    }

    fn unary(&mut self, x: &Tensor, f: impl Fn(f64) -> f64, step: BackStep) -> Tensor {
        let data: Vec<f64> = self.nodes[x.id].data.iter().map(|v| f(*v)).collect();
        self.push_op(data, x.shape.clone(), &[x.id], step)
    }

    pub fn neg(&mut self, x: &Tensor) -> Tensor {
        self.unary(x, |v| -v, BackStep::Neg { x: x.id })
    }

    /// Elementwise max(0, x); the subgradient at exactly 0 is 0.
    pub fn relu(&mut self, x: &Tensor) -> Tensor {
        self.unary(x, |v| v.max(0.0), BackStep::Relu { x: x.id })
    }

    pub fn exp(&mut self, x: &Tensor) -> Tensor {
        self.unary(x, f64::exp, BackStep::Exp { x: x.id })
    }

    pub fn ln(&mut self, x: &Tensor) -> Tensor {
        self.unary(x, f64::ln, BackStep::Ln { x: x.id })
    }

    pub fn sqrt(&mut self, x: &Tensor) -> Tensor {
        self.unary(x, f64::sqrt, BackStep::Sqrt { x: x.id })
    }

    pub fn sigmoid(&mut self, x: &Tensor) -> Tensor {
        self.unary(x, sigmoid_stable, BackStep::Sigmoid { x: x.id })
    }

    pub fn abs(&mut self, x: &Tensor) -> Tensor {
        self.unary(x, f64::abs, BackStep::Abs { x: x.id })
    }

    pub fn clamp_min(&mut self, x: &Tensor, min: f64) -> Tensor {
        self.unary(x, |v| v.max(min), BackStep::ClampMin { x: x.id, min })
    }

    pub fn scale(&mut self, x: &Tensor, s: f64) -> Tensor {
        self.unary(x, |v| v * s, BackStep::Scale { x: x.id, s })
    }

    pub fn add_scalar(&mut self, x: &Tensor, s: f64) -> Tensor {
        self.unary(x, |v| v + s, BackStep::AddScalar { x: x.id })
    }

    // ── reductions ───────────────────────────────────────────────────────

    pub fn sum_all(&mut self, x: &Tensor) -> Tensor {
        let s: f64 = self.nodes[x.id].data.iter().sum();
        self.push_op(vec![s], vec![1], &[x.id], BackStep::SumAll { x: x.id })
    }

    pub fn mean_all(&mut self, x: &Tensor) -> Tensor {
        let n = x.numel();
        let s: f64 = self.nodes[x.id].data.iter().sum();
        self.push_op(vec![s / n as f64], vec![1], &[x.id], BackStep::MeanAll { x: x.id })
    }

    // ── shape ops ────────────────────────────────────────────────────────

    pub fn reshape(&mut self, x: &Tensor, shape: &[usize]) -> Tensor {
        let numel: usize = shape.iter().product();
        assert_eq!(numel, x.numel(), "reshape {:?} -> {:?} changes element count", x.shape(), shape);
        let data = self.nodes[x.id].data.clone();
        self.push_op(data, shape.to_vec(), &[x.id], BackStep::Reshape { x: x.id })
    }

    pub fn permute(&mut self, x: &Tensor, perm: &[usize]) -> Tensor {
        assert_eq!(perm.len(), x.shape().len());
        let (data, shape) = {
            let xd = &self.nodes[x.id].data;
            let out = permute_copy(xd, &x.shape, perm);
            let shape: Vec<usize> = perm.iter().map(|&p| x.shape[p]).collect();
            (out, shape)
        };
        self.push_op(data, shape, &[x.id], BackStep::Permute { x: x.id, perm: perm.to_vec() })
    }

    /// Concatenate along dim 1 (the channel axis for NCHW maps).
    pub fn concat_dim1(&mut self, a: &Tensor, b: &Tensor) -> Tensor {
        assert!(a.shape().len() >= 2 && a.shape().len() == b.shape().len());
        assert_eq!(a.shape()[0], b.shape()[0], "concat: leading dims differ");
        assert_eq!(a.shape()[2..], b.shape()[2..], "concat: trailing dims differ");
        let outer = a.shape()[0];
        let ca = a.shape()[1];
        let cb = b.shape()[1];
        let inner: usize = a.shape()[2..].iter().product();
        let mut shape = a.shape.clone();
        shape[1] = ca + cb;
        let mut data = Vec::with_capacity(outer * (ca + cb) * inner);
        for o in 0..outer {
            data.extend_from_slice(&self.nodes[a.id].data[o * ca * inner..(o + 1) * ca * inner]);
            data.extend_from_slice(&self.nodes[b.id].data[o * cb * inner..(o + 1) * cb * inner]);
        }
        self.push_op(data, shape, &[a.id, b.id], BackStep::ConcatDim1 {
            a: a.id,
            b: b.id,
            outer,
            ca,
            cb,
            inner,
        })
    }

    /// Contiguous split along dim 1. `concat_dim1(split(x, at))` reproduces
    /// `x` bit-exactly and gradients route to the matching halves.
    pub fn split_dim1(&mut self, x: &Tensor, at: usize) -> Result<(Tensor, Tensor)> {
        let c = *x.shape().get(1).ok_or_else(|| Error::config("split requires rank >= 2"))?;
        if at == 0 || at >= c {
            return Err(Error::config(format!("split point {} out of range for {} channels", at, c)));
        }
        let outer = x.shape()[0];
        let inner: usize = x.shape()[2..].iter().product();
        let part = |start: usize, len: usize, tape: &mut Tape| {
            let mut data = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                let base = (o * c + start) * inner;
                data.extend_from_slice(&tape.nodes[x.id].data[base..base + len * inner]);
            }
            let mut shape = x.shape.clone();
            shape[1] = len;
            tape.push_op(data, shape, &[x.id], BackStep::SplitPart {
                x: x.id,
                outer,
                c_src: c,
                c_start: start,
                c_len: len,
                inner,
            })
        };
        let a = part(0, at, self);
        let b = part(at, c - at, self);
        Ok((a, b))
    }

    /// Mean over the middle (sequence) axis of a `[B, T, L]` tensor.
    pub fn mean_seq(&mut self, x: &Tensor) -> Tensor {
        assert_eq!(x.shape().len(), 3);
        let (b, t, l) = (x.shape[0], x.shape[1], x.shape[2]);
        let mut out = vec![0.0; b * l];
        {
            let xd = &self.nodes[x.id].data;
            for bi in 0..b {
                for ti in 0..t {
                    for li in 0..l {
                        out[bi * l + li] += xd[(bi * t + ti) * l + li];
                    }
                }
            }
        }
        let inv_t = 1.0 / t as f64;
        for v in out.iter_mut() {
            *v *= inv_t;
        }
        self.push_op(out, vec![b, l], &[x.id], BackStep::MeanSeq { x: x.id, t })
    }

    /// Diagonal of a square matrix.
    pub fn diag(&mut self, x: &Tensor) -> Tensor {
        assert_eq!(x.shape().len(), 2);
        assert_eq!(x.shape[0], x.shape[1], "diag requires a square matrix");
        let n = x.shape[0];
        let data: Vec<f64> = (0..n).map(|i| self.nodes[x.id].data[i * n + i]).collect();
        self.push_op(data, vec![n], &[x.id], BackStep::Diag { x: x.id, n })
    }
}

pub(crate) fn sigmoid_stable(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Rearrange `src` (row-major, `shape`) so that output axis `k` is input
/// axis `perm[k]`.
fn permute_copy(src: &[f64], shape: &[usize], perm: &[usize]) -> Vec<f64> {
    let rank = shape.len();
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let numel: usize = shape.iter().product();
    let mut out = vec![0.0; numel];
    let mut coords = vec![0usize; rank];
    for (oi, slot) in out.iter_mut().enumerate() {
        let mut rem = oi;
        for k in (0..rank).rev() {
            coords[k] = rem % out_shape[k];
            rem /= out_shape[k];
        }
        let mut ii = 0;
        for k in 0..rank {
            ii += coords[k] * in_strides[perm[k]];
        }
        *slot = src[ii];
    }
    out
}
