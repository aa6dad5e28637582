//! Tape-based reverse-mode automatic differentiation over `f64` tensors.
//!
//! Every value on the tape is a rank-3 array `[batch, tokens, features]`.
//! Weight matrices are stored as `[1, in, out]` and vectors as `[1, 1, n]`
//! so that one tensor type covers parameters, activations and losses
//! (losses are `[1, 1, 1]`). The op set is exactly what the patch
//! transformer needs; each backward rule is hand-derived and checked
//! against central finite differences in the test suite.
//!
//! ```
//! use tsjepa::autodiff::{MountedParams, Params, Tape, Tensor};
//!
//! // One linear layer y = x·w, mean-squared error against zero targets.
//! let mut params = Params::new();
//! params.insert("w", Tensor::from_shape_vec((1, 2, 1), vec![0.5, -1.0]).unwrap());
//!
//! let mut tape = Tape::new();
//! let mp = MountedParams::mount(&mut tape, &params);
//! let x = tape.constant(Tensor::from_shape_vec((1, 1, 2), vec![2.0, 1.0]).unwrap());
//! let y = tape.linear(x, mp.id("w"), None);          // y = 2·0.5 + 1·(−1) = 0
//! let loss = tape.mse_loss(y, Tensor::zeros((1, 1, 1)));
//!
//! assert_eq!(tape.value(loss)[[0, 0, 0]], 0.0);
//! let grads = mp.grads(&tape, &tape.backward(loss).unwrap());
//! // d loss / d w = 2·y·x = 0 at the optimum.
//! assert_eq!(grads.get("w")[[0, 0, 0]], 0.0);
//! assert_eq!(grads.get("w")[[0, 1, 0]], 0.0);
//! ```

use indexmap::IndexMap;
use ndarray::{Array3, Axis};
use thiserror::Error;

pub type Tensor = Array3<f64>;

/// Index of a node on a [`Tape`].
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct NodeId(pub(crate) usize);

#[derive(Error, Debug)]
pub enum AutodiffError {
    #[error("shape mismatch in {op}: {details}")]
    ShapeMismatch { op: &'static str, details: String },
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
    #[error("backward root must be a scalar [1,1,1], got {0:?}")]
    NonScalarRoot((usize, usize, usize)),
}

#[derive(Debug, Clone)]
pub(crate) enum Op {
    Leaf { requires_grad: bool },
    Linear { x: NodeId, w: NodeId, b: Option<NodeId> },
    Add { a: NodeId, b: NodeId },
    /// Adds a constant; broadcasts over the batch axis when `c` has batch 1.
    AddConst { x: NodeId },
    Scale { x: NodeId, factor: f64 },
    Gelu { x: NodeId },
    LayerNorm { x: NodeId, gain: NodeId, bias: NodeId },
    SplitHeads { x: NodeId, heads: usize },
    MergeHeads { x: NodeId, heads: usize },
    /// `a · bᵀ` per batch: `[n,t,k] × [n,s,k] -> [n,t,s]`.
    MatmulNT { a: NodeId, b: NodeId },
    /// `a · b` per batch: `[n,t,s] × [n,s,k] -> [n,t,k]`.
    MatmulNN { a: NodeId, b: NodeId },
    /// Softmax over the last axis. Additive masks go through `AddConst`.
    Softmax { x: NodeId },
    MeanTokens { x: NodeId },
    Gather { x: NodeId, idx: Vec<usize> },
    Scatter { x: NodeId, idx: Vec<usize> },
    Broadcast { v: NodeId, batch: usize, tokens: usize },
    Reshape { x: NodeId, from: (usize, usize, usize) },
    Conv1dSame { x: NodeId, w: NodeId, b: NodeId },
    L1Loss { pred: NodeId, target: Tensor },
    MseLoss { pred: NodeId, target: Tensor },
    CrossEntropy { logits: NodeId, labels: Vec<usize> },
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
}

/// A single forward computation. Build nodes, call [`Tape::backward`] on a
/// scalar loss, read gradients back per node.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad_scalar(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

fn dims(t: &Tensor) -> (usize, usize, usize) {
    let d = t.dim();
    (d.0, d.1, d.2)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Values of every softmax node on the tape, in creation order.
    /// Used by tests to verify attention rows are proper distributions.
    pub fn softmax_values(&self) -> Vec<&Tensor> {
        self.nodes
            .iter()
            .filter(|n| matches!(n.op, Op::Softmax { .. }))
            .map(|n| &n.value)
            .collect()
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    /// A differentiable input (parameters mount through this).
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf { requires_grad: true })
    }

    /// A non-differentiable input (raw data, positional encodings).
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf { requires_grad: false })
    }

    /// `x[b] · w + bias` with shared weights `w: [1, d, e]`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> NodeId {
        let (bs, t, d) = dims(self.value(x));
        let (_, wd, we) = dims(self.value(w));
        assert_eq!(d, wd, "linear: input width {d} vs weight rows {wd}");
        let wmat = self.value(w).index_axis(Axis(0), 0).to_owned();
        let mut out = Tensor::zeros((bs, t, we));
        for bi in 0..bs {
            let xi = self.nodes[x.0].value.index_axis(Axis(0), bi);
            out.index_axis_mut(Axis(0), bi).assign(&xi.dot(&wmat));
        }
        if let Some(bid) = b {
            let bias = self.value(bid).clone();
            for bi in 0..bs {
                for ti in 0..t {
                    for e in 0..we {
                        out[[bi, ti, e]] += bias[[0, 0, e]];
                    }
                }
            }
        }
        self.push(out, Op::Linear { x, w, b })
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(dims(self.value(a)), dims(self.value(b)), "add: shape mismatch");
        let out = self.value(a) + self.value(b);
        self.push(out, Op::Add { a, b })
    }

    pub fn add_const(&mut self, x: NodeId, c: Tensor) -> NodeId {
        let (bs, t, d) = dims(self.value(x));
        let (cb, ct, cd) = dims(&c);
        assert!(ct == t && cd == d && (cb == bs || cb == 1), "add_const: shape mismatch");
        let mut out = self.value(x).clone();
        for bi in 0..bs {
            let ci = if cb == 1 { 0 } else { bi };
            let mut o = out.index_axis_mut(Axis(0), bi);
            o += &c.index_axis(Axis(0), ci);
        }
        self.push(out, Op::AddConst { x })
    }

    pub fn scale(&mut self, x: NodeId, factor: f64) -> NodeId {
        let out = self.value(x) * factor;
        self.push(out, Op::Scale { x, factor })
    }

    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let out = self.value(x).mapv(gelu_scalar);
        self.push(out, Op::Gelu { x })
    }

    /// Layer norm over the feature axis with gain/bias `[1, 1, d]`.
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> NodeId {
        let (bs, t, d) = dims(self.value(x));
        let mut out = Tensor::zeros((bs, t, d));
        let xv = &self.nodes[x.0].value;
        let g = &self.nodes[gain.0].value;
        let b = &self.nodes[bias.0].value;
        for bi in 0..bs {
            for ti in 0..t {
                let row = xv.slice(ndarray::s![bi, ti, ..]);
                let mean = row.mean().unwrap();
                let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
                let inv = 1.0 / (var + LN_EPS).sqrt();
                for di in 0..d {
                    out[[bi, ti, di]] =
                        g[[0, 0, di]] * (xv[[bi, ti, di]] - mean) * inv + b[[0, 0, di]];
                }
            }
        }
        self.push(out, Op::LayerNorm { x, gain, bias })
    }

    /// `[b, t, h·k] -> [b·h, t, k]`.
    pub fn split_heads(&mut self, x: NodeId, heads: usize) -> NodeId {
        let (bs, t, d) = dims(self.value(x));
        assert_eq!(d % heads, 0, "split_heads: {d} not divisible by {heads}");
        let k = d / heads;
        let mut out = Tensor::zeros((bs * heads, t, k));
        let xv = &self.nodes[x.0].value;
        for bi in 0..bs {
            for h in 0..heads {
                for ti in 0..t {
                    for ki in 0..k {
                        out[[bi * heads + h, ti, ki]] = xv[[bi, ti, h * k + ki]];
                    }
                }
            }
        }
        self.push(out, Op::SplitHeads { x, heads })
    }

    /// Inverse of [`Tape::split_heads`].
    pub fn merge_heads(&mut self, x: NodeId, heads: usize) -> NodeId {
        let (bh, t, k) = dims(self.value(x));
        assert_eq!(bh % heads, 0);
        let bs = bh / heads;
        let mut out = Tensor::zeros((bs, t, heads * k));
        let xv = &self.nodes[x.0].value;
        for bi in 0..bs {
            for h in 0..heads {
                for ti in 0..t {
                    for ki in 0..k {
                        out[[bi, ti, h * k + ki]] = xv[[bi * heads + h, ti, ki]];
                    }
                }
            }
        }
        self.push(out, Op::MergeHeads { x, heads })
    }

    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (n, t, k) = dims(self.value(a));
        let (nb, s, kb) = dims(self.value(b));
        assert!(n == nb && k == kb, "matmul_nt: [{n},{t},{k}] vs [{nb},{s},{kb}]");
        let mut out = Tensor::zeros((n, t, s));
        for i in 0..n {
            let ai = self.nodes[a.0].value.index_axis(Axis(0), i);
            let bi = self.nodes[b.0].value.index_axis(Axis(0), i);
            out.index_axis_mut(Axis(0), i).assign(&ai.dot(&bi.t()));
        }
        self.push(out, Op::MatmulNT { a, b })
    }

    pub fn matmul_nn(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (n, t, s) = dims(self.value(a));
        let (nb, sb, k) = dims(self.value(b));
        assert!(n == nb && s == sb, "matmul_nn: [{n},{t},{s}] vs [{nb},{sb},{k}]");
        let mut out = Tensor::zeros((n, t, k));
        for i in 0..n {
            let ai = self.nodes[a.0].value.index_axis(Axis(0), i);
            let bi = self.nodes[b.0].value.index_axis(Axis(0), i);
            out.index_axis_mut(Axis(0), i).assign(&ai.dot(&bi));
        }
        self.push(out, Op::MatmulNN { a, b })
    }

    pub fn softmax(&mut self, x: NodeId) -> NodeId {
        let (n, t, s) = dims(self.value(x));
        let mut out = Tensor::zeros((n, t, s));
        let xv = &self.nodes[x.0].value;
        for i in 0..n {
            for ti in 0..t {
                let row = xv.slice(ndarray::s![i, ti, ..]);
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for si in 0..s {
                    let e = (xv[[i, ti, si]] - max).exp();
                    out[[i, ti, si]] = e;
                    sum += e;
                }
                for si in 0..s {
                    out[[i, ti, si]] /= sum;
                }
            }
        }
        self.push(out, Op::Softmax { x })
    }

    pub fn mean_tokens(&mut self, x: NodeId) -> NodeId {
        let (bs, t, d) = dims(self.value(x));
        let mut out = Tensor::zeros((bs, 1, d));
        let xv = &self.nodes[x.0].value;
        for bi in 0..bs {
            for di in 0..d {
                let mut acc = 0.0;
                for ti in 0..t {
                    acc += xv[[bi, ti, di]];
                }
                out[[bi, 0, di]] = acc / t as f64;
            }
        }
        self.push(out, Op::MeanTokens { x })
    }

    /// Select token positions `idx` from each sequence.
    pub fn gather(&mut self, x: NodeId, idx: &[usize]) -> NodeId {
        let (bs, t, d) = dims(self.value(x));
        assert!(idx.iter().all(|&i| i < t), "gather: index out of range");
        let mut out = Tensor::zeros((bs, idx.len(), d));
        let xv = &self.nodes[x.0].value;
        for bi in 0..bs {
            for (oi, &ti) in idx.iter().enumerate() {
                for di in 0..d {
                    out[[bi, oi, di]] = xv[[bi, ti, di]];
                }
            }
        }
        self.push(out, Op::Gather { x, idx: idx.to_vec() })
    }

    /// Place tokens at positions `idx` of a zero-filled length-`total` sequence.
    pub fn scatter(&mut self, x: NodeId, idx: &[usize], total: usize) -> NodeId {
        let (bs, t, d) = dims(self.value(x));
        assert_eq!(t, idx.len(), "scatter: token count vs index count");
        assert!(idx.iter().all(|&i| i < total));
        let mut out = Tensor::zeros((bs, total, d));
        let xv = &self.nodes[x.0].value;
        for bi in 0..bs {
            for (si, &ti) in idx.iter().enumerate() {
                for di in 0..d {
                    out[[bi, ti, di]] = xv[[bi, si, di]];
                }
            }
        }
        self.push(out, Op::Scatter { x, idx: idx.to_vec() })
    }

    /// Tile a `[1, 1, d]` vector to `[batch, tokens, d]`.
    pub fn broadcast(&mut self, v: NodeId, batch: usize, tokens: usize) -> NodeId {
        let (_, _, d) = dims(self.value(v));
        let mut out = Tensor::zeros((batch, tokens, d));
        let vv = &self.nodes[v.0].value;
        for bi in 0..batch {
            for ti in 0..tokens {
                for di in 0..d {
                    out[[bi, ti, di]] = vv[[0, 0, di]];
                }
            }
        }
        self.push(out, Op::Broadcast { v, batch, tokens })
    }

    /// Reinterpret in row-major order; element count must match.
    pub fn reshape(&mut self, x: NodeId, shape: (usize, usize, usize)) -> NodeId {
        let from = dims(self.value(x));
        assert_eq!(
            from.0 * from.1 * from.2,
            shape.0 * shape.1 * shape.2,
            "reshape: element count mismatch"
        );
        let flat: Vec<f64> = self.value(x).iter().cloned().collect();
        let out = Tensor::from_shape_vec(shape, flat).unwrap();
        self.push(out, Op::Reshape { x, from })
    }

    /// 1-D convolution over the token axis with zero "same" padding.
    /// `x: [n, len, c_in]`, `w: [k, c_in, c_out]`, `b: [1, 1, c_out]`.
    pub fn conv1d_same(&mut self, x: NodeId, w: NodeId, b: NodeId) -> NodeId {
        let (n, len, cin) = dims(self.value(x));
        let (k, wcin, cout) = dims(self.value(w));
        assert_eq!(cin, wcin, "conv1d: channel mismatch");
        assert_eq!(k % 2, 1, "conv1d: kernel must be odd for same padding");
        let pad = k / 2;
        let mut out = Tensor::zeros((n, len, cout));
        let xv = &self.nodes[x.0].value;
        let wv = &self.nodes[w.0].value;
        let bv = &self.nodes[b.0].value;
        for ni in 0..n {
            for t in 0..len {
                for co in 0..cout {
                    let mut acc = bv[[0, 0, co]];
                    for dk in 0..k {
                        let src = t as isize + dk as isize - pad as isize;
                        if src < 0 || src >= len as isize {
                            continue;
                        }
                        for ci in 0..cin {
                            acc += xv[[ni, src as usize, ci]] * wv[[dk, ci, co]];
                        }
                    }
                    out[[ni, t, co]] = acc;
                }
            }
        }
        self.push(out, Op::Conv1dSame { x, w, b })
    }

    /// Mean over tokens of the per-token L1 distance to `target`.
    pub fn l1_loss(&mut self, pred: NodeId, target: Tensor) -> NodeId {
        assert_eq!(dims(self.value(pred)), dims(&target), "l1_loss: shape mismatch");
        let (bs, t, _) = dims(&target);
        let total: f64 = self
            .value(pred)
            .iter()
            .zip(target.iter())
            .map(|(p, q)| (p - q).abs())
            .sum();
        let loss = total / (bs * t) as f64;
        self.push(
            Tensor::from_elem((1, 1, 1), loss),
            Op::L1Loss { pred, target },
        )
    }

    /// Mean squared error over all elements.
    pub fn mse_loss(&mut self, pred: NodeId, target: Tensor) -> NodeId {
        assert_eq!(dims(self.value(pred)), dims(&target), "mse_loss: shape mismatch");
        let n = target.len() as f64;
        let total: f64 = self
            .value(pred)
            .iter()
            .zip(target.iter())
            .map(|(p, q)| (p - q).powi(2))
            .sum();
        self.push(
            Tensor::from_elem((1, 1, 1), total / n),
            Op::MseLoss { pred, target },
        )
    }

    /// Mean negative log-likelihood of `labels` under row-softmax of
    /// `logits: [b, 1, classes]`.
    pub fn cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> NodeId {
        let (bs, t, c) = dims(self.value(logits));
        assert_eq!(t, 1, "cross_entropy: expected [b,1,C] logits");
        assert_eq!(bs, labels.len());
        assert!(labels.iter().all(|&l| l < c));
        let xv = &self.nodes[logits.0].value;
        let mut total = 0.0;
        for bi in 0..bs {
            let row = xv.slice(ndarray::s![bi, 0, ..]);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let logsum = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
            total += logsum - xv[[bi, 0, labels[bi]]];
        }
        self.push(
            Tensor::from_elem((1, 1, 1), total / bs as f64),
            Op::CrossEntropy { logits, labels: labels.to_vec() },
        )
    }

    /// Reverse sweep from a scalar `root`. Returns per-node gradients.
    pub fn backward(&self, root: NodeId) -> Result<Gradients, AutodiffError> {
        let rd = dims(self.value(root));
        if rd != (1, 1, 1) {
            return Err(AutodiffError::NonScalarRoot(rd));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Tensor::from_elem((1, 1, 1), 1.0));

        for i in (0..=root.0).rev() {
            let dy = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.accumulate(i, &dy, &mut grads);
            // keep the root's own grad and leaf grads readable afterwards
            grads[i] = Some(dy);
        }
        // constants are not differentiated through
        for (i, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf { requires_grad: false }) {
                grads[i] = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn acc(grads: &mut [Option<Tensor>], id: NodeId, delta: Tensor) {
        match &mut grads[id.0] {
            Some(g) => *g += &delta,
            slot => *slot = Some(delta),
        }
    }

    #[allow(clippy::too_many_lines)]
    fn accumulate(&self, i: usize, dy: &Tensor, grads: &mut Vec<Option<Tensor>>) {
        match &self.nodes[i].op {
            Op::Leaf { .. } => {}
            Op::Linear { x, w, b } => {
                let xv = &self.nodes[x.0].value;
                let wmat = self.nodes[w.0].value.index_axis(Axis(0), 0).to_owned();
                let (bs, t, d) = dims(xv);
                let (_, _, e) = dims(dy);
                let mut dx = Tensor::zeros((bs, t, d));
                let mut dw = Tensor::zeros((1, d, e));
                for bi in 0..bs {
                    let dyi = dy.index_axis(Axis(0), bi);
                    let xi = xv.index_axis(Axis(0), bi);
                    dx.index_axis_mut(Axis(0), bi).assign(&dyi.dot(&wmat.t()));
                    let contrib = xi.t().dot(&dyi);
                    let mut dw0 = dw.index_axis_mut(Axis(0), 0);
                    dw0 += &contrib;
                }
                Self::acc(grads, *x, dx);
                Self::acc(grads, *w, dw);
                if let Some(bid) = b {
                    let mut db = Tensor::zeros((1, 1, e));
                    for bi in 0..bs {
                        for ti in 0..t {
                            for ei in 0..e {
                                db[[0, 0, ei]] += dy[[bi, ti, ei]];
                            }
                        }
                    }
                    Self::acc(grads, *bid, db);
                }
            }
            Op::Add { a, b } => {
                Self::acc(grads, *a, dy.clone());
                Self::acc(grads, *b, dy.clone());
            }
            Op::AddConst { x } => Self::acc(grads, *x, dy.clone()),
            Op::Scale { x, factor } => Self::acc(grads, *x, dy * *factor),
            Op::Gelu { x } => {
                let dx = self.nodes[x.0].value.mapv(gelu_grad_scalar) * dy;
                Self::acc(grads, *x, dx);
            }
            Op::LayerNorm { x, gain, bias } => {
                let xv = &self.nodes[x.0].value;
                let g = &self.nodes[gain.0].value;
                let (bs, t, d) = dims(xv);
                let mut dx = Tensor::zeros((bs, t, d));
                let mut dgain = Tensor::zeros((1, 1, d));
                let mut dbias = Tensor::zeros((1, 1, d));
                for bi in 0..bs {
                    for ti in 0..t {
                        let row = xv.slice(ndarray::s![bi, ti, ..]);
                        let mean = row.mean().unwrap();
                        let var =
                            row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
                        let inv = 1.0 / (var + LN_EPS).sqrt();
                        let mut mean_dxhat = 0.0;
                        let mut mean_dxhat_xhat = 0.0;
                        let mut xhat = vec![0.0; d];
                        let mut dxhat = vec![0.0; d];
                        for di in 0..d {
                            xhat[di] = (xv[[bi, ti, di]] - mean) * inv;
                            dxhat[di] = dy[[bi, ti, di]] * g[[0, 0, di]];
                            mean_dxhat += dxhat[di];
                            mean_dxhat_xhat += dxhat[di] * xhat[di];
                            dgain[[0, 0, di]] += dy[[bi, ti, di]] * xhat[di];
                            dbias[[0, 0, di]] += dy[[bi, ti, di]];
                        }
                        mean_dxhat /= d as f64;
                        mean_dxhat_xhat /= d as f64;
                        for di in 0..d {
                            dx[[bi, ti, di]] =
                                inv * (dxhat[di] - mean_dxhat - xhat[di] * mean_dxhat_xhat);
                        }
                    }
                }
                Self::acc(grads, *x, dx);
                Self::acc(grads, *gain, dgain);
                Self::acc(grads, *bias, dbias);
            }
            Op::SplitHeads { x, heads } => {
                let (bs, t, d) = dims(&self.nodes[x.0].value);
                let k = d / heads;
                let mut dx = Tensor::zeros((bs, t, d));
                for bi in 0..bs {
                    for h in 0..*heads {
                        for ti in 0..t {
                            for ki in 0..k {
                                dx[[bi, ti, h * k + ki]] = dy[[bi * heads + h, ti, ki]];
                            }
                        }
                    }
                }
                Self::acc(grads, *x, dx);
            }
            Op::MergeHeads { x, heads } => {
                let (bh, t, k) = dims(&self.nodes[x.0].value);
                let bs = bh / heads;
                let mut dx = Tensor::zeros((bh, t, k));
                for bi in 0..bs {
                    for h in 0..*heads {
                        for ti in 0..t {
                            for ki in 0..k {
                                dx[[bi * heads + h, ti, ki]] = dy[[bi, ti, h * k + ki]];
                            }
                        }
                    }
                }
                Self::acc(grads, *x, dx);
            }
            Op::MatmulNT { a, b } => {
                let av = &self.nodes[a.0].value;
                let bv = &self.nodes[b.0].value;
                let (n, t, k) = dims(av);
                let (_, s, _) = dims(bv);
                let mut da = Tensor::zeros((n, t, k));
                let mut db = Tensor::zeros((n, s, k));
                for ni in 0..n {
                    let dyi = dy.index_axis(Axis(0), ni);
                    let ai = av.index_axis(Axis(0), ni);
                    let bi = bv.index_axis(Axis(0), ni);
                    da.index_axis_mut(Axis(0), ni).assign(&dyi.dot(&bi));
                    db.index_axis_mut(Axis(0), ni).assign(&dyi.t().dot(&ai));
                }
                Self::acc(grads, *a, da);
                Self::acc(grads, *b, db);
            }
            Op::MatmulNN { a, b } => {
                let av = &self.nodes[a.0].value;
                let bv = &self.nodes[b.0].value;
                let (n, t, s) = dims(av);
                let (_, _, k) = dims(bv);
                let mut da = Tensor::zeros((n, t, s));
                let mut db = Tensor::zeros((n, s, k));
                for ni in 0..n {
                    let dyi = dy.index_axis(Axis(0), ni);
                    let ai = av.index_axis(Axis(0), ni);
                    let bi = bv.index_axis(Axis(0), ni);
                    da.index_axis_mut(Axis(0), ni).assign(&dyi.dot(&bi.t()));
                    db.index_axis_mut(Axis(0), ni).assign(&ai.t().dot(&dyi));
                }
                Self::acc(grads, *a, da);
                Self::acc(grads, *b, db);
            }
            Op::Softmax { x } => {
                let y = &self.nodes[i].value;
                let (n, t, s) = dims(y);
                let mut dx = Tensor::zeros((n, t, s));
                for ni in 0..n {
                    for ti in 0..t {
                        let mut dot = 0.0;
                        for si in 0..s {
                            dot += dy[[ni, ti, si]] * y[[ni, ti, si]];
                        }
                        for si in 0..s {
                            dx[[ni, ti, si]] = y[[ni, ti, si]] * (dy[[ni, ti, si]] - dot);
                        }
                    }
                }
                Self::acc(grads, *x, dx);
            }
            Op::MeanTokens { x } => {
                let (bs, t, d) = dims(&self.nodes[x.0].value);
                let mut dx = Tensor::zeros((bs, t, d));
                for bi in 0..bs {
                    for ti in 0..t {
                        for di in 0..d {
                            dx[[bi, ti, di]] = dy[[bi, 0, di]] / t as f64;
                        }
                    }
                }
                Self::acc(grads, *x, dx);
            }
            Op::Gather { x, idx } => {
                let (bs, t, d) = dims(&self.nodes[x.0].value);
                let mut dx = Tensor::zeros((bs, t, d));
                for bi in 0..bs {
                    for (oi, &ti) in idx.iter().enumerate() {
                        for di in 0..d {
                            dx[[bi, ti, di]] += dy[[bi, oi, di]];
                        }
                    }
                }
                Self::acc(grads, *x, dx);
            }
            Op::Scatter { x, idx, .. } => {
                let (bs, t, d) = dims(&self.nodes[x.0].value);
                let mut dx = Tensor::zeros((bs, t, d));
                for bi in 0..bs {
                    for (si, &ti) in idx.iter().enumerate() {
                        for di in 0..d {
                            dx[[bi, si, di]] = dy[[bi, ti, di]];
                        }
                    }
                }
                Self::acc(grads, *x, dx);
            }
            Op::Broadcast { v, batch, tokens } => {
                let (_, _, d) = dims(&self.nodes[v.0].value);
                let mut dv = Tensor::zeros((1, 1, d));
                for bi in 0..*batch {
                    for ti in 0..*tokens {
                        for di in 0..d {
                            dv[[0, 0, di]] += dy[[bi, ti, di]];
                        }
                    }
                }
                Self::acc(grads, *v, dv);
            }
            Op::Reshape { x, from } => {
                let flat: Vec<f64> = dy.iter().cloned().collect();
                let dx = Tensor::from_shape_vec(*from, flat).unwrap();
                Self::acc(grads, *x, dx);
            }
            Op::Conv1dSame { x, w, b } => {
                let xv = &self.nodes[x.0].value;
                let wv = &self.nodes[w.0].value;
                let (n, len, cin) = dims(xv);
                let (k, _, cout) = dims(wv);
                let pad = k / 2;
                let mut dx = Tensor::zeros((n, len, cin));
                let mut dw = Tensor::zeros((k, cin, cout));
                let mut db = Tensor::zeros((1, 1, cout));
                for ni in 0..n {
                    for t in 0..len {
                        for co in 0..cout {
                            let g = dy[[ni, t, co]];
                            db[[0, 0, co]] += g;
                            for dk in 0..k {
                                let src = t as isize + dk as isize - pad as isize;
                                if src < 0 || src >= len as isize {
                                    continue;
                                }
                                let src = src as usize;
                                for ci in 0..cin {
                                    dx[[ni, src, ci]] += g * wv[[dk, ci, co]];
                                    dw[[dk, ci, co]] += g * xv[[ni, src, ci]];
                                }
                            }
                        }
                    }
                }
                Self::acc(grads, *x, dx);
                Self::acc(grads, *w, dw);
                Self::acc(grads, *b, db);
            }
            Op::L1Loss { pred, target } => {
                let pv = &self.nodes[pred.0].value;
                let (bs, t, d) = dims(pv);
                let scale = dy[[0, 0, 0]] / (bs * t) as f64;
                let mut dp = Tensor::zeros((bs, t, d));
                for (o, (p, q)) in dp.iter_mut().zip(pv.iter().zip(target.iter())) {
                    let diff = p - q;
                    // subgradient at the kink is 0
                    *o = if diff == 0.0 { 0.0 } else { scale * diff.signum() };
                }
                Self::acc(grads, *pred, dp);
            }
            Op::MseLoss { pred, target } => {
                let pv = &self.nodes[pred.0].value;
                let n = target.len() as f64;
                let scale = dy[[0, 0, 0]] * 2.0 / n;
                let mut dp = pv.clone();
                for (o, q) in dp.iter_mut().zip(target.iter()) {
                    *o = scale * (*o - q);
                }
                Self::acc(grads, *pred, dp);
            }
            Op::CrossEntropy { logits, labels } => {
                let xv = &self.nodes[logits.0].value;
                let (bs, _, c) = dims(xv);
                let scale = dy[[0, 0, 0]] / bs as f64;
                let mut dl = Tensor::zeros((bs, 1, c));
                for bi in 0..bs {
                    let row = xv.slice(ndarray::s![bi, 0, ..]);
                    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
                    for ci in 0..c {
                        let p = (xv[[bi, 0, ci]] - max).exp() / sum;
                        let onehot = if ci == labels[bi] { 1.0 } else { 0.0 };
                        dl[[bi, 0, ci]] = scale * (p - onehot);
                    }
                }
                Self::acc(grads, *logits, dl);
            }
        }
    }
}

/// Per-node gradients from one backward sweep.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }
}

/// An ordered, named collection of parameter tensors. Iteration order is
/// insertion order, which keeps optimizer updates, EMA updates and
/// checkpoints deterministic.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Params {
    entries: IndexMap<String, Tensor>,
}

impl Params {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.entries.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> &Tensor {
        self.entries
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter `{name}`"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor {
        self.entries
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter `{name}`"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.entries.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.entries.values().map(|t| t.len()).sum()
    }

    /// Bytes of every value in iteration order; used for frozen-encoder
    /// integrity hashes and checkpoint digests.
    pub fn byte_digest_input(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.num_values() * 8);
        for (name, t) in self.iter() {
            out.extend_from_slice(name.as_bytes());
            for v in t.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// Merge another parameter set under a `prefix/` namespace.
    pub fn extend_prefixed(&mut self, prefix: &str, other: &Params) {
        for (name, t) in other.iter() {
            self.insert(format!("{prefix}/{name}"), t.clone());
        }
    }

    /// Extract the entries under a `prefix/` namespace, stripped.
    pub fn subset(&self, prefix: &str) -> Params {
        let pfx = format!("{prefix}/");
        let mut out = Params::new();
        for (name, t) in self.iter() {
            if let Some(rest) = name.strip_prefix(&pfx) {
                out.insert(rest.to_string(), t.clone());
            }
        }
        out
    }
}

/// Name-to-node lookup used by the forward builders, so parameters can
/// be mounted directly or addressed through a namespace.
pub trait ParamLookup {
    fn id(&self, name: &str) -> NodeId;
}

impl ParamLookup for MountedParams {
    fn id(&self, name: &str) -> NodeId {
        MountedParams::id(self, name)
    }
}

/// Parameters mounted onto a tape as differentiable leaves.
pub struct MountedParams {
    ids: IndexMap<String, NodeId>,
}

impl MountedParams {
    pub fn mount(tape: &mut Tape, params: &Params) -> Self {
        let mut ids = IndexMap::new();
        for (name, value) in params.iter() {
            ids.insert(name.clone(), tape.leaf(value.clone()));
        }
        Self { ids }
    }

    /// Mount as constants: values participate in the forward pass but
    /// receive no gradient (the stop-gradient side of the target branch).
    pub fn mount_frozen(tape: &mut Tape, params: &Params) -> Self {
        let mut ids = IndexMap::new();
        for (name, value) in params.iter() {
            ids.insert(name.clone(), tape.constant(value.clone()));
        }
        Self { ids }
    }

    pub fn id(&self, name: &str) -> NodeId {
        *self
            .ids
            .get(name)
            .unwrap_or_else(|| panic!("parameter `{name}` not mounted"))
    }

    /// Collect gradients for every mounted parameter (zeros when a
    /// parameter did not participate in the loss).
    pub fn grads(&self, tape: &Tape, grads: &Gradients) -> GradMap {
        let mut out = IndexMap::new();
        for (name, id) in &self.ids {
            let g = grads
                .get(*id)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(tape.value(*id).dim()));
            out.insert(name.clone(), g);
        }
        GradMap { entries: out }
    }
}

/// Named gradients matching a [`Params`] layout.
#[derive(Clone, Debug, Default)]
pub struct GradMap {
    entries: IndexMap<String, Tensor>,
}

impl GradMap {
    pub fn get(&self, name: &str) -> &Tensor {
        self.entries
            .get(name)
            .unwrap_or_else(|| panic!("no gradient for `{name}`"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.entries.iter()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.entries.insert(name.into(), value);
    }

    pub fn all_finite(&self) -> bool {
        self.entries.values().all(|t| t.iter().all(|v| v.is_finite()))
    }

    /// Copy of this map with every name moved under a `prefix/` namespace.
    pub fn prefixed(&self, prefix: &str) -> GradMap {
        let mut out = GradMap::default();
        out.extend_prefixed(prefix, self);
        out
    }

    /// Merge another gradient map under a `prefix/` namespace.
    pub fn extend_prefixed(&mut self, prefix: &str, other: &GradMap) {
        for (name, t) in other.iter() {
            self.insert(format!("{prefix}/{name}"), t.clone());
        }
    }

    /// Strip a `prefix/` namespace, keeping only matching entries.
    pub fn strip_prefix(&self, prefix: &str) -> GradMap {
        let pfx = format!("{prefix}/");
        let mut entries = IndexMap::new();
        for (name, t) in &self.entries {
            if let Some(rest) = name.strip_prefix(&pfx) {
                entries.insert(rest.to_string(), t.clone());
            }
        }
        GradMap { entries }
    }
}
