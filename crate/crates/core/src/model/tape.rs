//! Reverse-mode differentiation over the handful of batched operations the
//! separator needs. Every op has a hand-written backward pass; values are
//! kept on the tape until it is dropped.

use std::sync::Arc;

use ndarray::linalg::general_mat_mul;
use ndarray::{ArrayView2, ArrayViewMut2};
use rayon::prelude::*;

use super::rope::RopeTable;
use crate::bandmap::BandMapping;
use crate::spectral::{self, ComplexSpectrogram};
use crate::tensor::Tensor;

pub const NORM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Bin layout shared by band inputs, band masks and the merged mask.
///
/// A band vector for band `b` is laid out as `[c][re|im][bin]` over the
/// band's bins, so its width is `2 * |bins(b)| * channels`.
#[derive(Debug, Clone)]
pub(crate) struct BandLayout {
    pub(crate) mapping: BandMapping,
    pub(crate) channels: usize,
}

impl BandLayout {
    pub(crate) fn width(&self, band: usize) -> usize {
        2 * self.mapping.band(band).len() * self.channels
    }
}

enum Op {
    Leaf,
    Linear { x: Var, w: Var, b: Option<Var> },
    RmsNorm { x: Var, gain: Option<Var> },
    Gelu(Var),
    Tanh(Var),
    Glu(Var),
    Add(Var, Var),
    Attention { q: Var, k: Var, v: Var, heads: usize, probs: Vec<f64> },
    SwapAxes01(Var),
    Stack(Vec<Var>),
    Select0 { x: Var, index: usize },
    MergeMasks { parts: Vec<Var>, layout: Arc<BandLayout> },
    ComplexMul { mask: Var, spec: Arc<Tensor> },
    Istft { x: Var, like: Arc<ComplexSpectrogram> },
    L1 { x: Var, target: Arc<Tensor> },
    WeightedSum(Vec<(Var, f64)>),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

pub struct Tape {
    nodes: Vec<Node>,
    grad_enabled: bool,
}

/// Gradients indexed by [`Var`]; `None` where no gradient flowed.
pub struct Gradients(Vec<Option<Tensor>>);

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.0[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.0[v.0].take()
    }
}

fn gelu(x: f64) -> (f64, f64) {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
    let u = C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let y = 0.5 * x * (1.0 + t);
    let dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * 0.044715 * x * x);
    (y, dy)
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// `c = a(m x k) * b(k x n)`, each operand optionally transposed in storage.
fn matmul(
    a: &[f64],
    a_dim: (usize, usize),
    trans_a: bool,
    b: &[f64],
    b_dim: (usize, usize),
    trans_b: bool,
) -> Vec<f64> {
    let av = ArrayView2::from_shape(a_dim, a).expect("matmul lhs shape");
    let bv = ArrayView2::from_shape(b_dim, b).expect("matmul rhs shape");
    let av = if trans_a { av.reversed_axes() } else { av };
    let bv = if trans_b { bv.reversed_axes() } else { bv };
    let (m, n) = (av.nrows(), bv.ncols());
    let mut out = vec![0.0; m * n];
    {
        let mut cv = ArrayViewMut2::from_shape((m, n), &mut out).expect("matmul out shape");
        general_mat_mul(1.0, &av, &bv, 0.0, &mut cv);
    }
    out
}

/// Copies head `h` of sequence rows into a dense `[len, head_dim]` block.
fn gather_head(src: &[f64], len: usize, d: usize, h: usize, dh: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(len * dh);
    for i in 0..len {
        out.extend_from_slice(&src[i * d + h * dh..i * d + (h + 1) * dh]);
    }
    out
}

fn scatter_head(dst: &mut [f64], block: &[f64], len: usize, d: usize, h: usize, dh: usize) {
    for i in 0..len {
        dst[i * d + h * dh..i * d + (h + 1) * dh].copy_from_slice(&block[i * dh..(i + 1) * dh]);
    }
}

fn softmax_rows(s: &mut [f64], len: usize) {
    for row in s.chunks_exact_mut(len) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
}

struct SeqAttention {
    out: Vec<f64>,
    probs: Vec<f64>,
}

fn attention_forward_seq(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    len: usize,
    d: usize,
    heads: usize,
    rope: &RopeTable,
    keep_probs: bool,
) -> SeqAttention {
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = vec![0.0; len * d];
    let mut probs = Vec::with_capacity(if keep_probs { heads * len * len } else { 0 });
    for h in 0..heads {
        let mut qh = gather_head(q, len, d, h, dh);
        let mut kh = gather_head(k, len, d, h, dh);
        let vh = gather_head(v, len, d, h, dh);
        for i in 0..len {
            rope.apply(&mut qh[i * dh..(i + 1) * dh], i, false);
            rope.apply(&mut kh[i * dh..(i + 1) * dh], i, false);
        }
        let mut s = matmul(&qh, (len, dh), false, &kh, (len, dh), true);
        s.iter_mut().for_each(|x| *x *= scale);
        softmax_rows(&mut s, len);
        let oh = matmul(&s, (len, len), false, &vh, (len, dh), false);
        scatter_head(&mut out, &oh, len, d, h, dh);
        if keep_probs {
            probs.extend_from_slice(&s);
        }
    }
    SeqAttention { out, probs }
}

#[allow(clippy::too_many_arguments)]
fn attention_backward_seq(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    probs: &[f64],
    dout: &[f64],
    len: usize,
    d: usize,
    heads: usize,
    rope: &RopeTable,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut dq = vec![0.0; len * d];
    let mut dk = vec![0.0; len * d];
    let mut dv = vec![0.0; len * d];
    for h in 0..heads {
        let p = &probs[h * len * len..(h + 1) * len * len];
        let mut qh = gather_head(q, len, d, h, dh);
        let mut kh = gather_head(k, len, d, h, dh);
        let vh = gather_head(v, len, d, h, dh);
        for i in 0..len {
            rope.apply(&mut qh[i * dh..(i + 1) * dh], i, false);
            rope.apply(&mut kh[i * dh..(i + 1) * dh], i, false);
        }
        let doh = gather_head(dout, len, d, h, dh);
        let dvh = matmul(p, (len, len), true, &doh, (len, dh), false);
        let dp = matmul(&doh, (len, dh), false, &vh, (len, dh), true);
        let mut ds = vec![0.0; len * len];
        for i in 0..len {
            let row = i * len..(i + 1) * len;
            let inner: f64 = dp[row.clone()].iter().zip(&p[row.clone()]).map(|(a, b)| a * b).sum();
            for j in row {
                ds[j] = p[j] * (dp[j] - inner) * scale;
            }
        }
        let mut dqh = matmul(&ds, (len, len), false, &kh, (len, dh), false);
        let mut dkh = matmul(&ds, (len, len), true, &qh, (len, dh), false);
        for i in 0..len {
            rope.apply(&mut dqh[i * dh..(i + 1) * dh], i, true);
            rope.apply(&mut dkh[i * dh..(i + 1) * dh], i, true);
        }
        scatter_head(&mut dq, &dqh, len, d, h, dh);
        scatter_head(&mut dk, &dkh, len, d, h, dh);
        scatter_head(&mut dv, &dvh, len, d, h, dh);
    }
    (dq, dk, dv)
}

fn swap01(x: &Tensor) -> Tensor {
    let (a, b, d) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let mut out = vec![0.0; x.len()];
    let src = x.data();
    for i in 0..a {
        for j in 0..b {
            out[(j * a + i) * d..(j * a + i + 1) * d]
                .copy_from_slice(&src[(i * b + j) * d..(i * b + j + 1) * d]);
        }
    }
    Tensor::new(vec![b, a, d], out)
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: true,
        }
    }

    /// A tape that records values only; backward is unavailable.
    pub fn inference() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = self.grad_enabled && inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn param(&mut self, t: Tensor) -> Var {
        let needs_grad = self.grad_enabled;
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// `x[.., k] * w[k, n] + b[n]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let (xv, wv) = (self.value(x), self.value(w));
        let (rows, k) = (xv.rows(), xv.last_dim());
        assert_eq!(wv.shape()[0], k, "linear: input width {k} vs weight {:?}", wv.shape());
        let n = wv.shape()[1];
        let mut y = matmul(xv.data(), (rows, k), false, wv.data(), (k, n), false);
        if let Some(b) = b {
            let bias = self.value(b).data();
            for row in y.chunks_exact_mut(n) {
                for (o, bb) in row.iter_mut().zip(bias) {
                    *o += bb;
                }
            }
        }
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push(Tensor::new(shape, y), Op::Linear { x, w, b }, &inputs)
    }

    /// Root-mean-square normalization over the last axis with optional gain.
    pub fn rms_norm(&mut self, x: Var, gain: Option<Var>) -> Var {
        let xv = self.value(x);
        let n = xv.last_dim();
        let g = gain.map(|g| self.value(g).data().to_vec());
        let mut y = xv.data().to_vec();
        for row in y.chunks_exact_mut(n) {
            let ms = row.iter().map(|v| v * v).sum::<f64>() / n as f64;
            let r = 1.0 / (ms + NORM_EPS).sqrt();
            for (i, v) in row.iter_mut().enumerate() {
                *v *= r * g.as_ref().map_or(1.0, |g| g[i]);
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), y);
        let mut inputs = vec![x];
        inputs.extend(gain);
        self.push(value, Op::RmsNorm { x, gain }, &inputs)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| gelu(v).0);
        self.push(value, Op::Gelu(x), &[x])
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let value = self.value(x).map(f64::tanh);
        self.push(value, Op::Tanh(x), &[x])
    }

    /// Gated linear unit: first half times sigmoid of the second half.
    pub fn glu(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let n = xv.last_dim() / 2;
        let mut y = Vec::with_capacity(xv.len() / 2);
        for row in xv.data().chunks_exact(2 * n) {
            y.extend((0..n).map(|i| row[i] * sigmoid(row[n + i])));
        }
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        self.push(Tensor::new(shape, y), Op::Glu(x), &[x])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut value = self.value(a).clone();
        value.add_assign(self.value(b));
        self.push(value, Op::Add(a, b), &[a, b])
    }

    /// Multi-head self-attention over `[N, L, D]` sequences with rotary
    /// positions `0..L` applied to queries and keys.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Var {
        let shape = self.value(q).shape().to_vec();
        let (n, len, d) = (shape[0], shape[1], shape[2]);
        let rope = RopeTable::new(len, d / heads);
        let keep = self.grad_enabled && (self.needs(q) || self.needs(k) || self.needs(v));
        let (qv, kv, vv) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let stride = len * d;
        let per_seq: Vec<SeqAttention> = (0..n)
            .into_par_iter()
            .map(|s| {
                let r = s * stride..(s + 1) * stride;
                attention_forward_seq(&qv[r.clone()], &kv[r.clone()], &vv[r], len, d, heads, &rope, keep)
            })
            .collect();
        let mut out = Vec::with_capacity(n * stride);
        let mut probs = Vec::with_capacity(if keep { n * heads * len * len } else { 0 });
        for s in per_seq {
            out.extend(s.out);
            probs.extend(s.probs);
        }
        self.push(
            Tensor::new(shape, out),
            Op::Attention { q, k, v, heads, probs },
            &[q, k, v],
        )
    }

    /// `[A, B, D] -> [B, A, D]`.
    pub fn swap_axes01(&mut self, x: Var) -> Var {
        let value = swap01(self.value(x));
        self.push(value, Op::SwapAxes01(x), &[x])
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(&mut self, parts: &[Var]) -> Var {
        let inner = self.value(parts[0]).shape().to_vec();
        let mut data = Vec::with_capacity(parts.len() * self.value(parts[0]).len());
        for &p in parts {
            assert_eq!(self.value(p).shape(), &inner[..], "stack: shape mismatch");
            data.extend_from_slice(self.value(p).data());
        }
        let mut shape = vec![parts.len()];
        shape.extend(inner);
        self.push(Tensor::new(shape, data), Op::Stack(parts.to_vec()), parts)
    }

    /// Index `index` along the leading axis.
    pub fn select0(&mut self, x: Var, index: usize) -> Var {
        let xv = self.value(x);
        let inner: usize = xv.shape()[1..].iter().product();
        let value = Tensor::new(
            xv.shape()[1..].to_vec(),
            xv.data()[index * inner..(index + 1) * inner].to_vec(),
        );
        self.push(value, Op::Select0 { x, index }, &[x])
    }

    /// Averages per-band `[T, width(b)]` masks into a `[2, C, F, T]` mask.
    pub(crate) fn merge_masks(&mut self, parts: &[Var], layout: Arc<BandLayout>) -> Var {
        let mapping = &layout.mapping;
        let c_count = layout.channels;
        let f_count = mapping.n_bins();
        let t_count = self.value(parts[0]).shape()[0];
        let coverage = mapping.coverage();
        let mut out = vec![0.0; 2 * c_count * f_count * t_count];
        for (b, &p) in parts.iter().enumerate() {
            let band = mapping.band(b);
            let nb = band.len();
            let src = self.value(p).data();
            let width = layout.width(b);
            for t in 0..t_count {
                let row = &src[t * width..(t + 1) * width];
                for c in 0..c_count {
                    for plane in 0..2 {
                        let off = (c * 2 + plane) * nb;
                        for (i, f) in band.bins().enumerate() {
                            out[((plane * c_count + c) * f_count + f) * t_count + t] += row[off + i];
                        }
                    }
                }
            }
        }
        for plane in 0..2 {
            for c in 0..c_count {
                for (f, &cnt) in coverage.iter().enumerate() {
                    let base = ((plane * c_count + c) * f_count + f) * t_count;
                    for v in &mut out[base..base + t_count] {
                        *v /= cnt as f64;
                    }
                }
            }
        }
        let value = Tensor::new(vec![2, c_count, f_count, t_count], out);
        self.push(value, Op::MergeMasks { parts: parts.to_vec(), layout }, parts)
    }

    /// Complex product of a `[2, C, F, T]` mask with a constant spectrogram.
    pub fn complex_mul(&mut self, mask: Var, spec: Arc<Tensor>) -> Var {
        let m = self.value(mask).data();
        let s = spec.data();
        let half = m.len() / 2;
        let mut out = vec![0.0; m.len()];
        for i in 0..half {
            let (mr, mi, sr, si) = (m[i], m[half + i], s[i], s[half + i]);
            out[i] = mr * sr - mi * si;
            out[half + i] = mr * si + mi * sr;
        }
        let value = Tensor::new(self.value(mask).shape().to_vec(), out);
        self.push(value, Op::ComplexMul { mask, spec }, &[mask])
    }

    /// Inverse STFT of a `[2, C, F, T]` spectrogram, shaped after `like`.
    pub fn istft(&mut self, x: Var, like: Arc<ComplexSpectrogram>) -> crate::Result<Var> {
        let spec = tensor_to_spec(self.value(x), &like)?;
        let wave = spectral::istft(&spec)?;
        let (c, len) = (wave.len(), wave[0].len());
        let value = Tensor::new(vec![c, len], wave.into_iter().flatten().collect());
        Ok(self.push(value, Op::Istft { x, like }, &[x]))
    }

    /// Mean absolute deviation from a constant target.
    pub fn l1(&mut self, x: Var, target: Arc<Tensor>) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.shape(), target.shape(), "l1: shape mismatch");
        let mean = xv
            .data()
            .iter()
            .zip(target.data())
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
            / xv.len() as f64;
        self.push(Tensor::scalar(mean), Op::L1 { x, target }, &[x])
    }

    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Var {
        let mut value = Tensor::zeros(self.value(terms[0].0).shape());
        for &(v, w) in terms {
            value.add_assign(&self.value(v).scale(w));
        }
        let inputs: Vec<Var> = terms.iter().map(|t| t.0).collect();
        self.push(value, Op::WeightedSum(terms.to_vec()), &inputs)
    }

    /// Gradients of the scalar `loss` with respect to every node.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert!(self.grad_enabled, "backward on an inference tape");
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::filled(self.value(loss).shape(), 1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            let contributions = self.node_backward(node, &g);
            grads[idx] = Some(g);
            for (v, t) in contributions {
                if !self.needs(v) {
                    continue;
                }
                match &mut grads[v.0] {
                    Some(acc) => acc.add_assign(&t),
                    slot => *slot = Some(t),
                }
            }
        }
        Gradients(grads)
    }

    fn node_backward(&self, node: &Node, g: &Tensor) -> Vec<(Var, Tensor)> {
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Linear { x, w, b } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (rows, k) = (xv.rows(), xv.last_dim());
                let n = wv.shape()[1];
                if self.needs(*x) {
                    let dx = matmul(g.data(), (rows, n), false, wv.data(), (k, n), true);
                    out.push((*x, Tensor::new(xv.shape().to_vec(), dx)));
                }
                if self.needs(*w) {
                    let dw = matmul(xv.data(), (rows, k), true, g.data(), (rows, n), false);
                    out.push((*w, Tensor::new(vec![k, n], dw)));
                }
                if let Some(b) = b.filter(|b| self.needs(*b)) {
                    let mut db = vec![0.0; n];
                    for row in g.data().chunks_exact(n) {
                        for (acc, v) in db.iter_mut().zip(row) {
                            *acc += v;
                        }
                    }
                    out.push((b, Tensor::new(vec![n], db)));
                }
            }
            Op::RmsNorm { x, gain } => {
                let xv = self.value(*x);
                let n = xv.last_dim();
                let gv = gain.map(|g| self.value(g).data());
                let mut dx = vec![0.0; xv.len()];
                let mut dgain = vec![0.0; n];
                for ((xr, gr), dxr) in xv
                    .data()
                    .chunks_exact(n)
                    .zip(g.data().chunks_exact(n))
                    .zip(dx.chunks_exact_mut(n))
                {
                    let ms = xr.iter().map(|v| v * v).sum::<f64>() / n as f64;
                    let r = 1.0 / (ms + NORM_EPS).sqrt();
                    let gain_at = |i: usize| gv.map_or(1.0, |gv| gv[i]);
                    let inner: f64 = (0..n).map(|i| gain_at(i) * gr[i] * xr[i]).sum();
                    for i in 0..n {
                        dxr[i] = r * gain_at(i) * gr[i] - r * r * r * xr[i] * inner / n as f64;
                        dgain[i] += gr[i] * xr[i] * r;
                    }
                }
                out.push((*x, Tensor::new(xv.shape().to_vec(), dx)));
                if let Some(gn) = gain {
                    out.push((*gn, Tensor::new(vec![n], dgain)));
                }
            }
            Op::Gelu(x) => {
                let xv = self.value(*x);
                let dx = xv.data().iter().zip(g.data()).map(|(&a, &d)| gelu(a).1 * d).collect();
                out.push((*x, Tensor::new(xv.shape().to_vec(), dx)));
            }
            Op::Tanh(x) => {
                let dx = node
                    .value
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&y, &d)| (1.0 - y * y) * d)
                    .collect();
                out.push((*x, Tensor::new(node.value.shape().to_vec(), dx)));
            }
            Op::Glu(x) => {
                let xv = self.value(*x);
                let n = xv.last_dim() / 2;
                let mut dx = vec![0.0; xv.len()];
                for ((row, grow), drow) in xv
                    .data()
                    .chunks_exact(2 * n)
                    .zip(g.data().chunks_exact(n))
                    .zip(dx.chunks_exact_mut(2 * n))
                {
                    for i in 0..n {
                        let s = sigmoid(row[n + i]);
                        drow[i] = grow[i] * s;
                        drow[n + i] = grow[i] * row[i] * s * (1.0 - s);
                    }
                }
                out.push((*x, Tensor::new(xv.shape().to_vec(), dx)));
            }
            Op::Add(a, b) => {
                out.push((*a, g.clone()));
                out.push((*b, g.clone()));
            }
            Op::Attention { q, k, v, heads, probs } => {
                let shape = self.value(*q).shape().to_vec();
                let (n, len, d) = (shape[0], shape[1], shape[2]);
                let rope = RopeTable::new(len, d / heads);
                let stride = len * d;
                let pstride = heads * len * len;
                let (qv, kv, vv) = (self.value(*q).data(), self.value(*k).data(), self.value(*v).data());
                let per_seq: Vec<_> = (0..n)
                    .into_par_iter()
                    .map(|s| {
                        let r = s * stride..(s + 1) * stride;
                        attention_backward_seq(
                            &qv[r.clone()],
                            &kv[r.clone()],
                            &vv[r.clone()],
                            &probs[s * pstride..(s + 1) * pstride],
                            &g.data()[r],
                            len,
                            d,
                            *heads,
                            &rope,
                        )
                    })
                    .collect();
                let mut dq = Vec::with_capacity(n * stride);
                let mut dk = Vec::with_capacity(n * stride);
                let mut dv = Vec::with_capacity(n * stride);
                for (a, b, c) in per_seq {
                    dq.extend(a);
                    dk.extend(b);
                    dv.extend(c);
                }
                out.push((*q, Tensor::new(shape.clone(), dq)));
                out.push((*k, Tensor::new(shape.clone(), dk)));
                out.push((*v, Tensor::new(shape, dv)));
            }
            Op::SwapAxes01(x) => out.push((*x, swap01(g))),
            Op::Stack(parts) => {
                let inner = self.value(parts[0]);
                for (i, p) in parts.iter().enumerate() {
                    let chunk = g.data()[i * inner.len()..(i + 1) * inner.len()].to_vec();
                    out.push((*p, Tensor::new(inner.shape().to_vec(), chunk)));
                }
            }
            Op::Select0 { x, index } => {
                let mut dx = Tensor::zeros(self.value(*x).shape());
                let inner = g.len();
                dx.data_mut()[index * inner..(index + 1) * inner].copy_from_slice(g.data());
                out.push((*x, dx));
            }
            Op::MergeMasks { parts, layout } => {
                let mapping = &layout.mapping;
                let c_count = layout.channels;
                let f_count = mapping.n_bins();
                let t_count = g.shape()[3];
                let coverage = mapping.coverage();
                for (b, &p) in parts.iter().enumerate() {
                    if !self.needs(p) {
                        continue;
                    }
                    let band = mapping.band(b);
                    let nb = band.len();
                    let width = layout.width(b);
                    let mut d = vec![0.0; t_count * width];
                    for t in 0..t_count {
                        for c in 0..c_count {
                            for plane in 0..2 {
                                let off = (c * 2 + plane) * nb;
                                for (i, f) in band.bins().enumerate() {
                                    let src = ((plane * c_count + c) * f_count + f) * t_count + t;
                                    d[t * width + off + i] = g.data()[src] / coverage[f] as f64;
                                }
                            }
                        }
                    }
                    out.push((p, Tensor::new(vec![t_count, width], d)));
                }
            }
            Op::ComplexMul { mask, spec } => {
                let s = spec.data();
                let half = s.len() / 2;
                let gd = g.data();
                let mut dm = vec![0.0; s.len()];
                for i in 0..half {
                    let (sr, si, gr, gi) = (s[i], s[half + i], gd[i], gd[half + i]);
                    dm[i] = gr * sr + gi * si;
                    dm[half + i] = -gr * si + gi * sr;
                }
                out.push((*mask, Tensor::new(g.shape().to_vec(), dm)));
            }
            Op::Istft { x, like } => {
                let len = g.shape()[1];
                let grad: Vec<Vec<f64>> = g.data().chunks_exact(len).map(<[f64]>::to_vec).collect();
                let (gr, gi) = spectral::istft_adjoint(&grad, like)
                    .expect("istft adjoint shapes follow the forward pass");
                let data: Vec<f64> = gr.iter().chain(gi.iter()).copied().collect();
                out.push((*x, Tensor::new(self.value(*x).shape().to_vec(), data)));
            }
            Op::L1 { x, target } => {
                let xv = self.value(*x);
                let scale = g.item() / xv.len() as f64;
                let dx = xv
                    .data()
                    .iter()
                    .zip(target.data())
                    .map(|(a, b)| {
                        let d = a - b;
                        if d > 0.0 {
                            scale
                        } else if d < 0.0 {
                            -scale
                        } else {
                            0.0
                        }
                    })
                    .collect();
                out.push((*x, Tensor::new(xv.shape().to_vec(), dx)));
            }
            Op::WeightedSum(terms) => {
                for &(v, w) in terms {
                    out.push((v, g.scale(w)));
                }
            }
        }
        out
    }
}

/// Packs a spectrogram into a `[2, C, F, T]` tensor (real plane first).
pub fn spec_to_tensor(spec: &ComplexSpectrogram) -> Tensor {
    let (c, f, t) = spec.real().dim();
    let data = spec.real().iter().chain(spec.imag().iter()).copied().collect();
    Tensor::new(vec![2, c, f, t], data)
}

pub fn tensor_to_spec(x: &Tensor, like: &ComplexSpectrogram) -> crate::Result<ComplexSpectrogram> {
    let (c, f, t) = like.real().dim();
    if x.shape() != [2, c, f, t] {
        return Err(crate::Error::ShapeMismatch(format!(
            "tensor {:?} vs spectrogram ({c}, {f}, {t})",
            x.shape()
        )));
    }
    let half = c * f * t;
    let real = ndarray::Array3::from_shape_vec((c, f, t), x.data()[..half].to_vec())
        .expect("shape checked");
    let imag = ndarray::Array3::from_shape_vec((c, f, t), x.data()[half..].to_vec())
        .expect("shape checked");
    ComplexSpectrogram::from_planes(real, imag, *like.config(), like.signal_len())
}
