//! Define-by-run reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s together with
//! the forward value. [`Graph::backward`] walks the tape in reverse and
//! accumulates gradients for every node that depends on a variable leaf.
//! Shape errors in this module are programming errors and panic; user-facing
//! validation happens in the layers above.

use std::rc::Rc;

use super::tensor::{gemm, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    MulBias(Var, Var),
    Scale(Var, f64),
    MatMul(Var, Var),
    Bmm { a: Var, b: Var, trans_b: bool },
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Sum(Var),
    Mean(Var),
    LayerNorm { x: Var, inv_std: Vec<f64> },
    Softmax(Var),
    LogSumExp { x: Var, mask: Option<Rc<[bool]>> },
    Gather { x: Var, idx: Vec<usize> },
    NormalizeRows { x: Var, norms: Vec<f64> },
    Reshape(Var),
    Permute { x: Var, perm: Vec<usize> },
    Concat { parts: Vec<Var>, axis: usize },
    Narrow { x: Var, axis: usize, start: usize },
    MeanAxis { x: Var, axis: usize },
    Expand { x: Var, axis: usize },
    Conv1d { x: Var, w: Var, stride: usize, pad_left: usize },
    MaxPoolTime { x: Var, argmax: Vec<usize> },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Tape of recorded operations.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. `v`, or `None` if `v` does not influence it.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

/// Splits `shape` around `axis` into `(outer, len, inner)`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn permute_data(data: &[f64], shape: &[usize], perm: &[usize]) -> (Vec<usize>, Vec<f64>) {
    let rank = shape.len();
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0usize; rank];
    for _ in 0..data.len() {
        let off: usize = idx.iter().zip(&strides).map(|(i, s)| i * s).sum();
        out.push(data[off]);
        for d in (0..rank).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    (out_shape, out)
}

/// Same-padding geometry for a strided 1D convolution: `(out_len, pad_left)`.
pub fn same_padding(len: usize, kernel: usize, stride: usize) -> (usize, usize) {
    let out = len.div_ceil(stride);
    let total = ((out.max(1) - 1) * stride + kernel).saturating_sub(len);
    (out, total / 2)
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A leaf that receives no gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A leaf whose gradient is tracked.
    pub fn variable(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let value = self.value(x).map(f);
        let rg = self.rg(x);
        self.push(value, op, rg)
    }

    fn zip(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape(), tb.shape(), "elementwise shape mismatch");
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(ta.shape(), data);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    fn broadcast_check(&self, x: Var, b: Var) -> usize {
        let (sx, sb) = (self.shape(x), self.shape(b));
        assert!(
            sb.len() <= sx.len() && sx[sx.len() - sb.len()..] == *sb,
            "cannot broadcast {sb:?} over {sx:?}"
        );
        self.value(b).numel()
    }

    /// `x + b` with `b` broadcast over the leading axes of `x`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Var {
        let n = self.broadcast_check(x, b);
        let bias = self.value(b).data();
        let mut value = self.value(x).clone();
        for chunk in value.data_mut().chunks_mut(n) {
            for (v, bb) in chunk.iter_mut().zip(bias) {
                *v += bb;
            }
        }
        let rg = self.rg(x) || self.rg(b);
        self.push(value, Op::AddBias(x, b), rg)
    }

    /// `x * s` with `s` broadcast over the leading axes of `x`.
    pub fn mul_bias(&mut self, x: Var, s: Var) -> Var {
        let n = self.broadcast_check(x, s);
        let scale = self.value(s).data();
        let mut value = self.value(x).clone();
        for chunk in value.data_mut().chunks_mut(n) {
            for (v, ss) in chunk.iter_mut().zip(scale) {
                *v *= ss;
            }
        }
        let rg = self.rg(x) || self.rg(s);
        self.push(value, Op::MulBias(x, s), rg)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, |v| v * c, Op::Scale(x, c))
    }

    /// `x · w` where `x` is `[..., k]` and `w` is `[k, n]`.
    pub fn matmul(&mut self, x: Var, w: Var) -> Var {
        let (tx, tw) = (self.value(x), self.value(w));
        assert_eq!(tw.rank(), 2, "matmul weight must be a matrix");
        let k = tw.dim(0);
        let n = tw.dim(1);
        assert_eq!(*tx.shape().last().unwrap(), k, "matmul inner dimension mismatch");
        let m = tx.numel() / k;
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, tx.data(), false, tw.data(), false, &mut out, false);
        let mut shape = tx.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        let rg = self.rg(x) || self.rg(w);
        self.push(Tensor::new(&shape, out), Op::MatMul(x, w), rg)
    }

    /// Batched product of `a: [B, m, k]` with `b: [B, k, n]`, or with
    /// `b: [B, n, k]` transposed when `trans_b` is set.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert!(ta.rank() == 3 && tb.rank() == 3 && ta.dim(0) == tb.dim(0));
        let (bt, m, k) = (ta.dim(0), ta.dim(1), ta.dim(2));
        let n = if trans_b { tb.dim(1) } else { tb.dim(2) };
        let kb = if trans_b { tb.dim(2) } else { tb.dim(1) };
        assert_eq!(k, kb, "bmm inner dimension mismatch");
        let mut out = vec![0.0; bt * m * n];
        for i in 0..bt {
            gemm(
                m,
                k,
                n,
                &ta.data()[i * m * k..(i + 1) * m * k],
                false,
                &tb.data()[i * k * n..(i + 1) * k * n],
                trans_b,
                &mut out[i * m * n..(i + 1) * m * n],
                false,
            );
        }
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::new(&[bt, m, n], out), Op::Bmm { a, b, trans_b }, rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, f64::tanh, Op::Tanh(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, |v| 1.0 / (1.0 + (-v).exp()), Op::Sigmoid(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, f64::exp, Op::Exp(x))
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, f64::ln, Op::Log(x))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.sum() / t.numel() as f64;
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Mean(x), rg)
    }

    /// Normalizes the last axis to zero mean and unit variance (no affine part).
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Var {
        let t = self.value(x);
        let d = *t.shape().last().unwrap();
        let mut out = t.clone();
        let mut inv_std = Vec::with_capacity(t.numel() / d);
        for row in out.data_mut().chunks_mut(d) {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * inv;
            }
            inv_std.push(inv);
        }
        let rg = self.rg(x);
        self.push(out, Op::LayerNorm { x, inv_std }, rg)
    }

    /// Softmax over the last axis. Entries equal to `-inf` get probability 0.
    pub fn softmax(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let d = *t.shape().last().unwrap();
        let mut out = t.clone();
        for row in out.data_mut().chunks_mut(d) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                row.fill(0.0);
                continue;
            }
            let mut z = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                z += *v;
            }
            for v in row.iter_mut() {
                *v /= z;
            }
        }
        let rg = self.rg(x);
        self.push(out, Op::Softmax(x), rg)
    }

    /// `log Σ exp` over the last axis, skipping entries whose mask bit is
    /// false. The result drops the last axis; an all-masked row yields `-inf`.
    pub fn logsumexp(&mut self, x: Var, mask: Option<Rc<[bool]>>) -> Var {
        let t = self.value(x);
        let d = *t.shape().last().unwrap();
        if let Some(m) = &mask {
            assert_eq!(m.len(), t.numel(), "mask size mismatch");
        }
        let rows = t.numel() / d;
        let mut out = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &t.data()[r * d..(r + 1) * d];
            let keep = |j: usize| mask.as_ref().is_none_or(|m| m[r * d + j]);
            let max = (0..d)
                .filter(|&j| keep(j))
                .map(|j| row[j])
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                out.push(f64::NEG_INFINITY);
                continue;
            }
            let s: f64 = (0..d).filter(|&j| keep(j)).map(|j| (row[j] - max).exp()).sum();
            out.push(max + s.ln());
        }
        let shape = &t.shape()[..t.rank() - 1];
        let value = Tensor::new(shape, out);
        let rg = self.rg(x);
        self.push(value, Op::LogSumExp { x, mask }, rg)
    }

    /// Picks `x[r, idx[r]]` from a `[R, C]` matrix.
    pub fn gather(&mut self, x: Var, idx: Vec<usize>) -> Var {
        let t = self.value(x);
        assert_eq!(t.rank(), 2);
        let c = t.dim(1);
        assert_eq!(idx.len(), t.dim(0));
        let out: Vec<f64> = idx
            .iter()
            .enumerate()
            .map(|(r, &j)| {
                assert!(j < c, "gather index out of range");
                t.data()[r * c + j]
            })
            .collect();
        let value = Tensor::new(&[idx.len()], out);
        let rg = self.rg(x);
        self.push(value, Op::Gather { x, idx }, rg)
    }

    /// Scales every vector along the last axis to unit Euclidean norm.
    pub fn normalize_rows(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let d = *t.shape().last().unwrap();
        let mut out = t.clone();
        let mut norms = Vec::with_capacity(t.numel() / d);
        for row in out.data_mut().chunks_mut(d) {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            for v in row.iter_mut() {
                *v /= n;
            }
            norms.push(n);
        }
        let rg = self.rg(x);
        self.push(out, Op::NormalizeRows { x, norms }, rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let value = self.value(x).clone().reshape(shape);
        let rg = self.rg(x);
        self.push(value, Op::Reshape(x), rg)
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Var {
        let t = self.value(x);
        assert_eq!(perm.len(), t.rank());
        let (shape, data) = permute_data(t.data(), t.shape(), perm);
        let rg = self.rg(x);
        self.push(
            Tensor::new(&shape, data),
            Op::Permute {
                x,
                perm: perm.to_vec(),
            },
            rg,
        )
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Var {
        assert!(!parts.is_empty());
        let first = self.shape(parts[0]).to_vec();
        let (outer, _, inner) = split_axis(&first, axis);
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            assert_eq!(s.len(), first.len());
            assert!(
                s[..axis] == first[..axis] && s[axis + 1..] == first[axis + 1..],
                "concat shape mismatch"
            );
            total += s[axis];
        }
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let t = self.value(p);
                let len = t.dim(axis) * inner;
                out.extend_from_slice(&t.data()[o * len..(o + 1) * len]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(
            Tensor::new(&shape, out),
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            rg,
        )
    }

    /// Slice `start..start + len` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Var {
        let t = self.value(x);
        let (outer, n, inner) = split_axis(t.shape(), axis);
        assert!(start + len <= n, "narrow out of range");
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * n * inner + start * inner;
            out.extend_from_slice(&t.data()[base..base + len * inner]);
        }
        let mut shape = t.shape().to_vec();
        shape[axis] = len;
        let rg = self.rg(x);
        self.push(Tensor::new(&shape, out), Op::Narrow { x, axis, start }, rg)
    }

    /// Index `i` along `axis`, removing that axis.
    pub fn select(&mut self, x: Var, axis: usize, i: usize) -> Var {
        let v = self.narrow(x, axis, i, 1);
        let mut shape = self.shape(x).to_vec();
        shape.remove(axis);
        self.reshape(v, &shape)
    }

    /// Mean over `axis`, removing it.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Var {
        let t = self.value(x);
        let (outer, n, inner) = split_axis(t.shape(), axis);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for i in 0..n {
                let base = (o * n + i) * inner;
                for j in 0..inner {
                    out[o * inner + j] += t.data()[base + j];
                }
            }
        }
        for v in &mut out {
            *v /= n as f64;
        }
        let mut shape = t.shape().to_vec();
        shape.remove(axis);
        let rg = self.rg(x);
        self.push(Tensor::new(&shape, out), Op::MeanAxis { x, axis }, rg)
    }

    /// Repeats a size-1 `axis` `n` times.
    pub fn expand(&mut self, x: Var, axis: usize, n: usize) -> Var {
        let t = self.value(x);
        let (outer, one, inner) = split_axis(t.shape(), axis);
        assert_eq!(one, 1, "expand needs a unit axis");
        let mut out = Vec::with_capacity(outer * n * inner);
        for o in 0..outer {
            let src = &t.data()[o * inner..(o + 1) * inner];
            for _ in 0..n {
                out.extend_from_slice(src);
            }
        }
        let mut shape = t.shape().to_vec();
        shape[axis] = n;
        let rg = self.rg(x);
        self.push(Tensor::new(&shape, out), Op::Expand { x, axis }, rg)
    }

    /// Same-padded 1D convolution of channels-last `x: [B, L, Cin]` with
    /// `w: [K, Cin, Cout]`, giving `[B, ceil(L / stride), Cout]`.
    pub fn conv1d(&mut self, x: Var, w: Var, stride: usize) -> Var {
        let (tx, tw) = (self.value(x), self.value(w));
        assert_eq!(tx.rank(), 3);
        assert_eq!(tw.rank(), 3);
        let (b, l, cin) = (tx.dim(0), tx.dim(1), tx.dim(2));
        let (k, wcin, cout) = (tw.dim(0), tw.dim(1), tw.dim(2));
        assert_eq!(cin, wcin, "conv1d channel mismatch");
        let (lout, pad_left) = same_padding(l, k, stride);
        let cols = im2col(tx.data(), b, l, cin, k, stride, pad_left, lout);
        let mut out = vec![0.0; b * lout * cout];
        gemm(b * lout, k * cin, cout, &cols, false, tw.data(), false, &mut out, false);
        let rg = self.rg(x) || self.rg(w);
        self.push(
            Tensor::new(&[b, lout, cout], out),
            Op::Conv1d {
                x,
                w,
                stride,
                pad_left,
            },
            rg,
        )
    }

    /// Max pooling over axis 1 of `[B, T, C]` with window and stride 2. A
    /// trailing odd step forms its own window.
    pub fn max_pool_time(&mut self, x: Var) -> Var {
        let t = self.value(x);
        assert_eq!(t.rank(), 3);
        let (b, len, c) = (t.dim(0), t.dim(1), t.dim(2));
        let out_len = len.div_ceil(2);
        let mut out = Vec::with_capacity(b * out_len * c);
        let mut argmax = Vec::with_capacity(b * out_len * c);
        for bi in 0..b {
            for o in 0..out_len {
                for ch in 0..c {
                    let i0 = (bi * len + 2 * o) * c + ch;
                    let mut best = i0;
                    if 2 * o + 1 < len {
                        let i1 = i0 + c;
                        if t.data()[i1] > t.data()[i0] {
                            best = i1;
                        }
                    }
                    out.push(t.data()[best]);
                    argmax.push(best);
                }
            }
        }
        let rg = self.rg(x);
        self.push(
            Tensor::new(&[b, out_len, c], out),
            Op::MaxPoolTime { x, argmax },
            rg,
        )
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).numel(), 1, "backward needs a scalar");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::new(self.shape(loss), vec![1.0]));
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.backprop(id, &g, &mut grads);
        }
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn accumulate_with(&self, grads: &mut [Option<Tensor>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.rg(v) {
            return;
        }
        let slot = &mut grads[v.0];
        if slot.is_none() {
            *slot = Some(Tensor::zeros(self.shape(v)));
        }
        f(slot.as_mut().unwrap().data_mut());
    }

    fn backprop(&self, id: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[id];
        let y = &node.value;
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                self.accumulate_with(grads, *a, |acc| {
                    for ((o, gg), bb) in acc.iter_mut().zip(gd).zip(vb.data()) {
                        *o += gg * bb;
                    }
                });
                self.accumulate_with(grads, *b, |acc| {
                    for ((o, gg), aa) in acc.iter_mut().zip(gd).zip(va.data()) {
                        *o += gg * aa;
                    }
                });
            }
            Op::AddBias(x, b) => {
                self.accumulate(grads, *x, g.clone());
                let n = self.value(*b).numel();
                self.accumulate_with(grads, *b, |acc| {
                    for chunk in gd.chunks(n) {
                        for (o, gg) in acc.iter_mut().zip(chunk) {
                            *o += gg;
                        }
                    }
                });
            }
            Op::MulBias(x, s) => {
                let vs = self.value(*s).data();
                let vx = self.value(*x).data();
                let n = vs.len();
                self.accumulate_with(grads, *x, |acc| {
                    for (i, o) in acc.iter_mut().enumerate() {
                        *o += gd[i] * vs[i % n];
                    }
                });
                self.accumulate_with(grads, *s, |acc| {
                    for (i, (gg, xx)) in gd.iter().zip(vx).enumerate() {
                        acc[i % n] += gg * xx;
                    }
                });
            }
            Op::Scale(x, c) => self.accumulate(grads, *x, g.map(|v| v * c)),
            Op::MatMul(x, w) => {
                let (tx, tw) = (self.value(*x), self.value(*w));
                let (k, n) = (tw.dim(0), tw.dim(1));
                let m = tx.numel() / k;
                self.accumulate_with(grads, *x, |acc| {
                    gemm(m, n, k, gd, false, tw.data(), true, acc, true);
                });
                self.accumulate_with(grads, *w, |acc| {
                    gemm(k, m, n, tx.data(), true, gd, false, acc, true);
                });
            }
            Op::Bmm { a, b, trans_b } => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (bt, m, k) = (ta.dim(0), ta.dim(1), ta.dim(2));
                let n = y.dim(2);
                let trans_b = *trans_b;
                self.accumulate_with(grads, *a, |acc| {
                    for i in 0..bt {
                        let gi = &gd[i * m * n..(i + 1) * m * n];
                        let bi = &tb.data()[i * k * n..(i + 1) * k * n];
                        // dA = G · op(B)^T
                        gemm(m, n, k, gi, false, bi, !trans_b, &mut acc[i * m * k..(i + 1) * m * k], true);
                    }
                });
                self.accumulate_with(grads, *b, |acc| {
                    for i in 0..bt {
                        let gi = &gd[i * m * n..(i + 1) * m * n];
                        let ai = &ta.data()[i * m * k..(i + 1) * m * k];
                        let out = &mut acc[i * k * n..(i + 1) * k * n];
                        if trans_b {
                            gemm(n, m, k, gi, true, ai, false, out, true);
                        } else {
                            gemm(k, m, n, ai, true, gi, false, out, true);
                        }
                    }
                });
            }
            Op::Relu(x) => {
                let vx = self.value(*x).data();
                self.accumulate_with(grads, *x, |acc| {
                    for ((o, gg), xx) in acc.iter_mut().zip(gd).zip(vx) {
                        if *xx > 0.0 {
                            *o += gg;
                        }
                    }
                });
            }
            Op::Tanh(x) => self.accumulate_with(grads, *x, |acc| {
                for ((o, gg), yy) in acc.iter_mut().zip(gd).zip(y.data()) {
                    *o += gg * (1.0 - yy * yy);
                }
            }),
            Op::Sigmoid(x) => self.accumulate_with(grads, *x, |acc| {
                for ((o, gg), yy) in acc.iter_mut().zip(gd).zip(y.data()) {
                    *o += gg * yy * (1.0 - yy);
                }
            }),
            Op::Exp(x) => self.accumulate_with(grads, *x, |acc| {
                for ((o, gg), yy) in acc.iter_mut().zip(gd).zip(y.data()) {
                    *o += gg * yy;
                }
            }),
            Op::Log(x) => {
                let vx = self.value(*x).data();
                self.accumulate_with(grads, *x, |acc| {
                    for ((o, gg), xx) in acc.iter_mut().zip(gd).zip(vx) {
                        *o += gg / xx;
                    }
                });
            }
            Op::Sum(x) => {
                let s = gd[0];
                self.accumulate_with(grads, *x, |acc| acc.iter_mut().for_each(|o| *o += s));
            }
            Op::Mean(x) => {
                let s = gd[0] / self.value(*x).numel() as f64;
                self.accumulate_with(grads, *x, |acc| acc.iter_mut().for_each(|o| *o += s));
            }
            Op::LayerNorm { x, inv_std } => {
                let d = *y.shape().last().unwrap();
                self.accumulate_with(grads, *x, |acc| {
                    for (r, inv) in inv_std.iter().enumerate() {
                        let gr = &gd[r * d..(r + 1) * d];
                        let yr = &y.data()[r * d..(r + 1) * d];
                        let mg = gr.iter().sum::<f64>() / d as f64;
                        let mgy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        for j in 0..d {
                            acc[r * d + j] += inv * (gr[j] - mg - yr[j] * mgy);
                        }
                    }
                });
            }
            Op::Softmax(x) => {
                let d = *y.shape().last().unwrap();
                self.accumulate_with(grads, *x, |acc| {
                    for r in 0..y.numel() / d {
                        let gr = &gd[r * d..(r + 1) * d];
                        let yr = &y.data()[r * d..(r + 1) * d];
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for j in 0..d {
                            acc[r * d + j] += yr[j] * (gr[j] - dot);
                        }
                    }
                });
            }
            Op::LogSumExp { x, mask } => {
                let tx = self.value(*x);
                let d = *tx.shape().last().unwrap();
                self.accumulate_with(grads, *x, |acc| {
                    for (r, (&lse, &gg)) in y.data().iter().zip(gd).enumerate() {
                        if lse == f64::NEG_INFINITY {
                            continue;
                        }
                        for j in 0..d {
                            let i = r * d + j;
                            if mask.as_ref().is_none_or(|m| m[i]) {
                                acc[i] += gg * (tx.data()[i] - lse).exp();
                            }
                        }
                    }
                });
            }
            Op::Gather { x, idx } => {
                let c = self.value(*x).dim(1);
                self.accumulate_with(grads, *x, |acc| {
                    for (r, &j) in idx.iter().enumerate() {
                        acc[r * c + j] += gd[r];
                    }
                });
            }
            Op::NormalizeRows { x, norms } => {
                let d = *y.shape().last().unwrap();
                self.accumulate_with(grads, *x, |acc| {
                    for (r, n) in norms.iter().enumerate() {
                        let gr = &gd[r * d..(r + 1) * d];
                        let yr = &y.data()[r * d..(r + 1) * d];
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for j in 0..d {
                            acc[r * d + j] += (gr[j] - yr[j] * dot) / n;
                        }
                    }
                });
            }
            Op::Reshape(x) => {
                let shape = self.shape(*x).to_vec();
                self.accumulate(grads, *x, g.clone().reshape(&shape));
            }
            Op::Permute { x, perm } => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                let (shape, data) = permute_data(gd, g.shape(), &inv);
                self.accumulate(grads, *x, Tensor::new(&shape, data));
            }
            Op::Concat { parts, axis } => {
                let (outer, total, inner) = split_axis(y.shape(), *axis);
                let mut offset = 0;
                for &p in parts {
                    let len = self.shape(p)[*axis];
                    self.accumulate_with(grads, p, |acc| {
                        for o in 0..outer {
                            let src = (o * total + offset) * inner;
                            let dst = o * len * inner;
                            for j in 0..len * inner {
                                acc[dst + j] += gd[src + j];
                            }
                        }
                    });
                    offset += len;
                }
            }
            Op::Narrow { x, axis, start } => {
                let (outer, n, inner) = split_axis(self.shape(*x), *axis);
                let len = y.shape()[*axis];
                self.accumulate_with(grads, *x, |acc| {
                    for o in 0..outer {
                        let dst = o * n * inner + start * inner;
                        for j in 0..len * inner {
                            acc[dst + j] += gd[o * len * inner + j];
                        }
                    }
                });
            }
            Op::MeanAxis { x, axis } => {
                let (outer, n, inner) = split_axis(self.shape(*x), *axis);
                let scale = 1.0 / n as f64;
                self.accumulate_with(grads, *x, |acc| {
                    for o in 0..outer {
                        for i in 0..n {
                            for j in 0..inner {
                                acc[(o * n + i) * inner + j] += gd[o * inner + j] * scale;
                            }
                        }
                    }
                });
            }
            Op::Expand { x, axis } => {
                let (outer, n, inner) = split_axis(y.shape(), *axis);
                self.accumulate_with(grads, *x, |acc| {
                    for o in 0..outer {
                        for i in 0..n {
                            for j in 0..inner {
                                acc[o * inner + j] += gd[(o * n + i) * inner + j];
                            }
                        }
                    }
                });
            }
            Op::Conv1d {
                x,
                w,
                stride,
                pad_left,
            } => {
                let (tx, tw) = (self.value(*x), self.value(*w));
                let (b, l, cin) = (tx.dim(0), tx.dim(1), tx.dim(2));
                let (k, cout) = (tw.dim(0), tw.dim(2));
                let lout = y.dim(1);
                if self.rg(*w) {
                    let cols = im2col(tx.data(), b, l, cin, k, *stride, *pad_left, lout);
                    self.accumulate_with(grads, *w, |acc| {
                        gemm(k * cin, b * lout, cout, &cols, true, gd, false, acc, true);
                    });
                }
                if self.rg(*x) {
                    let mut dcols = vec![0.0; b * lout * k * cin];
                    gemm(b * lout, cout, k * cin, gd, false, tw.data(), true, &mut dcols, false);
                    self.accumulate_with(grads, *x, |acc| {
                        col2im(&dcols, acc, b, l, cin, k, *stride, *pad_left, lout);
                    });
                }
            }
            Op::MaxPoolTime { x, argmax } => {
                self.accumulate_with(grads, *x, |acc| {
                    for (gg, &i) in gd.iter().zip(argmax) {
                        acc[i] += gg;
                    }
                });
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn im2col(
    x: &[f64],
    b: usize,
    l: usize,
    cin: usize,
    k: usize,
    stride: usize,
    pad_left: usize,
    lout: usize,
) -> Vec<f64> {
    let width = k * cin;
    let mut cols = vec![0.0; b * lout * width];
    for bi in 0..b {
        for t in 0..lout {
            let row = &mut cols[(bi * lout + t) * width..(bi * lout + t + 1) * width];
            for kk in 0..k {
                let pos = (t * stride + kk) as isize - pad_left as isize;
                if pos < 0 || pos as usize >= l {
                    continue;
                }
                let src = (bi * l + pos as usize) * cin;
                row[kk * cin..(kk + 1) * cin].copy_from_slice(&x[src..src + cin]);
            }
        }
    }
    cols
}

#[allow(clippy::too_many_arguments)]
fn col2im(
    cols: &[f64],
    x: &mut [f64],
    b: usize,
    l: usize,
    cin: usize,
    k: usize,
    stride: usize,
    pad_left: usize,
    lout: usize,
) {
    let width = k * cin;
    for bi in 0..b {
        for t in 0..lout {
            let row = &cols[(bi * lout + t) * width..(bi * lout + t + 1) * width];
            for kk in 0..k {
                let pos = (t * stride + kk) as isize - pad_left as isize;
                if pos < 0 || pos as usize >= l {
                    continue;
                }
                let dst = (bi * l + pos as usize) * cin;
                for c in 0..cin {
                    x[dst + c] += row[kk * cin + c];
                }
            }
        }
    }
}
