//! Dynamic tape: operations are recorded as they execute and replayed in
//! reverse to accumulate exact gradients.
//!
//! The tape is single-threaded by design; distinct tapes never share state.

use crate::error::{CoreError, Result};

use super::tensor::Tensor;

/// Handle to a node on a [`Tape`]. Only valid for the tape that created it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub(crate) usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    /// `[m,k] x [k,n] -> [m,n]`
    MatMul { lhs: NodeId, rhs: NodeId },
    /// `y = x W^T (+ b)` with `x: [B,in]`, `w: [out,in]`, `b: [out]`
    Linear {
        input: NodeId,
        weight: NodeId,
        bias: Option<NodeId>,
    },
    Add { lhs: NodeId, rhs: NodeId },
    Sub { lhs: NodeId, rhs: NodeId },
    Mul { lhs: NodeId, rhs: NodeId },
    Div { lhs: NodeId, rhs: NodeId },
    /// `y = scale * x + shift`; only the scale matters for the gradient
    Affine { input: NodeId, scale: f64 },
    Sigmoid { input: NodeId },
    Tanh { input: NodeId },
    Exp { input: NodeId },
    Log { input: NodeId },
    Clamp { input: NodeId, lo: f64, hi: f64 },
    /// Softmax over the last axis
    Softmax { input: NodeId },
    /// Log-softmax over the last axis
    LogSoftmax { input: NodeId },
    /// Log-sum-exp over the last axis (the axis is dropped)
    LogSumExp { input: NodeId },
    Concat { parts: Vec<NodeId>, axis: usize },
    Slice {
        input: NodeId,
        axis: usize,
        start: usize,
        len: usize,
    },
    /// Repeat a `[1, ...]` tensor along its leading axis
    BroadcastRows { input: NodeId },
    Reshape { input: NodeId },
    Sum { input: NodeId },
    SumAxis { input: NodeId, axis: usize },
    Mean { input: NodeId },
}

#[derive(Debug)]
struct Node {
    values: Vec<f64>,
    shape: Vec<usize>,
    op: Op,
    requires_grad: bool,
}

/// Records a forward computation over dense `f64` tensors.
///
/// All shape errors are reported at op-recording time as
/// [`CoreError::ShapeMismatch`], naming both shapes.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Resolve the leading-batch broadcast of `rhs` against `lhs`.
///
/// `rhs` must equal `lhs` after stripping any leading `1` dimensions from
/// `rhs`; the stripped core must be a suffix of `lhs`. Returns the chunk
/// length (`rhs` elements) the `lhs` buffer is walked in.
fn broadcast_chunk(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Result<usize> {
    let mut core = rhs;
    while core.first() == Some(&1) && core.len() > 1 {
        core = &core[1..];
    }
    let ok = if numel(core) == 1 {
        true
    } else {
        core.len() <= lhs.len() && lhs[lhs.len() - core.len()..] == *core
    };
    if !ok {
        return Err(CoreError::ShapeMismatch {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        });
    }
    Ok(numel(core))
}

/// `[m,k] x [k,n]`
fn matmul_kernel(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aik = a[i * k + p];
            if aik == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in row.iter_mut().zip(brow) {
                *o += aik * bv;
            }
        }
    }
    out
}

/// `[m,k] x [n,k]^T -> [m,n]` (row-by-row dot products)
fn matmul_nt_kernel(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            orow[j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    out
}

/// `[k,m]^T x [k,n] -> [m,n]`
fn matmul_tn_kernel(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for p in 0..k {
        let arow = &a[p * m..(p + 1) * m];
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let api = arow[i];
            if api == 0.0 {
                continue;
            }
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += api * bv;
            }
        }
    }
    out
}

fn add_into(slot: &mut Option<Vec<f64>>, delta: Vec<f64>) {
    match slot {
        Some(g) => {
            for (gi, di) in g.iter_mut().zip(&delta) {
                *gi += di;
            }
        }
        None => *slot = Some(delta),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, values: Vec<f64>, shape: Vec<usize>, op: Op, requires_grad: bool) -> NodeId {
        debug_assert_eq!(values.len(), numel(&shape));
        self.nodes.push(Node {
            values,
            shape,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn requires(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub fn value(&self, id: NodeId) -> &[f64] {
        &self.nodes[id.0].values
    }

    /// The node's value as a scalar; a usage error if it has more elements.
    pub fn value_scalar(&self, id: NodeId) -> Result<f64> {
        let v = self.value(id);
        if v.len() != 1 {
            return Err(CoreError::Usage(format!(
                "expected a scalar node, got shape {:?}",
                self.shape(id)
            )));
        }
        Ok(v[0])
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    /// Gradient of the last `backward` loss w.r.t. this node, if reached.
    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    // ── Leaves ───────────────────────────────────────────────────────

    /// Record a constant (no gradient is ever propagated into it).
    pub fn constant(&mut self, values: Vec<f64>, shape: &[usize]) -> Result<NodeId> {
        if values.len() != numel(shape) {
            return Err(CoreError::ShapeMismatch {
                op: "constant",
                lhs: shape.to_vec(),
                rhs: vec![values.len()],
            });
        }
        Ok(self.push(values, shape.to_vec(), Op::Leaf, false))
    }

    pub fn constant_scalar(&mut self, v: f64) -> NodeId {
        self.push(vec![v], vec![1], Op::Leaf, false)
    }

    /// Record a trainable leaf holding a copy of the tensor's values.
    pub fn leaf(&mut self, tensor: &Tensor) -> NodeId {
        self.push(
            tensor.values().to_vec(),
            tensor.shape().to_vec(),
            Op::Leaf,
            true,
        )
    }

    // ── Linear algebra ──────────────────────────────────────────────

    pub fn matmul(&mut self, lhs: NodeId, rhs: NodeId) -> Result<NodeId> {
        let (ls, rs) = (self.shape(lhs), self.shape(rhs));
        if ls.len() != 2 || rs.len() != 2 || ls[1] != rs[0] {
            return Err(CoreError::ShapeMismatch {
                op: "matmul",
                lhs: ls.to_vec(),
                rhs: rs.to_vec(),
            });
        }
        let (m, k, n) = (ls[0], ls[1], rs[1]);
        let values = matmul_kernel(self.value(lhs), self.value(rhs), m, k, n);
        let rg = self.requires(lhs) || self.requires(rhs);
        Ok(self.push(values, vec![m, n], Op::MatMul { lhs, rhs }, rg))
    }

    /// Dense layer `y = x W^T + b` with `x: [B,in]`, `w: [out,in]`.
    pub fn linear(&mut self, input: NodeId, weight: NodeId, bias: Option<NodeId>) -> Result<NodeId> {
        let (xs, ws) = (self.shape(input), self.shape(weight));
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            return Err(CoreError::ShapeMismatch {
                op: "linear",
                lhs: xs.to_vec(),
                rhs: ws.to_vec(),
            });
        }
        let (b_rows, in_dim, out_dim) = (xs[0], xs[1], ws[0]);
        if let Some(b) = bias {
            if self.shape(b) != [out_dim] {
                return Err(CoreError::ShapeMismatch {
                    op: "linear bias",
                    lhs: vec![out_dim],
                    rhs: self.shape(b).to_vec(),
                });
            }
        }
        let mut values = matmul_nt_kernel(self.value(input), self.value(weight), b_rows, in_dim, out_dim);
        if let Some(b) = bias {
            let bv = self.value(b);
            for row in values.chunks_mut(out_dim) {
                for (o, bi) in row.iter_mut().zip(bv) {
                    *o += bi;
                }
            }
        }
        let rg = self.requires(input)
            || self.requires(weight)
            || bias.map(|b| self.requires(b)).unwrap_or(false);
        Ok(self.push(
            values,
            vec![b_rows, out_dim],
            Op::Linear { input, weight, bias },
            rg,
        ))
    }

    // ── Elementwise binary (leading-batch broadcast on rhs) ─────────

    fn binary(
        &mut self,
        op_name: &'static str,
        lhs: NodeId,
        rhs: NodeId,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<NodeId> {
        let chunk = broadcast_chunk(op_name, self.shape(lhs), self.shape(rhs))?;
        let (lv, rv) = (self.value(lhs), self.value(rhs));
        let mut values = Vec::with_capacity(lv.len());
        for (i, &x) in lv.iter().enumerate() {
            values.push(f(x, rv[i % chunk]));
        }
        let shape = self.shape(lhs).to_vec();
        let rg = self.requires(lhs) || self.requires(rhs);
        Ok(self.push(values, shape, op, rg))
    }

    /// Elementwise addition. The right operand broadcasts under the
    /// leading-batch rule: after stripping leading `1`s its shape must be a
    /// suffix of the left shape (so `[B,h] + [h]` and `[B,h] + [1,h]` work,
    /// `[B,1]` against `[B,h]` does not).
    pub fn add(&mut self, lhs: NodeId, rhs: NodeId) -> Result<NodeId> {
        self.binary("add", lhs, rhs, |a, b| a + b, Op::Add { lhs, rhs })
    }

    /// Elementwise subtraction, same broadcast rule as [`Tape::add`].
    pub fn sub(&mut self, lhs: NodeId, rhs: NodeId) -> Result<NodeId> {
        self.binary("sub", lhs, rhs, |a, b| a - b, Op::Sub { lhs, rhs })
    }

    /// Elementwise product, same broadcast rule as [`Tape::add`].
    pub fn mul(&mut self, lhs: NodeId, rhs: NodeId) -> Result<NodeId> {
        self.binary("mul", lhs, rhs, |a, b| a * b, Op::Mul { lhs, rhs })
    }

    /// Elementwise quotient, same broadcast rule as [`Tape::add`].
    pub fn div(&mut self, lhs: NodeId, rhs: NodeId) -> Result<NodeId> {
        self.binary("div", lhs, rhs, |a, b| a / b, Op::Div { lhs, rhs })
    }

    // ── Elementwise unary ────────────────────────────────────────────

    fn unary(&mut self, input: NodeId, f: impl Fn(f64) -> f64, op: Op) -> NodeId {
        let values = self.value(input).iter().map(|&x| f(x)).collect();
        let shape = self.shape(input).to_vec();
        let rg = self.requires(input);
        self.push(values, shape, op, rg)
    }

    /// `scale * x + shift` with constants.
    pub fn affine(&mut self, input: NodeId, scale: f64, shift: f64) -> NodeId {
        self.unary(input, |x| scale * x + shift, Op::Affine { input, scale })
    }

    pub fn neg(&mut self, input: NodeId) -> NodeId {
        self.affine(input, -1.0, 0.0)
    }

    pub fn sigmoid(&mut self, input: NodeId) -> NodeId {
        self.unary(input, |x| 1.0 / (1.0 + (-x).exp()), Op::Sigmoid { input })
    }

    pub fn tanh(&mut self, input: NodeId) -> NodeId {
        self.unary(input, f64::tanh, Op::Tanh { input })
    }

    pub fn exp(&mut self, input: NodeId) -> NodeId {
        self.unary(input, f64::exp, Op::Exp { input })
    }

    pub fn log(&mut self, input: NodeId) -> NodeId {
        self.unary(input, f64::ln, Op::Log { input })
    }

    /// Clamp to `[lo, hi]`; the gradient passes through inside the interval
    /// and is zero where the input was clipped.
    pub fn clamp(&mut self, input: NodeId, lo: f64, hi: f64) -> NodeId {
        self.unary(input, |x| x.clamp(lo, hi), Op::Clamp { input, lo, hi })
    }

    // ── Row-wise (last axis) ops ─────────────────────────────────────

    fn last_axis(&self, id: NodeId) -> usize {
        *self.shape(id).last().expect("tensor has at least one axis")
    }

    /// Numerically stabilized softmax over the last axis.
    pub fn softmax(&mut self, input: NodeId) -> NodeId {
        let width = self.last_axis(input);
        let mut values = self.value(input).to_vec();
        for row in values.chunks_mut(width) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        let shape = self.shape(input).to_vec();
        let rg = self.requires(input);
        self.push(values, shape, Op::Softmax { input }, rg)
    }

    /// `x - logsumexp(x)` over the last axis, computed stably.
    pub fn log_softmax(&mut self, input: NodeId) -> NodeId {
        let width = self.last_axis(input);
        let mut values = self.value(input).to_vec();
        for row in values.chunks_mut(width) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        let shape = self.shape(input).to_vec();
        let rg = self.requires(input);
        self.push(values, shape, Op::LogSoftmax { input }, rg)
    }

    /// Log-sum-exp over the last axis; the axis is dropped (a 1-D input
    /// reduces to shape `[1]`).
    pub fn logsumexp(&mut self, input: NodeId) -> NodeId {
        let width = self.last_axis(input);
        let rows = self.value(input).len() / width;
        let mut values = Vec::with_capacity(rows);
        for row in self.value(input).chunks(width) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            values.push(max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln());
        }
        let in_shape = self.shape(input);
        let shape = if in_shape.len() == 1 {
            vec![1]
        } else {
            in_shape[..in_shape.len() - 1].to_vec()
        };
        let rg = self.requires(input);
        self.push(values, shape, Op::LogSumExp { input }, rg)
    }

    // ── Shape ops ────────────────────────────────────────────────────

    /// Concatenate along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, parts: &[NodeId], axis: usize) -> Result<NodeId> {
        let first = *parts.first().ok_or_else(|| {
            CoreError::Usage("concat needs at least one input".into())
        })?;
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return Err(CoreError::Usage(format!(
                "concat axis {axis} out of range for shape {base:?}"
            )));
        }
        let mut axis_total = 0;
        for &p in parts {
            let s = self.shape(p);
            let conforms = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !conforms {
                return Err(CoreError::ShapeMismatch {
                    op: "concat",
                    lhs: base.clone(),
                    rhs: s.to_vec(),
                });
            }
            axis_total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut shape = base.clone();
        shape[axis] = axis_total;
        let mut values = Vec::with_capacity(outer * axis_total * inner);
        for o in 0..outer {
            for &p in parts {
                let plen = self.shape(p)[axis];
                let block = plen * inner;
                let pv = self.value(p);
                values.extend_from_slice(&pv[o * block..(o + 1) * block]);
            }
        }
        let rg = parts.iter().any(|&p| self.requires(p));
        Ok(self.push(
            values,
            shape,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// Take `len` entries starting at `start` along `axis`.
    pub fn slice(&mut self, input: NodeId, axis: usize, start: usize, len: usize) -> Result<NodeId> {
        let s = self.shape(input).to_vec();
        if axis >= s.len() || start + len > s[axis] || len == 0 {
            return Err(CoreError::Usage(format!(
                "slice [{start}, {start}+{len}) on axis {axis} invalid for shape {s:?}"
            )));
        }
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        let mut shape = s.clone();
        shape[axis] = len;
        let mut values = Vec::with_capacity(outer * len * inner);
        let v = self.value(input);
        let stride = s[axis] * inner;
        for o in 0..outer {
            let from = o * stride + start * inner;
            values.extend_from_slice(&v[from..from + len * inner]);
        }
        let rg = self.requires(input);
        Ok(self.push(values, shape, Op::Slice { input, axis, start, len }, rg))
    }

    /// Repeat a `[1, ...]` tensor `rows` times along its leading axis.
    pub fn broadcast_rows(&mut self, input: NodeId, rows: usize) -> Result<NodeId> {
        let s = self.shape(input).to_vec();
        if s.first() != Some(&1) {
            return Err(CoreError::ShapeMismatch {
                op: "broadcast_rows",
                lhs: vec![1],
                rhs: s,
            });
        }
        let mut shape = s.clone();
        shape[0] = rows;
        let base = self.value(input).to_vec();
        let mut values = Vec::with_capacity(base.len() * rows);
        for _ in 0..rows {
            values.extend_from_slice(&base);
        }
        let rg = self.requires(input);
        Ok(self.push(values, shape, Op::BroadcastRows { input }, rg))
    }

    /// View the same elements under a different shape.
    pub fn reshape(&mut self, input: NodeId, shape: &[usize]) -> Result<NodeId> {
        if numel(shape) != self.value(input).len() {
            return Err(CoreError::ShapeMismatch {
                op: "reshape",
                lhs: self.shape(input).to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let values = self.value(input).to_vec();
        let rg = self.requires(input);
        Ok(self.push(values, shape.to_vec(), Op::Reshape { input }, rg))
    }

    // ── Reductions ───────────────────────────────────────────────────

    /// Sum of all elements, shape `[1]`.
    pub fn sum(&mut self, input: NodeId) -> NodeId {
        let v = self.value(input).iter().sum();
        let rg = self.requires(input);
        self.push(vec![v], vec![1], Op::Sum { input }, rg)
    }

    /// Sum along one axis; the axis is dropped (a 1-D input reduces to `[1]`).
    pub fn sum_axis(&mut self, input: NodeId, axis: usize) -> Result<NodeId> {
        let s = self.shape(input).to_vec();
        if axis >= s.len() {
            return Err(CoreError::Usage(format!(
                "sum_axis {axis} out of range for shape {s:?}"
            )));
        }
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        let width = s[axis];
        let mut values = vec![0.0; outer * inner];
        let v = self.value(input);
        for o in 0..outer {
            for a in 0..width {
                let base = (o * width + a) * inner;
                let dst = &mut values[o * inner..(o + 1) * inner];
                for (d, x) in dst.iter_mut().zip(&v[base..base + inner]) {
                    *d += x;
                }
            }
        }
        let shape = if s.len() == 1 {
            vec![1]
        } else {
            let mut sh = s.clone();
            sh.remove(axis);
            sh
        };
        let rg = self.requires(input);
        Ok(self.push(values, shape, Op::SumAxis { input, axis }, rg))
    }

    /// Arithmetic mean of all elements, shape `[1]`.
    pub fn mean(&mut self, input: NodeId) -> NodeId {
        let n = self.value(input).len() as f64;
        let v = self.value(input).iter().sum::<f64>() / n;
        let rg = self.requires(input);
        self.push(vec![v], vec![1], Op::Mean { input }, rg)
    }

    // ── Backward ─────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Gradients of every reachable node
    /// that requires them become available through [`Tape::grad`].
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(CoreError::Usage(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.grads = Vec::new();
        self.grads.resize_with(self.nodes.len(), || None);
        if !self.requires(loss) {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(grad) = self.grads[i].take() else {
                continue;
            };
            self.propagate(i, &grad);
            self.grads[i] = Some(grad);
        }
        Ok(())
    }

    fn propagate(&mut self, node: usize, grad: &[f64]) {
        let op = self.nodes[node].op.clone();
        match op {
            Op::Leaf => {}

            Op::MatMul { lhs, rhs } => {
                let (m, k) = (self.shape(lhs)[0], self.shape(lhs)[1]);
                let n = self.shape(rhs)[1];
                if self.requires(lhs) {
                    let d = matmul_nt_kernel(grad, self.value(rhs), m, n, k);
                    add_into(&mut self.grads[lhs.0], d);
                }
                if self.requires(rhs) {
                    let d = matmul_tn_kernel(self.value(lhs), grad, k, m, n);
                    add_into(&mut self.grads[rhs.0], d);
                }
            }

            Op::Linear { input, weight, bias } => {
                let (b_rows, in_dim) = (self.shape(input)[0], self.shape(input)[1]);
                let out_dim = self.shape(weight)[0];
                if self.requires(input) {
                    let d = matmul_kernel(grad, self.value(weight), b_rows, out_dim, in_dim);
                    add_into(&mut self.grads[input.0], d);
                }
                if self.requires(weight) {
                    let d = matmul_tn_kernel(grad, self.value(input), out_dim, b_rows, in_dim);
                    add_into(&mut self.grads[weight.0], d);
                }
                if let Some(b) = bias {
                    if self.requires(b) {
                        let mut d = vec![0.0; out_dim];
                        for row in grad.chunks(out_dim) {
                            for (di, g) in d.iter_mut().zip(row) {
                                *di += g;
                            }
                        }
                        add_into(&mut self.grads[b.0], d);
                    }
                }
            }

            Op::Add { lhs, rhs } => {
                if self.requires(lhs) {
                    add_into(&mut self.grads[lhs.0], grad.to_vec());
                }
                if self.requires(rhs) {
                    let d = self.reduce_to_rhs(rhs, grad, |g, _, _| g);
                    add_into(&mut self.grads[rhs.0], d);
                }
            }

            Op::Sub { lhs, rhs } => {
                if self.requires(lhs) {
                    add_into(&mut self.grads[lhs.0], grad.to_vec());
                }
                if self.requires(rhs) {
                    let d = self.reduce_to_rhs(rhs, grad, |g, _, _| -g);
                    add_into(&mut self.grads[rhs.0], d);
                }
            }

            Op::Mul { lhs, rhs } => {
                let chunk = self.value(rhs).len();
                if self.requires(lhs) {
                    let rv = self.value(rhs);
                    let lv_grad = grad
                        .iter()
                        .enumerate()
                        .map(|(i, g)| g * rv[i % chunk])
                        .collect();
                    add_into(&mut self.grads[lhs.0], lv_grad);
                }
                if self.requires(rhs) {
                    let lv = self.value(lhs).to_vec();
                    let d = self.reduce_to_rhs(rhs, grad, |g, i, _| g * lv[i]);
                    add_into(&mut self.grads[rhs.0], d);
                }
            }

            Op::Div { lhs, rhs } => {
                let chunk = self.value(rhs).len();
                if self.requires(lhs) {
                    let rv = self.value(rhs);
                    let d = grad
                        .iter()
                        .enumerate()
                        .map(|(i, g)| g / rv[i % chunk])
                        .collect();
                    add_into(&mut self.grads[lhs.0], d);
                }
                if self.requires(rhs) {
                    let lv = self.value(lhs).to_vec();
                    let rv = self.value(rhs).to_vec();
                    let d = self.reduce_to_rhs(rhs, grad, |g, i, j| {
                        -g * lv[i] / (rv[j] * rv[j])
                    });
                    add_into(&mut self.grads[rhs.0], d);
                }
            }

            Op::Affine { input, scale, .. } => {
                if self.requires(input) {
                    let d = grad.iter().map(|g| g * scale).collect();
                    add_into(&mut self.grads[input.0], d);
                }
            }

            Op::Sigmoid { input } => {
                if self.requires(input) {
                    let out = &self.nodes[node].values;
                    let d = grad
                        .iter()
                        .zip(out)
                        .map(|(g, s)| g * s * (1.0 - s))
                        .collect();
                    add_into(&mut self.grads[input.0], d);
                }
            }

            Op::Tanh { input } => {
                if self.requires(input) {
                    let out = &self.nodes[node].values;
                    let d = grad.iter().zip(out).map(|(g, t)| g * (1.0 - t * t)).collect();
                    add_into(&mut self.grads[input.0], d);
                }
            }

            Op::Exp { input } => {
                if self.requires(input) {
                    let out = &self.nodes[node].values;
                    let d = grad.iter().zip(out).map(|(g, e)| g * e).collect();
                    add_into(&mut self.grads[input.0], d);
                }
            }

            Op::Log { input } => {
                if self.requires(input) {
                    let xv = self.value(input);
                    let d = grad.iter().zip(xv).map(|(g, x)| g / x).collect();
                    add_into(&mut self.grads[input.0], d);
                }
            }

            Op::Clamp { input, lo, hi } => {
                if self.requires(input) {
                    let xv = self.value(input);
                    let d = grad
                        .iter()
                        .zip(xv)
                        .map(|(g, &x)| if x >= lo && x <= hi { *g } else { 0.0 })
                        .collect();
                    add_into(&mut self.grads[input.0], d);
                }
            }

            Op::Softmax { input } => {
                if self.requires(input) {
                    let width = *self.nodes[node].shape.last().unwrap();
                    let out = &self.nodes[node].values;
                    let mut d = vec![0.0; out.len()];
                    for (r, (orow, grow)) in out.chunks(width).zip(grad.chunks(width)).enumerate() {
                        let dot: f64 = orow.iter().zip(grow).map(|(s, g)| s * g).sum();
                        for (j, (s, g)) in orow.iter().zip(grow).enumerate() {
                            d[r * width + j] = s * (g - dot);
                        }
                    }
                    add_into(&mut self.grads[input.0], d);
                }
            }

            Op::LogSoftmax { input } => {
                if self.requires(input) {
                    let width = *self.nodes[node].shape.last().unwrap();
                    let out = &self.nodes[node].values;
                    let mut d = vec![0.0; out.len()];
                    for (r, (orow, grow)) in out.chunks(width).zip(grad.chunks(width)).enumerate() {
                        let gsum: f64 = grow.iter().sum();
                        for (j, (o, g)) in orow.iter().zip(grow).enumerate() {
                            d[r * width + j] = g - o.exp() * gsum;
                        }
                    }
                    add_into(&mut self.grads[input.0], d);
                }
            }

            Op::LogSumExp { input } => {
                if self.requires(input) {
                    let width = *self.nodes[input.0].shape.last().unwrap();
                    let xv = self.value(input);
                    let out = &self.nodes[node].values;
                    let mut d = vec![0.0; xv.len()];
                    for (r, xrow) in xv.chunks(width).enumerate() {
                        let g = grad[r];
                        for (j, x) in xrow.iter().enumerate() {
                            d[r * width + j] = g * (x - out[r]).exp();
                        }
                    }
                    add_into(&mut self.grads[input.0], d);
                }
            }

            Op::Concat { parts, axis } => {
                let shape = self.nodes[node].shape.clone();
                let outer: usize = shape[..axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let total_block = shape[axis] * inner;
                let mut offset = 0;
                for &p in &parts {
                    let plen = self.shape(p)[axis];
                    let block = plen * inner;
                    if self.requires(p) {
                        let mut d = Vec::with_capacity(outer * block);
                        for o in 0..outer {
                            let from = o * total_block + offset;
                            d.extend_from_slice(&grad[from..from + block]);
                        }
                        add_into(&mut self.grads[p.0], d);
                    }
                    offset += block;
                }
            }

            Op::Slice { input, axis, start, len } => {
                if self.requires(input) {
                    let s = self.shape(input).to_vec();
                    let outer: usize = s[..axis].iter().product();
                    let inner: usize = s[axis + 1..].iter().product();
                    let stride = s[axis] * inner;
                    let mut d = vec![0.0; self.value(input).len()];
                    for o in 0..outer {
                        let to = o * stride + start * inner;
                        let from = o * len * inner;
                        d[to..to + len * inner]
                            .copy_from_slice(&grad[from..from + len * inner]);
                    }
                    add_into(&mut self.grads[input.0], d);
                }
            }

            Op::BroadcastRows { input } => {
                if self.requires(input) {
                    let width = self.value(input).len();
                    let mut d = vec![0.0; width];
                    for row in grad.chunks(width) {
                        for (di, g) in d.iter_mut().zip(row) {
                            *di += g;
                        }
                    }
                    add_into(&mut self.grads[input.0], d);
                }
            }

            Op::Reshape { input } => {
                if self.requires(input) {
                    add_into(&mut self.grads[input.0], grad.to_vec());
                }
            }

            Op::Sum { input } => {
                if self.requires(input) {
                    let d = vec![grad[0]; self.value(input).len()];
                    add_into(&mut self.grads[input.0], d);
                }
            }

            Op::SumAxis { input, axis } => {
                if self.requires(input) {
                    let s = self.shape(input).to_vec();
                    let outer: usize = s[..axis].iter().product();
                    let inner: usize = s[axis + 1..].iter().product();
                    let width = s[axis];
                    let mut d = vec![0.0; self.value(input).len()];
                    for o in 0..outer {
                        for a in 0..width {
                            let base = (o * width + a) * inner;
                            d[base..base + inner]
                                .copy_from_slice(&grad[o * inner..(o + 1) * inner]);
                        }
                    }
                    add_into(&mut self.grads[input.0], d);
                }
            }

            Op::Mean { input } => {
                if self.requires(input) {
                    let n = self.value(input).len();
                    let d = vec![grad[0] / n as f64; n];
                    add_into(&mut self.grads[input.0], d);
                }
            }
        }
    }

    /// Fold an upstream gradient back onto a broadcast rhs operand.
    /// `f(g, lhs_index, rhs_index)` maps each upstream entry.
    fn reduce_to_rhs(
        &self,
        rhs: NodeId,
        grad: &[f64],
        f: impl Fn(f64, usize, usize) -> f64,
    ) -> Vec<f64> {
        let chunk = self.value(rhs).len();
        let mut d = vec![0.0; chunk];
        for (i, &g) in grad.iter().enumerate() {
            let j = i % chunk;
            d[j] += f(g, i, j);
        }
        d
    }
}
