//! Minimal reverse-mode gradient engine.
//!
//! A [`Tape`] is a Wengert list: every primitive applied through it appends a
//! node holding the operation, its input node ids, and the forward value.
//! [`Tape::backward`] walks the list in reverse, accumulating adjoints, and
//! returns a gradient for every parameter leaf (zero if the output does not
//! depend on it). Replaying the recorded ops reproduces the forward values
//! bit-for-bit, which [`Tape::replay_check`] verifies.

use crate::error::{Error, Result};
use crate::tensor::{self, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Primitive operations the tape can record.
#[derive(Debug, Clone)]
pub enum Op {
    /// Input tensor; `param` marks it as a gradient target.
    Leaf { param: bool },
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    /// Elementwise product.
    Mul(NodeId, NodeId),
    /// Multiply by a constant scalar.
    Scale(NodeId, f64),
    /// Add a constant scalar to every element.
    AddScalar(NodeId, f64),
    MatMul(NodeId, NodeId),
    /// `a · bᵀ` (used for attention scores).
    MatMulNT(NodeId, NodeId),
    Relu(NodeId),
    Exp(NodeId),
    /// Elementwise minimum; ties route the gradient to the first input.
    Min(NodeId, NodeId),
    /// Clamp into `[lo, hi]`; gradient passes only strictly inside.
    Clamp(NodeId, f64, f64),
    SoftmaxRows(NodeId),
    LogSoftmaxRows(NodeId),
    /// Row-wise RMSNorm with learned gain.
    RmsNormRows { x: NodeId, gamma: NodeId, eps: f64 },
    /// Stack the rows of two matrices with equal widths.
    ConcatRows(NodeId, NodeId),
    /// Rows `start..end` of a matrix.
    SliceRows { x: NodeId, start: usize, end: usize },
    /// Select rows of `table` by (constant) index; duplicates allowed.
    GatherRows { table: NodeId, ids: Vec<usize> },
    /// Pick scalar entries `(row, col)` of a matrix into a vector.
    GatherEntries { x: NodeId, coords: Vec<(usize, usize)> },
    /// Sum of all elements (scalar output).
    Sum(NodeId),
    /// Mean of all elements (scalar output).
    Mean(NodeId),
}

struct Node {
    op: Op,
    value: Tensor,
}

/// Gradients keyed by node id, one entry per parameter leaf.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the backward output w.r.t. the given parameter node.
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }
}

/// Ordered record of primitive operations; see the module docs.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
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

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, op: Op, value: Tensor) -> NodeId {
        self.nodes.push(Node { op, value });
        NodeId(self.nodes.len() - 1)
    }

    /// Records a parameter leaf (gradient target).
    pub fn param(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf { param: true }, value)
    }

    /// Records a constant leaf (no gradient).
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf { param: false }, value)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = tensor::add(self.value(a), self.value(b))?;
        Ok(self.push(Op::Add(a, b), v))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::Shape(format!("sub shapes {:?} vs {:?}", ta.shape(), tb.shape())));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x - y).collect();
        let v = Tensor::from_parts(ta.shape().to_vec(), data);
        Ok(self.push(Op::Sub(a, b), v))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::Shape(format!("mul shapes {:?} vs {:?}", ta.shape(), tb.shape())));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let v = Tensor::from_parts(ta.shape().to_vec(), data);
        Ok(self.push(Op::Mul(a, b), v))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let ta = self.value(a);
        let data = ta.data().iter().map(|x| x * c).collect();
        let v = Tensor::from_parts(ta.shape().to_vec(), data);
        self.push(Op::Scale(a, c), v)
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        let ta = self.value(a);
        let data = ta.data().iter().map(|x| x + c).collect();
        let v = Tensor::from_parts(ta.shape().to_vec(), data);
        self.push(Op::AddScalar(a, c), v)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = tensor::matmul(self.value(a), self.value(b))?;
        Ok(self.push(Op::MatMul(a, b), v))
    }

    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = tensor::matmul_nt(self.value(a), self.value(b))?;
        Ok(self.push(Op::MatMulNT(a, b), v))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let ta = self.value(a);
        let data = ta.data().iter().map(|x| x.max(0.0)).collect();
        let v = Tensor::from_parts(ta.shape().to_vec(), data);
        self.push(Op::Relu(a), v)
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let ta = self.value(a);
        let data = ta.data().iter().map(|x| x.exp()).collect();
        let v = Tensor::from_parts(ta.shape().to_vec(), data);
        self.push(Op::Exp(a), v)
    }

    pub fn min(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::Shape(format!("min shapes {:?} vs {:?}", ta.shape(), tb.shape())));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x.min(*y)).collect();
        let v = Tensor::from_parts(ta.shape().to_vec(), data);
        Ok(self.push(Op::Min(a, b), v))
    }

    pub fn clamp(&mut self, a: NodeId, lo: f64, hi: f64) -> NodeId {
        let ta = self.value(a);
        let data = ta.data().iter().map(|x| x.clamp(lo, hi)).collect();
        let v = Tensor::from_parts(ta.shape().to_vec(), data);
        self.push(Op::Clamp(a, lo, hi), v)
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let v = tensor::softmax_rows(self.value(a))?;
        Ok(self.push(Op::SoftmaxRows(a), v))
    }

    pub fn log_softmax_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let v = tensor::log_softmax_rows(self.value(a))?;
        Ok(self.push(Op::LogSoftmaxRows(a), v))
    }

    pub fn rmsnorm_rows(&mut self, x: NodeId, gamma: NodeId, eps: f64) -> Result<NodeId> {
        let v = tensor::rmsnorm_rows(self.value(x), self.value(gamma).data(), eps)?;
        Ok(self.push(Op::RmsNormRows { x, gamma, eps }, v))
    }

    pub fn concat_rows(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (ra, ca) = ta.dims2()?;
        let (rb, cb) = tb.dims2()?;
        if ca != cb {
            return Err(Error::Shape(format!("concat_rows widths {} vs {}", ca, cb)));
        }
        let mut data = Vec::with_capacity((ra + rb) * ca);
        data.extend_from_slice(ta.data());
        data.extend_from_slice(tb.data());
        let v = Tensor::from_parts(vec![ra + rb, ca], data);
        Ok(self.push(Op::ConcatRows(a, b), v))
    }

    pub fn slice_rows(&mut self, x: NodeId, start: usize, end: usize) -> Result<NodeId> {
        let tx = self.value(x);
        let (r, c) = tx.dims2()?;
        if start > end || end > r {
            return Err(Error::Index(format!("slice_rows {}..{} of {} rows", start, end, r)));
        }
        let data = tx.data()[start * c..end * c].to_vec();
        let v = Tensor::from_parts(vec![end - start, c], data);
        Ok(self.push(Op::SliceRows { x, start, end }, v))
    }

    pub fn gather_rows(&mut self, table: NodeId, ids: Vec<usize>) -> Result<NodeId> {
        let tt = self.value(table);
        let (r, c) = tt.dims2()?;
        let mut data = Vec::with_capacity(ids.len() * c);
        for &id in &ids {
            if id >= r {
                return Err(Error::Index(format!("gather_rows id {} of {} rows", id, r)));
            }
            data.extend_from_slice(&tt.data()[id * c..(id + 1) * c]);
        }
        let v = Tensor::from_parts(vec![ids.len(), c], data);
        Ok(self.push(Op::GatherRows { table, ids }, v))
    }

    pub fn gather_entries(&mut self, x: NodeId, coords: Vec<(usize, usize)>) -> Result<NodeId> {
        let tx = self.value(x);
        let (r, c) = tx.dims2()?;
        let mut data = Vec::with_capacity(coords.len());
        for &(i, j) in &coords {
            if i >= r || j >= c {
                return Err(Error::Index(format!("gather_entries ({}, {}) of {}x{}", i, j, r, c)));
            }
            data.push(tx.data()[i * c + j]);
        }
        let v = Tensor::from_parts(vec![coords.len()], data);
        Ok(self.push(Op::GatherEntries { x, coords }, v))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let s = self.value(a).data().iter().sum();
        self.push(Op::Sum(a), Tensor::scalar(s))
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let ta = self.value(a);
        let m = ta.data().iter().sum::<f64>() / ta.numel() as f64;
        self.push(Op::Mean(a), Tensor::scalar(m))
    }

    /// Smallest |input| feeding any recorded relu, or `None` when the tape
    /// has no relu nodes. Finite-difference oracles use this to reject
    /// graphs whose kinks sit inside the probe step.
    pub fn min_abs_relu_input(&self) -> Option<f64> {
        let mut min: Option<f64> = None;
        for node in &self.nodes {
            if let Op::Relu(a) = node.op {
                for v in self.nodes[a.0].value.data() {
                    let m = v.abs();
                    if min.map_or(true, |cur| m < cur) {
                        min = Some(m);
                    }
                }
            }
        }
        min
    }

    /// Re-executes every recorded op from the stored leaf values and checks
    /// the recomputed tensors match the recorded ones bit-for-bit.
    pub fn replay_check(&self) -> bool {
        let mut values: Vec<Tensor> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let v = match &node.op {
                Op::Leaf { .. } => node.value.clone(),
                op => match self.eval_op(op, &values) {
                    Ok(v) => v,
                    Err(_) => return false,
                },
            };
            if v.shape() != node.value.shape()
                || v.data()
                    .iter()
                    .zip(node.value.data())
                    .any(|(a, b)| a.to_bits() != b.to_bits())
            {
                return false;
            }
            values.push(v);
        }
        true
    }

    fn eval_op(&self, op: &Op, values: &[Tensor]) -> Result<Tensor> {
        let v = |id: &NodeId| &values[id.0];
        Ok(match op {
            Op::Leaf { .. } => unreachable!("leaves are handled by the caller"),
            Op::Add(a, b) => tensor::add(v(a), v(b))?,
            Op::Sub(a, b) => {
                let data = v(a).data().iter().zip(v(b).data()).map(|(x, y)| x - y).collect();
                Tensor::from_parts(v(a).shape().to_vec(), data)
            }
            Op::Mul(a, b) => {
                let data = v(a).data().iter().zip(v(b).data()).map(|(x, y)| x * y).collect();
                Tensor::from_parts(v(a).shape().to_vec(), data)
            }
            Op::Scale(a, c) => {
                let data = v(a).data().iter().map(|x| x * c).collect();
                Tensor::from_parts(v(a).shape().to_vec(), data)
            }
            Op::AddScalar(a, c) => {
                let data = v(a).data().iter().map(|x| x + c).collect();
                Tensor::from_parts(v(a).shape().to_vec(), data)
            }
            Op::MatMul(a, b) => tensor::matmul(v(a), v(b))?,
            Op::MatMulNT(a, b) => tensor::matmul_nt(v(a), v(b))?,
            Op::Relu(a) => {
                let data = v(a).data().iter().map(|x| x.max(0.0)).collect();
                Tensor::from_parts(v(a).shape().to_vec(), data)
            }
            Op::Exp(a) => {
                let data = v(a).data().iter().map(|x| x.exp()).collect();
                Tensor::from_parts(v(a).shape().to_vec(), data)
            }
            Op::Min(a, b) => {
                let data = v(a).data().iter().zip(v(b).data()).map(|(x, y)| x.min(*y)).collect();
                Tensor::from_parts(v(a).shape().to_vec(), data)
            }
            Op::Clamp(a, lo, hi) => {
                let data = v(a).data().iter().map(|x| x.clamp(*lo, *hi)).collect();
                Tensor::from_parts(v(a).shape().to_vec(), data)
            }
            Op::SoftmaxRows(a) => tensor::softmax_rows(v(a))?,
            Op::LogSoftmaxRows(a) => tensor::log_softmax_rows(v(a))?,
            Op::RmsNormRows { x, gamma, eps } => tensor::rmsnorm_rows(v(x), v(gamma).data(), *eps)?,
            Op::ConcatRows(a, b) => {
                let (ra, ca) = v(a).dims2()?;
                let (rb, _) = v(b).dims2()?;
                let mut data = Vec::with_capacity((ra + rb) * ca);
                data.extend_from_slice(v(a).data());
                data.extend_from_slice(v(b).data());
                Tensor::from_parts(vec![ra + rb, ca], data)
            }
            Op::SliceRows { x, start, end } => {
                let (_, c) = v(x).dims2()?;
                Tensor::from_parts(vec![end - start, c], v(x).data()[start * c..end * c].to_vec())
            }
            Op::GatherRows { table, ids } => {
                let (_, c) = v(table).dims2()?;
                let mut data = Vec::with_capacity(ids.len() * c);
                for &id in ids {
                    data.extend_from_slice(&v(table).data()[id * c..(id + 1) * c]);
                }
                Tensor::from_parts(vec![ids.len(), c], data)
            }
            Op::GatherEntries { x, coords } => {
                let (_, c) = v(x).dims2()?;
                let data = coords.iter().map(|&(i, j)| v(x).data()[i * c + j]).collect();
                Tensor::from_parts(vec![coords.len()], data)
            }
            Op::Sum(a) => Tensor::scalar(v(a).data().iter().sum()),
            Op::Mean(a) => Tensor::scalar(v(a).data().iter().sum::<f64>() / v(a).numel() as f64),
        })
    }

    /// Reverse pass from a scalar output node. Returns gradients for every
    /// parameter leaf; parameters the output does not depend on get zeros.
    pub fn backward(&self, output: NodeId) -> Result<Gradients> {
        if !self.nodes[output.0].value.is_scalar() {
            return Err(Error::Usage(format!(
                "backward requires a scalar output, got shape {:?}",
                self.nodes[output.0].value.shape()
            )));
        }

        // Mark nodes that can influence the output so the reverse sweep can
        // skip dead subgraphs.
        let mut live = vec![false; self.nodes.len()];
        live[output.0] = true;
        for idx in (0..=output.0).rev() {
            if !live[idx] {
                continue;
            }
            self.for_each_input(&self.nodes[idx].op, |dep| live[dep.0] = true);
        }

        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(Tensor::scalar(1.0));

        for idx in (0..=output.0).rev() {
            if !live[idx] {
                continue;
            }
            let adjoint = match grads[idx].take() {
                Some(g) => g,
                None => continue, // live but never reached with a non-trivial adjoint
            };
            self.accumulate(&self.nodes[idx].op, idx, &adjoint, &mut grads)?;
            grads[idx] = Some(adjoint);
        }

        // Zero-fill parameters that never received an adjoint.
        for (idx, node) in self.nodes.iter().enumerate() {
            if let Op::Leaf { param: true } = node.op {
                if grads[idx].is_none() {
                    grads[idx] = Some(Tensor::zeros(node.value.shape()));
                }
            } else if !matches!(node.op, Op::Leaf { .. }) {
                // Only keep leaf gradients; interior adjoints are scratch.
                if idx != output.0 {
                    grads[idx] = None;
                }
            }
        }

        Ok(Gradients { grads })
    }

    fn for_each_input(&self, op: &Op, mut f: impl FnMut(NodeId)) {
        match op {
            Op::Leaf { .. } => {}
            Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::MatMul(a, b)
            | Op::MatMulNT(a, b)
            | Op::Min(a, b)
            | Op::ConcatRows(a, b) => {
                f(*a);
                f(*b);
            }
            Op::RmsNormRows { x, gamma, .. } => {
                f(*x);
                f(*gamma);
            }
            Op::Scale(a, _)
            | Op::AddScalar(a, _)
            | Op::Relu(a)
            | Op::Exp(a)
            | Op::Clamp(a, _, _)
            | Op::SoftmaxRows(a)
            | Op::LogSoftmaxRows(a)
            | Op::SliceRows { x: a, .. }
            | Op::GatherRows { table: a, .. }
            | Op::GatherEntries { x: a, .. }
            | Op::Sum(a)
            | Op::Mean(a) => f(*a),
        }
    }

    fn accumulate(
        &self,
        op: &Op,
        idx: usize,
        adjoint: &Tensor,
        grads: &mut [Option<Tensor>],
    ) -> Result<()> {
        let out_val = &self.nodes[idx].value;
        match op {
            Op::Leaf { .. } => {}
            Op::Add(a, b) => {
                add_grad(grads, *a, adjoint.clone());
                add_grad(grads, *b, adjoint.clone());
            }
            Op::Sub(a, b) => {
                add_grad(grads, *a, adjoint.clone());
                let neg = Tensor::from_parts(
                    adjoint.shape().to_vec(),
                    adjoint.data().iter().map(|v| -v).collect(),
                );
                add_grad(grads, *b, neg);
            }
            Op::Mul(a, b) => {
                let ta = self.value(*a);
                let tb = self.value(*b);
                let ga = elementwise(adjoint, tb, |g, y| g * y);
                let gb = elementwise(adjoint, ta, |g, x| g * x);
                add_grad(grads, *a, ga);
                add_grad(grads, *b, gb);
            }
            Op::Scale(a, c) => {
                let g = Tensor::from_parts(
                    adjoint.shape().to_vec(),
                    adjoint.data().iter().map(|v| v * c).collect(),
                );
                add_grad(grads, *a, g);
            }
            Op::AddScalar(a, _) => add_grad(grads, *a, adjoint.clone()),
            Op::MatMul(a, b) => {
                // c = a·b  =>  da = g·bᵀ, db = aᵀ·g
                let ga = tensor::matmul_nt(adjoint, self.value(*b))?;
                let gb = tensor::matmul_tn(self.value(*a), adjoint)?;
                add_grad(grads, *a, ga);
                add_grad(grads, *b, gb);
            }
            Op::MatMulNT(a, b) => {
                // c = a·bᵀ  =>  da = g·b, db = gᵀ·a
                let ga = tensor::matmul(adjoint, self.value(*b))?;
                let gb = tensor::matmul_tn(adjoint, self.value(*a))?;
                add_grad(grads, *a, ga);
                add_grad(grads, *b, gb);
            }
            Op::Relu(a) => {
                let ga = elementwise(adjoint, self.value(*a), |g, x| if x > 0.0 { g } else { 0.0 });
                add_grad(grads, *a, ga);
            }
            Op::Exp(a) => {
                let ga = elementwise(adjoint, out_val, |g, y| g * y);
                add_grad(grads, *a, ga);
            }
            Op::Min(a, b) => {
                let ta = self.value(*a);
                let tb = self.value(*b);
                let mut ga = vec![0.0; adjoint.numel()];
                let mut gb = vec![0.0; adjoint.numel()];
                for i in 0..adjoint.numel() {
                    if ta.data()[i] <= tb.data()[i] {
                        ga[i] = adjoint.data()[i];
                    } else {
                        gb[i] = adjoint.data()[i];
                    }
                }
                add_grad(grads, *a, Tensor::from_parts(adjoint.shape().to_vec(), ga));
                add_grad(grads, *b, Tensor::from_parts(adjoint.shape().to_vec(), gb));
            }
            Op::Clamp(a, lo, hi) => {
                let ga = elementwise(adjoint, self.value(*a), |g, x| {
                    if x > *lo && x < *hi {
                        g
                    } else {
                        0.0
                    }
                });
                add_grad(grads, *a, ga);
            }
            Op::SoftmaxRows(a) => {
                // dx = y ⊙ (g − ⟨g, y⟩_row)
                let y = out_val;
                let (m, n) = y.dims2()?;
                let mut gx = vec![0.0; m * n];
                for i in 0..m {
                    let yr = &y.data()[i * n..(i + 1) * n];
                    let gr = &adjoint.data()[i * n..(i + 1) * n];
                    let dot = tensor::dot(gr, yr);
                    for j in 0..n {
                        gx[i * n + j] = yr[j] * (gr[j] - dot);
                    }
                }
                add_grad(grads, *a, Tensor::from_parts(y.shape().to_vec(), gx));
            }
            Op::LogSoftmaxRows(a) => {
                // dx = g − softmax(x) · Σ_row g
                let y = out_val; // log-probs
                let (m, n) = y.dims2()?;
                let mut gx = vec![0.0; m * n];
                for i in 0..m {
                    let yr = &y.data()[i * n..(i + 1) * n];
                    let gr = &adjoint.data()[i * n..(i + 1) * n];
                    let gsum: f64 = gr.iter().sum();
                    for j in 0..n {
                        gx[i * n + j] = gr[j] - yr[j].exp() * gsum;
                    }
                }
                add_grad(grads, *a, Tensor::from_parts(y.shape().to_vec(), gx));
            }
            Op::RmsNormRows { x, gamma, eps } => {
                let tx = self.value(*x);
                let tg = self.value(*gamma);
                let (m, n) = tx.dims2()?;
                let mut gx = vec![0.0; m * n];
                let mut gg = vec![0.0; n];
                for i in 0..m {
                    let xr = &tx.data()[i * n..(i + 1) * n];
                    let gr = &adjoint.data()[i * n..(i + 1) * n];
                    let s = tensor::rms_statistic(xr, *eps);
                    // ⟨g ⊙ γ, x⟩ drives the statistic term.
                    let mut dot = 0.0;
                    for j in 0..n {
                        dot += gr[j] * tg.data()[j] * xr[j];
                    }
                    let s3n = s * s * s * n as f64;
                    for j in 0..n {
                        gx[i * n + j] = gr[j] * tg.data()[j] / s - xr[j] * dot / s3n;
                        gg[j] += gr[j] * xr[j] / s;
                    }
                }
                add_grad(grads, *x, Tensor::from_parts(tx.shape().to_vec(), gx));
                add_grad(grads, *gamma, Tensor::from_parts(tg.shape().to_vec(), gg));
            }
            Op::ConcatRows(a, b) => {
                let (ra, ca) = self.value(*a).dims2()?;
                let (rb, _) = self.value(*b).dims2()?;
                let ga = Tensor::from_parts(vec![ra, ca], adjoint.data()[..ra * ca].to_vec());
                let gb = Tensor::from_parts(vec![rb, ca], adjoint.data()[ra * ca..].to_vec());
                add_grad(grads, *a, ga);
                add_grad(grads, *b, gb);
            }
            Op::SliceRows { x, start, end: _ } => {
                let tx = self.value(*x);
                let (r, c) = tx.dims2()?;
                let mut gx = vec![0.0; r * c];
                let block = adjoint.data();
                gx[start * c..start * c + block.len()].copy_from_slice(block);
                add_grad(grads, *x, Tensor::from_parts(tx.shape().to_vec(), gx));
            }
            Op::GatherRows { table, ids } => {
                let tt = self.value(*table);
                let (r, c) = tt.dims2()?;
                let mut gt = vec![0.0; r * c];
                for (k, &id) in ids.iter().enumerate() {
                    let src = &adjoint.data()[k * c..(k + 1) * c];
                    let dst = &mut gt[id * c..(id + 1) * c];
                    for j in 0..c {
                        dst[j] += src[j];
                    }
                }
                add_grad(grads, *table, Tensor::from_parts(tt.shape().to_vec(), gt));
            }
            Op::GatherEntries { x, coords } => {
                let tx = self.value(*x);
                let (r, c) = tx.dims2()?;
                let mut gx = vec![0.0; r * c];
                for (k, &(i, j)) in coords.iter().enumerate() {
                    gx[i * c + j] += adjoint.data()[k];
                }
                add_grad(grads, *x, Tensor::from_parts(tx.shape().to_vec(), gx));
            }
            Op::Sum(a) => {
                let ta = self.value(*a);
                let g = adjoint.item();
                add_grad(grads, *a, Tensor::from_parts(ta.shape().to_vec(), vec![g; ta.numel()]));
            }
            Op::Mean(a) => {
                let ta = self.value(*a);
                let g = adjoint.item() / ta.numel() as f64;
                add_grad(grads, *a, Tensor::from_parts(ta.shape().to_vec(), vec![g; ta.numel()]));
            }
        }
        Ok(())
    }
}

fn add_grad(grads: &mut [Option<Tensor>], id: NodeId, g: Tensor) {
    match &mut grads[id.0] {
        Some(acc) => {
            debug_assert_eq!(acc.shape(), g.shape());
            let dst = acc.data_mut();
            for (d, s) in dst.iter_mut().zip(g.data()) {
                *d += s;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

fn elementwise(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    debug_assert_eq!(a.numel(), b.numel());
    let data = a.data().iter().zip(b.data()).map(|(x, y)| f(*x, *y)).collect();
    Tensor::from_parts(a.shape().to_vec(), data)
}
