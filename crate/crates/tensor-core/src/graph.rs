use crate::error::{Result, TensorError};
use crate::tensor::{lane_offsets, TensorData};

pub type NodeId = usize;

/// Recorded operation. Node ids always point at earlier nodes, so execution
/// order is a topological order and backward is a single reverse sweep.
#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    MatMul(NodeId, NodeId),
    Relu(NodeId),
    Tanh(NodeId),
    Sigmoid(NodeId),
    Exp(NodeId),
    Log(NodeId),
    Scale(NodeId, f64),
    // The constant is kept for Debug output; the gradient ignores it.
    AddScalar(NodeId, #[allow(dead_code)] f64),
    Sum(NodeId),
    Mean(NodeId),
    Max(NodeId, usize),
    SumAxis(NodeId, usize),
    Concat(Vec<NodeId>),
    Slice {
        input: NodeId,
        axis: usize,
        start: usize,
        end: usize,
    },
    Reshape(NodeId),
    Transpose(NodeId),
    GatherRows(NodeId, Vec<usize>),
    NeighborMean {
        input: NodeId,
        h: usize,
        w: usize,
    },
    MeanGroups(NodeId, usize),
    L2Normalize {
        input: NodeId,
        axis: usize,
        eps: f64,
    },
    LogSumExp(NodeId, usize),
    Softmax(NodeId, usize),
}

struct Node {
    value: TensorData,
    requires_grad: bool,
    op: Op,
}

/// Reverse-mode autodiff tape. Single-threaded; distinct graphs are
/// independent and may live on distinct threads.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

/// Generic op selector mirroring the core op set.
#[derive(Clone, Debug)]
pub enum OpKind {
    Add,
    Sub,
    Mul,
    MatMul,
    Relu,
    Tanh,
    Sigmoid,
    Exp,
    Log,
    Sum,
    Mean,
    Max,
    Concat,
    Slice { axis: usize, start: usize, end: usize },
    Reshape { shape: Vec<usize> },
    Transpose,
}

fn ensure_finite(op: &'static str, t: &TensorData) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(TensorError::NonFinite { op })
    }
}

/// True when `rhs` broadcasts onto `lhs` by trailing-dimension expansion,
/// i.e. `rhs`'s shape is a suffix of `lhs`'s shape (a scalar always does).
fn suffix_broadcast(lhs: &[usize], rhs: &[usize]) -> bool {
    rhs.len() <= lhs.len() && lhs[lhs.len() - rhs.len()..] == *rhs
}

// out[m,n] += a[m,k] * b[k,n]
fn matmul_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    // Four k-steps per pass give the compiler independent FMA chains while
    // the output row stays cache-resident.
    let k4 = k - k % 4;
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        let mut kk = 0;
        while kk < k4 {
            let (a0, a1, a2, a3) = (arow[kk], arow[kk + 1], arow[kk + 2], arow[kk + 3]);
            let b0 = &b[kk * n..(kk + 1) * n];
            let b1 = &b[(kk + 1) * n..(kk + 2) * n];
            let b2 = &b[(kk + 2) * n..(kk + 3) * n];
            let b3 = &b[(kk + 3) * n..(kk + 4) * n];
            for j in 0..n {
                orow[j] += a0 * b0[j] + a1 * b1[j] + a2 * b2[j] + a3 * b3[j];
            }
            kk += 4;
        }
        while kk < k {
            let av = arow[kk];
            let brow = &b[kk * n..(kk + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
            kk += 1;
        }
    }
}

// out[m,n] += a[m,k] * b[n,k]^T
fn matmul_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    // Row-dot ordering serializes on one accumulator; transposing the
    // (small) right operand and streaming through matmul_nn is much faster.
    let mut bt = vec![0.0; k * n];
    for j in 0..n {
        for kk in 0..k {
            bt[kk * n + j] = b[j * k + kk];
        }
    }
    matmul_nn(a, &bt, m, k, n, out);
}

// out[k,n] += a[m,k]^T * b[m,n]
fn matmul_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (kk, &av) in arow.iter().enumerate() {
            let orow = &mut out[kk * n..(kk + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
}

fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: TensorData, requires_grad: bool, op: Op) -> NodeId {
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        self.grads.push(None);
        self.nodes.len() - 1
    }

    fn check(&self, id: NodeId) -> Result<()> {
        if id < self.nodes.len() {
            Ok(())
        } else {
            Err(TensorError::DetachedNode(id))
        }
    }

    fn val(&self, id: NodeId) -> &TensorData {
        &self.nodes[id].value
    }

    fn rg(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|&i| self.nodes[i].requires_grad)
    }

    pub fn value(&self, id: NodeId) -> &TensorData {
        &self.nodes[id].value
    }

    /// Gradient buffer populated by `backward`, if any.
    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.grads.get(id).and_then(|g| g.as_deref())
    }

    pub fn reset_grads(&mut self) {
        for g in &mut self.grads {
            *g = None;
        }
    }

    pub fn leaf(&mut self, value: TensorData, requires_grad: bool) -> Result<NodeId> {
        ensure_finite("leaf", &value)?;
        Ok(self.push(value, requires_grad, Op::Leaf))
    }

    pub fn constant(&mut self, value: TensorData) -> Result<NodeId> {
        self.leaf(value, false)
    }

    pub fn scalar(&mut self, v: f64) -> Result<NodeId> {
        self.constant(TensorData::scalar(v))
    }

    fn binary_broadcast(
        &mut self,
        name: &'static str,
        a: NodeId,
        b: NodeId,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<NodeId> {
        self.check(a)?;
        self.check(b)?;
        ensure_finite(name, self.val(a))?;
        ensure_finite(name, self.val(b))?;
        let (la, lb) = (self.val(a), self.val(b));
        if !suffix_broadcast(la.shape(), lb.shape()) {
            return Err(TensorError::ShapeMismatch {
                op: name,
                lhs: la.shape().to_vec(),
                rhs: lb.shape().to_vec(),
            });
        }
        let bn = lb.numel();
        let mut out = Vec::with_capacity(la.numel());
        let (ad, bd) = (la.data(), lb.data());
        for chunk in ad.chunks(bn) {
            for (&av, &bv) in chunk.iter().zip(bd) {
                out.push(f(av, bv));
            }
        }
        let value = TensorData::new(la.shape().to_vec(), out)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, rg, op))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_broadcast("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_broadcast("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_broadcast("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check(a)?;
        self.check(b)?;
        ensure_finite("matmul", self.val(a))?;
        ensure_finite("matmul", self.val(b))?;
        let (ta, tb) = (self.val(a), self.val(b));
        if ta.rank() != 2 || tb.rank() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let mut out = vec![0.0; m * n];
        matmul_nn(ta.data(), tb.data(), m, k, n, &mut out);
        let value = TensorData::new(vec![m, n], out)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, rg, Op::MatMul(a, b)))
    }

    fn unary(
        &mut self,
        name: &'static str,
        x: NodeId,
        f: impl Fn(f64) -> f64,
        op: Op,
        check_output: bool,
    ) -> Result<NodeId> {
        self.check(x)?;
        ensure_finite(name, self.val(x))?;
        let t = self.val(x);
        let out: Vec<f64> = t.data().iter().map(|&v| f(v)).collect();
        let value = TensorData::new(t.shape().to_vec(), out)?;
        if check_output {
            ensure_finite(name, &value)?;
        }
        let rg = self.rg(&[x]);
        Ok(self.push(value, rg, op))
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary("relu", x, |v| v.max(0.0), Op::Relu(x), false)
    }

    pub fn tanh(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary("tanh", x, |v| v.tanh(), Op::Tanh(x), false)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary("sigmoid", x, stable_sigmoid, Op::Sigmoid(x), false)
    }

    pub fn exp(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary("exp", x, |v| v.exp(), Op::Exp(x), true)
    }

    pub fn log(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary("log", x, |v| v.ln(), Op::Log(x), true)
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> Result<NodeId> {
        self.unary("scale", x, |v| v * c, Op::Scale(x, c), false)
    }

    pub fn add_scalar(&mut self, x: NodeId, c: f64) -> Result<NodeId> {
        self.unary("add_scalar", x, |v| v + c, Op::AddScalar(x, c), false)
    }

    pub fn neg(&mut self, x: NodeId) -> Result<NodeId> {
        self.scale(x, -1.0)
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        self.check(x)?;
        ensure_finite("sum", self.val(x))?;
        let s: f64 = self.val(x).data().iter().sum();
        let rg = self.rg(&[x]);
        Ok(self.push(TensorData::scalar(s), rg, Op::Sum(x)))
    }

    pub fn mean(&mut self, x: NodeId) -> Result<NodeId> {
        self.check(x)?;
        ensure_finite("mean", self.val(x))?;
        let t = self.val(x);
        let s: f64 = t.data().iter().sum::<f64>() / t.numel() as f64;
        let rg = self.rg(&[x]);
        Ok(self.push(TensorData::scalar(s), rg, Op::Mean(x)))
    }

    /// Global max; gradient routes to the lowest-index argmax.
    pub fn max(&mut self, x: NodeId) -> Result<NodeId> {
        self.check(x)?;
        ensure_finite("max", self.val(x))?;
        let t = self.val(x);
        let mut best = 0usize;
        for (i, &v) in t.data().iter().enumerate() {
            if v > t.data()[best] {
                best = i;
            }
        }
        let v = t.data()[best];
        let rg = self.rg(&[x]);
        Ok(self.push(TensorData::scalar(v), rg, Op::Max(x, best)))
    }

    pub fn sum_axis(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        self.check(x)?;
        ensure_finite("sum_axis", self.val(x))?;
        let t = self.val(x);
        if axis >= t.rank() {
            return Err(TensorError::InvalidAxis {
                op: "sum_axis",
                axis,
                rank: t.rank(),
            });
        }
        let (starts, stride, len) = lane_offsets(t.shape(), axis);
        let mut out = Vec::with_capacity(starts.len());
        for &s in &starts {
            let mut acc = 0.0;
            for i in 0..len {
                acc += t.data()[s + i * stride];
            }
            out.push(acc);
        }
        let mut shape: Vec<usize> = t.shape().to_vec();
        shape.remove(axis);
        let value = TensorData::new(shape, out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, rg, Op::SumAxis(x, axis)))
    }

    /// Concatenate along axis 0; shapes must agree on all other axes.
    pub fn concat(&mut self, inputs: &[NodeId]) -> Result<NodeId> {
        if inputs.is_empty() {
            return Err(TensorError::Invalid {
                op: "concat",
                msg: "empty input list".into(),
            });
        }
        for &i in inputs {
            self.check(i)?;
            ensure_finite("concat", self.val(i))?;
        }
        let first = self.val(inputs[0]).shape().to_vec();
        let mut rows = 0usize;
        for &i in inputs {
            let s = self.val(i).shape();
            if s.is_empty() || s[1..] != first[1..] {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: first,
                    rhs: s.to_vec(),
                });
            }
            rows += s[0];
        }
        let mut data = Vec::new();
        for &i in inputs {
            data.extend_from_slice(self.val(i).data());
        }
        let mut shape = first;
        shape[0] = rows;
        let value = TensorData::new(shape, data)?;
        let rg = self.rg(inputs);
        Ok(self.push(value, rg, Op::Concat(inputs.to_vec())))
    }

    pub fn slice(&mut self, x: NodeId, axis: usize, start: usize, end: usize) -> Result<NodeId> {
        self.check(x)?;
        ensure_finite("slice", self.val(x))?;
        let t = self.val(x);
        if axis >= t.rank() {
            return Err(TensorError::InvalidAxis {
                op: "slice",
                axis,
                rank: t.rank(),
            });
        }
        if start >= end || end > t.shape()[axis] {
            return Err(TensorError::Invalid {
                op: "slice",
                msg: format!(
                    "range {}..{} invalid for extent {}",
                    start,
                    end,
                    t.shape()[axis]
                ),
            });
        }
        let inner: usize = t.shape()[axis + 1..].iter().product();
        let outer: usize = t.shape()[..axis].iter().product();
        let len = t.shape()[axis];
        let mut data = Vec::with_capacity(outer * (end - start) * inner);
        for o in 0..outer {
            let base = o * len * inner;
            data.extend_from_slice(&t.data()[base + start * inner..base + end * inner]);
        }
        let mut shape = t.shape().to_vec();
        shape[axis] = end - start;
        let value = TensorData::new(shape, data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(
            value,
            rg,
            Op::Slice {
                input: x,
                axis,
                start,
                end,
            },
        ))
    }

    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        self.check(x)?;
        let t = self.val(x);
        let numel: usize = shape.iter().product();
        if numel != t.numel() || shape.iter().any(|&e| e == 0) {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                lhs: t.shape().to_vec(),
                rhs: shape,
            });
        }
        let value = TensorData::new(shape, t.data().to_vec())?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, rg, Op::Reshape(x)))
    }

    /// 2-D transpose as a copy.
    pub fn transpose(&mut self, x: NodeId) -> Result<NodeId> {
        self.check(x)?;
        let t = self.val(x);
        if t.rank() != 2 {
            return Err(TensorError::InvalidShape {
                op: "transpose",
                shape: t.shape().to_vec(),
                reason: "rank 2 required".into(),
            });
        }
        let (m, n) = (t.shape()[0], t.shape()[1]);
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = t.data()[i * n + j];
            }
        }
        let value = TensorData::new(vec![n, m], data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, rg, Op::Transpose(x)))
    }

    /// Select rows of a 2-D tensor; indices may repeat.
    pub fn gather_rows(&mut self, x: NodeId, indices: &[usize]) -> Result<NodeId> {
        self.check(x)?;
        let t = self.val(x);
        if t.rank() != 2 {
            return Err(TensorError::InvalidShape {
                op: "gather_rows",
                shape: t.shape().to_vec(),
                reason: "rank 2 required".into(),
            });
        }
        let (rows, cols) = (t.shape()[0], t.shape()[1]);
        if indices.is_empty() {
            return Err(TensorError::Invalid {
                op: "gather_rows",
                msg: "empty index list".into(),
            });
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(TensorError::Invalid {
                op: "gather_rows",
                msg: format!("row index {} out of range {}", bad, rows),
            });
        }
        let mut data = Vec::with_capacity(indices.len() * cols);
        for &i in indices {
            data.extend_from_slice(&t.data()[i * cols..(i + 1) * cols]);
        }
        let value = TensorData::new(vec![indices.len(), cols], data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, rg, Op::GatherRows(x, indices.to_vec())))
    }

    /// Per-frame 3x3 neighborhood mean over a stack of h x w grids stored as
    /// `[frames*h*w, c]`. Boundary cells average over their in-bounds
    /// neighbors only.
    pub fn neighbor_mean(&mut self, x: NodeId, h: usize, w: usize) -> Result<NodeId> {
        self.check(x)?;
        let t = self.val(x);
        if t.rank() != 2 || t.shape()[0] % (h * w) != 0 {
            return Err(TensorError::InvalidShape {
                op: "neighbor_mean",
                shape: t.shape().to_vec(),
                reason: format!("rows must be a multiple of {}x{}", h, w),
            });
        }
        let c = t.shape()[1];
        let frames = t.shape()[0] / (h * w);
        let mut data = vec![0.0; t.numel()];
        let src = t.data();
        for f in 0..frames {
            let base = f * h * w;
            for y in 0..h {
                for x0 in 0..w {
                    let orow = (base + y * w + x0) * c;
                    let mut count = 0.0;
                    for dy in -1i64..=1 {
                        for dx in -1i64..=1 {
                            let (ny, nx) = (y as i64 + dy, x0 as i64 + dx);
                            if ny < 0 || nx < 0 || ny >= h as i64 || nx >= w as i64 {
                                continue;
                            }
                            count += 1.0;
                            let irow = (base + ny as usize * w + nx as usize) * c;
                            for ch in 0..c {
                                data[orow + ch] += src[irow + ch];
                            }
                        }
                    }
                    for ch in 0..c {
                        data[orow + ch] /= count;
                    }
                }
            }
        }
        let value = TensorData::new(t.shape().to_vec(), data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, rg, Op::NeighborMean { input: x, h, w }))
    }

    /// Mean over consecutive groups of `k` rows: `[g*k, c]` -> `[g, c]`.
    pub fn mean_groups(&mut self, x: NodeId, k: usize) -> Result<NodeId> {
        self.check(x)?;
        let t = self.val(x);
        if t.rank() != 2 || k == 0 || t.shape()[0] % k != 0 {
            return Err(TensorError::InvalidShape {
                op: "mean_groups",
                shape: t.shape().to_vec(),
                reason: format!("rows must be a positive multiple of {}", k),
            });
        }
        let (rows, cols) = (t.shape()[0], t.shape()[1]);
        let groups = rows / k;
        let mut data = vec![0.0; groups * cols];
        for g in 0..groups {
            for r in 0..k {
                let irow = ((g * k) + r) * cols;
                for j in 0..cols {
                    data[g * cols + j] += t.data()[irow + j];
                }
            }
            for j in 0..cols {
                data[g * cols + j] /= k as f64;
            }
        }
        let value = TensorData::new(vec![groups, cols], data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, rg, Op::MeanGroups(x, k)))
    }

    /// L2-normalize each lane along `axis`; lanes with norm below `eps` are
    /// scaled by `1/eps` instead.
    pub fn l2_normalize(&mut self, x: NodeId, axis: usize, eps: f64) -> Result<NodeId> {
        self.check(x)?;
        ensure_finite("l2_normalize", self.val(x))?;
        let t = self.val(x);
        if axis >= t.rank() {
            return Err(TensorError::InvalidAxis {
                op: "l2_normalize",
                axis,
                rank: t.rank(),
            });
        }
        if eps <= 0.0 {
            return Err(TensorError::Invalid {
                op: "l2_normalize",
                msg: "epsilon must be positive".into(),
            });
        }
        let (starts, stride, len) = lane_offsets(t.shape(), axis);
        let mut data = t.data().to_vec();
        for &s in &starts {
            let mut sq = 0.0;
            for i in 0..len {
                let v = data[s + i * stride];
                sq += v * v;
            }
            let denom = sq.sqrt().max(eps);
            for i in 0..len {
                data[s + i * stride] /= denom;
            }
        }
        let value = TensorData::new(t.shape().to_vec(), data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(
            value,
            rg,
            Op::L2Normalize {
                input: x,
                axis,
                eps,
            },
        ))
    }

    /// Numerically stable log-sum-exp along `axis` (axis is removed).
    pub fn logsumexp(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        self.check(x)?;
        ensure_finite("logsumexp", self.val(x))?;
        let t = self.val(x);
        if axis >= t.rank() {
            return Err(TensorError::InvalidAxis {
                op: "logsumexp",
                axis,
                rank: t.rank(),
            });
        }
        let (starts, stride, len) = lane_offsets(t.shape(), axis);
        let mut out = Vec::with_capacity(starts.len());
        for &s in &starts {
            let mut m = f64::NEG_INFINITY;
            for i in 0..len {
                m = m.max(t.data()[s + i * stride]);
            }
            let mut acc = 0.0;
            for i in 0..len {
                acc += (t.data()[s + i * stride] - m).exp();
            }
            out.push(m + acc.ln());
        }
        let mut shape = t.shape().to_vec();
        shape.remove(axis);
        let value = TensorData::new(shape, out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, rg, Op::LogSumExp(x, axis)))
    }

    /// Numerically stable softmax along `axis` (max subtraction).
    pub fn softmax(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        self.check(x)?;
        ensure_finite("softmax", self.val(x))?;
        let t = self.val(x);
        if axis >= t.rank() {
            return Err(TensorError::InvalidAxis {
                op: "softmax",
                axis,
                rank: t.rank(),
            });
        }
        let (starts, stride, len) = lane_offsets(t.shape(), axis);
        let mut data = t.data().to_vec();
        for &s in &starts {
            let mut m = f64::NEG_INFINITY;
            for i in 0..len {
                m = m.max(data[s + i * stride]);
            }
            let mut acc = 0.0;
            for i in 0..len {
                let e = (data[s + i * stride] - m).exp();
                data[s + i * stride] = e;
                acc += e;
            }
            for i in 0..len {
                data[s + i * stride] /= acc;
            }
        }
        let value = TensorData::new(t.shape().to_vec(), data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, rg, Op::Softmax(x, axis)))
    }

    /// Dispatch over the generic op set; used by the gradient-check suites.
    pub fn op_apply(&mut self, kind: &OpKind, inputs: &[NodeId]) -> Result<NodeId> {
        let need = |n: usize| -> Result<()> {
            if inputs.len() == n {
                Ok(())
            } else {
                Err(TensorError::Invalid {
                    op: "op_apply",
                    msg: format!("expected {} inputs, got {}", n, inputs.len()),
                })
            }
        };
        match kind {
            OpKind::Add => {
                need(2)?;
                self.add(inputs[0], inputs[1])
            }
            OpKind::Sub => {
                need(2)?;
                self.sub(inputs[0], inputs[1])
            }
            OpKind::Mul => {
                need(2)?;
                self.mul(inputs[0], inputs[1])
            }
            OpKind::MatMul => {
                need(2)?;
                self.matmul(inputs[0], inputs[1])
            }
            OpKind::Relu => {
                need(1)?;
                self.relu(inputs[0])
            }
            OpKind::Tanh => {
                need(1)?;
                self.tanh(inputs[0])
            }
            OpKind::Sigmoid => {
                need(1)?;
                self.sigmoid(inputs[0])
            }
            OpKind::Exp => {
                need(1)?;
                self.exp(inputs[0])
            }
            OpKind::Log => {
                need(1)?;
                self.log(inputs[0])
            }
            OpKind::Sum => {
                need(1)?;
                self.sum(inputs[0])
            }
            OpKind::Mean => {
                need(1)?;
                self.mean(inputs[0])
            }
            OpKind::Max => {
                need(1)?;
                self.max(inputs[0])
            }
            OpKind::Concat => self.concat(inputs),
            OpKind::Slice { axis, start, end } => {
                need(1)?;
                self.slice(inputs[0], *axis, *start, *end)
            }
            OpKind::Reshape { shape } => {
                need(1)?;
                self.reshape(inputs[0], shape.clone())
            }
            OpKind::Transpose => {
                need(1)?;
                self.transpose(inputs[0])
            }
        }
    }

    /// Reverse sweep from a scalar loss; accumulates d loss / d node into the
    /// gradient buffer of every node that requires grad.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        self.check(loss)?;
        if self.nodes[loss].value.numel() != 1 {
            return Err(TensorError::NonScalarLoss {
                shape: self.nodes[loss].value.shape().to_vec(),
            });
        }
        match &mut self.grads[loss] {
            Some(g) => g[0] += 1.0,
            slot => *slot = Some(vec![1.0]),
        }
        let nodes = &self.nodes;
        let grads = &mut self.grads;
        let acc = |grads: &mut Vec<Option<Vec<f64>>>, id: NodeId, numel: usize| {
            if grads[id].is_none() {
                grads[id] = Some(vec![0.0; numel]);
            }
        };
        for i in (0..nodes.len()).rev() {
            if !nodes[i].requires_grad {
                continue;
            }
            // Inputs always precede their consumers, so grads[i] is final
            // here; move it out instead of cloning and restore it after.
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            let rg = |id: NodeId| nodes[id].requires_grad;
            match &nodes[i].op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    if rg(*a) {
                        acc(grads, *a, nodes[*a].value.numel());
                        let ga = grads[*a].as_mut().unwrap();
                        for (j, &v) in g.iter().enumerate() {
                            ga[j] += v;
                        }
                    }
                    if rg(*b) {
                        let bn = nodes[*b].value.numel();
                        acc(grads, *b, bn);
                        let gb = grads[*b].as_mut().unwrap();
                        for chunk in g.chunks(bn) {
                            for (gv, &v) in gb.iter_mut().zip(chunk) {
                                *gv += v;
                            }
                        }
                    }
                }
                Op::Sub(a, b) => {
                    if rg(*a) {
                        acc(grads, *a, nodes[*a].value.numel());
                        let ga = grads[*a].as_mut().unwrap();
                        for (j, &v) in g.iter().enumerate() {
                            ga[j] += v;
                        }
                    }
                    if rg(*b) {
                        let bn = nodes[*b].value.numel();
                        acc(grads, *b, bn);
                        let gb = grads[*b].as_mut().unwrap();
                        for chunk in g.chunks(bn) {
                            for (gv, &v) in gb.iter_mut().zip(chunk) {
                                *gv -= v;
                            }
                        }
                    }
                }
                Op::Mul(a, b) => {
                    let bn = nodes[*b].value.numel();
                    if rg(*a) {
                        acc(grads, *a, nodes[*a].value.numel());
                        let bd = nodes[*b].value.data();
                        let ga = grads[*a].as_mut().unwrap();
                        for (gchunk, achunk) in g.chunks(bn).zip(ga.chunks_mut(bn)) {
                            for ((gv, &v), &bv) in achunk.iter_mut().zip(gchunk).zip(bd) {
                                *gv += v * bv;
                            }
                        }
                    }
                    if rg(*b) {
                        acc(grads, *b, bn);
                        let ad = nodes[*a].value.data();
                        let gb = grads[*b].as_mut().unwrap();
                        for (gchunk, achunk) in g.chunks(bn).zip(ad.chunks(bn)) {
                            for ((gv, &v), &av) in gb.iter_mut().zip(gchunk).zip(achunk) {
                                *gv += v * av;
                            }
                        }
                    }
                }
                Op::MatMul(a, b) => {
                    let (m, k) = (nodes[*a].value.shape()[0], nodes[*a].value.shape()[1]);
                    let n = nodes[*b].value.shape()[1];
                    if rg(*a) {
                        acc(grads, *a, m * k);
                        let bd = nodes[*b].value.data();
                        matmul_nt(&g, bd, m, n, k, grads[*a].as_mut().unwrap());
                    }
                    if rg(*b) {
                        acc(grads, *b, k * n);
                        let ad = nodes[*a].value.data();
                        matmul_tn(ad, &g, m, k, n, grads[*b].as_mut().unwrap());
                    }
                }
                Op::Relu(x) => {
                    if rg(*x) {
                        acc(grads, *x, nodes[*x].value.numel());
                        let xd = nodes[*x].value.data();
                        let gx = grads[*x].as_mut().unwrap();
                        for (j, &v) in g.iter().enumerate() {
                            if xd[j] > 0.0 {
                                gx[j] += v;
                            }
                        }
                    }
                }
                Op::Tanh(x) => {
                    if rg(*x) {
                        acc(grads, *x, nodes[*x].value.numel());
                        let yd = nodes[i].value.data();
                        let gx = grads[*x].as_mut().unwrap();
                        for (j, &v) in g.iter().enumerate() {
                            gx[j] += v * (1.0 - yd[j] * yd[j]);
                        }
                    }
                }
                Op::Sigmoid(x) => {
                    if rg(*x) {
                        acc(grads, *x, nodes[*x].value.numel());
                        let yd = nodes[i].value.data();
                        let gx = grads[*x].as_mut().unwrap();
                        for (j, &v) in g.iter().enumerate() {
                            gx[j] += v * yd[j] * (1.0 - yd[j]);
                        }
                    }
                }
                Op::Exp(x) => {
                    if rg(*x) {
                        acc(grads, *x, nodes[*x].value.numel());
                        let yd = nodes[i].value.data();
                        let gx = grads[*x].as_mut().unwrap();
                        for (j, &v) in g.iter().enumerate() {
                            gx[j] += v * yd[j];
                        }
                    }
                }
                Op::Log(x) => {
                    if rg(*x) {
                        acc(grads, *x, nodes[*x].value.numel());
                        let xd = nodes[*x].value.data();
                        let gx = grads[*x].as_mut().unwrap();
                        for (j, &v) in g.iter().enumerate() {
                            gx[j] += v / xd[j];
                        }
                    }
                }
                Op::Scale(x, c) => {
                    if rg(*x) {
                        acc(grads, *x, nodes[*x].value.numel());
                        let gx = grads[*x].as_mut().unwrap();
                        for (j, &v) in g.iter().enumerate() {
                            gx[j] += v * c;
                        }
                    }
                }
                Op::AddScalar(x, _) => {
                    if rg(*x) {
                        acc(grads, *x, nodes[*x].value.numel());
                        let gx = grads[*x].as_mut().unwrap();
                        for (j, &v) in g.iter().enumerate() {
                            gx[j] += v;
                        }
                    }
                }
                Op::Sum(x) => {
                    if rg(*x) {
                        acc(grads, *x, nodes[*x].value.numel());
                        let gx = grads[*x].as_mut().unwrap();
                        for v in gx.iter_mut() {
                            *v += g[0];
                        }
                    }
                }
                Op::Mean(x) => {
                    if rg(*x) {
                        let n = nodes[*x].value.numel();
                        acc(grads, *x, n);
                        let gx = grads[*x].as_mut().unwrap();
                        let s = g[0] / n as f64;
                        for v in gx.iter_mut() {
                            *v += s;
                        }
                    }
                }
                Op::Max(x, argmax) => {
                    if rg(*x) {
                        acc(grads, *x, nodes[*x].value.numel());
                        grads[*x].as_mut().unwrap()[*argmax] += g[0];
                    }
                }
                Op::SumAxis(x, axis) => {
                    if rg(*x) {
                        let t = &nodes[*x].value;
                        acc(grads, *x, t.numel());
                        let (starts, stride, len) = lane_offsets(t.shape(), *axis);
                        let gx = grads[*x].as_mut().unwrap();
                        for (li, &s) in starts.iter().enumerate() {
                            for j in 0..len {
                                gx[s + j * stride] += g[li];
                            }
                        }
                    }
                }
                Op::Concat(parts) => {
                    let mut off = 0usize;
                    for &p in parts {
                        let n = nodes[p].value.numel();
                        if rg(p) {
                            acc(grads, p, n);
                            let gp = grads[p].as_mut().unwrap();
                            for j in 0..n {
                                gp[j] += g[off + j];
                            }
                        }
                        off += n;
                    }
                }
                Op::Slice {
                    input,
                    axis,
                    start,
                    end,
                } => {
                    if rg(*input) {
                        let t = &nodes[*input].value;
                        acc(grads, *input, t.numel());
                        let inner: usize = t.shape()[*axis + 1..].iter().product();
                        let outer: usize = t.shape()[..*axis].iter().product();
                        let len = t.shape()[*axis];
                        let span = (end - start) * inner;
                        let gx = grads[*input].as_mut().unwrap();
                        for o in 0..outer {
                            let dst = o * len * inner + start * inner;
                            let src = o * span;
                            for j in 0..span {
                                gx[dst + j] += g[src + j];
                            }
                        }
                    }
                }
                Op::Reshape(x) => {
                    if rg(*x) {
                        acc(grads, *x, nodes[*x].value.numel());
                        let gx = grads[*x].as_mut().unwrap();
                        for (j, &v) in g.iter().enumerate() {
                            gx[j] += v;
                        }
                    }
                }
                Op::Transpose(x) => {
                    if rg(*x) {
                        let t = &nodes[*x].value;
                        let (m, n) = (t.shape()[0], t.shape()[1]);
                        acc(grads, *x, m * n);
                        let gx = grads[*x].as_mut().unwrap();
                        for a in 0..n {
                            for b in 0..m {
                                gx[b * n + a] += g[a * m + b];
                            }
                        }
                    }
                }
                Op::GatherRows(x, indices) => {
                    if rg(*x) {
                        let t = &nodes[*x].value;
                        let cols = t.shape()[1];
                        acc(grads, *x, t.numel());
                        let gx = grads[*x].as_mut().unwrap();
                        for (r, &src) in indices.iter().enumerate() {
                            for j in 0..cols {
                                gx[src * cols + j] += g[r * cols + j];
                            }
                        }
                    }
                }
                Op::NeighborMean { input, h, w } => {
                    if rg(*input) {
                        let t = &nodes[*input].value;
                        let c = t.shape()[1];
                        let frames = t.shape()[0] / (h * w);
                        acc(grads, *input, t.numel());
                        let gx = grads[*input].as_mut().unwrap();
                        for f in 0..frames {
                            let base = f * h * w;
                            for y in 0..*h {
                                for x0 in 0..*w {
                                    let orow = (base + y * w + x0) * c;
                                    let mut count = 0.0;
                                    for dy in -1i64..=1 {
                                        for dx in -1i64..=1 {
                                            let (ny, nx) = (y as i64 + dy, x0 as i64 + dx);
                                            if ny >= 0
                                                && nx >= 0
                                                && ny < *h as i64
                                                && nx < *w as i64
                                            {
                                                count += 1.0;
                                            }
                                        }
                                    }
                                    for dy in -1i64..=1 {
                                        for dx in -1i64..=1 {
                                            let (ny, nx) = (y as i64 + dy, x0 as i64 + dx);
                                            if ny < 0
                                                || nx < 0
                                                || ny >= *h as i64
                                                || nx >= *w as i64
                                            {
                                                continue;
                                            }
                                            let irow =
                                                (base + ny as usize * w + nx as usize) * c;
                                            for ch in 0..c {
                                                gx[irow + ch] += g[orow + ch] / count;
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                Op::MeanGroups(x, k) => {
                    if rg(*x) {
                        let t = &nodes[*x].value;
                        let cols = t.shape()[1];
                        let groups = t.shape()[0] / k;
                        acc(grads, *x, t.numel());
                        let gx = grads[*x].as_mut().unwrap();
                        for gi in 0..groups {
                            for r in 0..*k {
                                let irow = (gi * k + r) * cols;
                                for j in 0..cols {
                                    gx[irow + j] += g[gi * cols + j] / *k as f64;
                                }
                            }
                        }
                    }
                }
                Op::L2Normalize { input, axis, eps } => {
                    if rg(*input) {
                        let t = &nodes[*input].value;
                        let y = &nodes[i].value;
                        acc(grads, *input, t.numel());
                        let (starts, stride, len) = lane_offsets(t.shape(), *axis);
                        let gx = grads[*input].as_mut().unwrap();
                        for &s in &starts {
                            let mut sq = 0.0;
                            for j in 0..len {
                                let v = t.data()[s + j * stride];
                                sq += v * v;
                            }
                            let norm = sq.sqrt();
                            if norm > *eps {
                                let mut dot = 0.0;
                                for j in 0..len {
                                    dot += g[s + j * stride] * y.data()[s + j * stride];
                                }
                                for j in 0..len {
                                    let idx = s + j * stride;
                                    gx[idx] += (g[idx] - y.data()[idx] * dot) / norm;
                                }
                            } else {
                                for j in 0..len {
                                    let idx = s + j * stride;
                                    gx[idx] += g[idx] / eps;
                                }
                            }
                        }
                    }
                }
                Op::LogSumExp(x, axis) => {
                    if rg(*x) {
                        let t = &nodes[*x].value;
                        acc(grads, *x, t.numel());
                        let (starts, stride, len) = lane_offsets(t.shape(), *axis);
                        let gx = grads[*x].as_mut().unwrap();
                        for (li, &s) in starts.iter().enumerate() {
                            let lse = nodes[i].value.data()[li];
                            for j in 0..len {
                                let idx = s + j * stride;
                                gx[idx] += g[li] * (t.data()[idx] - lse).exp();
                            }
                        }
                    }
                }
                Op::Softmax(x, axis) => {
                    if rg(*x) {
                        let t = &nodes[*x].value;
                        let y = &nodes[i].value;
                        acc(grads, *x, t.numel());
                        let (starts, stride, len) = lane_offsets(t.shape(), *axis);
                        let gx = grads[*x].as_mut().unwrap();
                        for &s in &starts {
                            let mut dot = 0.0;
                            for j in 0..len {
                                let idx = s + j * stride;
                                dot += g[idx] * y.data()[idx];
                            }
                            for j in 0..len {
                                let idx = s + j * stride;
                                gx[idx] += y.data()[idx] * (g[idx] - dot);
                            }
                        }
                    }
                }
            }
            grads[i] = Some(g);
        }
        Ok(())
    }
}
