//! The op tape and its backward rules.

use std::collections::BTreeMap;

use super::{AutodiffError, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

/// Gradients keyed by parameter name. Parameters unreachable from the loss
/// carry explicit zero tensors.
pub type GradMap = BTreeMap<String, Tensor>;

#[derive(Debug, Clone)]
enum Op {
    Const,
    Param(String),
    /// [m,k] x [k,n] -> [m,n]
    Matmul(NodeId, NodeId),
    /// [m,k] x [n,k]^T -> [m,n]
    MatmulTb(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    /// [r,c] + bias[r] broadcast across columns
    AddRowBias(NodeId, NodeId),
    Neg(NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId),
    Relu(NodeId),
    Exp(NodeId),
    Log(NodeId),
    Sqrt(NodeId),
    Square(NodeId),
    Sigmoid(NodeId),
    Softplus(NodeId),
    SmoothL1(NodeId, f64),
    Clamp(NodeId, f64, f64),
    SoftmaxLast(NodeId),
    LogSoftmaxLast(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    Reshape(NodeId),
    /// Flat contiguous slice [start, start+len)
    Slice(NodeId, usize),
    /// Flat gather; `usize::MAX` reads as 0.0 and routes no gradient (used for
    /// zero padding in im2col).
    Gather(NodeId, Vec<usize>),
    /// Concatenation along axis 0; row-major parts are contiguous in the output.
    ConcatRows(Vec<NodeId>),
    /// Elementwise division by a scalar node.
    DivByScalar(NodeId, NodeId),
}

struct Node {
    op: Op,
    value: Tensor,
    grad: Option<Tensor>,
}

/// A define-by-run computation record. Single-threaded; rebuild per iteration.
pub struct Graph {
    nodes: Vec<Node>,
    params: Vec<NodeId>,
    backward_done: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            params: Vec::new(),
            backward_done: false,
        }
    }

    fn push(&mut self, op: Op, value: Tensor) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            op,
            value,
            grad: None,
        });
        id
    }

    /// Register a constant leaf (no gradient is reported for it, but one is
    /// still computed internally, which `grad()` exposes for tests).
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Const, value)
    }

    pub fn scalar(&mut self, value: f64) -> NodeId {
        self.constant(Tensor::scalar(value))
    }

    /// Register a named parameter leaf.
    pub fn param(&mut self, name: &str, value: Tensor) -> Result<NodeId, AutodiffError> {
        for &pid in &self.params {
            if let Op::Param(existing) = &self.nodes[pid.0].op {
                if existing == name {
                    return Err(AutodiffError::DuplicateParam(name.to_string()));
                }
            }
        }
        let id = self.push(Op::Param(name.to_string()), value);
        self.params.push(id);
        Ok(id)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Gradient of a node; populated only after `backward`.
    pub fn grad(&self, id: NodeId) -> Option<&Tensor> {
        self.nodes[id.0].grad.as_ref()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    // ── Binary ops ───────────────────────────────────────────────────

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        let (m, k) = self.value(a).as_matrix()?;
        let (k2, n) = self.value(b).as_matrix()?;
        if k != k2 {
            return Err(self.shape_err("matmul", a, b));
        }
        let mut out = vec![0.0; m * n];
        let av = self.value(a).data();
        let bv = self.value(b).data();
        for i in 0..m {
            for p in 0..k {
                let aip = av[i * k + p];
                if aip == 0.0 {
                    continue;
                }
                let brow = &bv[p * n..(p + 1) * n];
                let orow = &mut out[i * n..(i + 1) * n];
                for (o, &bb) in orow.iter_mut().zip(brow) {
                    *o += aip * bb;
                }
            }
        }
        Ok(self.push(Op::Matmul(a, b), Tensor::from_vec(vec![m, n], out)))
    }

    /// `a @ b^T` for `a: [m,k]`, `b: [n,k]`.
    pub fn matmul_tb(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        let (m, k) = self.value(a).as_matrix()?;
        let (n, k2) = self.value(b).as_matrix()?;
        if k != k2 {
            return Err(self.shape_err("matmul_tb", a, b));
        }
        let mut out = vec![0.0; m * n];
        let av = self.value(a).data();
        let bv = self.value(b).data();
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0;
                for p in 0..k {
                    acc += av[i * k + p] * bv[j * k + p];
                }
                out[i * n + j] = acc;
            }
        }
        Ok(self.push(Op::MatmulTb(a, b), Tensor::from_vec(vec![m, n], out)))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        self.zip_op("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        self.zip_op("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        self.zip_op("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        self.zip_op("div", a, b, Op::Div(a, b), |x, y| x / y)
    }

    fn zip_op(
        &mut self,
        name: &'static str,
        a: NodeId,
        b: NodeId,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<NodeId, AutodiffError> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(self.shape_err(name, a, b));
        }
        let shape = self.value(a).shape().to_vec();
        let data: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Ok(self.push(op, Tensor::from_vec(shape, data)))
    }

    /// `[r,c] + bias[r]`, the bias broadcast across columns.
    pub fn add_row_bias(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId, AutodiffError> {
        let (r, c) = self.value(a).as_matrix()?;
        if self.value(bias).shape() != [r] {
            return Err(self.shape_err("add_row_bias", a, bias));
        }
        let av = self.value(a).data();
        let bv = self.value(bias).data();
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            for j in 0..c {
                out.push(av[i * c + j] + bv[i]);
            }
        }
        Ok(self.push(Op::AddRowBias(a, bias), Tensor::from_vec(vec![r, c], out)))
    }

    pub fn div_by_scalar(&mut self, x: NodeId, s: NodeId) -> Result<NodeId, AutodiffError> {
        if !self.value(s).is_scalar() {
            return Err(self.shape_err("div_by_scalar", x, s));
        }
        let sv = self.value(s).item();
        let shape = self.value(x).shape().to_vec();
        let data: Vec<f64> = self.value(x).data().iter().map(|&v| v / sv).collect();
        Ok(self.push(Op::DivByScalar(x, s), Tensor::from_vec(shape, data)))
    }

    // ── Unary ops ────────────────────────────────────────────────────

    fn map_op(&mut self, x: NodeId, op: Op, f: impl Fn(f64) -> f64) -> NodeId {
        let shape = self.value(x).shape().to_vec();
        let data: Vec<f64> = self.value(x).data().iter().map(|&v| f(v)).collect();
        self.push(op, Tensor::from_vec(shape, data))
    }

    pub fn neg(&mut self, x: NodeId) -> NodeId {
        self.map_op(x, Op::Neg(x), |v| -v)
    }

    pub fn scale(&mut self, x: NodeId, k: f64) -> NodeId {
        self.map_op(x, Op::Scale(x, k), |v| k * v)
    }

    pub fn add_scalar(&mut self, x: NodeId, k: f64) -> NodeId {
        self.map_op(x, Op::AddScalar(x), |v| v + k)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        self.map_op(x, Op::Relu(x), |v| v.max(0.0))
    }

    pub fn exp(&mut self, x: NodeId) -> NodeId {
        self.map_op(x, Op::Exp(x), f64::exp)
    }

    pub fn log(&mut self, x: NodeId) -> NodeId {
        self.map_op(x, Op::Log(x), f64::ln)
    }

    pub fn sqrt(&mut self, x: NodeId) -> NodeId {
        self.map_op(x, Op::Sqrt(x), f64::sqrt)
    }

    pub fn square(&mut self, x: NodeId) -> NodeId {
        self.map_op(x, Op::Square(x), |v| v * v)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        self.map_op(x, Op::Sigmoid(x), sigmoid)
    }

    /// `log(1 + exp(x))`, evaluated stably.
    pub fn softplus(&mut self, x: NodeId) -> NodeId {
        self.map_op(x, Op::Softplus(x), softplus)
    }

    /// Elementwise smooth-L1 (Huber): `0.5 x^2 / delta` inside `|x| < delta`,
    /// `|x| - 0.5 delta` outside.
    pub fn smooth_l1(&mut self, x: NodeId, delta: f64) -> NodeId {
        self.map_op(x, Op::SmoothL1(x, delta), move |v| {
            if v.abs() < delta {
                0.5 * v * v / delta
            } else {
                v.abs() - 0.5 * delta
            }
        })
    }

    /// Zero gradient outside the active range (subgradient convention).
    pub fn clamp(&mut self, x: NodeId, lo: f64, hi: f64) -> NodeId {
        self.map_op(x, Op::Clamp(x, lo, hi), move |v| v.clamp(lo, hi))
    }

    // ── Structured ops ───────────────────────────────────────────────

    pub fn softmax_last(&mut self, x: NodeId) -> NodeId {
        let shape = self.value(x).shape().to_vec();
        let cols = self.value(x).last_dim();
        let data = rows_map(self.value(x).data(), cols, softmax_row);
        self.push(Op::SoftmaxLast(x), Tensor::from_vec(shape, data))
    }

    pub fn log_softmax_last(&mut self, x: NodeId) -> NodeId {
        let shape = self.value(x).shape().to_vec();
        let cols = self.value(x).last_dim();
        let data = rows_map(self.value(x).data(), cols, log_softmax_row);
        self.push(Op::LogSoftmaxLast(x), Tensor::from_vec(shape, data))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let s: f64 = self.value(x).data().iter().sum();
        self.push(Op::Sum(x), Tensor::scalar(s))
    }

    pub fn mean(&mut self, x: NodeId) -> NodeId {
        let n = self.value(x).numel().max(1) as f64;
        let s: f64 = self.value(x).data().iter().sum();
        self.push(Op::Mean(x), Tensor::scalar(s / n))
    }

    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> Result<NodeId, AutodiffError> {
        let numel: usize = shape.iter().product();
        if numel != self.value(x).numel() {
            return Err(AutodiffError::ShapeMismatch {
                op: "reshape",
                lhs: self.value(x).shape().to_vec(),
                rhs: shape,
            });
        }
        let data = self.value(x).data().to_vec();
        Ok(self.push(Op::Reshape(x), Tensor::from_vec(shape, data)))
    }

    /// Flat contiguous slice; the result is 1-D of length `len`.
    pub fn slice(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId, AutodiffError> {
        let numel = self.value(x).numel();
        if start + len > numel {
            return Err(AutodiffError::IndexOutOfBounds {
                op: "slice",
                index: start + len,
                numel,
            });
        }
        let data = self.value(x).data()[start..start + len].to_vec();
        Ok(self.push(Op::Slice(x, start), Tensor::from_vec(vec![len], data)))
    }

    /// Flat gather into `shape`; index `usize::MAX` produces 0.0 (padding).
    pub fn gather(
        &mut self,
        x: NodeId,
        indices: Vec<usize>,
        shape: Vec<usize>,
    ) -> Result<NodeId, AutodiffError> {
        let numel: usize = shape.iter().product();
        if numel != indices.len() {
            return Err(AutodiffError::BadShape {
                shape,
                len: indices.len(),
            });
        }
        let src = self.value(x).data();
        let n = src.len();
        let mut data = Vec::with_capacity(indices.len());
        for &idx in &indices {
            if idx == usize::MAX {
                data.push(0.0);
            } else if idx < n {
                data.push(src[idx]);
            } else {
                return Err(AutodiffError::IndexOutOfBounds {
                    op: "gather",
                    index: idx,
                    numel: n,
                });
            }
        }
        Ok(self.push(Op::Gather(x, indices), Tensor::from_vec(shape, data)))
    }

    /// Concatenate along axis 0. Vector parts `[d]` stack into `[n, d]`;
    /// matrix parts `[r_i, d]` chain into `[sum r_i, d]`.
    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId, AutodiffError> {
        if parts.is_empty() {
            return Err(AutodiffError::InvalidArgument {
                op: "concat_rows",
                why: "no parts".into(),
            });
        }
        let width = self.value(parts[0]).last_dim();
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let v = self.value(p);
            if v.last_dim() != width || v.numel() % width != 0 {
                return Err(AutodiffError::ShapeMismatch {
                    op: "concat_rows",
                    lhs: self.value(parts[0]).shape().to_vec(),
                    rhs: v.shape().to_vec(),
                });
            }
            rows += v.numel() / width;
            data.extend_from_slice(v.data());
        }
        Ok(self.push(
            Op::ConcatRows(parts.to_vec()),
            Tensor::from_vec(vec![rows, width], data),
        ))
    }

    // ── Compositions ─────────────────────────────────────────────────

    /// Cosine similarity of two vectors, as a scalar node.
    pub fn cosine_similarity(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        let prod = self.mul(a, b)?;
        let dot = self.sum(prod);
        let na = self.l2_norm(a);
        let nb = self.l2_norm(b);
        let denom = self.mul(na, nb)?;
        self.div(dot, denom)
    }

    fn l2_norm(&mut self, x: NodeId) -> NodeId {
        let sq = self.square(x);
        let s = self.sum(sq);
        self.sqrt(s)
    }

    /// `x / ||x||_2`. A tiny epsilon under the square root keeps the zero
    /// vector at zero instead of NaN.
    pub fn l2_normalize(&mut self, x: NodeId) -> Result<NodeId, AutodiffError> {
        let sq = self.square(x);
        let s = self.sum(sq);
        let s_eps = self.add_scalar(s, 1e-24);
        let n = self.sqrt(s_eps);
        self.div_by_scalar(x, n)
    }

    fn shape_err(&self, op: &'static str, a: NodeId, b: NodeId) -> AutodiffError {
        AutodiffError::ShapeMismatch {
            op,
            lhs: self.value(a).shape().to_vec(),
            rhs: self.value(b).shape().to_vec(),
        }
    }

    // ── Backward ─────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Populates per-node gradients and
    /// returns the parameter gradient map; parameters the loss never touched
    /// get zero tensors. A second call without rebuilding the graph is an
    /// error.
    pub fn backward(&mut self, loss: NodeId) -> Result<GradMap, AutodiffError> {
        if self.backward_done {
            return Err(AutodiffError::BackwardReuse);
        }
        if !self.value(loss).is_scalar() {
            return Err(AutodiffError::NonScalarLoss {
                shape: self.value(loss).shape().to_vec(),
            });
        }
        self.backward_done = true;

        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..n).rev() {
            let dy = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            let op = self.nodes[i].op.clone();
            self.apply_backward(&op, i, &dy, &mut grads);
            let shape = self.nodes[i].value.shape().to_vec();
            self.nodes[i].grad = Some(Tensor::from_vec(shape, dy));
        }

        let mut map = GradMap::new();
        for &pid in &self.params {
            if let Op::Param(name) = &self.nodes[pid.0].op {
                let t = match &self.nodes[pid.0].grad {
                    Some(g) => g.clone(),
                    None => Tensor::zeros(self.nodes[pid.0].value.shape().to_vec()),
                };
                map.insert(name.clone(), t);
            }
        }
        // Leaves the sweep never reached still expose zero grads via grad().
        for node in &mut self.nodes {
            if node.grad.is_none() {
                node.grad = Some(Tensor::zeros(node.value.shape().to_vec()));
            }
        }
        Ok(map)
    }

    fn apply_backward(&self, op: &Op, out_idx: usize, dy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |id: NodeId| self.nodes[id.0].value.data();
        let out = self.nodes[out_idx].value.data();
        match op {
            Op::Const | Op::Param(_) => {}
            Op::Matmul(a, b) => {
                let (m, k) = (self.nodes[a.0].value.shape()[0], self.nodes[a.0].value.shape()[1]);
                let n = self.nodes[b.0].value.shape()[1];
                let av = val(*a);
                let bv = val(*b);
                let ga = acc(grads, *a, m * k);
                for i in 0..m {
                    for p in 0..k {
                        let mut s = 0.0;
                        for j in 0..n {
                            s += dy[i * n + j] * bv[p * n + j];
                        }
                        ga[i * k + p] += s;
                    }
                }
                let gb = acc(grads, *b, k * n);
                for p in 0..k {
                    for i in 0..m {
                        let a_ip = av[i * k + p];
                        if a_ip == 0.0 {
                            continue;
                        }
                        for j in 0..n {
                            gb[p * n + j] += a_ip * dy[i * n + j];
                        }
                    }
                }
            }
            Op::MatmulTb(a, b) => {
                let (m, k) = (self.nodes[a.0].value.shape()[0], self.nodes[a.0].value.shape()[1]);
                let n = self.nodes[b.0].value.shape()[0];
                let av = val(*a);
                let bv = val(*b);
                let ga = acc(grads, *a, m * k);
                for i in 0..m {
                    for j in 0..n {
                        let d = dy[i * n + j];
                        if d == 0.0 {
                            continue;
                        }
                        for p in 0..k {
                            ga[i * k + p] += d * bv[j * k + p];
                        }
                    }
                }
                let gb = acc(grads, *b, n * k);
                for j in 0..n {
                    for i in 0..m {
                        let d = dy[i * n + j];
                        if d == 0.0 {
                            continue;
                        }
                        for p in 0..k {
                            gb[j * k + p] += d * av[i * k + p];
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                add_into(acc(grads, *a, dy.len()), dy);
                add_into(acc(grads, *b, dy.len()), dy);
            }
            Op::Sub(a, b) => {
                add_into(acc(grads, *a, dy.len()), dy);
                let gb = acc(grads, *b, dy.len());
                for (g, &d) in gb.iter_mut().zip(dy) {
                    *g -= d;
                }
            }
            Op::Mul(a, b) => {
                let av = val(*a).to_vec();
                let bv = val(*b).to_vec();
                let ga = acc(grads, *a, dy.len());
                for ((g, &d), &bvv) in ga.iter_mut().zip(dy).zip(&bv) {
                    *g += d * bvv;
                }
                let gb = acc(grads, *b, dy.len());
                for ((g, &d), &avv) in gb.iter_mut().zip(dy).zip(&av) {
                    *g += d * avv;
                }
            }
            Op::Div(a, b) => {
                let av = val(*a).to_vec();
                let bv = val(*b).to_vec();
                let ga = acc(grads, *a, dy.len());
                for ((g, &d), &bvv) in ga.iter_mut().zip(dy).zip(&bv) {
                    *g += d / bvv;
                }
                let gb = acc(grads, *b, dy.len());
                for (i, (g, &d)) in gb.iter_mut().zip(dy).enumerate() {
                    *g -= d * av[i] / (bv[i] * bv[i]);
                }
            }
            Op::AddRowBias(a, bias) => {
                add_into(acc(grads, *a, dy.len()), dy);
                let r = self.nodes[bias.0].value.numel();
                let c = dy.len() / r;
                let gb = acc(grads, *bias, r);
                for i in 0..r {
                    let mut s = 0.0;
                    for j in 0..c {
                        s += dy[i * c + j];
                    }
                    gb[i] += s;
                }
            }
            Op::Neg(x) => {
                let gx = acc(grads, *x, dy.len());
                for (g, &d) in gx.iter_mut().zip(dy) {
                    *g -= d;
                }
            }
            Op::Scale(x, k) => {
                let gx = acc(grads, *x, dy.len());
                for (g, &d) in gx.iter_mut().zip(dy) {
                    *g += k * d;
                }
            }
            Op::AddScalar(x) | Op::Reshape(x) => {
                add_into(acc(grads, *x, dy.len()), dy);
            }
            Op::Relu(x) => {
                let xv = val(*x).to_vec();
                let gx = acc(grads, *x, dy.len());
                for (i, (g, &d)) in gx.iter_mut().zip(dy).enumerate() {
                    if xv[i] > 0.0 {
                        *g += d;
                    }
                }
            }
            Op::Exp(_) => {
                if let Op::Exp(x) = op {
                    let yv = out.to_vec();
                    let gx = acc(grads, *x, dy.len());
                    for (i, (g, &d)) in gx.iter_mut().zip(dy).enumerate() {
                        *g += d * yv[i];
                    }
                }
            }
            Op::Log(x) => {
                let xv = val(*x).to_vec();
                let gx = acc(grads, *x, dy.len());
                for (i, (g, &d)) in gx.iter_mut().zip(dy).enumerate() {
                    *g += d / xv[i];
                }
            }
            Op::Sqrt(x) => {
                let yv = out.to_vec();
                let gx = acc(grads, *x, dy.len());
                for (i, (g, &d)) in gx.iter_mut().zip(dy).enumerate() {
                    *g += d / (2.0 * yv[i]);
                }
            }
            Op::Square(x) => {
                let xv = val(*x).to_vec();
                let gx = acc(grads, *x, dy.len());
                for (i, (g, &d)) in gx.iter_mut().zip(dy).enumerate() {
                    *g += 2.0 * xv[i] * d;
                }
            }
            Op::Sigmoid(x) => {
                let yv = out.to_vec();
                let gx = acc(grads, *x, dy.len());
                for (i, (g, &d)) in gx.iter_mut().zip(dy).enumerate() {
                    *g += d * yv[i] * (1.0 - yv[i]);
                }
            }
            Op::Softplus(x) => {
                let xv = val(*x).to_vec();
                let gx = acc(grads, *x, dy.len());
                for (i, (g, &d)) in gx.iter_mut().zip(dy).enumerate() {
                    *g += d * sigmoid(xv[i]);
                }
            }
            Op::SmoothL1(x, delta) => {
                let xv = val(*x).to_vec();
                let gx = acc(grads, *x, dy.len());
                for (i, (g, &d)) in gx.iter_mut().zip(dy).enumerate() {
                    let v = xv[i];
                    let slope = if v.abs() < *delta { v / delta } else { v.signum() };
                    *g += d * slope;
                }
            }
            Op::Clamp(x, lo, hi) => {
                let xv = val(*x).to_vec();
                let gx = acc(grads, *x, dy.len());
                for (i, (g, &d)) in gx.iter_mut().zip(dy).enumerate() {
                    if xv[i] >= *lo && xv[i] <= *hi {
                        *g += d;
                    }
                }
            }
            Op::SoftmaxLast(x) => {
                let cols = self.nodes[x.0].value.last_dim();
                let yv = out.to_vec();
                let gx = acc(grads, *x, dy.len());
                for (row_y, (row_dy, row_gx)) in yv
                    .chunks(cols)
                    .zip(dy.chunks(cols).zip(gx.chunks_mut(cols)))
                {
                    let dot: f64 = row_dy.iter().zip(row_y).map(|(&d, &y)| d * y).sum();
                    for j in 0..cols {
                        row_gx[j] += row_y[j] * (row_dy[j] - dot);
                    }
                }
            }
            Op::LogSoftmaxLast(x) => {
                let cols = self.nodes[x.0].value.last_dim();
                let yv = out.to_vec();
                let gx = acc(grads, *x, dy.len());
                for (row_y, (row_dy, row_gx)) in yv
                    .chunks(cols)
                    .zip(dy.chunks(cols).zip(gx.chunks_mut(cols)))
                {
                    let s: f64 = row_dy.iter().sum();
                    for j in 0..cols {
                        row_gx[j] += row_dy[j] - row_y[j].exp() * s;
                    }
                }
            }
            Op::Sum(x) => {
                let n = self.nodes[x.0].value.numel();
                let gx = acc(grads, *x, n);
                for g in gx.iter_mut() {
                    *g += dy[0];
                }
            }
            Op::Mean(x) => {
                let n = self.nodes[x.0].value.numel();
                let gx = acc(grads, *x, n);
                let d = dy[0] / n.max(1) as f64;
                for g in gx.iter_mut() {
                    *g += d;
                }
            }
            Op::Slice(x, start) => {
                let n = self.nodes[x.0].value.numel();
                let gx = acc(grads, *x, n);
                for (k, &d) in dy.iter().enumerate() {
                    gx[start + k] += d;
                }
            }
            Op::Gather(x, indices) => {
                let n = self.nodes[x.0].value.numel();
                let gx = acc(grads, *x, n);
                for (k, &idx) in indices.iter().enumerate() {
                    if idx != usize::MAX {
                        gx[idx] += dy[k];
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.nodes[p.0].value.numel();
                    let gp = acc(grads, p, len);
                    add_into(gp, &dy[offset..offset + len]);
                    offset += len;
                }
            }
            Op::DivByScalar(x, s) => {
                let sv = val(*s)[0];
                let xv = val(*x).to_vec();
                let gx = acc(grads, *x, dy.len());
                for (g, &d) in gx.iter_mut().zip(dy) {
                    *g += d / sv;
                }
                let mut ds = 0.0;
                for (i, &d) in dy.iter().enumerate() {
                    ds -= d * xv[i] / (sv * sv);
                }
                acc(grads, *s, 1)[0] += ds;
            }
        }
    }
}

fn acc<'g>(grads: &'g mut [Option<Vec<f64>>], id: NodeId, len: usize) -> &'g mut Vec<f64> {
    grads[id.0].get_or_insert_with(|| vec![0.0; len])
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    // log(1 + e^x) = max(x, 0) + log(1 + e^{-|x|})
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn rows_map(data: &[f64], cols: usize, f: impl Fn(&[f64], &mut [f64])) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    for (src, dst) in data.chunks(cols).zip(out.chunks_mut(cols)) {
        f(src, dst);
    }
    out
}

fn softmax_row(src: &[f64], dst: &mut [f64]) {
    let m = src.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = (s - m).exp();
        z += *d;
    }
    for d in dst.iter_mut() {
        *d /= z;
    }
}

fn log_softmax_row(src: &[f64], dst: &mut [f64]) {
    let m = src.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = src.iter().map(|&s| (s - m).exp()).sum();
    let lz = m + z.ln();
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = s - lz;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn assert_close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b} (tol {tol})");
    }

    #[test]
    fn matmul_identity_case() {
        let mut g = Graph::new();
        let eye = g.constant(Tensor::from_vec(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]));
        let v = g.constant(Tensor::from_vec(vec![2, 1], vec![3.0, 4.0]));
        let out = g.matmul(eye, v).unwrap();
        assert_eq!(g.value(out).data(), &[3.0, 4.0]);
    }

    #[test]
    fn softmax_symmetry() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_vec(vec![2], vec![0.0, 0.0]));
        let y = g.softmax_last(x);
        assert_eq!(g.value(y).data(), &[0.5, 0.5]);
    }

    #[test]
    fn shape_mismatch_names_op_and_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(vec![2, 3]));
        let b = g.constant(Tensor::zeros(vec![4, 5]));
        let err = g.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("matmul") && msg.contains("[2, 3]") && msg.contains("[4, 5]"), "{msg}");
    }

    #[test]
    fn backward_sum_gives_ones() {
        let mut g = Graph::new();
        let p = g.param("p", Tensor::from_vec(vec![3], vec![5.0, -1.0, 2.0])).unwrap();
        let loss = g.sum(p);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads["p"].data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_sum_of_squares() {
        // d/dp sum(p*p) = 2p, checked by hand at p = [1, 2].
        let mut g = Graph::new();
        let p = g.param("p", Tensor::from_vec(vec![2], vec![1.0, 2.0])).unwrap();
        let sq = g.mul(p, p).unwrap();
        let loss = g.sum(sq);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads["p"].data(), &[2.0, 4.0]);
    }

    #[test]
    fn detached_param_gets_zero_grad() {
        let mut g = Graph::new();
        let p = g.param("p", Tensor::from_vec(vec![2], vec![1.0, 1.0])).unwrap();
        let _q = g.param("q", Tensor::from_vec(vec![3], vec![1.0, 2.0, 3.0])).unwrap();
        let loss = g.sum(p);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads["q"].data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::new();
        let p = g.param("p", Tensor::zeros(vec![3])).unwrap();
        assert!(matches!(
            g.backward(p),
            Err(AutodiffError::NonScalarLoss { .. })
        ));
    }

    #[test]
    fn second_backward_rejected() {
        let mut g = Graph::new();
        let p = g.param("p", Tensor::from_vec(vec![1], vec![2.0])).unwrap();
        let loss = g.sum(p);
        g.backward(loss).unwrap();
        assert!(matches!(g.backward(loss), Err(AutodiffError::BackwardReuse)));
    }

    #[test]
    fn backward_is_deterministic() {
        let run = || {
            let mut g = Graph::new();
            let p = g
                .param("p", Tensor::from_vec(vec![4], vec![0.3, -0.7, 1.1, 0.01]))
                .unwrap();
            let e = g.exp(p);
            let sm = g.softmax_last(e);
            let lg = g.log(sm);
            let loss = g.mean(lg);
            g.backward(loss).unwrap()["p"].clone()
        };
        let a = run();
        let b = run();
        assert_eq!(a.data(), b.data());
    }

    // ── Finite-difference oracle ─────────────────────────────────────

    /// Central finite differences of a scalar-valued builder at `x`, h = 1e-6.
    fn finite_diff(build: &dyn Fn(&mut Graph, NodeId) -> NodeId, x: &[f64]) -> Vec<f64> {
        let h = 1e-6;
        let eval = |vals: &[f64]| -> f64 {
            let mut g = Graph::new();
            let p = g
                .param("x", Tensor::from_vec(vec![vals.len()], vals.to_vec()))
                .unwrap();
            let loss = build(&mut g, p);
            g.value(loss).item()
        };
        (0..x.len())
            .map(|i| {
                let mut hi = x.to_vec();
                let mut lo = x.to_vec();
                hi[i] += h;
                lo[i] -= h;
                (eval(&hi) - eval(&lo)) / (2.0 * h)
            })
            .collect()
    }

    fn analytic(build: &dyn Fn(&mut Graph, NodeId) -> NodeId, x: &[f64]) -> Vec<f64> {
        let mut g = Graph::new();
        let p = g
            .param("x", Tensor::from_vec(vec![x.len()], x.to_vec()))
            .unwrap();
        let loss = build(&mut g, p);
        g.backward(loss).unwrap()["x"].data().to_vec()
    }

    #[test]
    fn log_softmax_gradient_matches_finite_differences() {
        // The spec's [1, 2] probe for d/dz log(softmax(z)).
        let build = |g: &mut Graph, p: NodeId| {
            let sm = g.softmax_last(p);
            let lg = g.log(sm);
            g.sum(lg)
        };
        let fd = finite_diff(&build, &[1.0, 2.0]);
        let an = analytic(&build, &[1.0, 2.0]);
        for (f, a) in fd.iter().zip(&an) {
            assert!((f - a).abs() < 1e-6, "{f} vs {a}");
        }
    }

    #[test]
    fn every_op_matches_finite_differences_over_ten_seeds() {
        type Builder = (&'static str, fn(&mut Graph, NodeId) -> NodeId, bool);
        // bool: restrict inputs to strictly positive values (log, sqrt, div).
        let builders: Vec<Builder> = vec![
            ("relu", |g, p| { let y = g.relu(p); g.sum(y) }, false),
            ("exp", |g, p| { let y = g.exp(p); g.sum(y) }, false),
            ("log", |g, p| { let y = g.log(p); g.sum(y) }, true),
            ("sqrt", |g, p| { let y = g.sqrt(p); g.sum(y) }, true),
            ("square", |g, p| { let y = g.square(p); g.mean(y) }, false),
            ("sigmoid", |g, p| { let y = g.sigmoid(p); g.sum(y) }, false),
            ("softplus", |g, p| { let y = g.softplus(p); g.sum(y) }, false),
            ("smooth_l1", |g, p| { let y = g.smooth_l1(p, 1.0); g.sum(y) }, false),
            ("clamp", |g, p| { let y = g.clamp(p, -0.5, 0.5); g.sum(y) }, false),
            ("neg_scale", |g, p| { let n = g.neg(p); let s = g.scale(n, 3.0); g.sum(s) }, false),
            ("softmax", |g, p| {
                let y = g.softmax_last(p);
                let sq = g.square(y);
                g.sum(sq)
            }, false),
            ("log_softmax", |g, p| {
                let y = g.log_softmax_last(p);
                let sq = g.square(y);
                g.mean(sq)
            }, false),
            ("mul_self", |g, p| { let y = g.mul(p, p).unwrap(); g.sum(y) }, false),
            ("div_self_shifted", |g, p| {
                let c = g.add_scalar(p, 3.0);
                let y = g.div(p, c).unwrap();
                g.sum(y)
            }, true),
            ("matmul_quad", |g, p| {
                let m = g.reshape(p, vec![2, 3]).unwrap();
                let mt = g.matmul_tb(m, m).unwrap();
                g.sum(mt)
            }, false),
            ("gather_slice", |g, p| {
                let gth = g
                    .gather(p, vec![0, usize::MAX, 2, 2, 5, 1], vec![6])
                    .unwrap();
                let sl = g.slice(gth, 1, 4).unwrap();
                let sq = g.square(sl);
                g.sum(sq)
            }, false),
            ("l2_normalize", |g, p| {
                let n = g.l2_normalize(p).unwrap();
                let sl = g.slice(n, 0, 3).unwrap();
                g.sum(sl)
            }, false),
            ("cosine", |g, p| {
                let a = g.slice(p, 0, 3).unwrap();
                let b = g.slice(p, 3, 3).unwrap();
                g.cosine_similarity(a, b).unwrap()
            }, false),
        ];
        for (name, build, positive) in builders {
            for seed in 0..10u64 {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let x: Vec<f64> = (0..6)
                    .map(|_| {
                        let v: f64 = rng.gen_range(-1.5..1.5);
                        if positive {
                            v.abs() + 0.5
                        } else {
                            v
                        }
                    })
                    .collect();
                let b: &dyn Fn(&mut Graph, NodeId) -> NodeId = &build;
                let fd = finite_diff(b, &x);
                let an = analytic(b, &x);
                for (i, (&f, &a)) in fd.iter().zip(&an).enumerate() {
                    assert!(
                        (f - a).abs() < 1e-5,
                        "op {name}, seed {seed}, component {i}: fd {f} vs analytic {a}"
                    );
                }
            }
        }
    }

    #[test]
    fn add_row_bias_broadcasts_and_differentiates() {
        let mut g = Graph::new();
        let a = g.param("a", Tensor::from_vec(vec![2, 3], vec![1., 2., 3., 4., 5., 6.])).unwrap();
        let b = g.param("b", Tensor::from_vec(vec![2], vec![10.0, 20.0])).unwrap();
        let y = g.add_row_bias(a, b).unwrap();
        assert_eq!(g.value(y).data(), &[11., 12., 13., 24., 25., 26.]);
        let loss = g.sum(y);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads["b"].data(), &[3.0, 3.0]);
    }

    #[test]
    fn concat_rows_splits_gradient() {
        let mut g = Graph::new();
        let a = g.param("a", Tensor::from_vec(vec![2], vec![1.0, 2.0])).unwrap();
        let b = g.param("b", Tensor::from_vec(vec![2], vec![3.0, 4.0])).unwrap();
        let m = g.concat_rows(&[a, b]).unwrap();
        assert_eq!(g.value(m).shape(), &[2, 2]);
        let sl = g.slice(m, 2, 2).unwrap(); // second row only
        let loss = g.sum(sl);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads["a"].data(), &[0.0, 0.0]);
        assert_eq!(grads["b"].data(), &[1.0, 1.0]);
    }

    #[test]
    fn kl_composition_of_identical_logits_is_zero() {
        let mut g = Graph::new();
        let t = Tensor::from_vec(vec![2, 3], vec![0.3, -0.2, 1.0, 0.5, 0.5, 0.5]);
        let a = g.constant(t.clone());
        let b = g.param("q", t).unwrap();
        let pa = g.softmax_last(a);
        let la = g.log_softmax_last(a);
        let lb = g.log_softmax_last(b);
        let diff = g.sub(la, lb).unwrap();
        let w = g.mul(pa, diff).unwrap();
        let kl = g.sum(w);
        assert_close(g.value(kl).item(), 0.0, 1e-12);
    }

    #[test]
    fn l2_normalize_produces_unit_norm() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_vec(vec![4], vec![3.0, -4.0, 1.0, 2.0]));
        let n = g.l2_normalize(x).unwrap();
        let norm: f64 = g.value(n).data().iter().map(|v| v * v).sum::<f64>().sqrt();
        assert_close(norm, 1.0, 1e-9);
    }

    #[test]
    fn per_node_gradients_populated_after_backward() {
        let mut g = Graph::new();
        let p = g.param("p", Tensor::from_vec(vec![2], vec![1.0, 2.0])).unwrap();
        let y = g.square(p);
        let loss = g.sum(y);
        assert!(g.grad(y).is_none());
        g.backward(loss).unwrap();
        assert_eq!(g.grad(y).unwrap().data(), &[1.0, 1.0]);
        assert_eq!(g.grad(p).unwrap().data(), &[2.0, 4.0]);
        assert_eq!(g.grad(y).unwrap().shape(), g.value(y).shape());
    }
}
