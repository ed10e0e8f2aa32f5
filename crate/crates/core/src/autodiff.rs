//! Define-by-run reverse-mode differentiation.
//!
//! A [`Graph`] is an append-only tape of primitive applications. Every
//! primitive validates shapes, computes its forward value eagerly and rejects
//! non-finite results. [`Graph::backward`] walks the tape once in reverse and
//! returns gradients for any node, parameter and data leaves alike, which is
//! what the attacks need to differentiate with respect to inputs.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

static NEXT_GRAPH_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a node of one particular [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId {
    graph: u64,
    index: usize,
}

impl NodeId {
    pub fn index(self) -> usize {
        self.index
    }
}

/// What kind of leaf a node is, if any.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LeafKind {
    /// Trainable parameter.
    Param,
    /// Data input (possibly being attacked).
    Input,
    /// Value treated as fixed.
    Constant,
    /// Result of a primitive.
    Computed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Broadcast {
    Same,
    Row,
    Scalar,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize, Broadcast),
    Sub(usize, usize, Broadcast),
    Mul(usize, usize, Broadcast),
    Scale(usize, f64),
    Relu(usize),
    Sigmoid(usize),
    Log(usize),
    Exp(usize),
    Square(usize),
    Powi(usize, i32),
    Sqrt(usize),
    ClampMin(usize, f64),
    Mean(usize),
    Sum(usize),
    MeanRows(usize),
    Transpose(usize),
    Softmax(usize),
    SoftmaxCrossEntropy {
        logits: usize,
        labels: Vec<usize>,
        probs: Tensor,
    },
    BinaryCrossEntropy {
        prob: usize,
        targets: Vec<f64>,
    },
    BceWithLogits {
        logits: usize,
        targets: Vec<f64>,
    },
    ConcatRows(Vec<usize>),
    SliceRows(usize, usize),
    GradientReversal(usize, f64),
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    kind: LeafKind,
}

/// Probability floor used by [`Graph::binary_cross_entropy`].
pub const BCE_PROB_FLOOR: f64 = 1e-12;

/// Recorded computation. One graph per forward pass.
#[derive(Debug)]
pub struct Graph {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

fn matmul_raw(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let orow = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * m..(p + 1) * m];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

fn transpose_raw(a: &[f64], n: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        for j in 0..m {
            out[j * n + i] = a[i * m + j];
        }
    }
    out
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Row-wise softmax computed with the max-shift.
pub fn softmax_rows(logits: &Tensor) -> Tensor {
    let (n, c) = (logits.rows(), logits.cols());
    let mut out = Vec::with_capacity(n * c);
    for i in 0..n {
        let row = logits.row(i);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        out.extend(exps.into_iter().map(|e| e / z));
    }
    Tensor::new(logits.shape().to_vec(), out).expect("softmax preserves shape")
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            id: NEXT_GRAPH_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn check(&self, id: NodeId) -> Result<usize> {
        if id.graph != self.id || id.index >= self.nodes.len() {
            return Err(Error::ForeignNode { index: id.index });
        }
        Ok(id.index)
    }

    fn push(
        &mut self,
        value: Tensor,
        op: Op,
        kind: LeafKind,
        name: &'static str,
    ) -> Result<NodeId> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: name });
        }
        self.nodes.push(Node { value, op, kind });
        Ok(NodeId {
            graph: self.id,
            index: self.nodes.len() - 1,
        })
    }

    fn leaf(&mut self, value: Tensor, kind: LeafKind) -> NodeId {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            kind,
        });
        NodeId {
            graph: self.id,
            index: self.nodes.len() - 1,
        }
    }

    pub fn param(&mut self, value: Tensor) -> NodeId {
        self.leaf(value, LeafKind::Param)
    }

    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.leaf(value, LeafKind::Input)
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.leaf(value, LeafKind::Constant)
    }

    pub fn kind(&self, id: NodeId) -> Result<LeafKind> {
        Ok(self.nodes[self.check(id)?].kind)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        assert_eq!(id.graph, self.id, "node from another graph");
        &self.nodes[id.index].value
    }

    fn val(&self, i: usize) -> &Tensor {
        &self.nodes[i].value
    }

    fn unary(
        &mut self,
        x: NodeId,
        name: &'static str,
        op: impl FnOnce(usize) -> Op,
        f: impl Fn(f64) -> f64,
    ) -> Result<NodeId> {
        let i = self.check(x)?;
        let value = self.val(i).map(f);
        self.push(value, op(i), LeafKind::Computed, name)
    }

    fn broadcast_mode(&self, name: &'static str, a: usize, b: usize) -> Result<Broadcast> {
        let (av, bv) = (self.val(a), self.val(b));
        if av.shape() == bv.shape() {
            Ok(Broadcast::Same)
        } else if bv.len() == 1 {
            Ok(Broadcast::Scalar)
        } else if av.shape().len() == 2 && bv.rows() == 1 && bv.len() == av.cols() {
            Ok(Broadcast::Row)
        } else {
            Err(Error::shape(
                name,
                format!("cannot broadcast {:?} onto {:?}", bv.shape(), av.shape()),
            ))
        }
    }

    fn binary(
        &mut self,
        a: NodeId,
        b: NodeId,
        name: &'static str,
        op: impl FnOnce(usize, usize, Broadcast) -> Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<NodeId> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let mode = self.broadcast_mode(name, ia, ib)?;
        let (av, bv) = (self.val(ia), self.val(ib));
        let cols = av.cols();
        let data = av
            .data()
            .iter()
            .enumerate()
            .map(|(k, &x)| {
                let y = match mode {
                    Broadcast::Same => bv.data()[k],
                    Broadcast::Row => bv.data()[k % cols],
                    Broadcast::Scalar => bv.data()[0],
                };
                f(x, y)
            })
            .collect();
        let value = Tensor::new(av.shape().to_vec(), data)?;
        self.push(value, op(ia, ib, mode), LeafKind::Computed, name)
    }

    /// Matrix product of `[n x k]` and `[k x m]`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let (av, bv) = (self.val(ia), self.val(ib));
        if av.shape().len() != 2 || bv.shape().len() != 2 || av.shape()[1] != bv.shape()[0] {
            return Err(Error::shape(
                "matmul",
                format!("{:?} x {:?}", av.shape(), bv.shape()),
            ));
        }
        let (n, k, m) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
        let value = Tensor::new(vec![n, m], matmul_raw(av.data(), bv.data(), n, k, m))?;
        self.push(value, Op::MatMul(ia, ib), LeafKind::Computed, "matmul")
    }

    /// Elementwise sum; `b` may also be a row vector or a scalar broadcast over `a`.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, "add", Op::Add, |x, y| x + y)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, "sub", Op::Sub, |x, y| x - y)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, "mul", Op::Mul, |x, y| x * y)
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> Result<NodeId> {
        self.unary(x, "scale", |i| Op::Scale(i, c), |v| v * c)
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(x, "relu", Op::Relu, |v| if v > 0.0 { v } else { 0.0 })
    }

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(x, "sigmoid", Op::Sigmoid, sigmoid)
    }

    pub fn log(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(x, "log", Op::Log, f64::ln)
    }

    pub fn exp(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(x, "exp", Op::Exp, f64::exp)
    }

    pub fn square(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(x, "square", Op::Square, |v| v * v)
    }

    pub fn powi(&mut self, x: NodeId, k: i32) -> Result<NodeId> {
        self.unary(x, "powi", |i| Op::Powi(i, k), |v| v.powi(k))
    }

    /// Square root; the derivative at exactly 0 is taken as 0.
    pub fn sqrt(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(x, "sqrt", Op::Sqrt, f64::sqrt)
    }

    /// `max(x, floor)`, with zero gradient where the floor is active.
    pub fn clamp_min(&mut self, x: NodeId, floor: f64) -> Result<NodeId> {
        self.unary(x, "clamp_min", |i| Op::ClampMin(i, floor), |v| v.max(floor))
    }

    /// Mean of all entries, as a scalar.
    pub fn mean(&mut self, x: NodeId) -> Result<NodeId> {
        let i = self.check(x)?;
        let v = self.val(i);
        if v.is_empty() {
            return Err(Error::shape("mean", "empty tensor"));
        }
        let m = v.data().iter().sum::<f64>() / v.len() as f64;
        self.push(Tensor::scalar(m), Op::Mean(i), LeafKind::Computed, "mean")
    }

    /// Sum of all entries, as a scalar.
    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        let i = self.check(x)?;
        let s = self.val(i).data().iter().sum::<f64>();
        self.push(Tensor::scalar(s), Op::Sum(i), LeafKind::Computed, "sum")
    }

    /// Column means of an `[n x m]` matrix, shaped `[1 x m]`.
    pub fn mean_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let i = self.check(x)?;
        let v = self.val(i);
        if v.shape().len() != 2 || v.rows() == 0 {
            return Err(Error::shape("mean_rows", format!("{:?}", v.shape())));
        }
        let (n, m) = (v.rows(), v.cols());
        let mut out = vec![0.0; m];
        for r in 0..n {
            for (o, x) in out.iter_mut().zip(v.row(r)) {
                *o += x;
            }
        }
        for o in &mut out {
            *o /= n as f64;
        }
        self.push(
            Tensor::new(vec![1, m], out)?,
            Op::MeanRows(i),
            LeafKind::Computed,
            "mean_rows",
        )
    }

    pub fn transpose(&mut self, x: NodeId) -> Result<NodeId> {
        let i = self.check(x)?;
        let v = self.val(i);
        if v.shape().len() != 2 {
            return Err(Error::shape("transpose", format!("{:?}", v.shape())));
        }
        let (n, m) = (v.shape()[0], v.shape()[1]);
        let value = Tensor::new(vec![m, n], transpose_raw(v.data(), n, m))?;
        self.push(value, Op::Transpose(i), LeafKind::Computed, "transpose")
    }

    /// Row-wise softmax of an `[n x c]` matrix.
    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId> {
        let i = self.check(x)?;
        let v = self.val(i);
        if v.shape().len() != 2 {
            return Err(Error::shape("softmax", format!("{:?}", v.shape())));
        }
        let value = softmax_rows(v);
        self.push(value, Op::Softmax(i), LeafKind::Computed, "softmax")
    }

    /// Mean cross-entropy of row-wise softmax against class indices.
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let i = self.check(logits)?;
        let v = self.val(i);
        if v.shape().len() != 2 || v.rows() != labels.len() || v.rows() == 0 {
            return Err(Error::shape(
                "softmax_cross_entropy",
                format!("logits {:?} with {} labels", v.shape(), labels.len()),
            ));
        }
        let c = v.cols();
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::shape(
                "softmax_cross_entropy",
                format!("label {bad} out of range for {c} classes"),
            ));
        }
        let mut total = 0.0;
        for (r, &label) in labels.iter().enumerate() {
            let row = v.row(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
            total += lse - row[label];
        }
        let probs = softmax_rows(v);
        let loss = total / labels.len() as f64;
        self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy {
                logits: i,
                labels: labels.to_vec(),
                probs,
            },
            LeafKind::Computed,
            "softmax_cross_entropy",
        )
    }

    /// Mean binary cross-entropy of probabilities against targets in `[0, 1]`.
    ///
    /// Probabilities are clipped to `[BCE_PROB_FLOOR, 1 - BCE_PROB_FLOOR]`.
    pub fn binary_cross_entropy(&mut self, prob: NodeId, targets: &[f64]) -> Result<NodeId> {
        let i = self.check(prob)?;
        let v = self.val(i);
        if v.len() != targets.len() || targets.is_empty() {
            return Err(Error::shape(
                "binary_cross_entropy",
                format!("{} probabilities, {} targets", v.len(), targets.len()),
            ));
        }
        let total: f64 = v
            .data()
            .iter()
            .zip(targets)
            .map(|(&p, &y)| {
                let p = p.clamp(BCE_PROB_FLOOR, 1.0 - BCE_PROB_FLOOR);
                -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
            })
            .sum();
        let loss = total / targets.len() as f64;
        self.push(
            Tensor::scalar(loss),
            Op::BinaryCrossEntropy {
                prob: i,
                targets: targets.to_vec(),
            },
            LeafKind::Computed,
            "binary_cross_entropy",
        )
    }

    /// Fused `binary_cross_entropy(sigmoid(logits), targets)`, stable for large logits.
    pub fn bce_with_logits(&mut self, logits: NodeId, targets: &[f64]) -> Result<NodeId> {
        let i = self.check(logits)?;
        let v = self.val(i);
        if v.len() != targets.len() || targets.is_empty() {
            return Err(Error::shape(
                "bce_with_logits",
                format!("{} logits, {} targets", v.len(), targets.len()),
            ));
        }
        let total: f64 = v
            .data()
            .iter()
            .zip(targets)
            .map(|(&z, &y)| z.max(0.0) - z * y + (-z.abs()).exp().ln_1p())
            .sum();
        let loss = total / targets.len() as f64;
        self.push(
            Tensor::scalar(loss),
            Op::BceWithLogits {
                logits: i,
                targets: targets.to_vec(),
            },
            LeafKind::Computed,
            "bce_with_logits",
        )
    }

    /// Stacks matrices with equal column counts vertically.
    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::shape("concat_rows", "no inputs"));
        }
        let idx = parts
            .iter()
            .map(|&p| self.check(p))
            .collect::<Result<Vec<_>>>()?;
        let cols = self.val(idx[0]).cols();
        let mut rows = 0;
        let mut data = Vec::new();
        for &i in &idx {
            let v = self.val(i);
            if v.shape().len() != 2 || v.cols() != cols {
                return Err(Error::shape(
                    "concat_rows",
                    format!("{:?} does not have {cols} columns", v.shape()),
                ));
            }
            rows += v.rows();
            data.extend_from_slice(v.data());
        }
        let value = Tensor::new(vec![rows, cols], data)?;
        self.push(
            value,
            Op::ConcatRows(idx),
            LeafKind::Computed,
            "concat_rows",
        )
    }

    /// Rows `start..end` of a matrix.
    pub fn slice_rows(&mut self, x: NodeId, start: usize, end: usize) -> Result<NodeId> {
        let i = self.check(x)?;
        let v = self.val(i);
        if v.shape().len() != 2 || start > end || end > v.rows() {
            return Err(Error::shape(
                "slice_rows",
                format!("{start}..{end} of {:?}", v.shape()),
            ));
        }
        let c = v.cols();
        let value = Tensor::new(vec![end - start, c], v.data()[start * c..end * c].to_vec())?;
        self.push(
            value,
            Op::SliceRows(i, start),
            LeafKind::Computed,
            "slice_rows",
        )
    }

    /// Identity forward; multiplies the upstream gradient by `-lambda` on the way back.
    pub fn gradient_reversal(&mut self, x: NodeId, lambda: f64) -> Result<NodeId> {
        if !(lambda > 0.0) || !lambda.is_finite() {
            return Err(Error::Config(format!(
                "gradient reversal needs a positive lambda, got {lambda}"
            )));
        }
        let i = self.check(x)?;
        let value = self.val(i).clone();
        self.push(
            value,
            Op::GradientReversal(i, lambda),
            LeafKind::Computed,
            "gradient_reversal",
        )
    }

    /// `x W + b` with `b` broadcast over rows.
    pub fn affine(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let xw = self.matmul(x, w)?;
        self.add(xw, b)
    }

    /// Gradients of the scalar `loss` with respect to each node in `wrt`.
    ///
    /// Nodes the loss does not depend on receive zero tensors.
    pub fn backward(&self, loss: NodeId, wrt: &[NodeId]) -> Result<Vec<Tensor>> {
        let li = self.check(loss)?;
        let wrt_idx = wrt
            .iter()
            .map(|&w| self.check(w))
            .collect::<Result<Vec<_>>>()?;
        let lv = self.val(li);
        if lv.len() != 1 {
            return Err(Error::NotScalar(lv.shape().to_vec()));
        }

        let mut grads: Vec<Option<Tensor>> = vec![None; li + 1];
        grads[li] = Some(Tensor::full(lv.shape(), 1.0));

        for i in (0..=li).rev() {
            let Some(gy) = grads[i].take() else { continue };
            self.propagate(i, &gy, &mut grads);
            grads[i] = Some(gy);
        }

        Ok(wrt_idx
            .into_iter()
            .map(|i| {
                grads
                    .get(i)
                    .cloned()
                    .flatten()
                    .unwrap_or_else(|| Tensor::zeros(self.val(i).shape()))
            })
            .collect())
    }

    fn propagate(&self, i: usize, gy: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.val(*a), self.val(*b));
                let (n, k, m) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                let bt = transpose_raw(bv.data(), k, m);
                let da = matmul_raw(gy.data(), &bt, n, m, k);
                let at = transpose_raw(av.data(), n, k);
                let db = matmul_raw(&at, gy.data(), k, n, m);
                accumulate(grads, *a, av.shape(), da);
                accumulate(grads, *b, bv.shape(), db);
            }
            Op::Add(a, b, mode) => {
                accumulate(grads, *a, self.val(*a).shape(), gy.data().to_vec());
                let db = reduce_broadcast(gy, *mode, self.val(*b).len());
                accumulate(grads, *b, self.val(*b).shape(), db);
            }
            Op::Sub(a, b, mode) => {
                accumulate(grads, *a, self.val(*a).shape(), gy.data().to_vec());
                let neg = gy.map(|g| -g);
                let db = reduce_broadcast(&neg, *mode, self.val(*b).len());
                accumulate(grads, *b, self.val(*b).shape(), db);
            }
            Op::Mul(a, b, mode) => {
                let (av, bv) = (self.val(*a), self.val(*b));
                let cols = av.cols();
                let bat = |k: usize| match mode {
                    Broadcast::Same => bv.data()[k],
                    Broadcast::Row => bv.data()[k % cols],
                    Broadcast::Scalar => bv.data()[0],
                };
                let da: Vec<f64> = gy
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(k, g)| g * bat(k))
                    .collect();
                let prod = Tensor::new(
                    gy.shape().to_vec(),
                    gy.data()
                        .iter()
                        .zip(av.data())
                        .map(|(g, x)| g * x)
                        .collect(),
                )
                .expect("same shape");
                let db = reduce_broadcast(&prod, *mode, bv.len());
                accumulate(grads, *a, av.shape(), da);
                accumulate(grads, *b, bv.shape(), db);
            }
            Op::Scale(a, c) => {
                accumulate(
                    grads,
                    *a,
                    self.val(*a).shape(),
                    gy.data().iter().map(|g| g * c).collect(),
                );
            }
            Op::Relu(a) => {
                let x = self.val(*a);
                let d = zip_map(gy, x, |g, x| if x > 0.0 { g } else { 0.0 });
                accumulate(grads, *a, x.shape(), d);
            }
            Op::Sigmoid(a) => {
                let d = zip_map(gy, y, |g, s| g * s * (1.0 - s));
                accumulate(grads, *a, y.shape(), d);
            }
            Op::Log(a) => {
                let x = self.val(*a);
                let d = zip_map(gy, x, |g, x| g / x);
                accumulate(grads, *a, x.shape(), d);
            }
            Op::Exp(a) => {
                let d = zip_map(gy, y, |g, e| g * e);
                accumulate(grads, *a, y.shape(), d);
            }
            Op::Square(a) => {
                let x = self.val(*a);
                let d = zip_map(gy, x, |g, x| 2.0 * g * x);
                accumulate(grads, *a, x.shape(), d);
            }
            Op::Powi(a, k) => {
                let x = self.val(*a);
                let k = *k;
                let d = zip_map(gy, x, |g, x| g * k as f64 * x.powi(k - 1));
                accumulate(grads, *a, x.shape(), d);
            }
            Op::Sqrt(a) => {
                let d = zip_map(gy, y, |g, s| if s > 0.0 { g * 0.5 / s } else { 0.0 });
                accumulate(grads, *a, y.shape(), d);
            }
            Op::ClampMin(a, floor) => {
                let x = self.val(*a);
                let d = zip_map(gy, x, |g, x| if x > *floor { g } else { 0.0 });
                accumulate(grads, *a, x.shape(), d);
            }
            Op::Mean(a) => {
                let x = self.val(*a);
                let g = gy.item() / x.len() as f64;
                accumulate(grads, *a, x.shape(), vec![g; x.len()]);
            }
            Op::Sum(a) => {
                let x = self.val(*a);
                accumulate(grads, *a, x.shape(), vec![gy.item(); x.len()]);
            }
            Op::MeanRows(a) => {
                let x = self.val(*a);
                let (n, m) = (x.rows(), x.cols());
                let mut d = Vec::with_capacity(n * m);
                for _ in 0..n {
                    d.extend(gy.data().iter().map(|g| g / n as f64));
                }
                accumulate(grads, *a, x.shape(), d);
            }
            Op::Transpose(a) => {
                let (m, n) = (y.shape()[0], y.shape()[1]);
                accumulate(
                    grads,
                    *a,
                    self.val(*a).shape(),
                    transpose_raw(gy.data(), m, n),
                );
            }
            Op::Softmax(a) => {
                let (n, c) = (y.rows(), y.cols());
                let mut d = Vec::with_capacity(n * c);
                for r in 0..n {
                    let (p, g) = (y.row(r), gy.row(r));
                    let dot: f64 = p.iter().zip(g).map(|(p, g)| p * g).sum();
                    d.extend(p.iter().zip(g).map(|(p, g)| p * (g - dot)));
                }
                accumulate(grads, *a, y.shape(), d);
            }
            Op::SoftmaxCrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let n = labels.len() as f64;
                let scale = gy.item() / n;
                let c = probs.cols();
                let mut d: Vec<f64> = probs.data().iter().map(|p| p * scale).collect();
                for (r, &l) in labels.iter().enumerate() {
                    d[r * c + l] -= scale;
                }
                accumulate(grads, *logits, probs.shape(), d);
            }
            Op::BinaryCrossEntropy { prob, targets } => {
                let x = self.val(*prob);
                let scale = gy.item() / targets.len() as f64;
                let d = x
                    .data()
                    .iter()
                    .zip(targets)
                    .map(|(&p, &t)| {
                        if p <= BCE_PROB_FLOOR || p >= 1.0 - BCE_PROB_FLOOR {
                            0.0
                        } else {
                            scale * (p - t) / (p * (1.0 - p))
                        }
                    })
                    .collect();
                accumulate(grads, *prob, x.shape(), d);
            }
            Op::BceWithLogits { logits, targets } => {
                let x = self.val(*logits);
                let scale = gy.item() / targets.len() as f64;
                let d = x
                    .data()
                    .iter()
                    .zip(targets)
                    .map(|(&z, &t)| scale * (sigmoid(z) - t))
                    .collect();
                accumulate(grads, *logits, x.shape(), d);
            }
            Op::ConcatRows(parts) => {
                let c = y.cols();
                let mut offset = 0;
                for &p in parts {
                    let pv = self.val(p);
                    let len = pv.rows() * c;
                    accumulate(
                        grads,
                        p,
                        pv.shape(),
                        gy.data()[offset..offset + len].to_vec(),
                    );
                    offset += len;
                }
            }
            Op::SliceRows(a, start) => {
                let x = self.val(*a);
                let c = x.cols();
                let mut d = vec![0.0; x.len()];
                d[start * c..start * c + gy.len()].copy_from_slice(gy.data());
                accumulate(grads, *a, x.shape(), d);
            }
            Op::GradientReversal(a, lambda) => {
                let d = gy.data().iter().map(|g| -lambda * g).collect();
                accumulate(grads, *a, y.shape(), d);
            }
        }
    }
}

fn zip_map(g: &Tensor, x: &Tensor, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    g.data()
        .iter()
        .zip(x.data())
        .map(|(&g, &x)| f(g, x))
        .collect()
}

fn reduce_broadcast(g: &Tensor, mode: Broadcast, target_len: usize) -> Vec<f64> {
    match mode {
        Broadcast::Same => g.data().to_vec(),
        Broadcast::Scalar => vec![g.data().iter().sum()],
        Broadcast::Row => {
            let mut out = vec![0.0; target_len];
            for (k, v) in g.data().iter().enumerate() {
                out[k % target_len] += v;
            }
            out
        }
    }
}

fn accumulate(grads: &mut [Option<Tensor>], i: usize, shape: &[usize], d: Vec<f64>) {
    match &mut grads[i] {
        Some(acc) => {
            for (a, v) in acc.data_mut().iter_mut().zip(d) {
                *a += v;
            }
        }
        slot @ None => {
            *slot = Some(Tensor::new(shape.to_vec(), d).expect("gradient matches node shape"));
        }
    }
}
