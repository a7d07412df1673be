//! Define-by-run reverse-mode automatic differentiation.
//!
//! A [`Graph`] is a tape: every operation appends a node holding its output
//! value and enough saved state to run its backward rule. Node ids are
//! assigned in creation order, so the tape is topologically sorted by
//! construction and [`Graph::backward`] is a single reverse sweep.
//!
//! A graph is built fresh for every forward pass and is confined to the
//! thread that built it.

use std::fmt;
use std::hash::{Hash, Hasher};

use crate::error::{dim_err, Error, Result};
use crate::tensor::Tensor;

/// BatchNorm numerical floor added to the variance.
pub const BN_EPS: f64 = 1e-5;
/// Weight of the newest batch in the running statistics.
pub const BN_MOMENTUM: f64 = 0.1;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Train/eval switch for BatchNorm and dropout.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Mode {
    #[default]
    Train,
    Eval,
}

/// Per-channel running statistics used by BatchNorm in eval mode.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl RunningStats {
    pub fn new(channels: usize) -> Self {
        Self { mean: vec![0.0; channels], var: vec![1.0; channels] }
    }
}

/// Every differentiable operation the tape knows about.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum OpKind {
    MatMul,
    Add,
    AddBias,
    Sub,
    Mul,
    Scale,
    Relu,
    Concat,
    Reshape,
    Transpose,
    Sum,
    SoftmaxCols,
    L1NormalizeRows,
    MaxPool,
    BatchNorm,
    CrossEntropy,
    GatherRows,
    WeightedGather,
}

impl OpKind {
    pub const ALL: [OpKind; 18] = [
        OpKind::MatMul,
        OpKind::Add,
        OpKind::AddBias,
        OpKind::Sub,
        OpKind::Mul,
        OpKind::Scale,
        OpKind::Relu,
        OpKind::Concat,
        OpKind::Reshape,
        OpKind::Transpose,
        OpKind::Sum,
        OpKind::SoftmaxCols,
        OpKind::L1NormalizeRows,
        OpKind::MaxPool,
        OpKind::BatchNorm,
        OpKind::CrossEntropy,
        OpKind::GatherRows,
        OpKind::WeightedGather,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::MatMul => "matmul",
            OpKind::Add => "add",
            OpKind::AddBias => "add_bias",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Scale => "scale",
            OpKind::Relu => "relu",
            OpKind::Concat => "concat",
            OpKind::Reshape => "reshape",
            OpKind::Transpose => "transpose",
            OpKind::Sum => "sum",
            OpKind::SoftmaxCols => "softmax_cols",
            OpKind::L1NormalizeRows => "l1_normalize_rows",
            OpKind::MaxPool => "max_pool_axis",
            OpKind::BatchNorm => "batchnorm",
            OpKind::CrossEntropy => "cross_entropy",
            OpKind::GatherRows => "gather_rows",
            OpKind::WeightedGather => "weighted_gather",
        }
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Backward rule for a user-registered operation: receives the input values,
/// the output value and the output adjoint, returns one adjoint per input.
pub type CustomBackward = Box<dyn Fn(&[&Tensor], &Tensor, &Tensor) -> Vec<Tensor>>;

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddBias(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Concat { inputs: Vec<Var>, axis: usize },
    Reshape(Var),
    Transpose(Var),
    Sum(Var),
    SoftmaxCols(Var),
    L1NormalizeRows { x: Var, eps: f64 },
    MaxPool { x: Var, argmax: Vec<usize> },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Tensor, inv_std: Vec<f64>, train: bool },
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Tensor },
    GatherRows { x: Var, idx: Vec<usize> },
    WeightedGather { x: Var, idx: Vec<usize>, weights: Vec<f64>, k: usize },
    Custom { inputs: Vec<Var>, backward: CustomBackward },
}

struct Node {
    value: Tensor,
    grad: Option<Tensor>,
    requires_grad: bool,
    op: Op,
}

/// The tape.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
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

    /// Leaf that participates in differentiation.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, present after [`Graph::backward`].
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node { value, grad: None, requires_grad, op });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(dim_err!("{}: shapes {:?} and {:?} differ", what, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    // ----- forward operations -------------------------------------------

    /// Matrix product `[M×K]·[K×P]`, or batched `[B×M×K]·[B×K×P]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (batch, m, k, p) = match (sa.as_slice(), sb.as_slice()) {
            ([m, k], [k2, p]) if k == k2 => (1, *m, *k, *p),
            ([b1, m, k], [b2, k2, p]) if k == k2 && b1 == b2 => (*b1, *m, *k, *p),
            _ => return Err(dim_err!("matmul: shapes {:?} and {:?} do not chain", sa, sb)),
        };
        let mut out = vec![0.0; batch * m * p];
        {
            let av = self.value(a).data();
            let bv = self.value(b).data();
            for bi in 0..batch {
                gemm(
                    m,
                    k,
                    p,
                    &av[bi * m * k..],
                    (k as isize, 1),
                    &bv[bi * k * p..],
                    (p as isize, 1),
                    &mut out[bi * m * p..(bi + 1) * m * p],
                );
            }
        }
        let mut shape = sa[..sa.len() - 1].to_vec();
        shape.push(p);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(shape, out)?, rg, Op::MatMul(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let v = zip_map(self.value(a), self.value(b), |x, y| x + y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, rg, Op::Add(a, b)))
    }

    /// Adds a `[C]` bias along the trailing axis of `x`. The only broadcast
    /// the tape supports.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let c = self.value(x).cols();
        if self.shape(bias) != [c] {
            return Err(dim_err!("add_bias: bias {:?} vs input {:?}", self.shape(bias), self.shape(x)));
        }
        let mut v = self.value(x).clone();
        let bv = self.value(bias).data().to_vec();
        for row in v.data_mut().chunks_mut(c) {
            for (r, b) in row.iter_mut().zip(&bv) {
                *r += b;
            }
        }
        let rg = self.rg(&[x, bias]);
        Ok(self.push(v, rg, Op::AddBias(x, bias)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let v = zip_map(self.value(a), self.value(b), |x, y| x - y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, rg, Op::Sub(a, b)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let v = zip_map(self.value(a), self.value(b), |x, y| x * y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, rg, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let v = self.value(x).map(|a| a * s);
        let rg = self.rg(&[x]);
        self.push(v, rg, Op::Scale(x, s))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|a| if a > 0.0 { a } else { 0.0 });
        let rg = self.rg(&[x]);
        self.push(v, rg, Op::Relu(x))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(*inputs.first().ok_or_else(|| dim_err!("concat of nothing"))?).to_vec();
        if axis >= first.len() {
            return Err(dim_err!("concat axis {} out of range for {:?}", axis, first));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let ok = s.len() == first.len()
                && s.iter().zip(&first).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(dim_err!("concat axis {}: {:?} incompatible with {:?}", axis, s, first));
            }
            total += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let chunk = self.shape(v)[axis] * inner;
                out.extend_from_slice(&self.value(v).data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let rg = self.rg(inputs);
        Ok(self.push(Tensor::new(shape, out)?, rg, Op::Concat { inputs: inputs.to_vec(), axis }))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(v, rg, Op::Reshape(x)))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).transpose_last()?;
        let rg = self.rg(&[x]);
        Ok(self.push(v, rg, Op::Transpose(x)))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let v = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(&[x]);
        self.push(v, rg, Op::Sum(x))
    }

    /// Softmax over the second-to-last axis: every column of every trailing
    /// matrix sums to one. Column maxima are subtracted before `exp`.
    pub fn softmax_cols(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.rank() < 2 {
            return Err(dim_err!("softmax_cols needs rank >= 2, got {:?}", xv.shape()));
        }
        if xv.data().iter().any(|v| v.is_nan()) {
            return Err(Error::Numeric("softmax_cols: NaN input".into()));
        }
        let r = xv.rank();
        let (m, n) = (xv.shape()[r - 2], xv.shape()[r - 1]);
        let mut out = xv.clone();
        let mut mx = vec![0.0; n];
        let mut sum = vec![0.0; n];
        for mat in out.data_mut().chunks_mut(m * n) {
            mx.fill(f64::NEG_INFINITY);
            sum.fill(0.0);
            for row in mat.chunks(n) {
                for (a, &v) in mx.iter_mut().zip(row) {
                    *a = a.max(v);
                }
            }
            for row in mat.chunks_mut(n) {
                for ((v, &a), s) in row.iter_mut().zip(&mx).zip(sum.iter_mut()) {
                    *v = (*v - a).exp();
                    *s += *v;
                }
            }
            sum.iter_mut().for_each(|s| *s = 1.0 / *s);
            for row in mat.chunks_mut(n) {
                for (v, &s) in row.iter_mut().zip(&sum) {
                    *v *= s;
                }
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(out, rg, Op::SoftmaxCols(x)))
    }

    /// Divides each row (last axis, non-negative entries) by
    /// `max(row sum, eps)`: rows with mass above `eps` sum to exactly one,
    /// all-zero rows stay zero.
    pub fn l1_normalize_rows(&mut self, x: Var, eps: f64) -> Var {
        let mut out = self.value(x).clone();
        let c = out.cols();
        for row in out.data_mut().chunks_mut(c) {
            let s: f64 = row.iter().sum::<f64>().max(eps);
            for v in row {
                *v /= s;
            }
        }
        let rg = self.rg(&[x]);
        self.push(out, rg, Op::L1NormalizeRows { x, eps })
    }

    /// Maximum over `axis`, which is removed from the shape. Ties resolve to
    /// the first maximal position.
    pub fn max_pool_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || shape.len() < 2 {
            return Err(dim_err!("max_pool_axis: axis {} invalid for {:?}", axis, shape));
        }
        let extent = shape[axis];
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let data = self.value(x).data();
        let mut out = Vec::with_capacity(outer * inner);
        let mut argmax = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let base = o * extent * inner + i;
                let mut best = base;
                for s in 1..extent {
                    let p = base + s * inner;
                    if data[p] > data[best] {
                        best = p;
                    }
                }
                out.push(data[best]);
                argmax.push(best);
            }
        }
        let mut oshape = shape.clone();
        oshape.remove(axis);
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(oshape, out)?, rg, Op::MaxPool { x, argmax }))
    }

    /// BatchNorm over every leading axis, channels on the last axis.
    ///
    /// In [`Mode::Train`] the batch statistics normalize the input and are
    /// folded into `stats` (momentum [`BN_MOMENTUM`], unbiased variance). In
    /// [`Mode::Eval`] `stats` is read only.
    pub fn batchnorm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: &mut RunningStats,
        mode: Mode,
    ) -> Result<Var> {
        let xv = self.value(x);
        let c = xv.cols();
        let n = xv.rows();
        if self.shape(gamma) != [c] || self.shape(beta) != [c] || stats.mean.len() != c {
            return Err(dim_err!("batchnorm: {} channels, gamma {:?}", c, self.shape(gamma)));
        }
        let train = mode == Mode::Train;
        let (mean, inv_std) = if train {
            if n < 2 {
                return Err(Error::Config(format!("batchnorm in training mode needs >= 2 rows, got {}", n)));
            }
            let mut mean = vec![0.0; c];
            for row in xv.data().chunks(c) {
                for (m, v) in mean.iter_mut().zip(row) {
                    *m += v;
                }
            }
            mean.iter_mut().for_each(|m| *m /= n as f64);
            let mut var = vec![0.0; c];
            for row in xv.data().chunks(c) {
                for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                    *s += (v - m) * (v - m);
                }
            }
            let inv_std: Vec<f64> = var.iter().map(|s| 1.0 / (s / n as f64 + BN_EPS).sqrt()).collect();
            for j in 0..c {
                let unbiased = var[j] / (n - 1) as f64;
                stats.mean[j] = (1.0 - BN_MOMENTUM) * stats.mean[j] + BN_MOMENTUM * mean[j];
                stats.var[j] = (1.0 - BN_MOMENTUM) * stats.var[j] + BN_MOMENTUM * unbiased;
            }
            (mean, inv_std)
        } else {
            let inv_std = stats.var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
            (stats.mean.clone(), inv_std)
        };
        let mut xhat = xv.clone();
        for row in xhat.data_mut().chunks_mut(c) {
            for j in 0..c {
                row[j] = (row[j] - mean[j]) * inv_std[j];
            }
        }
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut out = xhat.clone();
        for row in out.data_mut().chunks_mut(c) {
            for j in 0..c {
                row[j] = row[j] * g[j] + b[j];
            }
        }
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(out, rg, Op::BatchNorm { x, gamma, beta, xhat, inv_std, train }))
    }

    /// Mean negative log-likelihood of `labels` under row-wise softmax of
    /// `logits` (`[N×K]`).
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        if lv.rank() != 2 || lv.rows() != labels.len() {
            return Err(dim_err!("cross_entropy: logits {:?} vs {} labels", lv.shape(), labels.len()));
        }
        let k = lv.cols();
        if let Some((i, &l)) = labels.iter().enumerate().find(|(_, &l)| l >= k) {
            return Err(Error::Data(format!("label {} at index {} outside [0, {})", l, i, k)));
        }
        let mut probs = lv.clone();
        let mut loss = 0.0;
        for (row, &l) in probs.data_mut().chunks_mut(k).zip(labels) {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let s: f64 = row.iter().map(|v| (v - mx).exp()).sum();
            let lse = mx + s.ln();
            loss += lse - row[l];
            for v in row.iter_mut() {
                *v = (*v - lse).exp();
            }
        }
        let n = labels.len() as f64;
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss / n),
            rg,
            Op::CrossEntropy { logits, labels: labels.to_vec(), probs },
        ))
    }

    /// Row gather: output row `i` is input row `idx[i]`.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let v = self.value(x).select_rows(idx)?;
        let rg = self.rg(&[x]);
        Ok(self.push(v, rg, Op::GatherRows { x, idx: idx.to_vec() }))
    }

    /// Output row `i` is `sum_j weights[i*k+j] * x[idx[i*k+j]]`. Weights are
    /// constants.
    pub fn weighted_gather(&mut self, x: Var, idx: &[usize], weights: &[f64], k: usize) -> Result<Var> {
        if k == 0 || idx.len() != weights.len() || idx.len() % k != 0 {
            return Err(dim_err!("weighted_gather: {} indices, {} weights, k={}", idx.len(), weights.len(), k));
        }
        let xv = self.value(x);
        let (rows, c) = (xv.rows(), xv.cols());
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(dim_err!("weighted_gather: index {} out of range for {} rows", bad, rows));
        }
        let m = idx.len() / k;
        let mut out = vec![0.0; m * c];
        for i in 0..m {
            let dst = &mut out[i * c..(i + 1) * c];
            for j in 0..k {
                let w = weights[i * k + j];
                for (d, s) in dst.iter_mut().zip(xv.row(idx[i * k + j])) {
                    *d += w * s;
                }
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::new(vec![m, c], out)?,
            rg,
            Op::WeightedGather { x, idx: idx.to_vec(), weights: weights.to_vec(), k },
        ))
    }

    /// Registers an operation whose value the caller computed and whose
    /// backward rule the caller supplies.
    pub fn custom(&mut self, inputs: &[Var], value: Tensor, backward: CustomBackward) -> Var {
        let rg = self.rg(inputs);
        self.push(value, rg, Op::Custom { inputs: inputs.to_vec(), backward })
    }

    /// Hash of every piecewise-linear decision on the tape: which ReLU
    /// inputs are positive and which positions won each max-pool. Two
    /// evaluations with equal signatures lie on the same smooth piece.
    pub fn branch_signature(&self) -> u64 {
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu(x) => {
                    for &a in self.value(*x).data() {
                        (a > 0.0).hash(&mut h);
                    }
                }
                Op::MaxPool { argmax, .. } => argmax.hash(&mut h),
                _ => {}
            }
        }
        h.finish()
    }

    // ----- reverse sweep --------------------------------------------------

    /// Propagates d`loss`/d`leaf` into every differentiable leaf. Gradients
    /// add onto whatever a previous call left; use [`Graph::zero_grad`] to
    /// reset. Leaves not connected to `loss` receive exact zeros.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut adj: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        adj[loss.0] = Some(Tensor::full(self.shape(loss), 1.0));
        for id in (0..=loss.0).rev() {
            if !self.nodes[id].requires_grad {
                continue;
            }
            let Some(dy) = adj[id].take() else { continue };
            if let Op::Leaf = self.nodes[id].op {
                let node = &mut self.nodes[id];
                match &mut node.grad {
                    Some(g) => g.add_assign(&dy),
                    None => node.grad = Some(dy),
                }
                continue;
            }
            for (v, g) in self.input_grads(id, &dy)? {
                if !self.nodes[v.0].requires_grad {
                    continue;
                }
                match &mut adj[v.0] {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        for node in &mut self.nodes {
            if node.requires_grad && matches!(node.op, Op::Leaf) && node.grad.is_none() {
                node.grad = Some(Tensor::zeros(node.value.shape()));
            }
        }
        Ok(())
    }

    fn input_grads(&self, id: usize, dy: &Tensor) -> Result<Vec<(Var, Tensor)>> {
        let node = &self.nodes[id];
        let val = |v: Var| &self.nodes[v.0].value;
        let out = match &node.op {
            Op::Leaf => vec![],
            Op::MatMul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let r = av.rank();
                let (m, k) = (av.shape()[r - 2], av.shape()[r - 1]);
                let p = bv.shape()[r - 1];
                let batch = av.len() / (m * k);
                let mut da = vec![0.0; av.len()];
                let mut db = vec![0.0; bv.len()];
                let d = dy.data();
                for bi in 0..batch {
                    // dA = dC · Bᵀ
                    gemm(
                        m,
                        p,
                        k,
                        &d[bi * m * p..],
                        (p as isize, 1),
                        &bv.data()[bi * k * p..],
                        (1, p as isize),
                        &mut da[bi * m * k..(bi + 1) * m * k],
                    );
                    // dB = Aᵀ · dC
                    gemm(
                        k,
                        m,
                        p,
                        &av.data()[bi * m * k..],
                        (1, k as isize),
                        &d[bi * m * p..],
                        (p as isize, 1),
                        &mut db[bi * k * p..(bi + 1) * k * p],
                    );
                }
                vec![
                    (*a, Tensor::new(av.shape().to_vec(), da)?),
                    (*b, Tensor::new(bv.shape().to_vec(), db)?),
                ]
            }
            Op::Add(a, b) => vec![(*a, dy.clone()), (*b, dy.clone())],
            Op::AddBias(x, b) => {
                let c = dy.cols();
                let mut db = vec![0.0; c];
                for row in dy.data().chunks(c) {
                    for (s, v) in db.iter_mut().zip(row) {
                        *s += v;
                    }
                }
                vec![(*x, dy.clone()), (*b, Tensor::new(vec![c], db)?)]
            }
            Op::Sub(a, b) => vec![(*a, dy.clone()), (*b, dy.map(|v| -v))],
            Op::Mul(a, b) => vec![
                (*a, zip_map(dy, val(*b), |g, y| g * y)),
                (*b, zip_map(dy, val(*a), |g, x| g * x)),
            ],
            Op::Scale(x, s) => vec![(*x, dy.map(|v| v * s))],
            Op::Relu(x) => vec![(*x, zip_map(dy, val(*x), |g, a| if a > 0.0 { g } else { 0.0 }))],
            Op::Concat { inputs, axis } => {
                let first = val(inputs[0]).shape();
                let outer: usize = first[..*axis].iter().product();
                let inner: usize = first[axis + 1..].iter().product();
                let total = dy.shape()[*axis] * inner;
                let mut offset = 0;
                let mut grads = Vec::with_capacity(inputs.len());
                for &v in inputs {
                    let chunk = val(v).shape()[*axis] * inner;
                    let mut g = Vec::with_capacity(val(v).len());
                    for o in 0..outer {
                        let start = o * total + offset;
                        g.extend_from_slice(&dy.data()[start..start + chunk]);
                    }
                    offset += chunk;
                    grads.push((v, Tensor::new(val(v).shape().to_vec(), g)?));
                }
                grads
            }
            Op::Reshape(x) => vec![(*x, dy.clone().reshape(val(*x).shape())?)],
            Op::Transpose(x) => vec![(*x, dy.transpose_last()?)],
            Op::Sum(x) => vec![(*x, Tensor::full(val(*x).shape(), dy.data()[0]))],
            Op::SoftmaxCols(x) => {
                let y = &node.value;
                let r = y.rank();
                let (m, n) = (y.shape()[r - 2], y.shape()[r - 1]);
                let mut dx = dy.clone();
                let mut dot = vec![0.0; n];
                for (gm, ym) in dx.data_mut().chunks_mut(m * n).zip(y.data().chunks(m * n)) {
                    dot.fill(0.0);
                    for (gr, yr) in gm.chunks(n).zip(ym.chunks(n)) {
                        for ((d, g), y) in dot.iter_mut().zip(gr).zip(yr) {
                            *d += g * y;
                        }
                    }
                    for (gr, yr) in gm.chunks_mut(n).zip(ym.chunks(n)) {
                        for ((g, y), d) in gr.iter_mut().zip(yr).zip(&dot) {
                            *g = y * (*g - d);
                        }
                    }
                }
                vec![(*x, dx)]
            }
            Op::L1NormalizeRows { x, eps } => {
                let xv = val(*x);
                let c = xv.cols();
                let mut dx = dy.clone();
                for (gr, xr) in dx.data_mut().chunks_mut(c).zip(xv.data().chunks(c)) {
                    let sum: f64 = xr.iter().sum();
                    if sum <= *eps {
                        gr.iter_mut().for_each(|g| *g /= eps);
                        continue;
                    }
                    let dot: f64 = gr.iter().zip(xr).map(|(g, x)| g * x).sum();
                    for g in gr.iter_mut() {
                        *g = *g / sum - dot / (sum * sum);
                    }
                }
                vec![(*x, dx)]
            }
            Op::MaxPool { x, argmax } => {
                let mut dx = Tensor::zeros(val(*x).shape());
                for (g, &i) in dy.data().iter().zip(argmax) {
                    dx.data_mut()[i] += g;
                }
                vec![(*x, dx)]
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, train } => {
                let c = dy.cols();
                let n = dy.rows() as f64;
                let g = val(*gamma).data();
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for (gr, xr) in dy.data().chunks(c).zip(xhat.data().chunks(c)) {
                    for j in 0..c {
                        dgamma[j] += gr[j] * xr[j];
                        dbeta[j] += gr[j];
                    }
                }
                let mut dx = dy.clone();
                for (dr, xr) in dx.data_mut().chunks_mut(c).zip(xhat.data().chunks(c)) {
                    for j in 0..c {
                        dr[j] = if *train {
                            g[j] * inv_std[j] * (dr[j] - dbeta[j] / n - xr[j] * dgamma[j] / n)
                        } else {
                            g[j] * inv_std[j] * dr[j]
                        };
                    }
                }
                vec![
                    (*x, dx),
                    (*gamma, Tensor::new(vec![c], dgamma)?),
                    (*beta, Tensor::new(vec![c], dbeta)?),
                ]
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let k = probs.cols();
                let scale = dy.data()[0] / labels.len() as f64;
                let mut dx = probs.clone();
                for (row, &l) in dx.data_mut().chunks_mut(k).zip(labels) {
                    row[l] -= 1.0;
                    row.iter_mut().for_each(|v| *v *= scale);
                }
                vec![(*logits, dx)]
            }
            Op::GatherRows { x, idx } => {
                let mut dx = Tensor::zeros(val(*x).shape());
                let c = dx.cols();
                for (i, &src) in idx.iter().enumerate() {
                    let g = dy.row(i);
                    for (d, v) in dx.data_mut()[src * c..(src + 1) * c].iter_mut().zip(g) {
                        *d += v;
                    }
                }
                vec![(*x, dx)]
            }
            Op::WeightedGather { x, idx, weights, k } => {
                let mut dx = Tensor::zeros(val(*x).shape());
                let c = dx.cols();
                for (i, g) in dy.data().chunks(c).enumerate() {
                    for j in 0..*k {
                        let (src, w) = (idx[i * k + j], weights[i * k + j]);
                        for (d, v) in dx.data_mut()[src * c..(src + 1) * c].iter_mut().zip(g) {
                            *d += w * v;
                        }
                    }
                }
                vec![(*x, dx)]
            }
            Op::Custom { inputs, backward } => {
                let ins: Vec<&Tensor> = inputs.iter().map(|&v| val(v)).collect();
                let grads = backward(&ins, &node.value, dy);
                if grads.len() != inputs.len() {
                    return Err(Error::Usage("custom backward returned wrong number of gradients".into()));
                }
                for (g, t) in grads.iter().zip(&ins) {
                    if g.shape() != t.shape() {
                        return Err(dim_err!("custom backward gradient {:?} vs input {:?}", g.shape(), t.shape()));
                    }
                }
                inputs.iter().copied().zip(grads).collect()
            }
        };
        Ok(out)
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("zip_map on equal shapes")
}

/// `c = a · b` for an `m×k` by `k×n` product, with `(row, col)` strides for
/// the operands and a row-major contiguous output.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (isize, isize),
    b: &[f64],
    (rsb, csb): (isize, isize),
    c: &mut [f64],
) {
    let a_span = (m as isize - 1) * rsa + (k as isize - 1) * csa;
    let b_span = (k as isize - 1) * rsb + (n as isize - 1) * csb;
    assert!((a_span as usize) < a.len() && (b_span as usize) < b.len() && c.len() >= m * n);
    // SAFETY: the assertion above bounds every strided read, and `c` holds
    // at least m·n contiguous row-major elements.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}
