//! Dense `f64` tensors with tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation applied to its nodes. Calling
//! [`Graph::backward`] on a scalar node walks the tape in reverse and returns
//! the derivative of that scalar with respect to every grad-enabled leaf.
//! A graph can be differentiated exactly once; rebuild the forward pass to
//! differentiate again.
//!
//! ```
//! use fairsam_core::autodiff::{Graph, Tensor};
//!
//! let mut g = Graph::new();
//! let w = g.leaf(Tensor::scalar(3.0), true);
//! let loss = g.mul(w, w).unwrap();
//! let grads = g.backward(loss).unwrap();
//! assert_eq!(grads.get(w).unwrap().data(), &[6.0]);
//! ```

use crate::error::{Error, Result};

/// Row-major dense array of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::DataLength {
                shape,
                expected,
                actual: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    /// `n × n` identity matrix.
    pub fn eye(n: usize) -> Self {
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            data[i * n + i] = 1.0;
        }
        Self {
            shape: vec![n, n],
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1 && self.shape.iter().all(|&d| d == 1)
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Option<f64> {
        (self.data.len() == 1).then(|| self.data[0])
    }

    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    /// Number of values per leading-axis entry.
    pub fn row_len(&self) -> usize {
        self.shape.iter().skip(1).product()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let w = self.row_len();
        &self.data[i * w..(i + 1) * w]
    }

    /// Copies the listed leading-axis entries into a new tensor.
    pub fn select_rows(&self, idx: &[usize]) -> Tensor {
        let w = self.row_len();
        let mut data = Vec::with_capacity(idx.len() * w);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        let mut shape = self.shape.clone();
        if shape.is_empty() {
            shape.push(idx.len());
        } else {
            shape[0] = idx.len();
        }
        Tensor { shape, data }
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        Self::new(shape, self.data)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Mean(Var),
    Sum(Var),
    WeightedSum(Var, Vec<f64>),
    Slice { src: Var, offset: usize },
    Softmax(Var),
    Column(Var, usize),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Derivatives of a scalar with respect to the grad-enabled leaves of a graph.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.grads.get_mut(var.0).and_then(|g| g.take())
    }

    /// Leaves that received an entry, in creation order.
    pub fn vars(&self) -> impl Iterator<Item = Var> + '_ {
        self.grads
            .iter()
            .enumerate()
            .filter(|(_, g)| g.is_some())
            .map(|(i, _)| Var(i))
    }
}

/// Operation tape.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    consumed: bool,
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn mismatch(&self, op: &'static str, a: Var, b: Var) -> Error {
        Error::ShapeMismatch {
            op,
            left: self.value(a).shape.clone(),
            right: self.value(b).shape.clone(),
        }
    }

    /// `(m × k) · (k × n)`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape.len() != 2 || tb.shape.len() != 2 || ta.shape[1] != tb.shape[0] {
            return Err(self.mismatch("matmul", a, b));
        }
        let (m, k, n) = (ta.shape[0], ta.shape[1], tb.shape[1]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let arow = &ta.data[i * k..(i + 1) * k];
            let orow = &mut out[i * n..(i + 1) * n];
            for (p, &av) in arow.iter().enumerate() {
                let brow = &tb.data[p * n..(p + 1) * n];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(
            Tensor {
                shape: vec![m, n],
                data: out,
            },
            Op::MatMul(a, b),
            ng,
        ))
    }

    fn zip_same(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape != tb.shape {
            return Err(self.mismatch(name, a, b));
        }
        let data = ta.data.iter().zip(&tb.data).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor {
            shape: ta.shape.clone(),
            data,
        };
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(value, op, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Adds a length-`n` bias to every row of an `m × n` matrix.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(bias));
        if ta.shape.len() != 2 || tb.shape.len() != 1 || ta.shape[1] != tb.shape[0] {
            return Err(self.mismatch("add_bias", a, bias));
        }
        let n = tb.shape[0];
        let data = ta
            .data
            .iter()
            .enumerate()
            .map(|(i, &x)| x + tb.data[i % n])
            .collect();
        let value = Tensor {
            shape: ta.shape.clone(),
            data,
        };
        let ng = self.ng(a) || self.ng(bias);
        Ok(self.push(value, Op::AddBias(a, bias), ng))
    }

    fn map(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let ta = self.value(a);
        let value = Tensor {
            shape: ta.shape.clone(),
            data: ta.data.iter().map(|&x| f(x)).collect(),
        };
        let ng = self.ng(a);
        self.push(value, op, ng)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.map(a, |x| s * x, Op::Scale(a, s))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map(a, |x| if x > 0.0 { x } else { 0.0 }, Op::Relu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.map(a, f64::tanh, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map(a, sigmoid, Op::Sigmoid(a))
    }

    /// Mean of all entries, as a scalar.
    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        if ta.data.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let m = ta.data.iter().sum::<f64>() / ta.data.len() as f64;
        let ng = self.ng(a);
        Ok(self.push(Tensor::scalar(m), Op::Mean(a), ng))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data.iter().sum::<f64>();
        let ng = self.ng(a);
        self.push(Tensor::scalar(s), Op::Sum(a), ng)
    }

    /// `Σ_i ω_i x_i` over all entries of `a`.
    pub fn weighted_sum(&mut self, a: Var, weights: &[f64]) -> Result<Var> {
        let ta = self.value(a);
        if ta.data.len() != weights.len() {
            return Err(Error::ShapeMismatch {
                op: "weighted_sum",
                left: ta.shape.clone(),
                right: vec![weights.len()],
            });
        }
        let s = ta.data.iter().zip(weights).map(|(x, w)| x * w).sum::<f64>();
        let ng = self.ng(a);
        Ok(self.push(
            Tensor::scalar(s),
            Op::WeightedSum(a, weights.to_vec()),
            ng,
        ))
    }

    /// Contiguous window of a flat vector, viewed with `shape`.
    pub fn slice(&mut self, src: Var, offset: usize, shape: &[usize]) -> Result<Var> {
        let ts = self.value(src);
        let n: usize = shape.iter().product();
        if offset + n > ts.data.len() {
            return Err(Error::ShapeMismatch {
                op: "slice",
                left: ts.shape.clone(),
                right: shape.to_vec(),
            });
        }
        let value = Tensor {
            shape: shape.to_vec(),
            data: ts.data[offset..offset + n].to_vec(),
        };
        let ng = self.ng(src);
        Ok(self.push(value, Op::Slice { src, offset }, ng))
    }

    /// Row-wise softmax of an `m × n` matrix.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        if ta.shape.len() != 2 {
            return Err(Error::ShapeMismatch {
                op: "softmax",
                left: ta.shape.clone(),
                right: vec![0, 0],
            });
        }
        let (m, n) = (ta.shape[0], ta.shape[1]);
        let mut data = Vec::with_capacity(m * n);
        for i in 0..m {
            data.extend(softmax_row(&ta.data[i * n..(i + 1) * n]));
        }
        let value = Tensor {
            shape: vec![m, n],
            data,
        };
        let ng = self.ng(a);
        Ok(self.push(value, Op::Softmax(a), ng))
    }

    /// Column `j` of an `m × n` matrix, as a length-`m` vector.
    pub fn column(&mut self, a: Var, j: usize) -> Result<Var> {
        let ta = self.value(a);
        if ta.shape.len() != 2 || j >= ta.shape[1] {
            return Err(Error::ShapeMismatch {
                op: "column",
                left: ta.shape.clone(),
                right: vec![j],
            });
        }
        let n = ta.shape[1];
        let data = (0..ta.shape[0]).map(|i| ta.data[i * n + j]).collect();
        let ng = self.ng(a);
        Ok(self.push(Tensor::vector(data), Op::Column(a, j), ng))
    }

    /// Per-sample softmax cross-entropy: returns the vector `(ℓ_1, …, ℓ_m)`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let tl = self.value(logits);
        if tl.shape.len() != 2 || tl.shape[0] != labels.len() {
            return Err(Error::ShapeMismatch {
                op: "cross_entropy",
                left: tl.shape.clone(),
                right: vec![labels.len()],
            });
        }
        let (m, n) = (tl.shape[0], tl.shape[1]);
        let mut probs = Vec::with_capacity(m * n);
        let mut losses = Vec::with_capacity(m);
        for (i, &y) in labels.iter().enumerate() {
            if y >= n {
                return Err(Error::LabelOutOfRange {
                    label: y,
                    classes: n,
                });
            }
            let row = &tl.data[i * n..(i + 1) * n];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
            losses.push(lse - row[y]);
            probs.extend(row.iter().map(|z| (z - lse).exp()));
        }
        let ng = self.ng(logits);
        Ok(self.push(
            Tensor::vector(losses),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            ng,
        ))
    }

    /// Cross-entropy reduced to `Σ ω_i ℓ_i / Σ ω_i`; uniform weights when `None`.
    pub fn cross_entropy_mean(
        &mut self,
        logits: Var,
        labels: &[usize],
        weights: Option<&[f64]>,
    ) -> Result<Var> {
        let per_sample = self.cross_entropy(logits, labels)?;
        match weights {
            None => self.mean(per_sample),
            Some(w) => {
                let total: f64 = w.iter().sum();
                if total == 0.0 || !total.is_finite() {
                    return Err(Error::NonFinite("cross_entropy_mean weight total".into()));
                }
                let normalized: Vec<f64> = w.iter().map(|x| x / total).collect();
                self.weighted_sum(per_sample, &normalized)
            }
        }
    }

    /// Reverse-mode derivatives of the scalar `loss` with respect to every
    /// grad-enabled leaf. Consumes the tape.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::BackwardAlreadyRun);
        }
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(Error::NonScalarLoss(lv.shape.clone()));
        }
        if !self.ng(loss) {
            return Err(Error::NoGradPath);
        }
        self.consumed = true;

        let mut adj: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(up) = adj[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            match &node.op {
                Op::Leaf => {
                    adj[idx] = Some(up);
                }
                Op::MatMul(a, b) => {
                    let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                    let (m, k, n) = (ta.shape[0], ta.shape[1], tb.shape[1]);
                    if self.ng(*a) {
                        // dA = dC · Bᵀ
                        let mut ga = vec![0.0; m * k];
                        for i in 0..m {
                            let urow = &up[i * n..(i + 1) * n];
                            for p in 0..k {
                                let brow = &tb.data[p * n..(p + 1) * n];
                                ga[i * k + p] =
                                    urow.iter().zip(brow).map(|(u, b)| u * b).sum::<f64>();
                            }
                        }
                        accumulate(&mut adj, a.0, ga);
                    }
                    if self.ng(*b) {
                        // dB = Aᵀ · dC
                        let mut gb = vec![0.0; k * n];
                        for i in 0..m {
                            let urow = &up[i * n..(i + 1) * n];
                            for p in 0..k {
                                let av = ta.data[i * k + p];
                                let grow = &mut gb[p * n..(p + 1) * n];
                                for (g, u) in grow.iter_mut().zip(urow) {
                                    *g += av * u;
                                }
                            }
                        }
                        accumulate(&mut adj, b.0, gb);
                    }
                }
                Op::Add(a, b) => {
                    if self.ng(*a) {
                        accumulate(&mut adj, a.0, up.clone());
                    }
                    if self.ng(*b) {
                        accumulate(&mut adj, b.0, up);
                    }
                }
                Op::Sub(a, b) => {
                    if self.ng(*a) {
                        accumulate(&mut adj, a.0, up.clone());
                    }
                    if self.ng(*b) {
                        accumulate(&mut adj, b.0, up.iter().map(|u| -u).collect());
                    }
                }
                Op::Mul(a, b) => {
                    let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                    if self.ng(*a) {
                        let g = up.iter().zip(&tb.data).map(|(u, y)| u * y).collect();
                        accumulate(&mut adj, a.0, g);
                    }
                    if self.ng(*b) {
                        let g = up.iter().zip(&ta.data).map(|(u, x)| u * x).collect();
                        accumulate(&mut adj, b.0, g);
                    }
                }
                Op::AddBias(a, bias) => {
                    if self.ng(*bias) {
                        let n = self.nodes[bias.0].value.data.len();
                        let mut gb = vec![0.0; n];
                        for (i, u) in up.iter().enumerate() {
                            gb[i % n] += u;
                        }
                        accumulate(&mut adj, bias.0, gb);
                    }
                    if self.ng(*a) {
                        accumulate(&mut adj, a.0, up);
                    }
                }
                Op::Scale(a, s) => {
                    let g = up.iter().map(|u| u * s).collect();
                    accumulate(&mut adj, a.0, g);
                }
                Op::Relu(a) => {
                    let x = &self.nodes[a.0].value.data;
                    let g = up
                        .iter()
                        .zip(x)
                        .map(|(u, &x)| if x > 0.0 { *u } else { 0.0 })
                        .collect();
                    accumulate(&mut adj, a.0, g);
                }
                Op::Tanh(a) => {
                    let y = &node.value.data;
                    let g = up.iter().zip(y).map(|(u, y)| u * (1.0 - y * y)).collect();
                    accumulate(&mut adj, a.0, g);
                }
                Op::Sigmoid(a) => {
                    let y = &node.value.data;
                    let g = up.iter().zip(y).map(|(u, y)| u * y * (1.0 - y)).collect();
                    accumulate(&mut adj, a.0, g);
                }
                Op::Mean(a) => {
                    let n = self.nodes[a.0].value.data.len();
                    accumulate(&mut adj, a.0, vec![up[0] / n as f64; n]);
                }
                Op::Sum(a) => {
                    let n = self.nodes[a.0].value.data.len();
                    accumulate(&mut adj, a.0, vec![up[0]; n]);
                }
                Op::WeightedSum(a, w) => {
                    let g = w.iter().map(|w| up[0] * w).collect();
                    accumulate(&mut adj, a.0, g);
                }
                Op::Slice { src, offset } => {
                    let mut g = vec![0.0; self.nodes[src.0].value.data.len()];
                    g[*offset..offset + up.len()].copy_from_slice(&up);
                    accumulate(&mut adj, src.0, g);
                }
                Op::Softmax(a) => {
                    let (m, n) = (node.value.shape[0], node.value.shape[1]);
                    let y = &node.value.data;
                    let mut g = vec![0.0; m * n];
                    for i in 0..m {
                        let yr = &y[i * n..(i + 1) * n];
                        let ur = &up[i * n..(i + 1) * n];
                        let dot: f64 = yr.iter().zip(ur).map(|(y, u)| y * u).sum();
                        for j in 0..n {
                            g[i * n + j] = yr[j] * (ur[j] - dot);
                        }
                    }
                    accumulate(&mut adj, a.0, g);
                }
                Op::Column(a, j) => {
                    let shape = &self.nodes[a.0].value.shape;
                    let n = shape[1];
                    let mut g = vec![0.0; shape[0] * n];
                    for (i, u) in up.iter().enumerate() {
                        g[i * n + j] = *u;
                    }
                    accumulate(&mut adj, a.0, g);
                }
                Op::CrossEntropy {
                    logits,
                    labels,
                    probs,
                } => {
                    let n = self.nodes[logits.0].value.shape[1];
                    let mut g = probs.clone();
                    for (i, &y) in labels.iter().enumerate() {
                        let row = &mut g[i * n..(i + 1) * n];
                        row[y] -= 1.0;
                        for v in row.iter_mut() {
                            *v *= up[i];
                        }
                    }
                    accumulate(&mut adj, logits.0, g);
                }
            }
        }

        let mut grads = Vec::with_capacity(adj.len());
        for (idx, a) in adj.into_iter().enumerate() {
            let node = &self.nodes[idx];
            let entry = if matches!(node.op, Op::Leaf) && node.needs_grad {
                let data = a.unwrap_or_else(|| vec![0.0; node.value.data.len()]);
                Some(Tensor {
                    shape: node.value.shape.clone(),
                    data,
                })
            } else {
                None
            };
            grads.push(entry);
        }
        // Leaves created after the loss node are unreachable from it.
        for node in &self.nodes[grads.len()..] {
            grads.push(
                (matches!(node.op, Op::Leaf) && node.needs_grad)
                    .then(|| Tensor::zeros(&node.value.shape)),
            );
        }
        Ok(Gradients { grads })
    }
}

fn accumulate(adj: &mut [Option<Vec<f64>>], idx: usize, g: Vec<f64>) {
    match &mut adj[idx] {
        Some(acc) => {
            for (a, v) in acc.iter_mut().zip(g) {
                *a += v;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softmax_row(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|z| (z - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Compares reverse-mode derivatives of `f` at `params` against central
/// differences with step `h`. Returns the largest coordinate-wise
/// `|analytic − numeric| / max(|analytic|, |numeric|, 1e-12)`.
///
/// `f` receives a fresh graph and a flat grad-enabled leaf holding the
/// parameters and must return a scalar node.
pub fn grad_check<F>(f: F, params: &[f64], h: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    if !(h > 0.0) {
        return Err(Error::config("grad_check step must be positive"));
    }
    let mut g = Graph::new();
    let p = g.leaf(Tensor::vector(params.to_vec()), true);
    let out = f(&mut g, p)?;
    if !g.value(out).all_finite() {
        return Err(Error::NonFinite("grad_check objective".into()));
    }
    let analytic = if g.requires_grad(out) {
        g.backward(out)?.take(p).expect("leaf gradient").into_data()
    } else {
        vec![0.0; params.len()]
    };

    let eval = |x: Vec<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let p = g.leaf(Tensor::vector(x), false);
        let out = f(&mut g, p)?;
        let v = g
            .value(out)
            .item()
            .ok_or_else(|| Error::NonScalarLoss(g.value(out).shape().to_vec()))?;
        if !v.is_finite() {
            return Err(Error::NonFinite("grad_check objective".into()));
        }
        Ok(v)
    };

    let mut worst = 0.0f64;
    let mut x = params.to_vec();
    for i in 0..params.len() {
        x[i] = params[i] + h;
        let plus = eval(x.clone())?;
        x[i] = params[i] - h;
        let minus = eval(x.clone())?;
        x[i] = params[i];
        let numeric = (plus - minus) / (2.0 * h);
        let a = analytic[i];
        let denom = a.abs().max(numeric.abs()).max(1e-12);
        worst = worst.max((a - numeric).abs() / denom);
    }
    Ok(worst)
}
