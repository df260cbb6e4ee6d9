//! Small MLP classifiers living on a flat parameter vector.
//!
//! Every weight and bias tensor is a window of one [`ParamVector`], so a
//! gradient with respect to the model is itself a flat vector of the same
//! length and a SAM perturbation is a plain vector add.

use std::fs;
use std::path::Path;

use rand::distr::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Hidden-layer nonlinearity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
}

/// Where one parameter tensor sits inside a [`ParamVector`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamSlot {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl ParamSlot {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Ordered concatenation of parameter tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    values: Vec<f64>,
    layout: Vec<ParamSlot>,
}

impl ParamVector {
    /// Concatenates named tensors in the given order.
    pub fn flatten(tensors: &[(String, Tensor)]) -> Self {
        let mut values = Vec::new();
        let mut layout = Vec::with_capacity(tensors.len());
        for (name, t) in tensors {
            layout.push(ParamSlot {
                name: name.clone(),
                shape: t.shape().to_vec(),
                offset: values.len(),
            });
            values.extend_from_slice(t.data());
        }
        Self { values, layout }
    }

    /// Builds a vector from raw values and an existing layout.
    pub fn from_values(values: Vec<f64>, layout: Vec<ParamSlot>) -> Result<Self> {
        let expected: usize = layout.iter().map(ParamSlot::len).sum();
        if values.len() != expected {
            return Err(Error::LengthMismatch {
                what: "parameter vector",
                expected,
                actual: values.len(),
            });
        }
        Ok(Self { values, layout })
    }

    pub fn unflatten(&self) -> Vec<(String, Tensor)> {
        self.layout
            .iter()
            .map(|slot| {
                let data = self.values[slot.offset..slot.offset + slot.len()].to_vec();
                let t = Tensor::new(slot.shape.clone(), data).expect("layout consistent");
                (slot.name.clone(), t)
            })
            .collect()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn layout(&self) -> &[ParamSlot] {
        &self.layout
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn tensor(&self, slot: usize) -> Tensor {
        let s = &self.layout[slot];
        Tensor::new(
            s.shape.clone(),
            self.values[s.offset..s.offset + s.len()].to_vec(),
        )
        .expect("layout consistent")
    }
}

/// A SAM-style parameter perturbation `ε` with `‖ε‖_p ≤ ρ`.
#[derive(Debug, Clone, PartialEq)]
pub struct Perturbation {
    values: Vec<f64>,
    p: f64,
    rho: f64,
}

impl Perturbation {
    pub fn new(values: Vec<f64>, p: f64, rho: f64) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("perturbation".into()));
        }
        let norm = p_norm(&values, p);
        if norm > rho + 1e-12 * rho.max(1.0) {
            return Err(Error::config(format!(
                "perturbation norm {norm} exceeds radius {rho}"
            )));
        }
        Ok(Self { values, p, rho })
    }

    pub fn zeros(len: usize, p: f64, rho: f64) -> Self {
        Self {
            values: vec![0.0; len],
            p,
            rho,
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn p(&self) -> f64 {
        self.p
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn norm(&self) -> f64 {
        p_norm(&self.values, self.p)
    }

    pub fn is_zero(&self) -> bool {
        self.values.iter().all(|&v| v == 0.0)
    }
}

/// `‖x‖_p` for `p ∈ [1, ∞]`.
pub fn p_norm(x: &[f64], p: f64) -> f64 {
    if p.is_infinite() {
        return x.iter().fold(0.0, |m, v| m.max(v.abs()));
    }
    let scale = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if scale == 0.0 {
        return 0.0;
    }
    if p == 2.0 {
        return x.iter().map(|v| v * v).sum::<f64>().sqrt();
    }
    scale
        * x.iter()
            .map(|v| (v.abs() / scale).powf(p))
            .sum::<f64>()
            .powf(1.0 / p)
}

/// How per-sample losses are reduced before differentiation.
#[derive(Debug, Clone, Copy)]
pub enum Reduction<'a> {
    /// `(1/n) Σ ℓ_i`.
    Mean,
    /// `Σ ω_i ℓ_i` with caller-supplied weights (not normalized).
    Weighted(&'a [f64]),
}

/// Loss values and the flat gradient of the reduced loss.
#[derive(Debug, Clone)]
pub struct LossGrad {
    pub per_sample: Vec<f64>,
    pub loss: f64,
    pub grad: Vec<f64>,
}

/// Fully connected classifier.
#[derive(Debug, Clone)]
pub struct MlpModel {
    widths: Vec<usize>,
    activation: Activation,
    params: ParamVector,
    saved: Vec<Vec<f64>>,
}

impl PartialEq for MlpModel {
    fn eq(&self, other: &Self) -> bool {
        self.widths == other.widths
            && self.activation == other.activation
            && self.params == other.params
    }
}

fn layout_for(widths: &[usize]) -> Vec<ParamSlot> {
    let mut layout = Vec::new();
    let mut offset = 0;
    for (l, w) in widths.windows(2).enumerate() {
        layout.push(ParamSlot {
            name: format!("layer{l}.weight"),
            shape: vec![w[0], w[1]],
            offset,
        });
        offset += w[0] * w[1];
        layout.push(ParamSlot {
            name: format!("layer{l}.bias"),
            shape: vec![w[1]],
            offset,
        });
        offset += w[1];
    }
    layout
}

fn validate_widths(widths: &[usize]) -> Result<()> {
    if widths.len() < 2 {
        return Err(Error::config("an MLP needs at least input and output widths"));
    }
    if widths.contains(&0) {
        return Err(Error::config("layer widths must be positive"));
    }
    if *widths.last().unwrap() < 2 {
        return Err(Error::config("final width is the class count and must be ≥ 2"));
    }
    Ok(())
}

impl MlpModel {
    /// Glorot-uniform weights and zero biases, seeded.
    pub fn new(widths: &[usize], activation: Activation, seed: u64) -> Result<Self> {
        validate_widths(widths)?;
        let layout = layout_for(widths);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut values = Vec::with_capacity(layout.iter().map(ParamSlot::len).sum());
        for slot in &layout {
            if slot.shape.len() == 2 {
                let bound = (6.0 / (slot.shape[0] + slot.shape[1]) as f64).sqrt();
                let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
                values.extend((0..slot.len()).map(|_| dist.sample(&mut rng)));
            } else {
                values.extend(std::iter::repeat_n(0.0, slot.len()));
            }
        }
        Ok(Self {
            widths: widths.to_vec(),
            activation,
            params: ParamVector { values, layout },
            saved: Vec::new(),
        })
    }

    pub fn from_params(widths: &[usize], activation: Activation, values: Vec<f64>) -> Result<Self> {
        validate_widths(widths)?;
        let params = ParamVector::from_values(values, layout_for(widths))?;
        Ok(Self {
            widths: widths.to_vec(),
            activation,
            params,
            saved: Vec::new(),
        })
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn classes(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &ParamVector {
        &self.params
    }

    pub fn set_params(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.params.len() {
            return Err(Error::LengthMismatch {
                what: "parameter vector",
                expected: self.params.len(),
                actual: values.len(),
            });
        }
        self.params.values.copy_from_slice(values);
        Ok(())
    }

    pub(crate) fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params.values
    }

    pub fn weight(&self, layer: usize) -> Tensor {
        self.params.tensor(2 * layer)
    }

    pub fn bias(&self, layer: usize) -> Tensor {
        self.params.tensor(2 * layer + 1)
    }

    /// Records the forward pass on `g`, with parameters read from the flat
    /// node `params`. Returns the logits node.
    pub fn build(&self, g: &mut Graph, x: Var, params: Var) -> Result<Var> {
        let xs = g.value(x).shape();
        if xs.len() != 2 || xs[1] != self.input_dim() {
            return Err(Error::ShapeMismatch {
                op: "mlp forward",
                left: xs.to_vec(),
                right: vec![self.input_dim()],
            });
        }
        let layers = self.widths.len() - 1;
        let mut h = x;
        for l in 0..layers {
            let ws = &self.params.layout[2 * l];
            let bs = &self.params.layout[2 * l + 1];
            let w = g.slice(params, ws.offset, &ws.shape)?;
            let b = g.slice(params, bs.offset, &bs.shape)?;
            let z = g.matmul(h, w)?;
            h = g.add_bias(z, b)?;
            if l + 1 < layers {
                h = match self.activation {
                    Activation::Relu => g.relu(h),
                    Activation::Tanh => g.tanh(h),
                };
            }
        }
        Ok(h)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let pv = g.constant(Tensor::vector(self.params.values.clone()));
        let out = self.build(&mut g, xv, pv)?;
        Ok(g.value(out).clone())
    }

    /// Argmax class per row.
    pub fn predict(&self, x: &Tensor) -> Result<Vec<usize>> {
        let logits = self.forward(x)?;
        Ok((0..logits.rows())
            .map(|i| {
                let row = logits.row(i);
                let mut best = 0;
                for (j, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = j;
                    }
                }
                best
            })
            .collect())
    }

    /// Softmax cross-entropy `ℓ_i` for every sample.
    pub fn per_sample_losses(&self, x: &Tensor, y: &[usize]) -> Result<Tensor> {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let pv = g.constant(Tensor::vector(self.params.values.clone()));
        let logits = self.build(&mut g, xv, pv)?;
        let l = g.cross_entropy(logits, y)?;
        Ok(g.value(l).clone())
    }

    /// Per-sample losses, the reduced loss, and its flat gradient.
    pub fn loss_grad(&self, x: &Tensor, y: &[usize], reduction: Reduction<'_>) -> Result<LossGrad> {
        match reduction {
            Reduction::Mean => self.reduce_and_grad(x, y, |g, per| g.mean(per)),
            Reduction::Weighted(w) => self.reduce_and_grad(x, y, |g, per| g.weighted_sum(per, w)),
        }
    }

    /// Like [`loss_grad`](Self::loss_grad) with `Σ ω_i ℓ_i`, where the
    /// weights are chosen after seeing the per-sample losses of this same
    /// forward pass. Returns the weights that were used.
    pub fn loss_grad_reweighed<F>(&self, x: &Tensor, y: &[usize], weights: F) -> Result<(LossGrad, Vec<f64>)>
    where
        F: FnOnce(&[f64]) -> Result<Vec<f64>>,
    {
        let mut used = Vec::new();
        let lg = self.reduce_and_grad(x, y, |g, per| {
            used = weights(g.value(per).data())?;
            g.weighted_sum(per, &used)
        })?;
        Ok((lg, used))
    }

    fn reduce_and_grad<F>(&self, x: &Tensor, y: &[usize], reduce: F) -> Result<LossGrad>
    where
        F: FnOnce(&mut Graph, Var) -> Result<Var>,
    {
        if y.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let pv = g.leaf(Tensor::vector(self.params.values.clone()), true);
        let logits = self.build(&mut g, xv, pv)?;
        let per = g.cross_entropy(logits, y)?;
        let loss = reduce(&mut g, per)?;
        let per_sample = g.value(per).data().to_vec();
        let loss_value = g.value(loss).data()[0];
        let grad = g.backward(loss)?.take(pv).expect("param leaf").into_data();
        Ok(LossGrad {
            per_sample,
            loss: loss_value,
            grad,
        })
    }

    /// `∇ℓ_i` for each sample, from one backward pass per sample.
    pub fn per_sample_grads(&self, x: &Tensor, y: &[usize]) -> Result<Vec<Vec<f64>>> {
        if y.len() != x.rows() {
            return Err(Error::LengthMismatch {
                what: "labels",
                expected: x.rows(),
                actual: y.len(),
            });
        }
        (0..y.len())
            .map(|i| {
                let xi = x.select_rows(&[i]);
                Ok(self.loss_grad(&xi, &y[i..=i], Reduction::Mean)?.grad)
            })
            .collect()
    }

    /// Shifts the parameters to `w + ε`. The previous values are kept so
    /// that [`remove_perturbation`](Self::remove_perturbation) restores them
    /// bit-exactly.
    pub fn apply_perturbation(&mut self, eps: &Perturbation) -> Result<()> {
        if eps.len() != self.params.len() {
            return Err(Error::LengthMismatch {
                what: "perturbation",
                expected: self.params.len(),
                actual: eps.len(),
            });
        }
        self.saved.push(self.params.values.clone());
        for (w, e) in self.params.values.iter_mut().zip(eps.values()) {
            *w += e;
        }
        Ok(())
    }

    /// Undoes the most recent [`apply_perturbation`](Self::apply_perturbation).
    pub fn remove_perturbation(&mut self, eps: &Perturbation) -> Result<()> {
        if eps.len() != self.params.len() {
            return Err(Error::LengthMismatch {
                what: "perturbation",
                expected: self.params.len(),
                actual: eps.len(),
            });
        }
        let prev = self.saved.pop().ok_or(Error::NoPerturbationApplied)?;
        self.params.values = prev;
        Ok(())
    }

    pub fn perturbation_depth(&self) -> usize {
        self.saved.len()
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            widths: self.widths.clone(),
            activation: self.activation,
            params: self.params.values.clone(),
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.format != CHECKPOINT_FORMAT || ck.version != CHECKPOINT_VERSION {
            return Err(Error::config(format!(
                "unsupported checkpoint {} v{}",
                ck.format, ck.version
            )));
        }
        Self::from_params(&ck.widths, ck.activation, ck.params.clone())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(&self.to_checkpoint())?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_checkpoint(&serde_json::from_str(&text)?)
    }
}

pub const CHECKPOINT_FORMAT: &str = "fairsam-mlp";
pub const CHECKPOINT_VERSION: u32 = 1;

/// On-disk model: layer widths, activation name and the flat parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub widths: Vec<usize>,
    pub activation: Activation,
    pub params: Vec<f64>,
}
