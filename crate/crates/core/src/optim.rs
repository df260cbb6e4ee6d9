//! SGD, SAM, GroupSAM, FairSAM and the Reweighed-ERM / FairReg baselines.
//!
//! Every method is a single deterministic step over one [`Batch`]. All of
//! them finish with the same decoupled update `w ← w − η(∇ + λw)`.
//!
//! FairSAM composes four pieces per batch:
//!
//! 1. per-sample gradients `∇ℓ_i(w)` and instance coefficients
//!    `g_i = a_i‖∇ℓ_i‖₂`;
//! 2. one backward pass on the reweighed batch `Σ γ_i g_i ℓ_i(w)`, whose
//!    gradient is normalized to the radius `ρ` to give `ε*`;
//! 3. per-sample losses at `w + ε*` and a per-group softmax of those losses
//!    (temperature `τ`, budget `c`) as the new `γ`;
//! 4. the update with `∇ Σ γ_i ℓ_i(w + ε*)`.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor};
use crate::error::{Error, Result};
use crate::models::{p_norm, MlpModel, Perturbation, Reduction};
use crate::Group;

/// Tolerance on `1/p + 1/q = 1`.
const CONJUGATE_TOL: f64 = 1e-9;

/// A mini-batch with group labels and the dataset indices of its rows.
#[derive(Debug, Clone)]
pub struct Batch {
    pub x: Tensor,
    pub y: Vec<usize>,
    pub groups: Vec<Group>,
    pub ids: Vec<usize>,
}

impl Batch {
    pub fn new(x: Tensor, y: Vec<usize>, groups: Vec<Group>) -> Result<Self> {
        let ids = (0..y.len()).collect();
        Self::with_ids(x, y, groups, ids)
    }

    pub fn with_ids(x: Tensor, y: Vec<usize>, groups: Vec<Group>, ids: Vec<usize>) -> Result<Self> {
        let n = x.rows();
        for (what, len) in [("labels", y.len()), ("groups", groups.len()), ("ids", ids.len())] {
            if len != n {
                return Err(Error::LengthMismatch {
                    what,
                    expected: n,
                    actual: len,
                });
            }
        }
        Ok(Self { x, y, groups, ids })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn count(&self, group: Group) -> usize {
        self.groups.iter().filter(|&&g| g == group).count()
    }

    /// Rows belonging to `group`, in batch order.
    pub fn subset(&self, group: Group) -> Batch {
        let idx: Vec<usize> = (0..self.len()).filter(|&i| self.groups[i] == group).collect();
        Batch {
            x: self.x.select_rows(&idx),
            y: idx.iter().map(|&i| self.y[i]).collect(),
            groups: idx.iter().map(|&i| self.groups[i]).collect(),
            ids: idx.iter().map(|&i| self.ids[i]).collect(),
        }
    }
}

/// What a step reports back.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome {
    /// The objective value the step differentiated, before the update.
    pub loss: f64,
}

/// Hyperparameters shared by the SAM family.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamConfig {
    pub rho: f64,
    pub p: f64,
    pub q: f64,
    pub lr: f64,
    pub weight_decay: f64,
}

impl Default for SamConfig {
    fn default() -> Self {
        Self {
            rho: 0.05,
            p: 2.0,
            q: 2.0,
            lr: 0.01,
            weight_decay: 5e-4,
        }
    }
}

impl SamConfig {
    pub fn l2(rho: f64, lr: f64, weight_decay: f64) -> Self {
        Self {
            rho,
            p: 2.0,
            q: 2.0,
            lr,
            weight_decay,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.rho >= 0.0) || !self.rho.is_finite() {
            return Err(Error::config(format!("rho must be ≥ 0, got {}", self.rho)));
        }
        if !(self.p >= 1.0) || !(self.q >= 1.0) || self.q.is_infinite() {
            return Err(Error::config(format!(
                "need p ≥ 1 and finite q ≥ 1, got p={} q={}",
                self.p, self.q
            )));
        }
        let conj = 1.0 / self.p + 1.0 / self.q;
        if (conj - 1.0).abs() > CONJUGATE_TOL {
            return Err(Error::config(format!(
                "1/p + 1/q = {conj}, expected 1 (p={}, q={})",
                self.p, self.q
            )));
        }
        validate_lr_wd(self.lr, self.weight_decay)
    }
}

fn validate_lr_wd(lr: f64, wd: f64) -> Result<()> {
    if !(lr >= 0.0) || !lr.is_finite() {
        return Err(Error::config(format!("learning rate must be ≥ 0, got {lr}")));
    }
    if !(wd >= 0.0) || !wd.is_finite() {
        return Err(Error::config(format!("weight decay must be ≥ 0, got {wd}")));
    }
    Ok(())
}

/// Rule for the Hessian scale `a_i` in `g_i = a_i‖∇ℓ_i‖₂`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case", tag = "rule", content = "value")]
pub enum AMode {
    /// `a_i = 1`.
    #[default]
    Unit,
    /// The same positive `a` for every sample.
    Constant(f64),
}

impl AMode {
    fn scale(&self) -> f64 {
        match *self {
            AMode::Unit => 1.0,
            AMode::Constant(a) => a,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FairSamConfig {
    pub rho: f64,
    pub lr: f64,
    pub weight_decay: f64,
    /// Per-group weight budget.
    pub c: f64,
    /// Softmax temperature of the weight update.
    pub tau: f64,
    pub a_mode: AMode,
    /// Reset `γ` to `c/n′` at the start of every epoch instead of carrying it.
    pub reset_weights_each_epoch: bool,
}

impl Default for FairSamConfig {
    fn default() -> Self {
        Self {
            rho: 0.05,
            lr: 0.01,
            weight_decay: 5e-4,
            c: 1.0,
            tau: 1.0,
            a_mode: AMode::Unit,
            reset_weights_each_epoch: false,
        }
    }
}

impl FairSamConfig {
    pub fn sam(&self) -> SamConfig {
        SamConfig::l2(self.rho, self.lr, self.weight_decay)
    }

    pub fn validate(&self) -> Result<()> {
        self.sam().validate()?;
        if !(self.c > 0.0) || !self.c.is_finite() {
            return Err(Error::config(format!("c must be > 0, got {}", self.c)));
        }
        if !(self.tau > 0.0) {
            return Err(Error::config(format!("tau must be > 0, got {}", self.tau)));
        }
        if let AMode::Constant(a) = self.a_mode {
            if !(a > 0.0) || !a.is_finite() {
                return Err(Error::config(format!("a must be > 0, got {a}")));
            }
        }
        Ok(())
    }
}

/// Per-sample fairness weights `γ`, summing to `c` within each group.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupWeights {
    gamma: Vec<f64>,
    groups: Vec<Group>,
    c: f64,
}

impl GroupWeights {
    pub fn gamma(&self) -> &[f64] {
        &self.gamma
    }

    pub fn groups(&self) -> &[Group] {
        &self.groups
    }

    pub fn c(&self) -> f64 {
        self.c
    }

    pub fn len(&self) -> usize {
        self.gamma.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gamma.is_empty()
    }

    pub fn group_sum(&self, group: Group) -> f64 {
        self.gamma
            .iter()
            .zip(&self.groups)
            .filter(|(_, &g)| g == group)
            .map(|(w, _)| w)
            .sum()
    }

    /// Non-negative weights and per-group sums of `c` within `tol` for every
    /// group that has members.
    pub fn is_feasible(&self, tol: f64) -> bool {
        self.gamma.iter().all(|&w| w >= 0.0)
            && Group::ALL
                .iter()
                .filter(|g| self.groups.contains(g))
                .all(|&g| (self.group_sum(g) - self.c).abs() <= tol)
    }
}

fn group_counts(groups: &[Group]) -> [usize; 2] {
    let mut counts = [0; 2];
    for g in groups {
        counts[g.index()] += 1;
    }
    counts
}

/// `γ_i = c / n′` with `n′` the size of sample `i`'s group. Both groups must
/// be present.
pub fn fairsam_init_weights(groups: &[Group], c: f64) -> Result<GroupWeights> {
    let counts = group_counts(groups);
    for g in Group::ALL {
        if counts[g.index()] == 0 {
            return Err(Error::EmptyGroup(g));
        }
    }
    init_present(groups, c)
}

/// `c / n′` over whichever groups appear in `groups`.
fn init_present(groups: &[Group], c: f64) -> Result<GroupWeights> {
    if !(c > 0.0) {
        return Err(Error::config(format!("c must be > 0, got {c}")));
    }
    let counts = group_counts(groups);
    Ok(GroupWeights {
        gamma: groups.iter().map(|g| c / counts[g.index()] as f64).collect(),
        groups: groups.to_vec(),
        c,
    })
}

/// `g_i = a_i ‖∇ℓ_i‖₂` for every sample.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceCoefficients {
    pub g: Vec<f64>,
}

pub fn fairsam_instance_coefficients(
    per_sample_grads: &[Vec<f64>],
    a_mode: AMode,
) -> Result<InstanceCoefficients> {
    let a = a_mode.scale();
    let g = per_sample_grads
        .iter()
        .map(|grad| {
            if grad.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("per-sample gradient".into()));
            }
            Ok(a * p_norm(grad, 2.0))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(InstanceCoefficients { g })
}

fn check_finite(grad: &[f64]) -> Result<()> {
    if grad.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite("gradient".into()))
    }
}

/// `ε = ρ·sign(∇)|∇|^{q−1} / (‖∇‖_q^q)^{1/p}`; zero for a zero gradient.
pub fn sam_perturbation_general(grad: &[f64], cfg: &SamConfig) -> Result<Perturbation> {
    check_finite(grad)?;
    cfg.validate()?;
    let scale = grad.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if cfg.rho == 0.0 || scale == 0.0 {
        return Ok(Perturbation::zeros(grad.len(), cfg.p, cfg.rho));
    }
    // The direction is invariant to rescaling the gradient; dividing by the
    // largest magnitude keeps |u|^q away from overflow and underflow.
    let u: Vec<f64> = grad.iter().map(|v| v / scale).collect();
    let inv_p = if cfg.p.is_infinite() { 0.0 } else { 1.0 / cfg.p };
    let denom = u
        .iter()
        .map(|v| v.abs().powf(cfg.q))
        .sum::<f64>()
        .powf(inv_p);
    let values = u
        .iter()
        .map(|&v| {
            if v == 0.0 {
                0.0
            } else {
                cfg.rho * v.signum() * v.abs().powf(cfg.q - 1.0) / denom
            }
        })
        .collect();
    Perturbation::new(values, cfg.p, cfg.rho)
}

/// `ε = ρ·∇/‖∇‖₂`; zero for a zero gradient.
pub fn sam_perturbation_l2(grad: &[f64], rho: f64) -> Result<Perturbation> {
    check_finite(grad)?;
    if !(rho >= 0.0) {
        return Err(Error::config(format!("rho must be ≥ 0, got {rho}")));
    }
    let norm = p_norm(grad, 2.0);
    if rho == 0.0 || norm == 0.0 {
        return Ok(Perturbation::zeros(grad.len(), 2.0, rho));
    }
    Perturbation::new(grad.iter().map(|g| rho * g / norm).collect(), 2.0, rho)
}

fn apply_update(model: &mut MlpModel, grad: &[f64], lr: f64, weight_decay: f64) -> Result<()> {
    check_finite(grad)?;
    for (w, g) in model.params_mut().iter_mut().zip(grad) {
        *w -= lr * (g + weight_decay * *w);
    }
    Ok(())
}

/// Plain SGD on the batch mean loss.
pub fn sgd_step(model: &mut MlpModel, batch: &Batch, lr: f64, weight_decay: f64) -> Result<StepOutcome> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let lg = model.loss_grad(&batch.x, &batch.y, Reduction::Mean)?;
    apply_update(model, &lg.grad, lr, weight_decay)?;
    Ok(StepOutcome { loss: lg.loss })
}

fn sam_perturbation(grad: &[f64], cfg: &SamConfig) -> Result<Perturbation> {
    if cfg.p == 2.0 && cfg.q == 2.0 {
        sam_perturbation_l2(grad, cfg.rho)
    } else {
        sam_perturbation_general(grad, cfg)
    }
}

/// Two-pass SAM: ascend to `w + ε`, take the gradient there, update `w`.
pub fn sam_step(model: &mut MlpModel, batch: &Batch, cfg: &SamConfig) -> Result<StepOutcome> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    cfg.validate()?;
    let at_w = model.loss_grad(&batch.x, &batch.y, Reduction::Mean)?;
    let eps = sam_perturbation(&at_w.grad, cfg)?;
    model.apply_perturbation(&eps)?;
    let perturbed = model.loss_grad(&batch.x, &batch.y, Reduction::Mean);
    model.remove_perturbation(&eps)?;
    let perturbed = perturbed?;
    apply_update(model, &perturbed.grad, cfg.lr, cfg.weight_decay)?;
    Ok(StepOutcome {
        loss: perturbed.loss,
    })
}

/// The perturbation GroupSAM would use on this batch: the normalized
/// gradient of the s⁻ share of the loss, `(1/n) Σ_{i∈s⁻} ℓ_i`.
pub fn groupsam_perturbation(model: &MlpModel, batch: &Batch, cfg: &SamConfig) -> Result<Perturbation> {
    let minus = batch.subset(Group::Disadvantaged);
    if minus.is_empty() {
        return Ok(Perturbation::zeros(model.num_params(), cfg.p, cfg.rho));
    }
    let w = vec![1.0 / batch.len() as f64; minus.len()];
    let g = model.loss_grad(&minus.x, &minus.y, Reduction::Weighted(&w))?;
    sam_perturbation(&g.grad, cfg)
}

/// SAM applied to the disadvantaged group only:
/// `∇[L_{s⁻}(w + ε⁻) + L_{s⁺}(w)] + λw`, with `L_s = (1/n) Σ_{i∈s} ℓ_i`.
pub fn groupsam_step(model: &mut MlpModel, batch: &Batch, cfg: &SamConfig) -> Result<StepOutcome> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    cfg.validate()?;
    let minus = batch.subset(Group::Disadvantaged);
    if minus.is_empty() {
        return sgd_step(model, batch, cfg.lr, cfg.weight_decay);
    }
    let plus = batch.subset(Group::Advantaged);
    let share = 1.0 / batch.len() as f64;

    let eps = groupsam_perturbation(model, batch, cfg)?;
    let wm = vec![share; minus.len()];
    model.apply_perturbation(&eps)?;
    let at_eps = model.loss_grad(&minus.x, &minus.y, Reduction::Weighted(&wm));
    model.remove_perturbation(&eps)?;
    let at_eps = at_eps?;

    let mut grad = at_eps.grad;
    let mut loss = at_eps.loss;
    if !plus.is_empty() {
        let wp = vec![share; plus.len()];
        let at_w = model.loss_grad(&plus.x, &plus.y, Reduction::Weighted(&wp))?;
        for (g, p) in grad.iter_mut().zip(&at_w.grad) {
            *g += p;
        }
        loss += at_w.loss;
    }
    apply_update(model, &grad, cfg.lr, cfg.weight_decay)?;
    Ok(StepOutcome { loss })
}

/// One step on `Σ γ_i ℓ_i` with the static `γ_i = c/n′` computed over the
/// groups present in the batch.
pub fn reweighed_erm_step(
    model: &mut MlpModel,
    batch: &Batch,
    c: f64,
    lr: f64,
    weight_decay: f64,
) -> Result<StepOutcome> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    validate_lr_wd(lr, weight_decay)?;
    let gamma = init_present(&batch.groups, c)?;
    let lg = model.loss_grad(&batch.x, &batch.y, Reduction::Weighted(gamma.gamma()))?;
    apply_update(model, &lg.grad, lr, weight_decay)?;
    Ok(StepOutcome { loss: lg.loss })
}

/// Class index whose probability the FairReg penalty equalizes.
pub const FAIRREG_POSITIVE_CLASS: usize = 1;

/// The FairReg objective on a batch.
#[derive(Debug, Clone)]
pub struct FairRegObjective {
    /// `mean ℓ + β·gap²`.
    pub loss: f64,
    /// `β·gap²`.
    pub penalty: f64,
    /// Mean positive-class probability of s⁺ minus that of s⁻.
    pub gap: f64,
    pub grad: Vec<f64>,
}

/// `mean ℓ + β·(p̄⁺ − p̄⁻)²`, where `p̄ˢ` is the mean positive-class
/// probability in group `s`. The penalty is zero unless both groups appear.
pub fn fairreg_objective(model: &MlpModel, batch: &Batch, beta: f64) -> Result<FairRegObjective> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let counts = group_counts(&batch.groups);
    let mut g = Graph::new();
    let xv = g.constant(batch.x.clone());
    let pv = g.leaf(Tensor::vector(model.params().values().to_vec()), true);
    let logits = model.build(&mut g, xv, pv)?;
    let ce = g.cross_entropy_mean(logits, &batch.y, None)?;
    let (loss, gap, penalty) = if counts[0] > 0 && counts[1] > 0 {
        let probs = g.softmax(logits)?;
        let pos = g.column(probs, FAIRREG_POSITIVE_CLASS)?;
        let signed: Vec<f64> = batch
            .groups
            .iter()
            .map(|grp| match grp {
                Group::Advantaged => 1.0 / counts[0] as f64,
                Group::Disadvantaged => -1.0 / counts[1] as f64,
            })
            .collect();
        let gap = g.weighted_sum(pos, &signed)?;
        let sq = g.mul(gap, gap)?;
        let pen = g.scale(sq, beta);
        let total = g.add(ce, pen)?;
        let (gv, pen_v) = (g.value(gap).data()[0], g.value(pen).data()[0]);
        (total, gv, pen_v)
    } else {
        (ce, 0.0, 0.0)
    };
    let loss_value = g.value(loss).data()[0];
    let grad = g.backward(loss)?.take(pv).expect("param leaf").into_data();
    Ok(FairRegObjective {
        loss: loss_value,
        penalty,
        gap,
        grad,
    })
}

pub fn fairreg_step(
    model: &mut MlpModel,
    batch: &Batch,
    beta: f64,
    lr: f64,
    weight_decay: f64,
) -> Result<StepOutcome> {
    validate_lr_wd(lr, weight_decay)?;
    let obj = fairreg_objective(model, batch, beta)?;
    apply_update(model, &obj.grad, lr, weight_decay)?;
    Ok(StepOutcome { loss: obj.loss })
}

/// `ε* = ρ·∇ℓ_b/‖∇ℓ_b‖₂` with `∇ℓ_b = ∇ Σ_i ω_i ℓ_i(w)` and `ω_i = γ_i·g_i`,
/// from a single backward pass on the reweighed batch.
pub fn fairsam_perturbation(
    model: &MlpModel,
    batch: &Batch,
    gamma: &GroupWeights,
    coeffs: &InstanceCoefficients,
    rho: f64,
) -> Result<Perturbation> {
    if gamma.len() != batch.len() || coeffs.g.len() != batch.len() {
        return Err(Error::LengthMismatch {
            what: "fairsam weights",
            expected: batch.len(),
            actual: gamma.len().min(coeffs.g.len()),
        });
    }
    let omega: Vec<f64> = gamma.gamma.iter().zip(&coeffs.g).map(|(a, b)| a * b).collect();
    if omega.iter().all(|&w| w == 0.0) {
        return Ok(Perturbation::zeros(model.num_params(), 2.0, rho));
    }
    let lb = model.loss_grad(&batch.x, &batch.y, Reduction::Weighted(&omega))?;
    sam_perturbation_l2(&lb.grad, rho)
}

/// Per-group softmax of the losses: `γ_i = c·exp(ℓ_i/τ) / Σ_{j∈g_s} exp(ℓ_j/τ)`.
/// Both groups must be present.
pub fn fairsam_update_weights(losses: &[f64], groups: &[Group], tau: f64, c: f64) -> Result<GroupWeights> {
    let counts = group_counts(groups);
    for g in Group::ALL {
        if counts[g.index()] == 0 {
            return Err(Error::EmptyGroup(g));
        }
    }
    softmax_present(losses, groups, tau, c)
}

fn softmax_present(losses: &[f64], groups: &[Group], tau: f64, c: f64) -> Result<GroupWeights> {
    if losses.len() != groups.len() {
        return Err(Error::LengthMismatch {
            what: "losses",
            expected: groups.len(),
            actual: losses.len(),
        });
    }
    if losses.iter().any(|l| !l.is_finite()) {
        return Err(Error::NonFinite("per-sample losses".into()));
    }
    if !(tau > 0.0) || !(c > 0.0) {
        return Err(Error::config(format!("need tau > 0 and c > 0, got {tau}, {c}")));
    }
    let mut gamma = vec![0.0; losses.len()];
    for grp in Group::ALL {
        let idx: Vec<usize> = (0..groups.len()).filter(|&i| groups[i] == grp).collect();
        if idx.is_empty() {
            continue;
        }
        let max = idx.iter().map(|&i| losses[i]).fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = idx.iter().map(|&i| ((losses[i] - max) / tau).exp()).collect();
        let total: f64 = exps.iter().sum();
        for (&i, e) in idx.iter().zip(&exps) {
            gamma[i] = c * e / total;
        }
    }
    Ok(GroupWeights {
        gamma,
        groups: groups.to_vec(),
        c,
    })
}

/// Everything a FairSAM step computed, for inspection.
#[derive(Debug, Clone)]
pub struct FairSamTrace {
    pub outcome: StepOutcome,
    pub coefficients: InstanceCoefficients,
    pub perturbation: Perturbation,
    /// `ℓ_i(w + ε*)`, the losses the new weights were computed from.
    pub perturbed_losses: Vec<f64>,
    pub weights: GroupWeights,
}

/// One FairSAM step on a batch with batch-aligned weights `gamma`.
/// Returns the trace, whose `weights` are the updated batch weights.
pub fn fairsam_step(
    model: &mut MlpModel,
    batch: &Batch,
    gamma: &GroupWeights,
    cfg: &FairSamConfig,
) -> Result<FairSamTrace> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    cfg.validate()?;
    if gamma.groups != batch.groups {
        return Err(Error::config("group weights are not aligned with the batch"));
    }
    let grads = model.per_sample_grads(&batch.x, &batch.y)?;
    let coefficients = fairsam_instance_coefficients(&grads, cfg.a_mode)?;
    let eps = fairsam_perturbation(model, batch, gamma, &coefficients, cfg.rho)?;

    model.apply_perturbation(&eps)?;
    let mut new_weights = None;
    let at_eps = model.loss_grad_reweighed(&batch.x, &batch.y, |losses| {
        let w = softmax_present(losses, &batch.groups, cfg.tau, cfg.c)?;
        let gamma = w.gamma.clone();
        new_weights = Some(w);
        Ok(gamma)
    });
    model.remove_perturbation(&eps)?;
    let (lg, _) = at_eps?;

    apply_update(model, &lg.grad, cfg.lr, cfg.weight_decay)?;
    Ok(FairSamTrace {
        outcome: StepOutcome { loss: lg.loss },
        coefficients,
        perturbation: eps,
        perturbed_losses: lg.per_sample,
        weights: new_weights.expect("weights computed during forward"),
    })
}

/// FairSAM with `γ` persisted per training sample across batches and
/// epochs. Per-group totals over the whole training set stay at `c`; each
/// batch sees its members' weights rescaled so that every present group sums
/// to `c` within the batch.
#[derive(Debug, Clone)]
pub struct FairSamState {
    cfg: FairSamConfig,
    groups: Vec<Group>,
    gamma: Vec<f64>,
    last: Option<FairSamTrace>,
}

impl FairSamState {
    pub fn new(cfg: FairSamConfig, train_groups: &[Group]) -> Result<Self> {
        cfg.validate()?;
        let w = fairsam_init_weights(train_groups, cfg.c)?;
        Ok(Self {
            cfg,
            groups: w.groups,
            gamma: w.gamma,
            last: None,
        })
    }

    pub fn config(&self) -> &FairSamConfig {
        &self.cfg
    }

    /// Dataset-level weights.
    pub fn weights(&self) -> GroupWeights {
        GroupWeights {
            gamma: self.gamma.clone(),
            groups: self.groups.clone(),
            c: self.cfg.c,
        }
    }

    pub fn last_trace(&self) -> Option<&FairSamTrace> {
        self.last.as_ref()
    }

    pub fn reset(&mut self) {
        let w = init_present(&self.groups, self.cfg.c).expect("validated at construction");
        self.gamma = w.gamma;
    }

    fn gather(&self, batch: &Batch) -> Result<(GroupWeights, [f64; 2])> {
        let mut mass = [0.0; 2];
        let mut raw = Vec::with_capacity(batch.len());
        for (&id, &grp) in batch.ids.iter().zip(&batch.groups) {
            let stored = *self.groups.get(id).ok_or(Error::LengthMismatch {
                what: "sample id",
                expected: self.groups.len(),
                actual: id + 1,
            })?;
            if stored != grp {
                return Err(Error::config(format!("sample {id} changed group")));
            }
            mass[grp.index()] += self.gamma[id];
            raw.push(self.gamma[id]);
        }
        let c = self.cfg.c;
        let gamma = raw
            .iter()
            .zip(&batch.groups)
            .map(|(w, g)| c * w / mass[g.index()])
            .collect();
        Ok((
            GroupWeights {
                gamma,
                groups: batch.groups.clone(),
                c,
            },
            mass,
        ))
    }

    pub fn step(&mut self, model: &mut MlpModel, batch: &Batch) -> Result<StepOutcome> {
        let (batch_gamma, mass) = self.gather(batch)?;
        let trace = fairsam_step(model, batch, &batch_gamma, &self.cfg)?;
        for ((&id, &grp), &w) in batch.ids.iter().zip(&batch.groups).zip(trace.weights.gamma()) {
            self.gamma[id] = mass[grp.index()] * w / self.cfg.c;
        }
        let outcome = trace.outcome;
        self.last = Some(trace);
        Ok(outcome)
    }
}

/// The six training methods compared by the harness.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Vanilla,
    FairReg,
    Reweighed,
    Sam,
    GroupSam,
    FairSam,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::Vanilla,
        Method::FairReg,
        Method::Reweighed,
        Method::Sam,
        Method::GroupSam,
        Method::FairSam,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Vanilla => "vanilla",
            Method::FairReg => "fairreg",
            Method::Reweighed => "reweighed",
            Method::Sam => "sam",
            Method::GroupSam => "groupsam",
            Method::FairSam => "fairsam",
        }
    }

    pub fn display_name(self) -> &'static str {
        match self {
            Method::Vanilla => "Vanilla",
            Method::FairReg => "FairReg",
            Method::Reweighed => "Reweighed",
            Method::Sam => "SAM",
            Method::GroupSam => "GroupSAM",
            Method::FairSam => "FairSAM",
        }
    }

    pub fn is_sam_family(self) -> bool {
        matches!(self, Method::Sam | Method::GroupSam | Method::FairSam)
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::config(format!("unknown method {s:?}")))
    }
}

/// A ready-to-step optimizer for one training run.
#[derive(Debug, Clone)]
#[allow(clippy::large_enum_variant)]
pub enum Optimizer {
    Sgd { lr: f64, weight_decay: f64 },
    FairReg { beta: f64, lr: f64, weight_decay: f64 },
    Reweighed { c: f64, lr: f64, weight_decay: f64 },
    Sam(SamConfig),
    GroupSam(SamConfig),
    FairSam(FairSamState),
}

impl Optimizer {
    pub fn step(&mut self, model: &mut MlpModel, batch: &Batch) -> Result<StepOutcome> {
        match self {
            Optimizer::Sgd { lr, weight_decay } => sgd_step(model, batch, *lr, *weight_decay),
            Optimizer::FairReg {
                beta,
                lr,
                weight_decay,
            } => fairreg_step(model, batch, *beta, *lr, *weight_decay),
            Optimizer::Reweighed { c, lr, weight_decay } => {
                reweighed_erm_step(model, batch, *c, *lr, *weight_decay)
            }
            Optimizer::Sam(cfg) => sam_step(model, batch, cfg),
            Optimizer::GroupSam(cfg) => groupsam_step(model, batch, cfg),
            Optimizer::FairSam(state) => state.step(model, batch),
        }
    }

    /// Called before the first batch of every epoch.
    pub fn start_epoch(&mut self) {
        if let Optimizer::FairSam(state) = self {
            if state.cfg.reset_weights_each_epoch {
                state.reset();
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::Activation;
    use proptest::prelude::*;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    fn toy_batch(n: usize, minus_every: usize, seed: u64) -> Batch {
        let d = 3;
        let mut state = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        let mut next = || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((state >> 11) as f64) / ((1u64 << 53) as f64)
        };
        let data: Vec<f64> = (0..n * d).map(|_| next()).collect();
        let y = (0..n).map(|i| (i * 7 + 3) % 2).collect();
        let groups = (0..n)
            .map(|i| {
                if minus_every > 0 && i % minus_every == 0 {
                    Group::Disadvantaged
                } else {
                    Group::Advantaged
                }
            })
            .collect();
        Batch::new(Tensor::matrix(n, d, data).unwrap(), y, groups).unwrap()
    }

    #[test]
    fn l2_examples() {
        let e = sam_perturbation_l2(&[1.0, 0.0, 0.0], 0.05).unwrap();
        assert_eq!(e.values(), &[0.05, 0.0, 0.0]);
        let e = sam_perturbation_l2(&[3.0, 4.0], 1.0).unwrap();
        assert_eq!(e.values(), &[0.6, 0.8]);
        let e = sam_perturbation_l2(&[3.0, 4.0], 0.0).unwrap();
        assert!(e.is_zero());
        assert!(sam_perturbation_l2(&[0.0, 0.0], 0.3).unwrap().is_zero());
        assert!(matches!(
            sam_perturbation_l2(&[f64::NAN], 0.1),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn general_examples() {
        let cfg = SamConfig {
            rho: 0.5,
            p: f64::INFINITY,
            q: 1.0,
            ..SamConfig::default()
        };
        let e = sam_perturbation_general(&[2.0, -3.0], &cfg).unwrap();
        assert_eq!(e.values(), &[0.5, -0.5]);

        let zero_rho = SamConfig { rho: 0.0, ..SamConfig::default() };
        assert!(sam_perturbation_general(&[2.0, -3.0], &zero_rho).unwrap().is_zero());

        let bad = SamConfig { p: 2.0, q: 3.0, ..SamConfig::default() };
        assert!(sam_perturbation_general(&[1.0], &bad).is_err());
    }

    #[test]
    fn general_with_p2_matches_l2() {
        let g = [0.3, -1.7, 2.2, 0.0, 1e-4];
        let cfg = SamConfig::default();
        let a = sam_perturbation_general(&g, &cfg).unwrap();
        let b = sam_perturbation_l2(&g, cfg.rho).unwrap();
        for (x, y) in a.values().iter().zip(b.values()) {
            assert!((x - y).abs() <= 4.0 * f64::EPSILON * y.abs().max(1e-300));
        }
    }

    proptest! {
        #[test]
        fn norm_contract(
            g in proptest::collection::vec(-10.0f64..10.0, 1..40),
            rho in 1e-3f64..2.0,
            which in 0usize..3,
        ) {
            prop_assume!(g.iter().any(|&v| v != 0.0));
            let (p, q) = [(2.0, 2.0), (f64::INFINITY, 1.0), (1.5, 3.0)][which];
            let cfg = SamConfig { rho, p, q, ..SamConfig::default() };
            let e = sam_perturbation_general(&g, &cfg).unwrap();
            prop_assert!((e.norm() - rho).abs() <= 1e-9 * rho);
        }
    }

    #[test]
    fn sam_with_zero_rho_is_sgd_bit_exact() {
        let batch = toy_batch(12, 3, 1);
        let base = MlpModel::new(&[3, 5, 2], Activation::Tanh, 4).unwrap();
        let mut a = base.clone();
        let mut b = base.clone();
        let cfg = SamConfig { rho: 0.0, lr: 0.1, weight_decay: 1e-3, ..SamConfig::default() };
        for _ in 0..5 {
            sam_step(&mut a, &batch, &cfg).unwrap();
            sgd_step(&mut b, &batch, 0.1, 1e-3).unwrap();
        }
        assert_eq!(a.params().values(), b.params().values());
    }

    #[test]
    fn sam_with_zero_lr_leaves_params() {
        let batch = toy_batch(8, 2, 2);
        let mut m = MlpModel::new(&[3, 4, 2], Activation::Relu, 4).unwrap();
        let before = m.clone();
        let cfg = SamConfig { lr: 0.0, ..SamConfig::default() };
        sam_step(&mut m, &batch, &cfg).unwrap();
        assert_eq!(m, before);
    }

    #[test]
    fn empty_batch_rejected() {
        let batch = Batch::new(Tensor::zeros(&[0, 3]), vec![], vec![]).unwrap();
        let mut m = MlpModel::new(&[3, 2], Activation::Relu, 0).unwrap();
        let cfg = SamConfig::default();
        assert!(matches!(sam_step(&mut m, &batch, &cfg), Err(Error::EmptyBatch)));
        assert!(matches!(groupsam_step(&mut m, &batch, &cfg), Err(Error::EmptyBatch)));
        assert!(matches!(
            reweighed_erm_step(&mut m, &batch, 1.0, 0.1, 0.0),
            Err(Error::EmptyBatch)
        ));
        assert!(matches!(sgd_step(&mut m, &batch, 0.1, 0.0), Err(Error::EmptyBatch)));
    }

    #[test]
    fn groupsam_without_minus_is_sgd() {
        let batch = toy_batch(10, 0, 3);
        let base = MlpModel::new(&[3, 4, 2], Activation::Tanh, 8).unwrap();
        let mut a = base.clone();
        let mut b = base.clone();
        let cfg = SamConfig { lr: 0.2, ..SamConfig::default() };
        groupsam_step(&mut a, &batch, &cfg).unwrap();
        sgd_step(&mut b, &batch, 0.2, cfg.weight_decay).unwrap();
        assert_eq!(a.params().values(), b.params().values());
    }

    #[test]
    fn groupsam_zero_rho_matches_sgd() {
        let batch = toy_batch(10, 3, 4);
        let base = MlpModel::new(&[3, 4, 2], Activation::Tanh, 8).unwrap();
        let mut a = base.clone();
        let mut b = base.clone();
        let cfg = SamConfig { rho: 0.0, lr: 0.2, ..SamConfig::default() };
        groupsam_step(&mut a, &batch, &cfg).unwrap();
        sgd_step(&mut b, &batch, 0.2, cfg.weight_decay).unwrap();
        assert!(close(a.params().values(), b.params().values(), 1e-15));
    }

    #[test]
    fn groupsam_perturbation_follows_minus_gradient() {
        let batch = toy_batch(9, 3, 5);
        let m = MlpModel::new(&[3, 4, 2], Activation::Tanh, 2).unwrap();
        let cfg = SamConfig::default();
        let eps = groupsam_perturbation(&m, &batch, &cfg).unwrap();
        // Independently: mean gradient of the s⁻ rows only, normalized.
        let minus = batch.subset(Group::Disadvantaged);
        let gm = m.loss_grad(&minus.x, &minus.y, Reduction::Mean).unwrap().grad;
        let norm = p_norm(&gm, 2.0);
        let expected: Vec<f64> = gm.iter().map(|v| cfg.rho * v / norm).collect();
        assert!(close(eps.values(), &expected, 1e-15));
    }

    #[test]
    fn init_weights_examples() {
        let mut groups = vec![Group::Advantaged; 40];
        groups.extend(vec![Group::Disadvantaged; 10]);
        let w = fairsam_init_weights(&groups, 1.0).unwrap();
        assert!(w.gamma()[..40].iter().all(|&v| v == 0.025));
        assert!(w.gamma()[40..].iter().all(|&v| v == 0.1));
        assert!(w.is_feasible(1e-12));

        let eq = [Group::Advantaged, Group::Disadvantaged, Group::Advantaged, Group::Disadvantaged];
        let w = fairsam_init_weights(&eq, 3.0).unwrap();
        assert!(w.gamma().iter().all(|&v| v == w.gamma()[0]));

        let four = [
            Group::Advantaged,
            Group::Advantaged,
            Group::Advantaged,
            Group::Advantaged,
            Group::Disadvantaged,
        ];
        let w = fairsam_init_weights(&four, 2.0).unwrap();
        assert_eq!(&w.gamma()[..4], &[0.5; 4]);

        assert!(matches!(
            fairsam_init_weights(&[Group::Advantaged; 3], 1.0),
            Err(Error::EmptyGroup(Group::Disadvantaged))
        ));
    }

    #[test]
    fn instance_coefficients_examples() {
        let c = fairsam_instance_coefficients(&[vec![3.0, 4.0], vec![0.0, 0.0]], AMode::Unit).unwrap();
        assert_eq!(c.g, vec![5.0, 0.0]);
        let c = fairsam_instance_coefficients(&[vec![3.0, 4.0]], AMode::Constant(2.0)).unwrap();
        assert_eq!(c.g, vec![10.0]);
        assert!(fairsam_instance_coefficients(&[vec![f64::INFINITY]], AMode::Unit).is_err());
    }

    #[test]
    fn update_weights_examples() {
        let groups = [Group::Advantaged, Group::Advantaged, Group::Disadvantaged, Group::Disadvantaged];
        let w = fairsam_update_weights(&[0.3, 2.0, 1.0, 5.0], &groups, 1e9, 1.0).unwrap();
        assert!(close(w.gamma(), &[0.5; 4], 1e-8));

        let w = fairsam_update_weights(&[0.7, 0.7, 4.0, 4.0], &groups, 1.0, 2.0).unwrap();
        assert_eq!(w.gamma(), &[1.0; 4]);

        let w = fairsam_update_weights(&[0.0, 10.0, 1.0, 1.0], &groups, 0.1, 1.0).unwrap();
        let e = (-100f64).exp();
        let expected_low = e / (1.0 + e);
        assert!(((w.gamma()[0] - expected_low) / expected_low).abs() < 1e-12);
        assert!((w.gamma()[1] - 1.0).abs() < 1e-15);
        assert!(w.is_feasible(1e-12));

        assert!(matches!(
            fairsam_update_weights(&[1.0, 2.0], &[Group::Advantaged; 2], 1.0, 1.0),
            Err(Error::EmptyGroup(Group::Disadvantaged))
        ));
    }

    #[test]
    fn fairsam_perturbation_single_sample_is_sam() {
        let batch = toy_batch(1, 1, 6);
        let m = MlpModel::new(&[3, 4, 2], Activation::Tanh, 9).unwrap();
        let gamma = init_present(&batch.groups, 1.0).unwrap();
        let grads = m.per_sample_grads(&batch.x, &batch.y).unwrap();
        let coeffs = fairsam_instance_coefficients(&grads, AMode::Unit).unwrap();
        let e = fairsam_perturbation(&m, &batch, &gamma, &coeffs, 0.05).unwrap();
        let direct = sam_perturbation_l2(&grads[0], 0.05).unwrap();
        assert!(close(e.values(), direct.values(), 1e-15));
    }

    #[test]
    fn fairsam_perturbation_uniform_weights_is_mean_direction() {
        let batch = toy_batch(6, 2, 7);
        let m = MlpModel::new(&[3, 4, 2], Activation::Tanh, 10).unwrap();
        let gamma = GroupWeights {
            gamma: vec![0.5; 6],
            groups: batch.groups.clone(),
            c: 1.5,
        };
        let coeffs = InstanceCoefficients { g: vec![2.0; 6] };
        let e = fairsam_perturbation(&m, &batch, &gamma, &coeffs, 0.1).unwrap();
        let mean = m.loss_grad(&batch.x, &batch.y, Reduction::Mean).unwrap().grad;
        let direct = sam_perturbation_l2(&mean, 0.1).unwrap();
        assert!(close(e.values(), direct.values(), 1e-15));
    }

    #[test]
    fn fairsam_perturbation_zero_weights() {
        let batch = toy_batch(4, 2, 8);
        let m = MlpModel::new(&[3, 2], Activation::Tanh, 1).unwrap();
        let gamma = init_present(&batch.groups, 1.0).unwrap();
        let coeffs = InstanceCoefficients { g: vec![0.0; 4] };
        assert!(fairsam_perturbation(&m, &batch, &gamma, &coeffs, 0.1).unwrap().is_zero());
    }

    #[test]
    fn fairsam_step_keeps_batch_weights_feasible() {
        let batch = toy_batch(16, 4, 9);
        let mut m = MlpModel::new(&[3, 6, 2], Activation::Relu, 3).unwrap();
        let cfg = FairSamConfig { lr: 0.1, ..FairSamConfig::default() };
        let mut gamma = init_present(&batch.groups, cfg.c).unwrap();
        for _ in 0..10 {
            let trace = fairsam_step(&mut m, &batch, &gamma, &cfg).unwrap();
            assert!(trace.weights.is_feasible(1e-9));
            gamma = trace.weights;
        }
    }

    #[test]
    fn fairsam_state_keeps_dataset_totals() {
        let batch = toy_batch(20, 3, 10);
        let mut m = MlpModel::new(&[3, 6, 2], Activation::Relu, 3).unwrap();
        let mut state = FairSamState::new(FairSamConfig::default(), &batch.groups).unwrap();
        for half in [0..10, 10..20] {
            let idx: Vec<usize> = half.collect();
            let sub = Batch::with_ids(
                batch.x.select_rows(&idx),
                idx.iter().map(|&i| batch.y[i]).collect(),
                idx.iter().map(|&i| batch.groups[i]).collect(),
                idx.clone(),
            )
            .unwrap();
            state.step(&mut m, &sub).unwrap();
            assert!(state.weights().is_feasible(1e-12));
            assert!(state.last_trace().unwrap().weights.is_feasible(1e-12));
        }
    }

    #[test]
    fn reweighed_equal_groups_is_scaled_sgd() {
        let batch = toy_batch(8, 2, 11);
        let base = MlpModel::new(&[3, 4, 2], Activation::Tanh, 5).unwrap();
        let mut a = base.clone();
        let mut b = base.clone();
        // 4 per group, c = 1: γ = 1/4 and Σγℓ = 2·mean ℓ.
        reweighed_erm_step(&mut a, &batch, 1.0, 0.05, 0.0).unwrap();
        sgd_step(&mut b, &batch, 0.1, 0.0).unwrap();
        assert!(close(a.params().values(), b.params().values(), 1e-15));
    }

    #[test]
    fn reweighed_zero_lr_unchanged() {
        let batch = toy_batch(8, 3, 12);
        let mut m = MlpModel::new(&[3, 4, 2], Activation::Tanh, 5).unwrap();
        let before = m.clone();
        reweighed_erm_step(&mut m, &batch, 1.0, 0.0, 0.0).unwrap();
        assert_eq!(m, before);
    }

    #[test]
    fn reweighed_gradient_is_group_balanced_mean() {
        let batch = toy_batch(10, 4, 13);
        let m = MlpModel::new(&[3, 4, 2], Activation::Tanh, 6).unwrap();
        let gamma = init_present(&batch.groups, 1.0).unwrap();
        let g = m.loss_grad(&batch.x, &batch.y, Reduction::Weighted(gamma.gamma())).unwrap().grad;
        let mut expected = vec![0.0; g.len()];
        for grp in Group::ALL {
            let sub = batch.subset(grp);
            let gm = m.loss_grad(&sub.x, &sub.y, Reduction::Mean).unwrap().grad;
            for (e, v) in expected.iter_mut().zip(gm) {
                *e += v;
            }
        }
        assert!(close(&g, &expected, 1e-14));
    }

    #[test]
    fn fairreg_beta_zero_is_sgd() {
        let batch = toy_batch(10, 3, 14);
        let base = MlpModel::new(&[3, 4, 2], Activation::Tanh, 7).unwrap();
        let mut a = base.clone();
        let mut b = base.clone();
        fairreg_step(&mut a, &batch, 0.0, 0.1, 1e-4).unwrap();
        sgd_step(&mut b, &batch, 0.1, 1e-4).unwrap();
        assert!(close(a.params().values(), b.params().values(), 1e-15));
    }

    #[test]
    fn fairreg_identical_groups_have_zero_penalty_gradient() {
        let one = toy_batch(5, 0, 15);
        let mut x = one.x.data().to_vec();
        x.extend_from_slice(one.x.data());
        let mut y = one.y.clone();
        y.extend(&one.y);
        let mut groups = vec![Group::Advantaged; 5];
        groups.extend(vec![Group::Disadvantaged; 5]);
        let batch = Batch::new(Tensor::matrix(10, 3, x).unwrap(), y, groups).unwrap();
        let m = MlpModel::new(&[3, 4, 2], Activation::Tanh, 7).unwrap();
        let with = fairreg_objective(&m, &batch, 5.0).unwrap();
        let without = fairreg_objective(&m, &batch, 0.0).unwrap();
        assert!(with.gap.abs() < 1e-15);
        assert!(close(&with.grad, &without.grad, 1e-15));
    }

    #[test]
    fn fairreg_known_gap() {
        // Single linear layer with zero weights; biases set the logits, and
        // per-sample feature 0 shifts the positive logit.
        // s⁺ rows: feature 0 = a, s⁻ rows: feature 0 = b, chosen so that
        // sigmoid(a) − sigmoid(b) = 0.3.
        let pa: f64 = 0.8;
        let pb: f64 = 0.5;
        let a = (pa / (1.0 - pa)).ln();
        let b = (pb / (1.0 - pb)).ln();
        let x = Tensor::matrix(4, 1, vec![a, a, b, b]).unwrap();
        let batch = Batch::new(
            x,
            vec![0, 1, 0, 1],
            vec![Group::Advantaged, Group::Advantaged, Group::Disadvantaged, Group::Disadvantaged],
        )
        .unwrap();
        // W = [0, 1] so logit_1 − logit_0 = feature.
        let m = MlpModel::from_params(&[1, 2], Activation::Relu, vec![0.0, 1.0, 0.0, 0.0]).unwrap();
        let obj = fairreg_objective(&m, &batch, 1.0).unwrap();
        let base = fairreg_objective(&m, &batch, 0.0).unwrap();
        assert!((obj.gap - 0.3).abs() < 1e-12);
        assert!((obj.penalty - 0.09).abs() < 1e-12);
        assert!((obj.loss - base.loss - 0.09).abs() < 1e-12);
    }

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
        }
        assert!("adam".parse::<Method>().is_err());
    }
}
