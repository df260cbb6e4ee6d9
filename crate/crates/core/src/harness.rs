//! Experiment configs, training runs, severity sweeps, OOD evaluation and
//! report rendering.
//!
//! Config files are TOML with a `schema_version` key. Unknown keys are
//! errors. A minimal file:
//!
//! ```toml
//! schema_version = 1
//!
//! [data]
//! source = "synthetic"
//! n = 4000
//!
//! [data.synthetic]
//! d = 20
//! ratio = 4.0
//! phi = 2.0
//!
//! [method]
//! name = "fairsam"
//! rho = 0.05
//!
//! [[corruption]]
//! kind = "gaussian_noise"
//! severity = 3
//! ```

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corruption::{corrupt_dataset, schedules, CorruptionKind, CorruptionSpec, SeveritySchedules};
use crate::datagen::{generate_synthetic, load_csv, split, LabeledGroupDataset, SyntheticSpec, TwoGroupParams};
use crate::error::{Error, Result};
use crate::fairmetrics::{corrupted_degradation_disparity, grouped_accuracy, DegradationReport, GroupedEval};
use crate::models::{Activation, MlpModel};
use crate::optim::{AMode, Batch, FairSamConfig, FairSamState, Method, Optimizer, SamConfig};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub data: DataConfig,
    #[serde(default)]
    pub model: ModelConfig,
    pub method: MethodConfig,
    #[serde(default)]
    pub corruption: Vec<CorruptionSpec>,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ood: Option<DataConfig>,
    #[serde(default)]
    pub output: OutputConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Synthetic,
    Csv,
}

/// Either `source = "synthetic"` with `n` and a `[data.synthetic]` table, or
/// `source = "csv"` with `path`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub source: DataSource,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n: Option<usize>,
    /// Generator seed. When absent each run seed also seeds the data.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<TwoGroupParams>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        match self.source {
            DataSource::Synthetic => {
                if self.path.is_some() {
                    return Err(Error::config("data.path is only valid with source = \"csv\""));
                }
                let n = self.n.ok_or_else(|| Error::config("synthetic data needs n"))?;
                let params = self.synthetic.unwrap_or_default();
                SyntheticSpec::two_group(&params, 0)?;
                if n < 4 {
                    return Err(Error::config(format!("need n >= 4, got {n}")));
                }
            }
            DataSource::Csv => {
                if self.path.is_none() {
                    return Err(Error::config("csv data needs path"));
                }
                if self.n.is_some() || self.seed.is_some() || self.synthetic.is_some() {
                    return Err(Error::config("n, seed and [synthetic] are only valid for synthetic data"));
                }
            }
        }
        Ok(())
    }

    /// Loads or generates the dataset used by run `seed`.
    pub fn materialize(&self, seed: u64) -> Result<LabeledGroupDataset> {
        match self.source {
            DataSource::Synthetic => {
                let spec = SyntheticSpec::two_group(&self.synthetic.unwrap_or_default(), self.seed.unwrap_or(seed))?;
                generate_synthetic(&spec, self.n.unwrap_or(0))
            }
            DataSource::Csv => load_csv(self.path.as_deref().expect("validated")),
        }
    }

    fn is_seed_dependent(&self) -> bool {
        self.source == DataSource::Synthetic && self.seed.is_none()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub hidden: Vec<usize>,
    pub activation: Activation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden: vec![32],
            activation: Activation::Relu,
        }
    }
}

/// Method name plus hyperparameters. Only the fields a method uses may be
/// set; the rest must be absent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MethodConfig {
    pub name: Method,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lr: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weight_decay: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rho: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub q: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub c: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tau: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub a_mode: Option<AMode>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reset_weights_each_epoch: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta: Option<f64>,
}

/// Default FairReg penalty weight.
pub const DEFAULT_BETA: f64 = 1.0;

impl MethodConfig {
    pub fn new(name: Method) -> Self {
        Self {
            name,
            lr: None,
            weight_decay: None,
            rho: None,
            p: None,
            q: None,
            c: None,
            tau: None,
            a_mode: None,
            reset_weights_each_epoch: None,
            beta: None,
        }
    }

    fn fields(&self) -> [(&'static str, bool); 9] {
        [
            ("rho", self.rho.is_some()),
            ("p", self.p.is_some()),
            ("q", self.q.is_some()),
            ("c", self.c.is_some()),
            ("tau", self.tau.is_some()),
            ("a_mode", self.a_mode.is_some()),
            ("reset_weights_each_epoch", self.reset_weights_each_epoch.is_some()),
            ("beta", self.beta.is_some()),
            ("lr", self.lr.is_some()),
        ]
    }

    fn allows(method: Method, field: &str) -> bool {
        use Method::*;
        match field {
            "lr" | "weight_decay" => true,
            "rho" => matches!(method, Sam | GroupSam | FairSam),
            "p" | "q" => matches!(method, Sam | GroupSam),
            "c" => matches!(method, Reweighed | FairSam),
            "tau" | "a_mode" | "reset_weights_each_epoch" => method == FairSam,
            "beta" => method == FairReg,
            _ => false,
        }
    }

    /// Rejects hyperparameters the method does not use, then checks values.
    pub fn validate(&self) -> Result<()> {
        for (field, set) in self.fields() {
            if set && !Self::allows(self.name, field) {
                return Err(Error::config(format!(
                    "method {} does not take `{field}`",
                    self.name.name()
                )));
            }
        }
        self.build_check()
    }

    fn build_check(&self) -> Result<()> {
        let r = self.resolved();
        match r.name {
            Method::Sam | Method::GroupSam => r.sam_config().validate(),
            Method::FairSam => r.fairsam_config().validate(),
            Method::Reweighed => {
                let c = r.c.expect("resolved");
                if !(c > 0.0 && c.is_finite()) {
                    return Err(Error::config(format!("c must be > 0, got {c}")));
                }
                SamConfig::l2(0.0, r.lr.expect("resolved"), r.weight_decay.expect("resolved")).validate()
            }
            Method::Vanilla | Method::FairReg => {
                if let Some(beta) = r.beta {
                    if !(beta >= 0.0 && beta.is_finite()) {
                        return Err(Error::config(format!("beta must be >= 0, got {beta}")));
                    }
                }
                SamConfig::l2(0.0, r.lr.expect("resolved"), r.weight_decay.expect("resolved")).validate()
            }
        }
    }

    /// Every field the method uses filled in, with defaults where unset.
    pub fn resolved(&self) -> Self {
        let sam = SamConfig::default();
        let fair = FairSamConfig::default();
        let pick = |field: &str, v: Option<f64>, default: f64| {
            if Self::allows(self.name, field) {
                Some(v.unwrap_or(default))
            } else {
                None
            }
        };
        Self {
            name: self.name,
            lr: Some(self.lr.unwrap_or(sam.lr)),
            weight_decay: Some(self.weight_decay.unwrap_or(sam.weight_decay)),
            rho: pick("rho", self.rho, sam.rho),
            p: pick("p", self.p, sam.p),
            q: pick("q", self.q, sam.q),
            c: pick("c", self.c, fair.c),
            tau: pick("tau", self.tau, fair.tau),
            a_mode: Self::allows(self.name, "a_mode").then(|| self.a_mode.unwrap_or(fair.a_mode)),
            reset_weights_each_epoch: Self::allows(self.name, "reset_weights_each_epoch")
                .then(|| self.reset_weights_each_epoch.unwrap_or(fair.reset_weights_each_epoch)),
            beta: pick("beta", self.beta, DEFAULT_BETA),
        }
    }

    /// The same shared hyperparameters carried over to another method.
    /// Fields the other method does not use are dropped.
    pub fn for_method(&self, name: Method) -> Self {
        let keep = |field: &str, v: Option<f64>| v.filter(|_| Self::allows(name, field));
        Self {
            name,
            lr: self.lr,
            weight_decay: self.weight_decay,
            rho: keep("rho", self.rho),
            p: keep("p", self.p),
            q: keep("q", self.q),
            c: keep("c", self.c),
            tau: keep("tau", self.tau),
            a_mode: self.a_mode.filter(|_| Self::allows(name, "a_mode")),
            reset_weights_each_epoch: self
                .reset_weights_each_epoch
                .filter(|_| Self::allows(name, "reset_weights_each_epoch")),
            beta: keep("beta", self.beta),
        }
    }

    fn sam_config(&self) -> SamConfig {
        let d = SamConfig::default();
        SamConfig {
            rho: self.rho.unwrap_or(d.rho),
            p: self.p.unwrap_or(d.p),
            q: self.q.unwrap_or(d.q),
            lr: self.lr.unwrap_or(d.lr),
            weight_decay: self.weight_decay.unwrap_or(d.weight_decay),
        }
    }

    fn fairsam_config(&self) -> FairSamConfig {
        let d = FairSamConfig::default();
        FairSamConfig {
            rho: self.rho.unwrap_or(d.rho),
            lr: self.lr.unwrap_or(d.lr),
            weight_decay: self.weight_decay.unwrap_or(d.weight_decay),
            c: self.c.unwrap_or(d.c),
            tau: self.tau.unwrap_or(d.tau),
            a_mode: self.a_mode.unwrap_or(d.a_mode),
            reset_weights_each_epoch: self.reset_weights_each_epoch.unwrap_or(d.reset_weights_each_epoch),
        }
    }

    /// Builds the optimizer for a training set with these group labels.
    pub fn build(&self, train_groups: &[crate::Group]) -> Result<Optimizer> {
        self.validate()?;
        let r = self.resolved();
        let lr = r.lr.expect("resolved");
        let weight_decay = r.weight_decay.expect("resolved");
        Ok(match r.name {
            Method::Vanilla => Optimizer::Sgd { lr, weight_decay },
            Method::FairReg => Optimizer::FairReg {
                beta: r.beta.expect("resolved"),
                lr,
                weight_decay,
            },
            Method::Reweighed => Optimizer::Reweighed {
                c: r.c.expect("resolved"),
                lr,
                weight_decay,
            },
            Method::Sam => Optimizer::Sam(r.sam_config()),
            Method::GroupSam => Optimizer::GroupSam(r.sam_config()),
            Method::FairSam => Optimizer::FairSam(FairSamState::new(r.fairsam_config(), train_groups)?),
        })
    }
}

/// Which evaluation plays "clean" in the degradation metrics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reference {
    /// Clean test split.
    #[default]
    CleanTest,
    /// The clean training split.
    Train,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub seeds: Vec<u64>,
    pub train_fraction: f64,
    pub reference: Reference,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 64,
            seeds: vec![0],
            train_fraction: 0.7,
            reference: Reference::CleanTest,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub methods: Vec<Method>,
    pub severities: Vec<u8>,
    /// Corruption kind for the sweep; defaults to the first `[[corruption]]`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kind: Option<CorruptionKind>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            methods: vec![Method::Sam, Method::GroupSam, Method::FairSam],
            severities: vec![1, 2, 3, 4, 5],
            kind: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub dir: PathBuf,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self { dir: PathBuf::from("runs") }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s).map_err(|e| Error::ConfigParse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file. Relative CSV paths are taken relative to the
    /// file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml_str(&text).map_err(|e| match e {
            Error::ConfigParse(m) => Error::ConfigParse(format!("{}: {m}", path.display())),
            other => other,
        })?;
        let base = path.parent().unwrap_or(Path::new(""));
        for data in std::iter::once(&mut cfg.data).chain(cfg.ood.as_mut()) {
            if let Some(p) = data.path.as_mut().filter(|p| p.is_relative()) {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::ConfigParse(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::config(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        self.data.validate()?;
        if let Some(ood) = &self.ood {
            ood.validate()?;
        }
        if self.model.hidden.contains(&0) {
            return Err(Error::config("hidden widths must be positive"));
        }
        self.method.validate()?;
        if self.corruption.is_empty() {
            return Err(Error::config("at least one [[corruption]] entry is required"));
        }
        for c in &self.corruption {
            c.validate()?;
        }
        let t = &self.train;
        if t.seeds.is_empty() {
            return Err(Error::config("train.seeds must list at least one seed"));
        }
        if t.epochs == 0 || t.batch_size == 0 {
            return Err(Error::config("epochs and batch_size must be positive"));
        }
        if !(t.train_fraction > 0.0 && t.train_fraction < 1.0) {
            return Err(Error::config("train_fraction must lie in (0, 1)"));
        }
        if let Some(s) = &self.sweep {
            if s.methods.is_empty() || s.severities.is_empty() {
                return Err(Error::config("sweep needs at least one method and one severity"));
            }
            for &sev in &s.severities {
                CorruptionKind::GaussianNoise.strength(sev)?;
            }
            for &m in &s.methods {
                self.method.for_method(m).validate()?;
            }
        }
        Ok(())
    }

    /// This config with the method swapped, carrying shared hyperparameters.
    pub fn with_method(&self, name: Method) -> Self {
        Self {
            method: self.method.for_method(name),
            ..self.clone()
        }
    }

    /// The echo stored in reports: method fields filled with defaults.
    pub fn resolved(&self) -> Self {
        Self {
            method: self.method.resolved(),
            ..self.clone()
        }
    }

    fn widths(&self, d: usize, classes: usize) -> Vec<usize> {
        let mut w = vec![d];
        w.extend(&self.model.hidden);
        w.push(classes);
        w
    }

    fn sweep_or_default(&self) -> SweepConfig {
        self.sweep.clone().unwrap_or_default()
    }
}

/// Why a seed stopped early.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "snake_case")]
pub enum SeedStatus {
    Completed,
    Diverged { epoch: usize, step: usize, message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionReport {
    pub corruption: CorruptionSpec,
    pub corrupted: GroupedEval,
    pub degradation: DegradationReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedReport {
    pub seed: u64,
    pub status: SeedStatus,
    pub train_size: usize,
    pub test_size: usize,
    /// Mean training objective per completed epoch.
    pub loss_trace: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clean: Option<GroupedEval>,
    pub conditions: Vec<ConditionReport>,
}

/// Elementwise median over the completed seeds. The median of each field is
/// taken independently, so `delta_p` need not equal
/// `|delta_p_plus − delta_p_minus|` here.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub corruption: CorruptionSpec,
    pub seeds: usize,
    pub median: DegradationReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub schema_version: u32,
    pub method: Method,
    pub config: ExperimentConfig,
    pub severity_schedules: SeveritySchedules,
    pub seeds: Vec<SeedReport>,
    pub aggregate: Vec<AggregateRow>,
    pub wall_clock_seconds: f64,
}

impl RunReport {
    pub fn aggregate_for(&self, spec: &CorruptionSpec) -> Option<&AggregateRow> {
        self.aggregate.iter().find(|a| &a.corruption == spec)
    }

    /// JSON text without the wall-clock field.
    pub fn to_json_without_clock(&self) -> Result<String> {
        let mut v = serde_json::to_value(self)?;
        if let Some(obj) = v.as_object_mut() {
            obj.remove("wall_clock_seconds");
        }
        Ok(serde_json::to_string_pretty(&v)?)
    }
}

/// Median of a non-empty slice; the mean of the middle pair for even sizes.
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        (v[m - 1] + v[m]) / 2.0
    }
}

const SPLIT_STREAM: u64 = 1;
const INIT_STREAM: u64 = 2;
const SHUFFLE_STREAM: u64 = 3;

/// Independent child seed for one use of a run seed (SplitMix64 finalizer).
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// The clean train/test split that [`train_seed`] uses for `seed`.
pub fn split_for_seed(
    cfg: &ExperimentConfig,
    full: &LabeledGroupDataset,
    seed: u64,
) -> Result<(LabeledGroupDataset, LabeledGroupDataset)> {
    split(full, cfg.train.train_fraction, derive_seed(seed, SPLIT_STREAM))
}

/// A model trained on the clean training split of one seed.
#[derive(Debug, Clone)]
pub struct TrainedSeed {
    pub seed: u64,
    pub model: MlpModel,
    pub status: SeedStatus,
    pub loss_trace: Vec<f64>,
    pub train: LabeledGroupDataset,
    pub test: LabeledGroupDataset,
}

fn is_divergence(e: &Error) -> bool {
    matches!(e, Error::NonFinite(_))
}

/// Trains `cfg.method` for one seed. Only clean data is touched.
pub fn train_seed(cfg: &ExperimentConfig, seed: u64, data: Option<&LabeledGroupDataset>) -> Result<TrainedSeed> {
    let owned;
    let full = match data {
        Some(d) => d,
        None => {
            owned = cfg.data.materialize(seed)?;
            &owned
        }
    };
    let (train, test) = split_for_seed(cfg, full, seed)?;
    let widths = cfg.widths(train.dim(), train.classes());
    let mut model = MlpModel::new(&widths, cfg.model.activation, derive_seed(seed, INIT_STREAM))?;
    let mut opt = cfg.method.build(train.groups())?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, SHUFFLE_STREAM));
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut loss_trace = Vec::with_capacity(cfg.train.epochs);
    let mut status = SeedStatus::Completed;

    'epochs: for epoch in 0..cfg.train.epochs {
        opt.start_epoch();
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut steps = 0usize;
        for (step, idx) in order.chunks(cfg.train.batch_size).enumerate() {
            let batch = Batch::with_ids(
                train.x().select_rows(idx),
                idx.iter().map(|&i| train.y()[i]).collect(),
                idx.iter().map(|&i| train.groups()[i]).collect(),
                idx.to_vec(),
            )?;
            let outcome = match opt.step(&mut model, &batch) {
                Ok(o) => o,
                Err(e) if is_divergence(&e) => {
                    status = SeedStatus::Diverged {
                        epoch,
                        step,
                        message: e.to_string(),
                    };
                    break 'epochs;
                }
                Err(e) => return Err(e),
            };
            if !outcome.loss.is_finite() || !model.params().values().iter().all(|v| v.is_finite()) {
                status = SeedStatus::Diverged {
                    epoch,
                    step,
                    message: format!("non-finite training loss {}", outcome.loss),
                };
                break 'epochs;
            }
            total += outcome.loss;
            steps += 1;
        }
        loss_trace.push(total / steps as f64);
    }
    Ok(TrainedSeed {
        seed,
        model,
        status,
        loss_trace,
        train,
        test,
    })
}

fn evaluate(model: &MlpModel, ds: &LabeledGroupDataset, label: &str) -> Result<GroupedEval> {
    let preds = model.predict(ds.x())?;
    grouped_accuracy(&preds, ds.y(), ds.groups(), label)
}

impl TrainedSeed {
    /// Accuracy on the reference condition.
    pub fn reference_eval(&self, reference: Reference) -> Result<GroupedEval> {
        match reference {
            Reference::CleanTest => evaluate(&self.model, &self.test, "clean"),
            Reference::Train => evaluate(&self.model, &self.train, "train"),
        }
    }

    /// Evaluates each corruption of the test split against `clean`.
    pub fn report(&self, clean: Option<&GroupedEval>, conditions: &[CorruptionSpec]) -> Result<SeedReport> {
        let mut out = SeedReport {
            seed: self.seed,
            status: self.status.clone(),
            train_size: self.train.len(),
            test_size: self.test.len(),
            loss_trace: self.loss_trace.clone(),
            clean: None,
            conditions: Vec::new(),
        };
        let (SeedStatus::Completed, Some(clean)) = (&self.status, clean) else {
            return Ok(out);
        };
        for spec in conditions {
            let corrupted_test = corrupt_dataset(&self.test, spec)?;
            let label = format!("{} s{}", spec.kind, spec.severity);
            let corrupted = evaluate(&self.model, &corrupted_test, &label)?;
            let degradation = corrupted_degradation_disparity(clean, &corrupted)?;
            out.conditions.push(ConditionReport {
                corruption: *spec,
                corrupted,
                degradation,
            });
        }
        out.clean = Some(clean.clone());
        Ok(out)
    }
}

fn aggregate(seeds: &[SeedReport], conditions: &[CorruptionSpec]) -> Vec<AggregateRow> {
    conditions
        .iter()
        .filter_map(|spec| {
            let vals: Vec<[f64; 11]> = seeds
                .iter()
                .filter_map(|s| s.conditions.iter().find(|c| &c.corruption == spec))
                .map(|c| c.degradation.values())
                .collect();
            if vals.is_empty() {
                return None;
            }
            let mut med = [0.0; 11];
            for (k, m) in med.iter_mut().enumerate() {
                let col: Vec<f64> = vals.iter().map(|v| v[k]).collect();
                *m = median(&col);
            }
            Some(AggregateRow {
                corruption: *spec,
                seeds: vals.len(),
                median: DegradationReport::from_values(med),
            })
        })
        .collect()
}

fn shared_data(cfg: &ExperimentConfig) -> Result<Option<LabeledGroupDataset>> {
    if cfg.data.is_seed_dependent() {
        Ok(None)
    } else {
        cfg.data.materialize(0).map(Some)
    }
}

fn train_all(cfg: &ExperimentConfig, data: Option<&LabeledGroupDataset>) -> Result<Vec<TrainedSeed>> {
    cfg.train
        .seeds
        .par_iter()
        .map(|&seed| train_seed(cfg, seed, data))
        .collect()
}

fn assemble(
    cfg: &ExperimentConfig,
    trained: &[TrainedSeed],
    refs: &[Option<GroupedEval>],
    conditions: &[CorruptionSpec],
    wall_clock_seconds: f64,
) -> Result<RunReport> {
    let seeds = trained
        .par_iter()
        .zip(refs)
        .map(|(t, r)| t.report(r.as_ref(), conditions))
        .collect::<Result<Vec<_>>>()?;
    let aggregate = aggregate(&seeds, conditions);
    let config = ExperimentConfig {
        corruption: conditions.to_vec(),
        ..cfg.resolved()
    };
    Ok(RunReport {
        schema_version: SCHEMA_VERSION,
        method: cfg.method.name,
        config,
        severity_schedules: schedules(),
        seeds,
        aggregate,
        wall_clock_seconds,
    })
}

fn reference_evals(cfg: &ExperimentConfig, trained: &[TrainedSeed]) -> Result<Vec<Option<GroupedEval>>> {
    trained
        .par_iter()
        .map(|t| match t.status {
            SeedStatus::Completed => t.reference_eval(cfg.train.reference).map(Some),
            SeedStatus::Diverged { .. } => Ok(None),
        })
        .collect()
}

/// Trains `cfg.method` once per seed on clean data and evaluates every
/// configured corruption of the test split.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunReport> {
    cfg.validate()?;
    let start = Instant::now();
    let data = shared_data(cfg)?;
    let trained = train_all(cfg, data.as_ref())?;
    let refs = reference_evals(cfg, &trained)?;
    assemble(cfg, &trained, &refs, &cfg.corruption, start.elapsed().as_secs_f64())
}

/// One line of the long-form sweep table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub method: Method,
    pub severity: u8,
    pub seed: u64,
    pub acc: f64,
    pub delta_p: f64,
    pub corruption: CorruptionKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeverityReports {
    pub method: Method,
    pub by_severity: Vec<(u8, RunReport)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub methods: Vec<SeverityReports>,
    pub rows: Vec<SweepRow>,
}

impl SweepReport {
    pub fn report(&self, method: Method, severity: u8) -> Option<&RunReport> {
        self.methods
            .iter()
            .find(|m| m.method == method)?
            .by_severity
            .iter()
            .find(|(s, _)| *s == severity)
            .map(|(_, r)| r)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("method,severity,seed,acc,delta_p,corruption\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                r.method.name(),
                r.severity,
                r.seed,
                r.acc,
                r.delta_p,
                r.corruption
            );
        }
        out
    }
}

/// Trains each sweep method once per seed and evaluates it at every
/// severity. The corruption seed and kind come from the first
/// `[[corruption]]` entry unless `[sweep] kind` overrides the kind.
pub fn sweep_severity(cfg: &ExperimentConfig, severities: &[u8]) -> Result<SweepReport> {
    cfg.validate()?;
    if severities.is_empty() {
        return Err(Error::config("sweep needs at least one severity"));
    }
    let sweep = cfg.sweep_or_default();
    let base = cfg.corruption[0];
    let kind = sweep.kind.unwrap_or(base.kind);
    let specs = severities
        .iter()
        .map(|&severity| CorruptionSpec::new(kind, severity, base.seed))
        .collect::<Result<Vec<_>>>()?;
    let data = shared_data(cfg)?;

    let mut methods = Vec::new();
    let mut rows = Vec::new();
    for &m in &sweep.methods {
        let start = Instant::now();
        let mcfg = cfg.with_method(m);
        let trained = train_all(&mcfg, data.as_ref())?;
        let refs = reference_evals(&mcfg, &trained)?;
        let train_secs = start.elapsed().as_secs_f64();
        let mut by_severity = Vec::new();
        for spec in &specs {
            let t0 = Instant::now();
            let report = assemble(&mcfg, &trained, &refs, std::slice::from_ref(spec), 0.0)?;
            let report = RunReport {
                wall_clock_seconds: train_secs + t0.elapsed().as_secs_f64(),
                ..report
            };
            for s in &report.seeds {
                if let Some(c) = s.conditions.first() {
                    rows.push(SweepRow {
                        method: m,
                        severity: spec.severity,
                        seed: s.seed,
                        acc: c.corrupted.overall,
                        delta_p: c.degradation.delta_p,
                        corruption: kind,
                    });
                }
            }
            by_severity.push((spec.severity, report));
        }
        methods.push(SeverityReports { method: m, by_severity });
    }
    Ok(SweepReport { methods, rows })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OodSeedReport {
    pub seed: u64,
    pub status: SeedStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub in_distribution: Option<GroupedEval>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ood: Option<GroupedEval>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub degradation: Option<DegradationReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OodReport {
    pub method: Method,
    pub config: ExperimentConfig,
    pub seeds: Vec<OodSeedReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub median: Option<DegradationReport>,
    pub wall_clock_seconds: f64,
}

/// Degradation from the in-distribution test split ("clean") to an
/// out-of-distribution set ("corrupted").
pub fn ood_degradation(model: &MlpModel, in_dist: &LabeledGroupDataset, ood: &LabeledGroupDataset) -> Result<(GroupedEval, GroupedEval, DegradationReport)> {
    if ood.dim() != in_dist.dim() {
        return Err(Error::ShapeMismatch {
            op: "ood_eval",
            left: in_dist.x().shape().to_vec(),
            right: ood.x().shape().to_vec(),
        });
    }
    if ood.classes() > in_dist.classes() {
        return Err(Error::config(format!(
            "OOD set has {} classes, model was trained on {}",
            ood.classes(),
            in_dist.classes()
        )));
    }
    let a = evaluate(model, in_dist, "in_distribution")?;
    let b = evaluate(model, ood, "ood")?;
    let r = corrupted_degradation_disparity(&a, &b)?;
    Ok((a, b, r))
}

/// Trains per seed as in [`run_experiment`] and compares the in-distribution
/// test split with `test`.
pub fn ood_eval(cfg: &ExperimentConfig, test: &LabeledGroupDataset) -> Result<OodReport> {
    cfg.validate()?;
    let start = Instant::now();
    let data = shared_data(cfg)?;
    let trained = train_all(cfg, data.as_ref())?;
    let seeds = trained
        .par_iter()
        .map(|t| {
            let mut r = OodSeedReport {
                seed: t.seed,
                status: t.status.clone(),
                in_distribution: None,
                ood: None,
                degradation: None,
            };
            if t.status == SeedStatus::Completed {
                let (a, b, d) = ood_degradation(&t.model, &t.test, test)?;
                r.in_distribution = Some(a);
                r.ood = Some(b);
                r.degradation = Some(d);
            }
            Ok(r)
        })
        .collect::<Result<Vec<_>>>()?;
    let vals: Vec<[f64; 11]> = seeds.iter().filter_map(|s| s.degradation.map(|d| d.values())).collect();
    let median = (!vals.is_empty()).then(|| {
        let mut med = [0.0; 11];
        for (k, m) in med.iter_mut().enumerate() {
            *m = median(&vals.iter().map(|v| v[k]).collect::<Vec<_>>());
        }
        DegradationReport::from_values(med)
    });
    Ok(OodReport {
        method: cfg.method.name,
        config: cfg.resolved(),
        seeds,
        median,
        wall_clock_seconds: start.elapsed().as_secs_f64(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportFormat {
    Json,
    Csv,
    Markdown,
}

impl std::str::FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "json" => Ok(ReportFormat::Json),
            "csv" => Ok(ReportFormat::Csv),
            "markdown" | "md" => Ok(ReportFormat::Markdown),
            other => Err(Error::config(format!("unknown report format {other:?}"))),
        }
    }
}

/// Column headers of the CSV table.
pub const TABLE_CSV_HEADER: &str =
    "method,test_data,acc_s_plus,delta_p_plus,acc_s_minus,delta_p_minus,accuracy,delta_acc,delta_p";

/// One table row. Degradation columns are `None` on the clean row.
#[derive(Debug, Clone, PartialEq)]
pub struct TableRow {
    pub method: String,
    pub test_data: String,
    pub acc_s_plus: f64,
    pub delta_p_plus: Option<f64>,
    pub acc_s_minus: f64,
    pub delta_p_minus: Option<f64>,
    pub accuracy: f64,
    pub delta_acc: Option<f64>,
    pub delta_p: Option<f64>,
}

/// A clean row followed by one row per corruption, from the medians.
pub fn table_rows(reports: &[RunReport]) -> Vec<TableRow> {
    let mut rows = Vec::new();
    for r in reports {
        let name = r.method.display_name().to_string();
        let Some(first) = r.aggregate.first() else {
            continue;
        };
        let c = first.median.acc_clean;
        rows.push(TableRow {
            method: name.clone(),
            test_data: "clean".into(),
            acc_s_plus: c.s_plus,
            delta_p_plus: None,
            acc_s_minus: c.s_minus,
            delta_p_minus: None,
            accuracy: c.overall,
            delta_acc: None,
            delta_p: None,
        });
        for a in &r.aggregate {
            let m = &a.median;
            rows.push(TableRow {
                method: name.clone(),
                test_data: format!("{} s{}", a.corruption.kind, a.corruption.severity),
                acc_s_plus: m.acc_corrupted.s_plus,
                delta_p_plus: Some(m.delta_p_plus),
                acc_s_minus: m.acc_corrupted.s_minus,
                delta_p_minus: Some(m.delta_p_minus),
                accuracy: m.acc_corrupted.overall,
                delta_acc: Some(m.delta_acc),
                delta_p: Some(m.delta_p),
            });
        }
    }
    rows
}

/// Renders reports as JSON (an array of reports), CSV or a markdown table.
pub fn render_report(reports: &[RunReport], format: ReportFormat) -> Result<String> {
    Ok(match format {
        ReportFormat::Json => serde_json::to_string_pretty(reports)? + "\n",
        ReportFormat::Csv => {
            let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
            let mut out = format!("{TABLE_CSV_HEADER}\n");
            for r in table_rows(reports) {
                let _ = writeln!(
                    out,
                    "{},{},{},{},{},{},{},{},{}",
                    r.method,
                    r.test_data,
                    r.acc_s_plus,
                    opt(r.delta_p_plus),
                    r.acc_s_minus,
                    opt(r.delta_p_minus),
                    r.accuracy,
                    opt(r.delta_acc),
                    opt(r.delta_p)
                );
            }
            out
        }
        ReportFormat::Markdown => {
            let f4 = |v: f64| format!("{v:.4}");
            let opt = |v: Option<f64>| v.map(f4).unwrap_or_else(|| "-".into());
            let mut out = String::from(
                "| Methods | Test Data | Acc s⁺ | Δp^{s⁺} ↓ | Acc s⁻ | Δp^{s⁻} ↓ | Accuracy | ΔAcc ↓ | Δp ↓ |\n\
                 |---|---|---|---|---|---|---|---|---|\n",
            );
            for r in table_rows(reports) {
                let _ = writeln!(
                    out,
                    "| {} | {} | {} | {} | {} | {} | {} | {} | {} |",
                    r.method,
                    r.test_data,
                    f4(r.acc_s_plus),
                    opt(r.delta_p_plus),
                    f4(r.acc_s_minus),
                    opt(r.delta_p_minus),
                    f4(r.accuracy),
                    opt(r.delta_acc),
                    opt(r.delta_p)
                );
            }
            out
        }
    })
}

/// Writes [`render_report`] output to `path`.
pub fn emit_report(reports: &[RunReport], format: ReportFormat, path: &Path) -> Result<()> {
    let text = render_report(reports, format)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Reads a JSON file written by [`emit_report`]; a single report object is
/// accepted too.
pub fn read_reports(path: &Path) -> Result<Vec<RunReport>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let v: serde_json::Value = serde_json::from_str(&text)?;
    if v.is_array() {
        Ok(serde_json::from_value(v)?)
    } else {
        Ok(vec![serde_json::from_value(v)?])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SMALL: &str = r#"
schema_version = 1

[data]
source = "synthetic"
n = 240
seed = 5

[data.synthetic]
d = 6
ratio = 3.0
phi = 2.0
separation = 0.4

[model]
hidden = [8]

[method]
name = "sam"
lr = 0.1
rho = 0.05

[[corruption]]
kind = "gaussian_noise"
severity = 3
seed = 1

[train]
epochs = 3
batch_size = 32
seeds = [0, 1, 2]
"#;

    fn small() -> ExperimentConfig {
        ExperimentConfig::from_toml_str(SMALL).unwrap()
    }

    #[test]
    fn parses_and_defaults() {
        let cfg = small();
        assert_eq!(cfg.train.train_fraction, 0.7);
        assert_eq!(cfg.model.activation, Activation::Relu);
        let r = cfg.method.resolved();
        assert_eq!(r.p, Some(2.0));
        assert_eq!(r.weight_decay, Some(5e-4));
        assert_eq!(r.tau, None);
        let defaults = TrainConfig::default();
        assert_eq!((defaults.epochs, defaults.batch_size), (30, 64));
    }

    #[test]
    fn rejects_unknown_keys_and_bad_method_fields() {
        let typo = SMALL.replace("rho = 0.05", "rh0 = 0.05");
        assert!(matches!(ExperimentConfig::from_toml_str(&typo), Err(Error::ConfigParse(_))));

        let vanilla = SMALL.replace("name = \"sam\"", "name = \"vanilla\"");
        let err = ExperimentConfig::from_toml_str(&vanilla).unwrap_err();
        assert!(err.to_string().contains("rho"), "{err}");

        let version = SMALL.replace("schema_version = 1", "schema_version = 2");
        assert!(ExperimentConfig::from_toml_str(&version).is_err());

        let no_seeds = SMALL.replace("seeds = [0, 1, 2]", "seeds = []");
        assert!(ExperimentConfig::from_toml_str(&no_seeds).is_err());
    }

    #[test]
    fn with_method_drops_unused_fields() {
        let cfg = small();
        let v = cfg.with_method(Method::Vanilla);
        assert_eq!(v.method.rho, None);
        assert_eq!(v.method.lr, Some(0.1));
        v.validate().unwrap();
        let f = cfg.with_method(Method::FairSam);
        assert_eq!(f.method.rho, Some(0.05));
    }

    #[test]
    fn toml_round_trip() {
        let cfg = small();
        let text = cfg.to_toml_string().unwrap();
        assert_eq!(ExperimentConfig::from_toml_str(&text).unwrap(), cfg);
    }

    #[test]
    fn run_is_deterministic_and_consistent() {
        let cfg = small();
        let a = run_experiment(&cfg).unwrap();
        let b = run_experiment(&cfg).unwrap();
        assert_eq!(a.to_json_without_clock().unwrap(), b.to_json_without_clock().unwrap());
        assert_eq!(a.seeds.len(), 3);
        for s in &a.seeds {
            assert_eq!(s.status, SeedStatus::Completed);
            assert_eq!(s.loss_trace.len(), 3);
            for c in &s.conditions {
                assert!(c.degradation.is_consistent());
            }
        }
        let agg = &a.aggregate[0];
        let col: Vec<f64> = a.seeds.iter().map(|s| s.conditions[0].degradation.delta_p).collect();
        assert_eq!(agg.median.delta_p, median(&col));
    }

    #[test]
    fn sweep_shape_and_single_severity() {
        let mut cfg = small();
        cfg.sweep = Some(SweepConfig {
            methods: vec![Method::Sam, Method::Vanilla],
            severities: vec![1, 3],
            kind: None,
        });
        let sw = sweep_severity(&cfg, &[1, 3]).unwrap();
        assert_eq!(sw.rows.len(), 2 * 2 * 3);
        assert_eq!(sw.to_csv().lines().count(), 13);

        let one = sweep_severity(&cfg, &[3]).unwrap();
        let direct = run_experiment(&cfg).unwrap();
        let swept = one.report(Method::Sam, 3).unwrap();
        assert_eq!(swept.to_json_without_clock().unwrap(), direct.to_json_without_clock().unwrap());
    }

    #[test]
    fn ood_self_comparison_is_zero() {
        let cfg = small();
        let t = train_seed(&cfg, 0, None).unwrap();
        let (_, _, r) = ood_degradation(&t.model, &t.test, &t.test).unwrap();
        assert_eq!(r.delta_p, 0.0);
        let narrow = t.test.select(&[0], t.test.provenance().clone());
        let wrong_dim = LabeledGroupDataset::new(
            crate::autodiff::Tensor::matrix(2, 2, vec![0.1; 4]).unwrap(),
            vec![0, 1],
            vec![crate::Group::Advantaged, crate::Group::Disadvantaged],
            2,
            crate::datagen::Provenance::Manual,
        )
        .unwrap();
        assert!(ood_degradation(&t.model, &narrow, &wrong_dim).is_err());
    }

    #[test]
    fn renders_nine_columns() {
        let report = run_experiment(&small()).unwrap();
        let md = render_report(std::slice::from_ref(&report), ReportFormat::Markdown).unwrap();
        for line in md.lines() {
            assert_eq!(line.matches('|').count(), 10, "{line}");
        }
        let csv = render_report(std::slice::from_ref(&report), ReportFormat::Csv).unwrap();
        assert!(csv.lines().all(|l| l.split(',').count() == 9));
        let json = render_report(std::slice::from_ref(&report), ReportFormat::Json).unwrap();
        let back: Vec<RunReport> = serde_json::from_str(&json).unwrap();
        assert_eq!(back[0], report);
    }

    #[test]
    fn median_values() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    #[test]
    fn derived_seeds_differ() {
        assert_ne!(derive_seed(0, SPLIT_STREAM), derive_seed(0, INIT_STREAM));
        assert_ne!(derive_seed(0, SPLIT_STREAM), derive_seed(1, SPLIT_STREAM));
    }
}
