//! Seeded feature corruptions at severities 1–5.
//!
//! Every row `i` draws from its own ChaCha8 stream: the generator is seeded
//! with `seed_from_u64(seed)` and then switched to stream `i`. Output for a
//! row therefore depends only on `(seed, i, row)`, so rows can be processed
//! in any order or in parallel.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::datagen::{check_unit_box, LabeledGroupDataset, Provenance};
use crate::error::{Error, Result};

/// Gaussian noise standard deviation by severity.
pub const GAUSSIAN_SIGMA: [f64; 5] = [0.08, 0.12, 0.18, 0.26, 0.38];
/// Impulse replacement rate by severity.
pub const IMPULSE_RATE: [f64; 5] = [0.03, 0.06, 0.09, 0.17, 0.27];
/// Moving-average window width by severity.
pub const BLUR_WIDTH: [usize; 5] = [3, 5, 7, 9, 11];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionKind {
    GaussianNoise,
    ImpulseNoise,
    Blur,
}

impl CorruptionKind {
    pub const ALL: [CorruptionKind; 3] = [
        CorruptionKind::GaussianNoise,
        CorruptionKind::ImpulseNoise,
        CorruptionKind::Blur,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CorruptionKind::GaussianNoise => "gaussian_noise",
            CorruptionKind::ImpulseNoise => "impulse_noise",
            CorruptionKind::Blur => "blur",
        }
    }

    /// The raw parameter used at `severity`.
    pub fn strength(self, severity: u8) -> Result<Strength> {
        if !(1..=5).contains(&severity) {
            return Err(Error::SeverityOutOfRange(severity));
        }
        let k = severity as usize - 1;
        Ok(match self {
            CorruptionKind::GaussianNoise => Strength::Sigma(GAUSSIAN_SIGMA[k]),
            CorruptionKind::ImpulseNoise => Strength::Rate(IMPULSE_RATE[k]),
            CorruptionKind::Blur => Strength::Width(BLUR_WIDTH[k]),
        })
    }
}

impl fmt::Display for CorruptionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for CorruptionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        CorruptionKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::config(format!("unknown corruption kind {s:?}")))
    }
}

/// Raw operator parameter, independent of the severity table.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Strength {
    Sigma(f64),
    Rate(f64),
    Width(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorruptionSpec {
    pub kind: CorruptionKind,
    pub severity: u8,
    #[serde(default)]
    pub seed: u64,
}

impl CorruptionSpec {
    pub fn new(kind: CorruptionKind, severity: u8, seed: u64) -> Result<Self> {
        let spec = Self { kind, severity, seed };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        self.kind.strength(self.severity).map(|_| ())
    }
}

/// Severity schedules as recorded in reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeveritySchedules {
    pub gaussian_sigma: Vec<f64>,
    pub impulse_rate: Vec<f64>,
    pub blur_width: Vec<usize>,
}

pub fn schedules() -> SeveritySchedules {
    SeveritySchedules {
        gaussian_sigma: GAUSSIAN_SIGMA.to_vec(),
        impulse_rate: IMPULSE_RATE.to_vec(),
        blur_width: BLUR_WIDTH.to_vec(),
    }
}

/// Corrupts a feature tensor at a table severity.
///
/// `features` is `n × d` (noise per coordinate, blur along the feature axis)
/// or `n × h × w` (noise per coordinate, separable 2-D blur per sample).
pub fn corrupt(features: &Tensor, spec: &CorruptionSpec) -> Result<Tensor> {
    let strength = spec.kind.strength(spec.severity)?;
    corrupt_with(features, strength, spec.seed)
}

/// Corrupts with an explicit operator parameter. `Sigma(0)`, `Rate(0)` and
/// `Width(1)` are the identity.
pub fn corrupt_with(features: &Tensor, strength: Strength, seed: u64) -> Result<Tensor> {
    let shape = features.shape();
    if !(shape.len() == 2 || shape.len() == 3) {
        return Err(Error::ShapeMismatch {
            op: "corrupt",
            left: shape.to_vec(),
            right: vec![0, 0],
        });
    }
    check_unit_box(features.data())?;
    let row_len = features.row_len();
    let mut out = features.data().to_vec();
    if row_len == 0 {
        return Tensor::new(shape.to_vec(), out);
    }
    match strength {
        Strength::Sigma(sigma) => {
            if !(sigma >= 0.0 && sigma.is_finite()) {
                return Err(Error::config(format!("sigma must be finite and >= 0, got {sigma}")));
            }
            out.par_chunks_mut(row_len).enumerate().for_each(|(i, row)| {
                let mut rng = row_rng(seed, i);
                for v in row {
                    let z: f64 = rng.sample(StandardNormal);
                    *v = (*v + sigma * z).clamp(0.0, 1.0);
                }
            });
        }
        Strength::Rate(rate) => {
            if !(0.0..=1.0).contains(&rate) {
                return Err(Error::config(format!("impulse rate must lie in [0, 1], got {rate}")));
            }
            out.par_chunks_mut(row_len).enumerate().for_each(|(i, row)| {
                let mut rng = row_rng(seed, i);
                for v in row {
                    let hit = rng.random::<f64>() < rate;
                    let salt = rng.random::<bool>();
                    if hit {
                        *v = if salt { 1.0 } else { 0.0 };
                    }
                }
            });
        }
        Strength::Width(width) => {
            if width == 0 || width % 2 == 0 {
                return Err(Error::config(format!("blur width must be odd and positive, got {width}")));
            }
            let (h, w) = if shape.len() == 3 { (shape[1], shape[2]) } else { (1, shape[1]) };
            out.par_chunks_mut(row_len).for_each(|row| blur_2d(row, h, w, width));
        }
    }
    Tensor::new(shape.to_vec(), out)
}

fn row_rng(seed: u64, row: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(row as u64);
    rng
}

/// Box filter over each axis with the window truncated at the edges, so
/// every output is the mean of the in-range neighbours.
fn blur_2d(img: &mut [f64], h: usize, w: usize, width: usize) {
    let r = width / 2;
    let mut tmp = vec![0.0; img.len()];
    for y in 0..h {
        moving_average(&img[y * w..(y + 1) * w], &mut tmp[y * w..(y + 1) * w], r);
    }
    if h == 1 {
        img.copy_from_slice(&tmp);
        return;
    }
    let mut col = vec![0.0; h];
    let mut res = vec![0.0; h];
    for x in 0..w {
        for y in 0..h {
            col[y] = tmp[y * w + x];
        }
        moving_average(&col, &mut res, r);
        for y in 0..h {
            img[y * w + x] = res[y];
        }
    }
}

fn moving_average(src: &[f64], dst: &mut [f64], r: usize) {
    let n = src.len();
    for (i, out) in dst.iter_mut().enumerate().take(n) {
        let lo = i.saturating_sub(r);
        let hi = (i + r).min(n - 1);
        let sum: f64 = src[lo..=hi].iter().sum();
        *out = sum / (hi - lo + 1) as f64;
    }
}

/// Corrupts the features only; labels and groups pass through.
pub fn corrupt_dataset(dataset: &LabeledGroupDataset, spec: &CorruptionSpec) -> Result<LabeledGroupDataset> {
    let x = corrupt(dataset.x(), spec)?;
    dataset.with_features(
        x,
        Provenance::Corrupted {
            source: Box::new(dataset.provenance().clone()),
            spec: *spec,
        },
    )
}
