//! Fairness-aware sharpness-aware minimization at desk scale.
//!
//! The crate is organized bottom-up:
//!
//! - [`autodiff`]: dense tensors and a reverse-mode tape.
//! - [`models`]: small MLP classifiers over a flat parameter vector.
//! - [`optim`]: SGD, SAM, GroupSAM, FairSAM and the Reweighed/FairReg baselines.
//! - [`fairmetrics`]: group accuracies and corrupted-degradation metrics.
//! - [`corruption`]: seeded noise/blur operators at severities 1–5.
//! - [`datagen`]: synthetic group-structured datasets and CSV I/O.
//! - [`harness`]: experiment configs, runs, sweeps, OOD evaluation, reports.

// `!(x > 0.0)` is used on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::fmt;

use serde::{Deserialize, Serialize};

pub mod autodiff;
pub mod corruption;
pub mod datagen;
pub mod error;
pub mod fairmetrics;
pub mod harness;
pub mod models;
pub mod optim;

pub use error::{Error, Result};

/// Sensitive-attribute group. CSV files encode `Advantaged` as 0 and
/// `Disadvantaged` as 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Group {
    #[serde(rename = "s_plus")]
    Advantaged,
    #[serde(rename = "s_minus")]
    Disadvantaged,
}

impl Group {
    pub const ALL: [Group; 2] = [Group::Advantaged, Group::Disadvantaged];

    pub fn index(self) -> usize {
        match self {
            Group::Advantaged => 0,
            Group::Disadvantaged => 1,
        }
    }

    pub fn from_index(i: usize) -> Option<Self> {
        match i {
            0 => Some(Group::Advantaged),
            1 => Some(Group::Disadvantaged),
            _ => None,
        }
    }
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Group::Advantaged => "s⁺",
            Group::Disadvantaged => "s⁻",
        })
    }
}
