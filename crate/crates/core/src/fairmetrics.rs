//! Group-conditioned accuracy and corrupted-degradation metrics.
//!
//! For a group `s`, the corrupted degradation is
//! `Δp^s = |M(clean, s) − M(corrupted, s)|`, and the disparity between the
//! advantaged and disadvantaged groups is `Δp = |Δp^{s⁺} − Δp^{s⁻}|`.
//! `M` is accuracy throughout; [`grouped_metric`] accepts any per-group
//! scalar metric.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::Group;

/// Tolerance for the internal-consistency checks on reports.
pub const CONSISTENCY_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupStat {
    pub group: Group,
    /// Number of evaluated samples; `None` when the rate came from elsewhere.
    pub count: Option<usize>,
    pub accuracy: f64,
}

/// Per-group and overall accuracy under one data condition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupedEval {
    /// `clean`, `corrupted`, or the name of an OOD set.
    pub label: String,
    pub groups: Vec<GroupStat>,
    pub overall: f64,
}

impl GroupedEval {
    /// Builds an evaluation from already-computed rates with unknown sample
    /// counts.
    pub fn from_rates(label: impl Into<String>, s_plus: f64, s_minus: f64, overall: f64) -> Self {
        Self {
            label: label.into(),
            groups: vec![
                GroupStat {
                    group: Group::Advantaged,
                    count: None,
                    accuracy: s_plus,
                },
                GroupStat {
                    group: Group::Disadvantaged,
                    count: None,
                    accuracy: s_minus,
                },
            ],
            overall,
        }
    }

    pub fn stat(&self, group: Group) -> Option<&GroupStat> {
        self.groups.iter().find(|s| s.group == group)
    }

    pub fn accuracy(&self, group: Group) -> Result<f64> {
        self.stat(group)
            .map(|s| s.accuracy)
            .ok_or(Error::EmptyGroup(group))
    }

    /// Swaps which group is called advantaged.
    pub fn swapped(&self) -> Self {
        let mut out = self.clone();
        for s in &mut out.groups {
            s.group = match s.group {
                Group::Advantaged => Group::Disadvantaged,
                Group::Disadvantaged => Group::Advantaged,
            };
        }
        out
    }
}

/// Exact per-group and overall accuracy.
pub fn grouped_accuracy(
    predictions: &[usize],
    labels: &[usize],
    groups: &[Group],
    label: impl Into<String>,
) -> Result<GroupedEval> {
    grouped_metric(predictions, labels, groups, label, accuracy)
}

pub fn accuracy(predictions: &[usize], labels: &[usize]) -> f64 {
    let correct = predictions.iter().zip(labels).filter(|(p, y)| p == y).count();
    correct as f64 / labels.len() as f64
}

/// Applies `metric(predictions, labels)` to each group and to the whole set.
pub fn grouped_metric<F>(
    predictions: &[usize],
    labels: &[usize],
    groups: &[Group],
    label: impl Into<String>,
    metric: F,
) -> Result<GroupedEval>
where
    F: Fn(&[usize], &[usize]) -> f64,
{
    if predictions.len() != labels.len() || groups.len() != labels.len() {
        return Err(Error::LengthMismatch {
            what: "predictions/labels/groups",
            expected: labels.len(),
            actual: predictions.len().min(groups.len()),
        });
    }
    let mut stats = Vec::with_capacity(2);
    for grp in Group::ALL {
        let idx: Vec<usize> = (0..groups.len()).filter(|&i| groups[i] == grp).collect();
        if idx.is_empty() {
            return Err(Error::EmptyGroup(grp));
        }
        let p: Vec<usize> = idx.iter().map(|&i| predictions[i]).collect();
        let y: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
        stats.push(GroupStat {
            group: grp,
            count: Some(idx.len()),
            accuracy: metric(&p, &y),
        });
    }
    Ok(GroupedEval {
        label: label.into(),
        groups: stats,
        overall: metric(predictions, labels),
    })
}

/// `Δp^s = |M_clean(s) − M_corrupted(s)|`.
pub fn corrupted_degradation(clean: &GroupedEval, corrupted: &GroupedEval, group: Group) -> Result<f64> {
    Ok((clean.accuracy(group)? - corrupted.accuracy(group)?).abs())
}

/// `ΔAcc = |Acc_{s⁺} − Acc_{s⁻}|` under the corrupted condition.
pub fn accuracy_disparity(corrupted: &GroupedEval) -> Result<f64> {
    Ok((corrupted.accuracy(Group::Advantaged)? - corrupted.accuracy(Group::Disadvantaged)?).abs())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AccuracyTriple {
    pub s_plus: f64,
    pub s_minus: f64,
    pub overall: f64,
}

impl AccuracyTriple {
    fn of(eval: &GroupedEval) -> Result<Self> {
        Ok(Self {
            s_plus: eval.accuracy(Group::Advantaged)?,
            s_minus: eval.accuracy(Group::Disadvantaged)?,
            overall: eval.overall,
        })
    }

    pub fn get(&self, group: Group) -> f64 {
        match group {
            Group::Advantaged => self.s_plus,
            Group::Disadvantaged => self.s_minus,
        }
    }
}

/// Clean-vs-corrupted comparison for both groups.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DegradationReport {
    pub acc_clean: AccuracyTriple,
    pub acc_corrupted: AccuracyTriple,
    pub delta_p_plus: f64,
    pub delta_p_minus: f64,
    pub delta_p: f64,
    pub delta_acc: f64,
    pub worst_group_acc: f64,
}

impl DegradationReport {
    /// Every derived field recomputed from the accuracy fields, exactly.
    pub fn from_accuracies(acc_clean: AccuracyTriple, acc_corrupted: AccuracyTriple) -> Self {
        let delta_p_plus = (acc_clean.s_plus - acc_corrupted.s_plus).abs();
        let delta_p_minus = (acc_clean.s_minus - acc_corrupted.s_minus).abs();
        Self {
            acc_clean,
            acc_corrupted,
            delta_p_plus,
            delta_p_minus,
            delta_p: (delta_p_plus - delta_p_minus).abs(),
            delta_acc: (acc_corrupted.s_plus - acc_corrupted.s_minus).abs(),
            worst_group_acc: acc_corrupted.s_plus.min(acc_corrupted.s_minus),
        }
    }

    /// Whether the derived fields agree with the accuracy fields and all
    /// values lie in `[0, 1]`.
    pub fn is_consistent(&self) -> bool {
        let fresh = Self::from_accuracies(self.acc_clean, self.acc_corrupted);
        let pairs = [
            (self.delta_p_plus, fresh.delta_p_plus),
            (self.delta_p_minus, fresh.delta_p_minus),
            (self.delta_p, fresh.delta_p),
            (self.delta_acc, fresh.delta_acc),
            (self.worst_group_acc, fresh.worst_group_acc),
        ];
        pairs.iter().all(|(a, b)| (a - b).abs() <= CONSISTENCY_TOL)
            && self.values().iter().all(|v| (0.0..=1.0).contains(v))
    }

    /// Numeric fields in schema order.
    pub fn values(&self) -> [f64; 11] {
        [
            self.acc_clean.s_plus,
            self.acc_clean.s_minus,
            self.acc_clean.overall,
            self.acc_corrupted.s_plus,
            self.acc_corrupted.s_minus,
            self.acc_corrupted.overall,
            self.delta_p_plus,
            self.delta_p_minus,
            self.delta_p,
            self.delta_acc,
            self.worst_group_acc,
        ]
    }

    /// Inverse of [`values`](Self::values); no recomputation.
    pub fn from_values(v: [f64; 11]) -> Self {
        Self {
            acc_clean: AccuracyTriple {
                s_plus: v[0],
                s_minus: v[1],
                overall: v[2],
            },
            acc_corrupted: AccuracyTriple {
                s_plus: v[3],
                s_minus: v[4],
                overall: v[5],
            },
            delta_p_plus: v[6],
            delta_p_minus: v[7],
            delta_p: v[8],
            delta_acc: v[9],
            worst_group_acc: v[10],
        }
    }
}

/// Full report comparing a clean and a corrupted evaluation.
pub fn corrupted_degradation_disparity(clean: &GroupedEval, corrupted: &GroupedEval) -> Result<DegradationReport> {
    Ok(DegradationReport::from_accuracies(
        AccuracyTriple::of(clean)?,
        AccuracyTriple::of(corrupted)?,
    ))
}
