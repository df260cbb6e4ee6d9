//! Group-structured datasets: synthetic generation, CSV I/O and stratified
//! splits.
//!
//! Features always live in the unit box `[0, 1]^d`. CSV files have the
//! header `f0,...,f{d-1},label,group`, where group `0` is s⁺ and `1` is s⁻.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::corruption::CorruptionSpec;
use crate::error::{Error, Result};
use crate::Group;

/// Where a dataset came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Provenance {
    Synthetic { spec: SyntheticSpec, n: usize },
    Csv { path: PathBuf },
    Split { source: Box<Provenance>, part: String, seed: u64 },
    Corrupted { source: Box<Provenance>, spec: CorruptionSpec },
    Manual,
}

/// Features `x` (n × d), labels, and a sensitive group per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledGroupDataset {
    x: Tensor,
    y: Vec<usize>,
    groups: Vec<Group>,
    classes: usize,
    provenance: Provenance,
}

impl LabeledGroupDataset {
    /// Validates lengths, label range, both groups present and features in
    /// `[0, 1]`.
    pub fn new(x: Tensor, y: Vec<usize>, groups: Vec<Group>, classes: usize, provenance: Provenance) -> Result<Self> {
        if x.shape().len() != 2 {
            return Err(Error::ShapeMismatch {
                op: "dataset",
                left: x.shape().to_vec(),
                right: vec![y.len(), 0],
            });
        }
        let n = x.rows();
        for (what, len) in [("labels", y.len()), ("groups", groups.len())] {
            if len != n {
                return Err(Error::LengthMismatch {
                    what,
                    expected: n,
                    actual: len,
                });
            }
        }
        if let Some(&label) = y.iter().find(|&&l| l >= classes) {
            return Err(Error::LabelOutOfRange { label, classes });
        }
        check_unit_box(x.data())?;
        for grp in Group::ALL {
            if !groups.contains(&grp) {
                return Err(Error::EmptyGroup(grp));
            }
        }
        Ok(Self {
            x,
            y,
            groups,
            classes,
            provenance,
        })
    }

    pub fn x(&self) -> &Tensor {
        &self.x
    }

    pub fn y(&self) -> &[usize] {
        &self.y
    }

    pub fn groups(&self) -> &[Group] {
        &self.groups
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn provenance(&self) -> &Provenance {
        &self.provenance
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.x.row_len()
    }

    pub fn count(&self, group: Group) -> usize {
        self.groups.iter().filter(|&&g| g == group).count()
    }

    /// Same labels and groups with new features. Used by corruption.
    pub fn with_features(&self, x: Tensor, provenance: Provenance) -> Result<Self> {
        if x.shape() != self.x.shape() {
            return Err(Error::ShapeMismatch {
                op: "with_features",
                left: self.x.shape().to_vec(),
                right: x.shape().to_vec(),
            });
        }
        Self::new(x, self.y.clone(), self.groups.clone(), self.classes, provenance)
    }

    /// Rows `idx`, in that order. Does not re-check group presence.
    pub fn select(&self, idx: &[usize], provenance: Provenance) -> Self {
        Self {
            x: self.x.select_rows(idx),
            y: idx.iter().map(|&i| self.y[i]).collect(),
            groups: idx.iter().map(|&i| self.groups[i]).collect(),
            classes: self.classes,
            provenance,
        }
    }
}

pub(crate) fn check_unit_box(values: &[f64]) -> Result<()> {
    match values.iter().position(|v| !(0.0..=1.0).contains(v)) {
        Some(index) => Err(Error::FeatureOutOfRange {
            index,
            value: values[index],
        }),
        None => Ok(()),
    }
}

/// Gaussian mixture over (group, class) cells.
///
/// `means[g][k]` and `spreads[g][k]` describe the cluster of group `g`
/// (0 = s⁺, 1 = s⁻) and class `k`. The fragility factor `phi` pulls the s⁻
/// class means toward their common centroid by `1/phi`, so s⁻ samples sit
/// closer to the class boundary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub d: usize,
    pub means: [Vec<Vec<f64>>; 2],
    pub spreads: [Vec<f64>; 2],
    /// `n_{s⁺} / n_{s⁻}`.
    pub ratio: f64,
    pub phi: f64,
    pub label_noise: f64,
    pub seed: u64,
}

/// Parameters for [`SyntheticSpec::two_group`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TwoGroupParams {
    pub d: usize,
    pub classes: usize,
    /// Distance between adjacent class means along the class axis.
    pub separation: f64,
    /// Shift of the s⁻ centroid along the class axis.
    pub shift: f64,
    /// Shift of the s⁻ centroid along an axis orthogonal to the class axis.
    pub offset: f64,
    pub spread_plus: f64,
    pub spread_minus: f64,
    pub ratio: f64,
    pub phi: f64,
    pub label_noise: f64,
}

impl Default for TwoGroupParams {
    fn default() -> Self {
        Self {
            d: 20,
            classes: 2,
            separation: 0.4,
            shift: 0.0,
            offset: 0.0,
            spread_plus: 0.1,
            spread_minus: 0.1,
            ratio: 1.0,
            phi: 1.0,
            label_noise: 0.0,
        }
    }
}

impl SyntheticSpec {
    /// Clusters centred at `0.5·1`. Class means step along the unit vector
    /// `u ∝ (1, …, 1)`; the s⁻ centroid moves by `shift·u + offset·v` with
    /// `v ∝ (1, −1, 1, −1, …)`.
    pub fn two_group(p: &TwoGroupParams, seed: u64) -> Result<Self> {
        if p.d < 2 || p.classes < 2 {
            return Err(Error::config("two_group needs d >= 2 and classes >= 2"));
        }
        let inv = 1.0 / (p.d as f64).sqrt();
        let u = vec![inv; p.d];
        let mut v: Vec<f64> = (0..p.d).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect();
        if p.d % 2 == 1 {
            // Keep v orthogonal to u for odd d.
            v[p.d - 1] = 0.0;
        }
        let vn = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        v.iter_mut().for_each(|a| *a /= vn);

        let mid = (p.classes as f64 - 1.0) / 2.0;
        let mut means: [Vec<Vec<f64>>; 2] = [Vec::new(), Vec::new()];
        for (g, cells) in means.iter_mut().enumerate() {
            for k in 0..p.classes {
                let t = (k as f64 - mid) * p.separation;
                let (s, o) = if g == 1 { (p.shift, p.offset) } else { (0.0, 0.0) };
                cells.push((0..p.d).map(|i| 0.5 + (t + s) * u[i] + o * v[i]).collect());
            }
        }
        let spec = Self {
            d: p.d,
            means,
            spreads: [vec![p.spread_plus; p.classes], vec![p.spread_minus; p.classes]],
            ratio: p.ratio,
            phi: p.phi,
            label_noise: p.label_noise,
            seed,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn classes(&self) -> usize {
        self.means[0].len()
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.classes();
        if k < 2 {
            return Err(Error::config("synthetic spec needs at least 2 classes"));
        }
        if !(self.ratio > 0.0 && self.ratio.is_finite()) {
            return Err(Error::config(format!("ratio must be > 0, got {}", self.ratio)));
        }
        if !(self.phi >= 1.0 && self.phi.is_finite()) {
            return Err(Error::config(format!("phi must be >= 1, got {}", self.phi)));
        }
        if !(0.0..1.0).contains(&self.label_noise) {
            return Err(Error::config("label_noise must lie in [0, 1)"));
        }
        for g in 0..2 {
            if self.means[g].len() != k || self.spreads[g].len() != k {
                return Err(Error::config("every group needs one mean and spread per class"));
            }
            if self.means[g].iter().any(|m| m.len() != self.d) {
                return Err(Error::config("mean vector length differs from d"));
            }
            if self.spreads[g].iter().any(|&s| !(s >= 0.0 && s.is_finite())) {
                return Err(Error::config("spreads must be finite and >= 0"));
            }
            let eff = self.effective_means(g);
            for a in 0..k {
                for b in a + 1..k {
                    if eff[a] == eff[b] && self.spreads[g][a] == 0.0 && self.spreads[g][b] == 0.0 {
                        return Err(Error::config(format!(
                            "degenerate spec: classes {a} and {b} coincide in group {}",
                            Group::from_index(g).expect("two groups")
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    /// Class means after the fragility contraction.
    pub fn effective_means(&self, group: usize) -> Vec<Vec<f64>> {
        let cells = &self.means[group];
        if group == 0 || self.phi == 1.0 {
            return cells.clone();
        }
        let k = cells.len() as f64;
        let centroid: Vec<f64> = (0..self.d).map(|i| cells.iter().map(|m| m[i]).sum::<f64>() / k).collect();
        cells
            .iter()
            .map(|m| m.iter().zip(&centroid).map(|(a, c)| c + (a - c) / self.phi).collect())
            .collect()
    }
}

/// Draws `n` samples. Group membership is Bernoulli with
/// `P(s⁺) = r/(1+r)`, the class is uniform, and features are the cell's
/// Gaussian clipped to `[0, 1]`. With probability `label_noise` the label is
/// replaced by a different, uniformly chosen class.
pub fn generate_synthetic(spec: &SyntheticSpec, n: usize) -> Result<LabeledGroupDataset> {
    if n < 4 {
        return Err(Error::config(format!("need n >= 4 samples, got {n}")));
    }
    spec.validate()?;
    let k = spec.classes();
    let means = [spec.effective_means(0), spec.effective_means(1)];
    let p_plus = spec.ratio / (1.0 + spec.ratio);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let mut x = Vec::with_capacity(n * spec.d);
    let mut y = Vec::with_capacity(n);
    let mut groups = Vec::with_capacity(n);
    for _ in 0..n {
        let g = if rng.random::<f64>() < p_plus { 0 } else { 1 };
        let class = rng.random_range(0..k);
        let spread = spec.spreads[g][class];
        for &m in &means[g][class] {
            let z: f64 = rng.sample(StandardNormal);
            x.push((m + spread * z).clamp(0.0, 1.0));
        }
        let mut label = class;
        if spec.label_noise > 0.0 && rng.random::<f64>() < spec.label_noise {
            let other = rng.random_range(0..k - 1);
            label = if other >= class { other + 1 } else { other };
        }
        y.push(label);
        groups.push(Group::from_index(g).expect("two groups"));
    }
    let x = Tensor::matrix(n, spec.d, x)?;
    LabeledGroupDataset::new(
        x,
        y,
        groups,
        k,
        Provenance::Synthetic {
            spec: spec.clone(),
            n,
        },
    )
}

/// Writes `f0..f{d-1},label,group` with 17 significant digits per feature.
pub fn save_csv(dataset: &LabeledGroupDataset, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let d = dataset.dim();
    let mut header: Vec<String> = (0..d).map(|i| format!("f{i}")).collect();
    header.push("label".into());
    header.push("group".into());
    let io = |e| Error::io(path, e);
    writeln!(w, "{}", header.join(",")).map_err(io)?;
    for i in 0..dataset.len() {
        let mut fields: Vec<String> = dataset.x.row(i).iter().map(|v| format!("{v:.16e}")).collect();
        fields.push(dataset.y[i].to_string());
        fields.push(dataset.groups[i].index().to_string());
        writeln!(w, "{}", fields.join(",")).map_err(io)?;
    }
    w.flush().map_err(io)
}

/// Reads a dataset written by [`save_csv`] or by hand. The number of
/// classes is one more than the largest label, and at least 2.
pub fn load_csv(path: &Path) -> Result<LabeledGroupDataset> {
    let csv_err = |line: u64, message: String| Error::Csv {
        path: path.to_path_buf(),
        line,
        message,
    };
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(file);
    let header = reader.headers().map_err(|e| csv_err(1, e.to_string()))?.clone();
    let cols: Vec<&str> = header.iter().map(str::trim).collect();
    let d = cols.len().saturating_sub(2);
    let expected: Vec<String> = (0..d)
        .map(|i| format!("f{i}"))
        .chain(["label".to_string(), "group".to_string()])
        .collect();
    if d == 0 || cols != expected {
        return Err(csv_err(
            1,
            format!("header must be f0,...,f{{d-1}},label,group; got {}", cols.join(",")),
        ));
    }

    let mut x = Vec::new();
    let mut y = Vec::new();
    let mut groups = Vec::new();
    for (row, rec) in reader.records().enumerate() {
        let line = row as u64 + 2;
        let rec = rec.map_err(|e| csv_err(line, e.to_string()))?;
        if rec.len() != d + 2 {
            return Err(csv_err(line, format!("expected {} columns, got {}", d + 2, rec.len())));
        }
        for (j, field) in rec.iter().take(d).enumerate() {
            let v: f64 = field
                .trim()
                .parse()
                .map_err(|_| csv_err(line, format!("f{j}: cannot parse {field:?} as a number")))?;
            if !(0.0..=1.0).contains(&v) {
                return Err(csv_err(line, format!("f{j}: value {v} outside [0, 1]")));
            }
            x.push(v);
        }
        let label: usize = rec[d]
            .trim()
            .parse()
            .map_err(|_| csv_err(line, format!("label: cannot parse {:?}", &rec[d])))?;
        let group = match rec[d + 1].trim() {
            "0" => Group::Advantaged,
            "1" => Group::Disadvantaged,
            other => return Err(csv_err(line, format!("group must be 0 or 1, got {other:?}"))),
        };
        y.push(label);
        groups.push(group);
    }
    let n = y.len();
    let classes = y.iter().max().map_or(2, |&m| (m + 1).max(2));
    let x = Tensor::matrix(n, d, x)?;
    LabeledGroupDataset::new(
        x,
        y,
        groups,
        classes,
        Provenance::Csv {
            path: path.to_path_buf(),
        },
    )
}

/// Stratified split by (group, class). Each stratum of size `m` contributes
/// `round(m·fraction)` samples to the training side.
pub fn split(dataset: &LabeledGroupDataset, train_fraction: f64, seed: u64) -> Result<(LabeledGroupDataset, LabeledGroupDataset)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::config(format!("train fraction must lie in (0, 1), got {train_fraction}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train = Vec::new();
    let mut test = Vec::new();
    for grp in Group::ALL {
        for class in 0..dataset.classes {
            let mut idx: Vec<usize> = (0..dataset.len())
                .filter(|&i| dataset.groups[i] == grp && dataset.y[i] == class)
                .collect();
            idx.shuffle(&mut rng);
            let take = (idx.len() as f64 * train_fraction).round() as usize;
            train.extend_from_slice(&idx[..take]);
            test.extend_from_slice(&idx[take..]);
        }
    }
    train.sort_unstable();
    test.sort_unstable();
    let part = |name: &str| Provenance::Split {
        source: Box::new(dataset.provenance.clone()),
        part: name.into(),
        seed,
    };
    let train = dataset.select(&train, part("train"));
    let test = dataset.select(&test, part("test"));
    for side in [&train, &test] {
        for grp in Group::ALL {
            if side.count(grp) == 0 {
                return Err(Error::EmptyGroup(grp));
            }
        }
    }
    Ok((train, test))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::HashMap;

    fn spec(ratio: f64, phi: f64, seed: u64) -> SyntheticSpec {
        SyntheticSpec::two_group(
            &TwoGroupParams {
                d: 6,
                ratio,
                phi,
                ..Default::default()
            },
            seed,
        )
        .unwrap()
    }

    #[test]
    fn balanced_group_counts() {
        for seed in 0..5 {
            let ds = generate_synthetic(&spec(1.0, 1.0, seed), 1000).unwrap();
            let plus = ds.count(Group::Advantaged);
            assert!((450..=550).contains(&plus), "seed {seed}: {plus}");
        }
    }

    #[test]
    fn imbalanced_counts_follow_ratio() {
        let ds = generate_synthetic(&spec(4.0, 2.0, 3), 4000).unwrap();
        let frac = ds.count(Group::Advantaged) as f64 / 4000.0;
        assert!((frac - 0.8).abs() < 0.03, "{frac}");
    }

    #[test]
    fn same_seed_same_dataset() {
        let a = generate_synthetic(&spec(4.0, 2.0, 9), 300).unwrap();
        let b = generate_synthetic(&spec(4.0, 2.0, 9), 300).unwrap();
        assert_eq!(a, b);
        let c = generate_synthetic(&spec(4.0, 2.0, 10), 300).unwrap();
        assert_ne!(a.x(), c.x());
    }

    #[test]
    fn fragility_contracts_minus_means() {
        let s = spec(1.0, 2.0, 0);
        let plus = s.effective_means(0);
        let minus = s.effective_means(1);
        let dist = |m: &[Vec<f64>]| m[0].iter().zip(&m[1]).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        assert!((dist(&minus) - dist(&plus) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn degenerate_spec_rejected() {
        let p = TwoGroupParams {
            separation: 0.0,
            spread_plus: 0.0,
            spread_minus: 0.0,
            ..Default::default()
        };
        assert!(SyntheticSpec::two_group(&p, 0).is_err());
        let bad_phi = TwoGroupParams {
            phi: 0.5,
            ..Default::default()
        };
        assert!(SyntheticSpec::two_group(&bad_phi, 0).is_err());
        assert!(generate_synthetic(&spec(1.0, 1.0, 0), 3).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        let ds = generate_synthetic(&spec(2.0, 1.5, 1), 50).unwrap();
        save_csv(&ds, &path).unwrap();
        let back = load_csv(&path).unwrap();
        assert_eq!(back.x(), ds.x());
        assert_eq!(back.y(), ds.y());
        assert_eq!(back.groups(), ds.groups());
    }

    #[test]
    fn csv_hand_fixture() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("h.csv");
        std::fs::write(&path, "f0,f1,label,group\n0.25,1,0,0\n0,0.125,1,1\n0.5,0.75,1,0\n").unwrap();
        let ds = load_csv(&path).unwrap();
        assert_eq!(ds.x().data(), &[0.25, 1.0, 0.0, 0.125, 0.5, 0.75]);
        assert_eq!(ds.y(), &[0, 1, 1]);
        assert_eq!(ds.groups(), &[Group::Advantaged, Group::Disadvantaged, Group::Advantaged]);
        assert_eq!(ds.classes(), 2);
    }

    #[test]
    fn csv_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.csv");

        std::fs::write(&path, "f0,label,group\n0.5,1,0\n0.1,0,0\n").unwrap();
        assert_eq!(load_csv(&path).unwrap_err().to_string(), "group s⁻ empty");

        std::fs::write(&path, "f0,label,group\n0.5,1,0\n0.1,x,1\n").unwrap();
        let msg = load_csv(&path).unwrap_err().to_string();
        assert!(msg.contains("line 3"), "{msg}");

        std::fs::write(&path, "f0,label\n0.5,1\n").unwrap();
        assert!(load_csv(&path).unwrap_err().to_string().contains("line 1"));

        std::fs::write(&path, "f0,label,group\n1.5,1,0\n0.1,0,1\n").unwrap();
        assert!(load_csv(&path).unwrap_err().to_string().contains("line 2"));
    }

    #[test]
    fn split_balanced_400() {
        let mut x = Vec::new();
        let mut y = Vec::new();
        let mut groups = Vec::new();
        for i in 0..400 {
            x.push((i % 7) as f64 / 7.0);
            y.push(i % 2);
            groups.push(if (i / 2) % 2 == 0 { Group::Advantaged } else { Group::Disadvantaged });
        }
        let ds = LabeledGroupDataset::new(Tensor::matrix(400, 1, x).unwrap(), y, groups, 2, Provenance::Manual).unwrap();
        let (tr, te) = split(&ds, 0.5, 7).unwrap();
        assert_eq!(tr.len(), 200);
        assert_eq!(te.len(), 200);
        for side in [&tr, &te] {
            for g in Group::ALL {
                for c in 0..2 {
                    let m = (0..side.len()).filter(|&i| side.groups()[i] == g && side.y()[i] == c).count();
                    assert_eq!(m, 50);
                }
            }
        }
        let (tr2, _) = split(&ds, 0.5, 7).unwrap();
        assert_eq!(tr, tr2);
    }

    #[test]
    fn split_rejects_bad_fraction_and_tiny_groups() {
        let ds = generate_synthetic(&spec(1.0, 1.0, 0), 40).unwrap();
        assert!(split(&ds, 0.0, 0).is_err());
        assert!(split(&ds, 1.0, 0).is_err());
        let x = Tensor::matrix(3, 1, vec![0.1, 0.2, 0.3]).unwrap();
        let tiny = LabeledGroupDataset::new(
            x,
            vec![0, 1, 0],
            vec![Group::Advantaged, Group::Advantaged, Group::Disadvantaged],
            2,
            Provenance::Manual,
        )
        .unwrap();
        assert!(split(&tiny, 0.5, 0).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn generated_datasets_are_valid(seed in any::<u64>(), ratio in 0.5f64..6.0, phi in 1.0f64..4.0) {
            let ds = generate_synthetic(&spec(ratio, phi, seed), 200).unwrap();
            prop_assert!(ds.x().data().iter().all(|v| (0.0..=1.0).contains(v)));
            prop_assert!(ds.y().iter().all(|&l| l < 2));
            prop_assert!(ds.count(Group::Advantaged) > 0 && ds.count(Group::Disadvantaged) > 0);
        }

        #[test]
        fn split_preserves_strata(seed in any::<u64>(), frac in 0.2f64..0.8) {
            let ds = generate_synthetic(&spec(3.0, 1.0, seed), 300).unwrap();
            let (tr, te) = split(&ds, frac, seed).unwrap();
            prop_assert_eq!(tr.len() + te.len(), ds.len());
            let mut strata: HashMap<(Group, usize), (usize, usize)> = HashMap::new();
            for i in 0..ds.len() {
                strata.entry((ds.groups()[i], ds.y()[i])).or_default().0 += 1;
            }
            for i in 0..tr.len() {
                strata.entry((tr.groups()[i], tr.y()[i])).or_default().1 += 1;
            }
            for (total, in_train) in strata.values() {
                let ideal = *total as f64 * frac;
                prop_assert!((*in_train as f64 - ideal).abs() <= 1.0);
            }
        }
    }
}
