//! Synthetic domain-shift datasets, deterministic splits and CSV ingestion.
//!
//! Target labels only reach trainers through [`UnlabeledSet`], which has no
//! label field at all; labeled target splits are for validation and testing.

use std::f64::consts::PI;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    Source,
    Target,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
    /// Not split yet.
    Full,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSet {
    features: Tensor,
    labels: Vec<usize>,
    num_classes: usize,
    pub domain: Domain,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UnlabeledSet {
    features: Tensor,
    pub domain: Domain,
    pub split: Split,
}

fn check_features(features: &Tensor) -> Result<()> {
    if features.shape().len() != 2 || features.rows() == 0 {
        return Err(Error::shape(
            "dataset",
            format!("features {:?}", features.shape()),
        ));
    }
    if !features.all_finite() {
        return Err(Error::NonFinite { op: "dataset" });
    }
    Ok(())
}

impl LabeledSet {
    pub fn new(
        features: Tensor,
        labels: Vec<usize>,
        num_classes: usize,
        domain: Domain,
        split: Split,
    ) -> Result<Self> {
        check_features(&features)?;
        if labels.len() != features.rows() {
            return Err(Error::shape(
                "dataset",
                format!("{} labels for {} rows", labels.len(), features.rows()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Config(format!(
                "label {bad} out of range for {num_classes} classes"
            )));
        }
        Ok(LabeledSet {
            features,
            labels,
            num_classes,
            domain,
            split,
        })
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn subset(&self, indices: &[usize], split: Split) -> LabeledSet {
        LabeledSet {
            features: self.features.select_rows(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
            domain: self.domain,
            split,
        }
    }

    /// Drops the labels.
    pub fn into_unlabeled(self) -> UnlabeledSet {
        UnlabeledSet {
            features: self.features,
            domain: self.domain,
            split: self.split,
        }
    }

    pub fn with_domain(mut self, domain: Domain) -> Self {
        self.domain = domain;
        self
    }
}

impl UnlabeledSet {
    pub fn new(features: Tensor, domain: Domain, split: Split) -> Result<Self> {
        check_features(&features)?;
        Ok(UnlabeledSet {
            features,
            domain,
            split,
        })
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.features.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }
}

fn rotate(points: &mut [f64], degrees: f64) {
    let (s, c) = (degrees * PI / 180.0).sin_cos();
    for p in points.chunks_exact_mut(2) {
        let (x, y) = (p[0], p[1]);
        p[0] = c * x - s * y;
        p[1] = s * x + c * y;
    }
}

/// Two interleaved half circles centered at the origin, classes balanced, rows shuffled.
fn two_moons(n: usize, noise_std: f64, rng: &mut ChaCha8Rng) -> Result<(Vec<f64>, Vec<usize>)> {
    let normal =
        Normal::new(0.0, noise_std.max(0.0)).map_err(|e| Error::Config(format!("noise: {e}")))?;
    let mut labels: Vec<usize> = (0..n).map(|i| i % 2).collect();
    labels.shuffle(rng);
    let mut data = Vec::with_capacity(2 * n);
    for &label in &labels {
        let t = rng.random_range(0.0..PI);
        let (x, y) = if label == 0 {
            (t.cos(), t.sin())
        } else {
            (1.0 - t.cos(), 0.5 - t.sin())
        };
        let (nx, ny) = if noise_std > 0.0 {
            (normal.sample(rng), normal.sample(rng))
        } else {
            (0.0, 0.0)
        };
        data.push(x - 0.5 + nx);
        data.push(y - 0.25 + ny);
    }
    Ok((data, labels))
}

/// Source two-moons and a target drawn from the same law rotated by `rotation_degrees`.
pub fn gen_two_moons_shift(
    n: usize,
    rotation_degrees: f64,
    noise_std: f64,
    seed: u64,
) -> Result<(LabeledSet, LabeledSet)> {
    if n < 4 {
        return Err(Error::Config(format!("two-moons needs n >= 4, got {n}")));
    }
    if !(noise_std >= 0.0) {
        return Err(Error::Config(format!(
            "noise must be >= 0, got {noise_std}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (xs, ys) = two_moons(n, noise_std, &mut rng)?;
    rng.set_stream(1);
    let (mut xt, yt) = two_moons(n, noise_std, &mut rng)?;
    rotate(&mut xt, rotation_degrees);
    Ok((
        LabeledSet::new(
            Tensor::new(vec![n, 2], xs)?,
            ys,
            2,
            Domain::Source,
            Split::Full,
        )?,
        LabeledSet::new(
            Tensor::new(vec![n, 2], xt)?,
            yt,
            2,
            Domain::Target,
            Split::Full,
        )?,
    ))
}

/// Gaussian blobs with class means on a circle of radius 2; target means are translated by `shift`.
pub fn gen_shifted_blobs(
    n: usize,
    classes: usize,
    shift: (f64, f64),
    std: f64,
    seed: u64,
) -> Result<(LabeledSet, LabeledSet)> {
    if n < 2 * classes || classes < 2 {
        return Err(Error::Config(format!(
            "blobs need classes >= 2 and n >= 2 * classes, got n={n}, classes={classes}"
        )));
    }
    let normal = Normal::new(0.0, std).map_err(|e| Error::Config(format!("std: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let make = |offset: (f64, f64), rng: &mut ChaCha8Rng| {
        let mut labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
        labels.shuffle(rng);
        let mut data = Vec::with_capacity(2 * n);
        for &c in &labels {
            let angle = 2.0 * PI * c as f64 / classes as f64;
            data.push(2.0 * angle.cos() + offset.0 + normal.sample(rng));
            data.push(2.0 * angle.sin() + offset.1 + normal.sample(rng));
        }
        (data, labels)
    };
    let (xs, ys) = make((0.0, 0.0), &mut rng);
    rng.set_stream(1);
    let (xt, yt) = make(shift, &mut rng);
    Ok((
        LabeledSet::new(
            Tensor::new(vec![n, 2], xs)?,
            ys,
            classes,
            Domain::Source,
            Split::Full,
        )?,
        LabeledSet::new(
            Tensor::new(vec![n, 2], xt)?,
            yt,
            classes,
            Domain::Target,
            Split::Full,
        )?,
    ))
}

fn shuffled_indices(n: usize, seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    idx
}

/// Part sizes for `ratios`; every part but the first is rounded down and the first takes the rest.
pub fn split_sizes(n: usize, ratios: &[f64]) -> Result<Vec<usize>> {
    let total: f64 = ratios.iter().sum();
    if ratios.iter().any(|r| !(*r >= 0.0)) || (total - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "split ratios {ratios:?} must be >= 0 and sum to 1"
        )));
    }
    let mut sizes: Vec<usize> = ratios
        .iter()
        .map(|r| (r * n as f64 + 1e-9).floor() as usize)
        .collect();
    let rest: usize = sizes[1..].iter().sum();
    sizes[0] = n.saturating_sub(rest);
    if let Some(i) = sizes.iter().position(|&s| s == 0) {
        return Err(Error::Config(format!(
            "split part {i} is empty for n={n} and ratios {ratios:?}"
        )));
    }
    Ok(sizes)
}

/// Shuffled `(train, val, test)` split of a labeled target set; train loses its labels.
pub fn split_target(
    set: &LabeledSet,
    ratios: (f64, f64, f64),
    seed: u64,
) -> Result<(UnlabeledSet, LabeledSet, LabeledSet)> {
    let sizes = split_sizes(set.len(), &[ratios.0, ratios.1, ratios.2])?;
    let idx = shuffled_indices(set.len(), seed);
    let (train, rest) = idx.split_at(sizes[0]);
    let (val, test) = rest.split_at(sizes[1]);
    Ok((
        set.subset(train, Split::Train).into_unlabeled(),
        set.subset(val, Split::Val),
        set.subset(test, Split::Test),
    ))
}

/// Keeps a shuffled `keep` fraction of the source set for training.
pub fn split_source(set: &LabeledSet, keep: f64, seed: u64) -> Result<LabeledSet> {
    if !(keep > 0.0 && keep <= 1.0) {
        return Err(Error::Config(format!(
            "source keep fraction {keep} not in (0, 1]"
        )));
    }
    let n_keep = ((keep * set.len() as f64 + 1e-9).floor() as usize).max(1);
    let idx = shuffled_indices(set.len(), seed);
    Ok(set.subset(&idx[..n_keep], Split::Train))
}

/// A CSV file read with or without a trailing label column.
#[derive(Debug, Clone, PartialEq)]
pub enum CsvData {
    Labeled(LabeledSet),
    Unlabeled(UnlabeledSet),
}

impl CsvData {
    pub fn features(&self) -> &Tensor {
        match self {
            CsvData::Labeled(s) => s.features(),
            CsvData::Unlabeled(s) => s.features(),
        }
    }
}

fn parse_label(text: &str) -> Option<usize> {
    if let Ok(v) = text.parse::<usize>() {
        return Some(v);
    }
    let v: f64 = text.parse().ok()?;
    (v >= 0.0 && v.fract() == 0.0 && v < u32::MAX as f64).then_some(v as usize)
}

/// Reads comma-separated decimals; with `has_labels` the last column is an integer class.
pub fn load_csv(path: &Path, has_labels: bool) -> Result<CsvData> {
    let csv_err = |detail: String| Error::Csv {
        path: path.to_path_buf(),
        detail,
    };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_err(e.to_string()))?;
    let mut width = None;
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| csv_err(e.to_string()))?;
        let line = record.position().map_or(0, |p| p.line());
        if record.iter().all(str::is_empty) {
            continue;
        }
        let w = *width.get_or_insert(record.len());
        if record.len() != w {
            return Err(csv_err(format!(
                "line {line}: expected {w} fields, found {}",
                record.len()
            )));
        }
        let n_feat = if has_labels { w - 1 } else { w };
        if n_feat == 0 {
            return Err(csv_err(format!("line {line}: no feature columns")));
        }
        for (j, field) in record.iter().take(n_feat).enumerate() {
            let v: f64 = field.parse().map_err(|_| {
                csv_err(format!(
                    "line {line}, column {}: {field:?} is not a number",
                    j + 1
                ))
            })?;
            if !v.is_finite() {
                return Err(csv_err(format!(
                    "line {line}, column {}: non-finite value",
                    j + 1
                )));
            }
            data.push(v);
        }
        if has_labels {
            let field = &record[w - 1];
            let label = parse_label(field).ok_or_else(|| {
                csv_err(format!("line {line}: label {field:?} is not a class index"))
            })?;
            labels.push(label);
        }
    }
    let Some(w) = width else {
        return Err(csv_err("no rows".to_string()));
    };
    let cols = if has_labels { w - 1 } else { w };
    let rows = data.len() / cols;
    let features = Tensor::new(vec![rows, cols], data)?;
    if has_labels {
        let classes = labels.iter().max().map_or(0, |m| m + 1).max(2);
        Ok(CsvData::Labeled(LabeledSet::new(
            features,
            labels,
            classes,
            Domain::Source,
            Split::Full,
        )?))
    } else {
        Ok(CsvData::Unlabeled(UnlabeledSet::new(
            features,
            Domain::Target,
            Split::Full,
        )?))
    }
}

/// Writes features (and labels, if any) as CSV using round-trip exact decimal formatting.
pub fn save_csv(path: &Path, features: &Tensor, labels: Option<&[usize]>) -> Result<()> {
    let mut out = String::new();
    for i in 0..features.rows() {
        let row: Vec<String> = features.row(i).iter().map(|v| format!("{v:e}")).collect();
        out.push_str(&row.join(","));
        if let Some(l) = labels {
            out.push(',');
            out.push_str(&l[i].to_string());
        }
        out.push('\n');
    }
    write_atomic(path, out.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_moons_is_deterministic_and_balanced() {
        let (s1, t1) = gen_two_moons_shift(200, 30.0, 0.1, 4).unwrap();
        let (s2, t2) = gen_two_moons_shift(200, 30.0, 0.1, 4).unwrap();
        assert_eq!(s1, s2);
        assert_eq!(t1, t2);
        assert_eq!(s1.labels().iter().filter(|&&l| l == 1).count(), 100);
        assert_eq!(s1.domain, Domain::Source);
        assert_eq!(t1.domain, Domain::Target);
        assert!(gen_two_moons_shift(3, 0.0, 0.1, 0).is_err());
    }

    #[test]
    fn zero_rotation_shares_the_distribution() {
        // Same generator, no rotation: class-conditional means agree closely.
        let (s, t) = gen_two_moons_shift(4000, 0.0, 0.1, 1).unwrap();
        let mean = |set: &LabeledSet, class: usize, dim: usize| {
            let rows: Vec<f64> = (0..set.len())
                .filter(|&i| set.labels()[i] == class)
                .map(|i| set.features().row(i)[dim])
                .collect();
            rows.iter().sum::<f64>() / rows.len() as f64
        };
        for c in 0..2 {
            for d in 0..2 {
                assert!((mean(&s, c, d) - mean(&t, c, d)).abs() < 0.05);
            }
        }
    }

    #[test]
    fn target_split_sizes() {
        let (_, t) = gen_two_moons_shift(10, 0.0, 0.1, 0).unwrap();
        let (tr, va, te) = split_target(&t, (0.6, 0.2, 0.2), 3).unwrap();
        assert_eq!((tr.len(), va.len(), te.len()), (6, 2, 2));
        let (_, t) = gen_two_moons_shift(11, 0.0, 0.1, 0).unwrap();
        let (tr, va, te) = split_target(&t, (0.6, 0.2, 0.2), 3).unwrap();
        assert_eq!((tr.len(), va.len(), te.len()), (7, 2, 2));
        assert!(split_target(&t, (0.5, 0.2, 0.2), 3).is_err());
        let (_, small) = gen_two_moons_shift(4, 0.0, 0.1, 0).unwrap();
        assert!(split_target(&small, (0.6, 0.2, 0.2), 0).is_err());
    }

    #[test]
    fn split_is_a_partition() {
        let n = 57;
        let sizes = split_sizes(n, &[0.6, 0.2, 0.2]).unwrap();
        assert_eq!(sizes.iter().sum::<usize>(), n);
        let idx = shuffled_indices(n, 8);
        let mut sorted = idx.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..n).collect::<Vec<_>>());
    }

    #[test]
    fn csv_parse_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.csv");
        std::fs::write(&p, "0.0,1.0,1\n1.0,0.0,0\n").unwrap();
        let CsvData::Labeled(set) = load_csv(&p, true).unwrap() else {
            panic!("expected labels")
        };
        assert_eq!(set.features().shape(), &[2, 2]);
        assert_eq!(set.labels(), &[1, 0]);

        std::fs::write(&p, "0.0,1.0,1\n1.0,0\n").unwrap();
        let err = load_csv(&p, true).unwrap_err().to_string();
        assert!(err.contains("line 2"), "{err}");

        std::fs::write(&p, "0.0,1.0,0.5\n").unwrap();
        assert!(load_csv(&p, true).is_err());
        std::fs::write(&p, "0.0,abc\n").unwrap();
        assert!(load_csv(&p, false).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("b.csv");
        let (s, _) = gen_two_moons_shift(50, 10.0, 0.2, 2).unwrap();
        save_csv(&p, s.features(), Some(s.labels())).unwrap();
        let CsvData::Labeled(back) = load_csv(&p, true).unwrap() else {
            panic!()
        };
        assert!(back.features().max_abs_diff(s.features()) <= 1e-12);
        assert_eq!(back.labels(), s.labels());
    }
}
