//! Exact enumeration of the adversarial domain-adaptation bound on tiny
//! finite instances.
//!
//! Every quantity is a count divided by a sample size, kept as an exact
//! fraction. Hypotheses are evaluated once per distinct point and stored as
//! bitsets, so the symmetric-difference class is the set of pairwise XORs
//! and every empirical frequency is a popcount.

use std::cmp::Ordering;
use std::collections::BTreeSet;
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest number of perturbation assignments enumerated.
pub const MAX_ASSIGNMENTS: f64 = 1e6;

pub type Point = Vec<f64>;

/// A non-negative fraction compared exactly.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Frac {
    pub num: u64,
    pub den: u64,
}

impl std::ops::Add for Frac {
    type Output = Frac;

    fn add(self, other: Frac) -> Frac {
        if self.den == other.den {
            Frac::new(self.num + other.num, self.den)
        } else {
            Frac::new(
                self.num * other.den + other.num * self.den,
                self.den * other.den,
            )
        }
    }
}

impl Frac {
    pub fn new(num: u64, den: u64) -> Self {
        assert!(den > 0, "zero denominator");
        Frac { num, den }
    }

    pub fn zero() -> Self {
        Frac { num: 0, den: 1 }
    }

    pub fn value(self) -> f64 {
        self.num as f64 / self.den as f64
    }

    pub fn scale(self, k: u64) -> Frac {
        Frac::new(self.num * k, self.den)
    }
}

impl PartialEq for Frac {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Frac {}

impl PartialOrd for Frac {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Frac {
    fn cmp(&self, other: &Self) -> Ordering {
        (self.num as u128 * other.den as u128).cmp(&(other.num as u128 * self.den as u128))
    }
}

impl fmt::Display for Frac {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.num, self.den)
    }
}

/// Axis-aligned stump: `h(x) = 1` iff `(x[dim] < threshold) == below`.
///
/// In one dimension this is a threshold classifier with either orientation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stump {
    pub dim: usize,
    pub threshold: f64,
    pub below: bool,
}

impl Stump {
    pub fn eval(&self, x: &[f64]) -> bool {
        (x[self.dim] < self.threshold) == self.below
    }
}

impl fmt::Display for Stump {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let op = if self.below { "<" } else { ">=" };
        write!(f, "1[x{} {op} {}]", self.dim, self.threshold)
    }
}

/// An explicit, finite hypothesis class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FiniteHypothesisClass {
    pub hypotheses: Vec<Stump>,
}

impl FiniteHypothesisClass {
    /// One-dimensional thresholds at `cuts`, both orientations.
    pub fn thresholds(cuts: &[f64]) -> Self {
        Self::stumps(&[cuts.to_vec()])
    }

    /// Stumps on every dimension at the given cuts, both orientations.
    pub fn stumps(cuts_per_dim: &[Vec<f64>]) -> Self {
        let mut hypotheses = Vec::new();
        for (dim, cuts) in cuts_per_dim.iter().enumerate() {
            for &threshold in cuts {
                for below in [true, false] {
                    hypotheses.push(Stump {
                        dim,
                        threshold,
                        below,
                    });
                }
            }
        }
        FiniteHypothesisClass { hypotheses }
    }

    /// Stumps cutting between every pair of consecutive distinct coordinates, plus both ends.
    pub fn stumps_separating(points: &[&[f64]]) -> Self {
        let dims = points.first().map_or(0, |p| p.len());
        let cuts: Vec<Vec<f64>> = (0..dims)
            .map(|d| {
                let mut vals: Vec<f64> = points.iter().map(|p| p[d]).collect();
                vals.sort_by(f64::total_cmp);
                vals.dedup();
                let mut cuts = Vec::with_capacity(vals.len() + 1);
                if let (Some(first), Some(last)) = (vals.first(), vals.last()) {
                    cuts.push(first - 1.0);
                    cuts.extend(vals.windows(2).map(|w| 0.5 * (w[0] + w[1])));
                    cuts.push(last + 1.0);
                }
                cuts
            })
            .collect();
        Self::stumps(&cuts)
    }

    pub fn len(&self) -> usize {
        self.hypotheses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hypotheses.is_empty()
    }

    fn validate(&self, dims: usize) -> Result<()> {
        if self.hypotheses.is_empty() {
            return Err(Error::Config("hypothesis class is empty".into()));
        }
        if let Some(h) = self.hypotheses.iter().find(|h| h.dim >= dims) {
            return Err(Error::Config(format!(
                "{h} uses a dimension points do not have"
            )));
        }
        Ok(())
    }
}

/// A point with a binary label in `{0, 1}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledPoint {
    pub x: Point,
    pub y: u8,
}

impl LabeledPoint {
    /// Accepts `{0, 1}` or `{-1, +1}` labels.
    pub fn new(x: Point, label: i64) -> Result<Self> {
        let y = match label {
            1 => 1,
            0 | -1 => 0,
            other => return Err(Error::Config(format!("binary label expected, got {other}"))),
        };
        Ok(LabeledPoint { x, y })
    }
}

/// For every target point, the finite list of points it may be replaced with.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscretePerturbationSet {
    pub sets: Vec<Vec<Point>>,
}

impl DiscretePerturbationSet {
    /// Every point may only stay where it is.
    pub fn singletons(points: &[&[f64]]) -> Self {
        DiscretePerturbationSet {
            sets: points.iter().map(|p| vec![p.to_vec()]).collect(),
        }
    }

    pub fn validate(&self, targets: &[&[f64]]) -> Result<()> {
        if self.sets.len() != targets.len() {
            return Err(Error::Config(format!(
                "{} perturbation sets for {} target points",
                self.sets.len(),
                targets.len()
            )));
        }
        for (i, (set, x)) in self.sets.iter().zip(targets).enumerate() {
            if !set.iter().any(|p| p.as_slice() == *x) {
                return Err(Error::Config(format!(
                    "perturbation set {i} does not contain its own point"
                )));
            }
            if set.iter().any(|p| p.len() != x.len()) {
                return Err(Error::Config(format!(
                    "perturbation set {i} has a wrong dimension"
                )));
            }
        }
        Ok(())
    }

    fn assignments(&self) -> Result<f64> {
        let total: f64 = self.sets.iter().map(|s| s.len() as f64).product();
        if total > MAX_ASSIGNMENTS {
            return Err(Error::TooLarge {
                size: total,
                limit: MAX_ASSIGNMENTS,
            });
        }
        Ok(total)
    }
}

/// Fixed-width bitset over indexed points.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
struct Bits(Vec<u64>);

impl Bits {
    fn zeros(n: usize) -> Self {
        Bits(vec![0; n.div_ceil(64).max(1)])
    }

    fn set(&mut self, i: usize) {
        self.0[i / 64] |= 1 << (i % 64);
    }

    fn xor(&self, other: &Bits) -> Bits {
        Bits(self.0.iter().zip(&other.0).map(|(a, b)| a ^ b).collect())
    }

    fn and_count(&self, other: &Bits) -> u64 {
        self.0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| (a & b).count_ones() as u64)
            .sum()
    }

    fn and_not_count(&self, other: &Bits) -> u64 {
        // |other \ self|
        self.0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| (!a & b).count_ones() as u64)
            .sum()
    }
}

/// Every hypothesis evaluated on every indexed point.
struct Table {
    /// `h(point) = 1` masks, one per base hypothesis.
    ones: Vec<Bits>,
    /// Masks of points where `h` disagrees with the point's label.
    errors: Vec<Bits>,
    len: usize,
}

impl Table {
    fn build(class: &FiniteHypothesisClass, points: &[&[f64]], labels: Option<&[u8]>) -> Table {
        let len = points.len();
        let mut ones = Vec::with_capacity(class.len());
        let mut errors = Vec::with_capacity(class.len());
        for h in &class.hypotheses {
            let mut one = Bits::zeros(len);
            let mut err = Bits::zeros(len);
            for (i, p) in points.iter().enumerate() {
                let v = h.eval(p);
                if v {
                    one.set(i);
                }
                if let Some(l) = labels {
                    if v != (l[i] == 1) {
                        err.set(i);
                    }
                }
            }
            ones.push(one);
            errors.push(err);
        }
        Table { ones, errors, len }
    }

    fn mask(&self, indices: impl IntoIterator<Item = usize>) -> Bits {
        let mut b = Bits::zeros(self.len);
        for i in indices {
            b.set(i);
        }
        b
    }

    /// Distinct members of the symmetric-difference class, `h1 XOR h2`.
    fn symmetric_difference(&self) -> Vec<Bits> {
        let mut set = BTreeSet::new();
        for (i, a) in self.ones.iter().enumerate() {
            for b in &self.ones[i..] {
                set.insert(a.xor(b));
            }
        }
        set.into_iter().collect()
    }
}

/// `min_h [#{source: h = 0} + #{target: h = 1}]` over the given patterns.
fn min_bracket(patterns: &[Bits], source: &Bits, target: &Bits) -> u64 {
    patterns
        .iter()
        .map(|h| h.and_not_count(source) + h.and_count(target))
        .min()
        .expect("class is non-empty")
}

fn divergence_from_bracket(n: u64, bracket: u64) -> Frac {
    // 2 (1 - bracket / n)
    Frac::new(2 * (n - bracket), n)
}

fn check_dims(points: &[&[f64]]) -> Result<usize> {
    let dims = points.first().map_or(0, |p| p.len());
    if dims == 0 || points.iter().any(|p| p.len() != dims) {
        return Err(Error::Config(
            "points must share a positive dimension".into(),
        ));
    }
    Ok(dims)
}

/// Empirical symmetric-difference divergence `2 (1 - min_h [...])` over all XOR pairs.
pub fn empirical_hdh(
    source: &[&[f64]],
    target: &[&[f64]],
    class: &FiniteHypothesisClass,
) -> Result<Frac> {
    if source.len() != target.len() || source.is_empty() {
        return Err(Error::UnequalSizes {
            source_len: source.len(),
            target_len: target.len(),
        });
    }
    let points: Vec<&[f64]> = source.iter().chain(target).copied().collect();
    class.validate(check_dims(&points)?)?;
    let n = source.len();
    let table = Table::build(class, &points, None);
    let patterns = table.symmetric_difference();
    let s = table.mask(0..n);
    let t = table.mask(n..2 * n);
    Ok(divergence_from_bracket(
        n as u64,
        min_bracket(&patterns, &s, &t),
    ))
}

/// Empirical 0/1 loss of one hypothesis.
pub fn zero_one_loss(h: &Stump, data: &[LabeledPoint]) -> Frac {
    let wrong = data.iter().filter(|p| h.eval(&p.x) != (p.y == 1)).count();
    Frac::new(wrong as u64, data.len().max(1) as u64)
}

/// `min_h [L(h; Z_S) + L(h; Z_T)]` over the base class.
pub fn ideal_joint_loss(
    source: &[LabeledPoint],
    target: &[LabeledPoint],
    class: &FiniteHypothesisClass,
) -> Result<Frac> {
    if source.is_empty() || target.is_empty() {
        return Err(Error::Config(
            "ideal joint loss needs non-empty samples".into(),
        ));
    }
    let dims = source[0].x.len();
    class.validate(dims)?;
    Ok(class
        .hypotheses
        .iter()
        .map(|h| zero_one_loss(h, source) + zero_one_loss(h, target))
        .min()
        .expect("class is non-empty"))
}

/// `(1/n) sum_i max_{x in B(x_i)} 1[h(x) != y_i]`.
pub fn adversarial_loss_exact(
    h: &Stump,
    target: &[LabeledPoint],
    perturb: &DiscretePerturbationSet,
) -> Result<Frac> {
    let xs: Vec<&[f64]> = target.iter().map(|p| p.x.as_slice()).collect();
    perturb.validate(&xs)?;
    let wrong = target
        .iter()
        .zip(&perturb.sets)
        .filter(|(p, set)| set.iter().any(|x| h.eval(x) != (p.y == 1)))
        .count();
    Ok(Frac::new(wrong as u64, target.len().max(1) as u64))
}

/// Result of the worst-case enumeration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorstCase {
    /// `max over assignments of [d(X_S, X~_T) + 2 gamma(Z_S, Z~_T)]`.
    pub value: Frac,
    /// For each target point, the index into its perturbation list.
    pub assignment: Vec<usize>,
    /// `max over assignments of d(X_S, X~_T)` alone.
    pub max_divergence: Frac,
}

/// Shared index layout: source points, then every candidate of every target point.
struct Layout<'a> {
    points: Vec<&'a [f64]>,
    labels: Vec<u8>,
    /// Index of the first candidate of target point `i`.
    offsets: Vec<usize>,
    n: usize,
}

impl<'a> Layout<'a> {
    fn new(
        source: &'a [LabeledPoint],
        target: &'a [LabeledPoint],
        perturb: &'a DiscretePerturbationSet,
    ) -> Result<Self> {
        if source.len() != target.len() || source.is_empty() {
            return Err(Error::UnequalSizes {
                source_len: source.len(),
                target_len: target.len(),
            });
        }
        let xs: Vec<&[f64]> = target.iter().map(|p| p.x.as_slice()).collect();
        perturb.validate(&xs)?;
        let mut points: Vec<&[f64]> = source.iter().map(|p| p.x.as_slice()).collect();
        let mut labels: Vec<u8> = source.iter().map(|p| p.y).collect();
        let mut offsets = Vec::with_capacity(target.len());
        for (p, set) in target.iter().zip(&perturb.sets) {
            offsets.push(points.len());
            for x in set {
                points.push(x.as_slice());
                labels.push(p.y);
            }
        }
        check_dims(&points)?;
        Ok(Layout {
            points,
            labels,
            offsets,
            n: source.len(),
        })
    }
}

/// Exact `sup` over perturbation assignments of `d(X_S, X~_T) + 2 gamma(Z_S, Z~_T)`.
///
/// Ties keep the first assignment in lexicographic order.
pub fn worst_case_sup(
    source: &[LabeledPoint],
    target: &[LabeledPoint],
    perturb: &DiscretePerturbationSet,
    class: &FiniteHypothesisClass,
) -> Result<WorstCase> {
    let layout = Layout::new(source, target, perturb)?;
    class.validate(layout.points[0].len())?;
    perturb.assignments()?;
    let table = Table::build(class, &layout.points, Some(&layout.labels));
    let patterns = table.symmetric_difference();
    let n = layout.n as u64;
    let src = table.mask(0..layout.n);
    let src_err: Vec<u64> = table.errors.iter().map(|e| e.and_count(&src)).collect();

    let radices: Vec<usize> = perturb.sets.iter().map(Vec::len).collect();
    let mut choice = vec![0usize; radices.len()];
    let mut best: Option<(u64, Vec<usize>)> = None;
    let mut best_div = 0u64;
    loop {
        let tgt = table.mask(choice.iter().zip(&layout.offsets).map(|(c, o)| o + c));
        let div_num = 2 * (n - min_bracket(&patterns, &src, &tgt));
        let gamma_num = table
            .errors
            .iter()
            .zip(&src_err)
            .map(|(e, s)| s + e.and_count(&tgt))
            .min()
            .expect("class is non-empty");
        // Both terms share the denominator n.
        let total = div_num + 2 * gamma_num;
        if best.as_ref().is_none_or(|(b, _)| total > *b) {
            best = Some((total, choice.clone()));
        }
        best_div = best_div.max(div_num);

        let mut k = radices.len();
        loop {
            if k == 0 {
                let (value, assignment) = best.expect("at least one assignment");
                return Ok(WorstCase {
                    value: Frac::new(value, n),
                    assignment,
                    max_divergence: Frac::new(best_div, n),
                });
            }
            k -= 1;
            choice[k] += 1;
            if choice[k] < radices[k] {
                break;
            }
            choice[k] = 0;
        }
    }
}

/// Adversarial divergence: `2 max_{h in H xor H} |(1/n) sum_i max_{B(x_i)} 1[h = 1] - (1/n) sum 1[h(x_s) = 1]|`.
pub fn adversarial_divergence(
    source: &[LabeledPoint],
    target: &[LabeledPoint],
    perturb: &DiscretePerturbationSet,
    class: &FiniteHypothesisClass,
) -> Result<Frac> {
    let layout = Layout::new(source, target, perturb)?;
    class.validate(layout.points[0].len())?;
    let table = Table::build(class, &layout.points, None);
    let n = layout.n as u64;
    let src = table.mask(0..layout.n);
    let groups: Vec<Bits> = perturb
        .sets
        .iter()
        .zip(&layout.offsets)
        .map(|(set, &o)| table.mask(o..o + set.len()))
        .collect();
    let best = table
        .symmetric_difference()
        .iter()
        .map(|h| {
            let adv = groups.iter().filter(|g| h.and_count(g) > 0).count() as u64;
            let s = h.and_count(&src);
            adv.abs_diff(s)
        })
        .max()
        .expect("class is non-empty");
    Ok(Frac::new(2 * best, n))
}

/// One finite instance of the bound.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundInstance {
    pub source: Vec<LabeledPoint>,
    pub target: Vec<LabeledPoint>,
    pub perturbations: DiscretePerturbationSet,
    pub class: FiniteHypothesisClass,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HypothesisReport {
    pub index: usize,
    pub hypothesis: String,
    /// Adversarial target loss.
    pub lhs: f64,
    /// Source loss plus the worst-case term.
    pub rhs: f64,
    pub lhs_exact: Frac,
    pub rhs_exact: Frac,
    pub holds: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub kind: String,
    pub hypothesis: Option<usize>,
    pub lhs: Frac,
    pub rhs: Frac,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub hypotheses: Vec<HypothesisReport>,
    pub worst_case: WorstCase,
    pub adversarial_divergence: Frac,
    pub max_divergence: Frac,
    pub divergence_comparison_holds: bool,
    pub violations: Vec<Violation>,
    /// Copy of the instance, present only alongside violations.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub instance: Option<BoundInstance>,
}

impl BoundReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Checks `L_adv(h; Z_T) <= L(h; Z_S) + sup[d + 2 gamma]` for every `h` in the class,
/// and `d_adv <= sup d`. Violations carry the instance so they can be replayed.
pub fn check_bound(instance: &BoundInstance) -> Result<BoundReport> {
    let BoundInstance {
        source,
        target,
        perturbations,
        class,
    } = instance;
    let worst = worst_case_sup(source, target, perturbations, class)?;
    let mut violations = Vec::new();
    let mut hypotheses = Vec::with_capacity(class.len());
    for (index, h) in class.hypotheses.iter().enumerate() {
        let lhs = adversarial_loss_exact(h, target, perturbations)?;
        let rhs = zero_one_loss(h, source) + worst.value;
        let holds = lhs <= rhs;
        if !holds {
            violations.push(Violation {
                kind: "adversarial_target_loss".into(),
                hypothesis: Some(index),
                lhs,
                rhs,
            });
        }
        hypotheses.push(HypothesisReport {
            index,
            hypothesis: h.to_string(),
            lhs: lhs.value(),
            rhs: rhs.value(),
            lhs_exact: lhs,
            rhs_exact: rhs,
            holds,
        });
    }
    let adv_div = adversarial_divergence(source, target, perturbations, class)?;
    let comparison = adv_div <= worst.max_divergence;
    if !comparison {
        violations.push(Violation {
            kind: "adversarial_divergence".into(),
            hypothesis: None,
            lhs: adv_div,
            rhs: worst.max_divergence,
        });
    }
    let instance = (!violations.is_empty()).then(|| instance.clone());
    Ok(BoundReport {
        hypotheses,
        max_divergence: worst.max_divergence,
        worst_case: worst,
        adversarial_divergence: adv_div,
        divergence_comparison_holds: comparison,
        violations,
        instance,
    })
}

/// Random small instance on an integer lattice.
///
/// `n` in `1..=max_n`, each target point gets up to `max_set - 1` extra
/// candidates within distance 2, and the class is half-integer stumps over the
/// coordinate range (at most `4 * 15 = 60` hypotheses in two dimensions).
pub fn random_instance(seed: u64, dims: usize, max_n: usize, max_set: usize) -> BoundInstance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(1..=max_n);
    let (lo, hi) = (0i64, 6i64);
    let point = |rng: &mut ChaCha8Rng| -> Point {
        (0..dims)
            .map(|_| rng.random_range(lo..=hi) as f64)
            .collect()
    };
    let source: Vec<LabeledPoint> = (0..n)
        .map(|_| LabeledPoint {
            x: point(&mut rng),
            y: rng.random_range(0..=1),
        })
        .collect();
    let target: Vec<LabeledPoint> = (0..n)
        .map(|_| LabeledPoint {
            x: point(&mut rng),
            y: rng.random_range(0..=1),
        })
        .collect();
    let sets = target
        .iter()
        .map(|p| {
            let extra = rng.random_range(0..max_set);
            let mut set = vec![p.x.clone()];
            for _ in 0..extra {
                let q: Point =
                    p.x.iter()
                        .map(|&v| v + rng.random_range(-2i64..=2) as f64)
                        .collect();
                set.push(q);
            }
            set
        })
        .collect();
    // Cuts at every half integer from lo - 2.5 to hi + 2.5 cover all candidates.
    let cuts: Vec<f64> = ((lo - 3)..=(hi + 2)).map(|v| v as f64 + 0.5).collect();
    let per_dim = if dims == 1 {
        cuts.clone()
    } else {
        cuts[..15.min(cuts.len())].to_vec()
    };
    BoundInstance {
        source,
        target,
        perturbations: DiscretePerturbationSet { sets },
        class: FiniteHypothesisClass::stumps(&vec![per_dim; dims]),
    }
}

/// Labeled points in the instance file format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleFile {
    pub points: Vec<Point>,
    /// `{0, 1}` or `{-1, +1}`.
    pub labels: Vec<i64>,
}

impl SampleFile {
    fn into_points(self, name: &str) -> Result<Vec<LabeledPoint>> {
        if self.points.len() != self.labels.len() {
            return Err(Error::Config(format!(
                "{name}: {} points but {} labels",
                self.points.len(),
                self.labels.len()
            )));
        }
        self.points
            .into_iter()
            .zip(self.labels)
            .map(|(x, y)| LabeledPoint::new(x, y))
            .collect()
    }
}

/// How the instance file describes its hypothesis class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ClassSpec {
    /// One-dimensional thresholds at `cuts`, both orientations.
    Thresholds {
        cuts: Vec<f64>,
    },
    /// Stumps with per-dimension cuts, both orientations.
    Stumps {
        cuts: Vec<Vec<f64>>,
    },
    /// Stumps between all consecutive coordinates of every point in the instance.
    Separating,
    Explicit {
        hypotheses: Vec<Stump>,
    },
}

/// On-disk instance read by `theory-check`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceFile {
    pub source: SampleFile,
    pub target: SampleFile,
    /// One candidate list per target point; omitted means no perturbation.
    #[serde(default)]
    pub perturbations: Option<Vec<Vec<Point>>>,
    pub class: ClassSpec,
}

impl InstanceFile {
    pub fn into_instance(self) -> Result<BoundInstance> {
        let source = self.source.into_points("source")?;
        let target = self.target.into_points("target")?;
        let perturbations = match self.perturbations {
            Some(sets) => DiscretePerturbationSet { sets },
            None => DiscretePerturbationSet {
                sets: target.iter().map(|p| vec![p.x.clone()]).collect(),
            },
        };
        let class = match self.class {
            ClassSpec::Thresholds { cuts } => FiniteHypothesisClass::thresholds(&cuts),
            ClassSpec::Stumps { cuts } => FiniteHypothesisClass::stumps(&cuts),
            ClassSpec::Explicit { hypotheses } => FiniteHypothesisClass { hypotheses },
            ClassSpec::Separating => {
                let all: Vec<&[f64]> = source
                    .iter()
                    .chain(&target)
                    .map(|p| p.x.as_slice())
                    .chain(perturbations.sets.iter().flatten().map(Vec::as_slice))
                    .collect();
                FiniteHypothesisClass::stumps_separating(&all)
            }
        };
        Ok(BoundInstance {
            source,
            target,
            perturbations,
            class,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pts(v: &[f64]) -> Vec<Vec<f64>> {
        v.iter().map(|&x| vec![x]).collect()
    }

    fn refs(v: &[Vec<f64>]) -> Vec<&[f64]> {
        v.iter().map(Vec::as_slice).collect()
    }

    fn class_1d() -> FiniteHypothesisClass {
        FiniteHypothesisClass::thresholds(&[-0.5, 0.5, 1.5, 2.5, 3.5])
    }

    fn labeled(v: &[(f64, i64)]) -> Vec<LabeledPoint> {
        v.iter()
            .map(|&(x, y)| LabeledPoint::new(vec![x], y).unwrap())
            .collect()
    }

    #[test]
    fn hdh_hand_values() {
        let s = pts(&[0.0, 1.0]);
        assert_eq!(
            empirical_hdh(&refs(&s), &refs(&s), &class_1d()).unwrap(),
            Frac::new(0, 1)
        );
        let t = pts(&[2.0, 3.0]);
        assert_eq!(
            empirical_hdh(&refs(&s), &refs(&t), &class_1d()).unwrap(),
            Frac::new(2, 1)
        );
        let t = pts(&[1.0, 2.0]);
        assert_eq!(
            empirical_hdh(&refs(&s), &refs(&t), &class_1d()).unwrap(),
            Frac::new(1, 1)
        );
        assert!(matches!(
            empirical_hdh(&refs(&s), &refs(&pts(&[1.0])), &class_1d()),
            Err(Error::UnequalSizes { .. })
        ));
    }

    #[test]
    fn ideal_joint_loss_values() {
        let zs = labeled(&[(0.0, 1)]);
        let zt = labeled(&[(0.0, -1)]);
        assert_eq!(
            ideal_joint_loss(&zs, &zt, &class_1d()).unwrap(),
            Frac::new(1, 1)
        );
        let zs = labeled(&[(0.0, 1), (2.0, 0)]);
        let zt = labeled(&[(1.0, 1), (3.0, 0)]);
        assert_eq!(
            ideal_joint_loss(&zs, &zt, &class_1d()).unwrap(),
            Frac::zero()
        );
        let z = labeled(&[(0.0, 1), (1.0, 0), (2.0, 1)]);
        let single = class_1d()
            .hypotheses
            .iter()
            .map(|h| zero_one_loss(h, &z))
            .min()
            .unwrap();
        assert_eq!(
            ideal_joint_loss(&z, &z, &class_1d()).unwrap(),
            single.scale(2)
        );
    }

    #[test]
    fn adversarial_loss_values() {
        let h = Stump {
            dim: 0,
            threshold: 1.5,
            below: true,
        };
        let zt = labeled(&[(0.0, 1), (3.0, 0)]);
        let xs: Vec<Vec<f64>> = zt.iter().map(|p| p.x.clone()).collect();
        let single = DiscretePerturbationSet::singletons(&refs(&xs));
        assert_eq!(
            adversarial_loss_exact(&h, &zt, &single).unwrap(),
            zero_one_loss(&h, &zt)
        );
        let straddle = DiscretePerturbationSet {
            sets: vec![vec![vec![0.0], vec![2.0]], vec![vec![3.0], vec![1.0]]],
        };
        assert_eq!(
            adversarial_loss_exact(&h, &zt, &straddle).unwrap(),
            Frac::new(2, 2)
        );
        let constant = Stump {
            dim: 0,
            threshold: 100.0,
            below: true,
        };
        let ones = labeled(&[(0.0, 1), (3.0, 1)]);
        assert_eq!(
            adversarial_loss_exact(&constant, &ones, &straddle).unwrap(),
            Frac::zero()
        );
        let missing = DiscretePerturbationSet {
            sets: vec![vec![vec![5.0]], vec![vec![3.0]]],
        };
        assert!(adversarial_loss_exact(&h, &zt, &missing).is_err());
    }

    #[test]
    fn worst_case_with_singletons_is_plain_value() {
        let zs = labeled(&[(0.0, 1), (1.0, 0)]);
        let zt = labeled(&[(1.0, 1), (2.0, 0)]);
        let xs: Vec<Vec<f64>> = zt.iter().map(|p| p.x.clone()).collect();
        let single = DiscretePerturbationSet::singletons(&refs(&xs));
        let wc = worst_case_sup(&zs, &zt, &single, &class_1d()).unwrap();
        let sx: Vec<Vec<f64>> = zs.iter().map(|p| p.x.clone()).collect();
        let d = empirical_hdh(&refs(&sx), &refs(&xs), &class_1d()).unwrap();
        let g = ideal_joint_loss(&zs, &zt, &class_1d()).unwrap();
        assert_eq!(wc.value, d + g.scale(2));
        assert_eq!(wc.assignment, vec![0, 0]);
    }

    #[test]
    fn enlarging_a_perturbation_set_never_decreases_the_sup() {
        for seed in 0..30 {
            let inst = random_instance(seed, 1, 4, 3);
            let base = worst_case_sup(&inst.source, &inst.target, &inst.perturbations, &inst.class)
                .unwrap();
            let mut bigger = inst.perturbations.clone();
            let extra = vec![inst.target[0].x[0] + 1.0];
            bigger.sets[0].push(extra);
            let more = worst_case_sup(&inst.source, &inst.target, &bigger, &inst.class).unwrap();
            assert!(more.value >= base.value, "seed {seed}");
        }
    }

    #[test]
    fn bound_holds_on_hand_instance_and_reports_json() {
        let zs = labeled(&[(0.0, 1), (1.0, 0)]);
        let inst = BoundInstance {
            perturbations: DiscretePerturbationSet::singletons(&[&[0.0], &[1.0]]),
            target: zs.clone(),
            source: zs,
            class: class_1d(),
        };
        let report = check_bound(&inst).unwrap();
        assert!(report.passed());
        assert!(report.divergence_comparison_holds);
        assert_eq!(report.adversarial_divergence, report.max_divergence);
        let json = serde_json::to_string(&report).unwrap();
        assert!(json.contains("\"violations\":[]"));
    }

    #[test]
    fn enumeration_cap() {
        let zt: Vec<LabeledPoint> = (0..7)
            .map(|i| LabeledPoint {
                x: vec![i as f64],
                y: 0,
            })
            .collect();
        let sets = zt
            .iter()
            .map(|p| (0..8).map(|k| vec![p.x[0] + k as f64 * 0.1]).collect())
            .collect();
        let perturb = DiscretePerturbationSet { sets };
        assert!(matches!(
            worst_case_sup(&zt, &zt, &perturb, &class_1d()),
            Err(Error::TooLarge { .. })
        ));
    }

    #[test]
    fn instance_file_accepts_signed_labels() {
        let text = r#"{
            "source": {"points": [[0.0], [1.0]], "labels": [1, -1]},
            "target": {"points": [[0.0], [1.0]], "labels": [1, 0]},
            "perturbations": [[[0.0], [0.4]], [[1.0]]],
            "class": {"kind": "thresholds", "cuts": [0.5]}
        }"#;
        let file: InstanceFile = serde_json::from_str(text).unwrap();
        let inst = file.into_instance().unwrap();
        assert_eq!(inst.source[1].y, 0);
        assert_eq!(inst.class.len(), 2);
        assert!(check_bound(&inst).unwrap().passed());
        let bad = r#"{"source": {"points": [[0.0]], "labels": [2]},
            "target": {"points": [[0.0]], "labels": [1]}, "class": {"kind": "separating"}}"#;
        let file: InstanceFile = serde_json::from_str(bad).unwrap();
        assert!(file.into_instance().is_err());
    }
}
