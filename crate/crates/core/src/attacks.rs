//! Inner maximization over the l-infinity ball.
//!
//! [`pgd`] is the workhorse: sign-gradient ascent on an arbitrary scalar
//! objective with projection after every step. The remaining attacks are
//! objectives plugged into it, plus two exact oracles used to check it.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId};
use crate::divergence::{omega, DivergenceKind};
use crate::error::{Error, Result};
use crate::models::{ModelParams, CLASSIFIER, DISCRIMINATOR, FEATURES};
use crate::tensor::Tensor;

/// Floor applied to probabilities before taking logs in the KL objective.
pub const KL_PROB_FLOOR: f64 = 1e-12;

/// Largest lattice [`grid_bruteforce`] will enumerate.
pub const MAX_GRID_POINTS: f64 = 1e6;

/// Threat model and PGD schedule. The norm is always l-infinity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    pub alpha: f64,
    pub steps: usize,
    pub step_size: f64,
    #[serde(default)]
    pub random_start: bool,
    /// Optional `[lo, hi]` box every coordinate must stay in.
    #[serde(default)]
    pub clamp: Option<(f64, f64)>,
    #[serde(default)]
    pub seed: u64,
}

impl AttackConfig {
    /// Training schedule: 5 steps with step size `alpha / 2`.
    pub fn train(alpha: f64) -> Self {
        AttackConfig {
            alpha,
            steps: 5,
            step_size: if alpha > 0.0 { alpha / 2.0 } else { 1.0 },
            random_start: false,
            clamp: None,
            seed: 0,
        }
    }

    /// Evaluation schedule: 20 steps with step size `alpha / 8`.
    pub fn eval(alpha: f64) -> Self {
        AttackConfig {
            alpha,
            steps: 20,
            step_size: if alpha > 0.0 { alpha / 8.0 } else { 1.0 },
            random_start: false,
            clamp: None,
            seed: 0,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0) || !self.alpha.is_finite() {
            return Err(Error::Config(format!(
                "alpha must be >= 0, got {}",
                self.alpha
            )));
        }
        if self.steps > 0 && !(self.step_size > 0.0) {
            return Err(Error::Config(format!(
                "step size must be positive, got {}",
                self.step_size
            )));
        }
        if let Some((lo, hi)) = self.clamp {
            if !(hi >= lo) {
                return Err(Error::Config(format!("empty clamp box [{lo}, {hi}]")));
            }
        }
        Ok(())
    }

    fn is_trivial(&self) -> bool {
        self.alpha == 0.0 || self.steps == 0
    }
}

/// Coordinate-wise projection onto the box, then onto the ball around `x`.
///
/// When ball and box intersect this lands in the intersection; when `x` is
/// further than `alpha` outside the box it gives the ball point nearest the box.
fn project(x_adv: &mut [f64], x: &[f64], alpha: f64, clamp: Option<(f64, f64)>) {
    for (v, &c) in x_adv.iter_mut().zip(x) {
        if let Some((blo, bhi)) = clamp {
            *v = v.clamp(blo, bhi);
        }
        *v = v.clamp(c - alpha, c + alpha);
    }
}

/// Projected sign-gradient ascent on `objective` inside the l-infinity ball of radius `alpha`.
///
/// `objective` receives a fresh graph and the input node and must return a scalar node.
pub fn pgd<F>(mut objective: F, x: &Tensor, cfg: &AttackConfig) -> Result<Tensor>
where
    F: FnMut(&mut Graph, NodeId) -> Result<NodeId>,
{
    cfg.validate()?;
    if cfg.is_trivial() {
        return Ok(x.clone());
    }
    let mut adv = x.clone();
    if cfg.random_start {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        for v in adv.data_mut() {
            *v += rng.random_range(-cfg.alpha..=cfg.alpha);
        }
        project(adv.data_mut(), x.data(), cfg.alpha, cfg.clamp);
    }
    for _ in 0..cfg.steps {
        let mut graph = Graph::new();
        let xi = graph.input(adv.clone());
        let loss = objective(&mut graph, xi)?;
        let grad = graph.backward(loss, &[xi])?.remove(0);
        if !grad.all_finite() {
            return Err(Error::NonFinite { op: "pgd gradient" });
        }
        for (v, g) in adv.data_mut().iter_mut().zip(grad.data()) {
            if *g > 0.0 {
                *v += cfg.step_size;
            } else if *g < 0.0 {
                *v -= cfg.step_size;
            }
        }
        project(adv.data_mut(), x.data(), cfg.alpha, cfg.clamp);
    }
    Ok(adv)
}

/// Logits of `f(g(x))` with the model's weights held fixed.
pub fn frozen_logits(params: &ModelParams, graph: &mut Graph, x: NodeId) -> Result<NodeId> {
    let bound = params.bind_frozen(graph, &[FEATURES, CLASSIFIER])?;
    let h = bound.component(FEATURES)?.forward(graph, x)?;
    bound.component(CLASSIFIER)?.forward(graph, h)
}

/// PGD on the mean cross-entropy of `f(g(x))` against `labels`.
pub fn pgd_cross_entropy(
    params: &ModelParams,
    x: &Tensor,
    labels: &[usize],
    cfg: &AttackConfig,
) -> Result<Tensor> {
    pgd(
        |graph, xi| {
            let z = frozen_logits(params, graph, xi)?;
            graph.softmax_cross_entropy(z, labels)
        },
        x,
        cfg,
    )
}

/// Mean over rows of `KL(softmax(logits) || clean_probs)`, clean side constant.
pub fn kl_to_clean(graph: &mut Graph, logits: NodeId, clean_probs: &Tensor) -> Result<NodeId> {
    let n = graph.value(logits).rows() as f64;
    let p = graph.softmax(logits)?;
    let p_floor = graph.clamp_min(p, KL_PROB_FLOOR)?;
    let log_p = graph.log(p_floor)?;
    let log_q = graph.constant(clean_probs.map(|q| q.max(KL_PROB_FLOOR).ln()));
    let diff = graph.sub(log_p, log_q)?;
    let terms = graph.mul(p, diff)?;
    let total = graph.sum(terms)?;
    graph.scale(total, 1.0 / n)
}

/// Perturbation maximizing the KL divergence between perturbed and clean predictions.
pub fn kl_transform(params: &ModelParams, x: &Tensor, cfg: &AttackConfig) -> Result<Tensor> {
    if cfg.is_trivial() {
        cfg.validate()?;
        return Ok(x.clone());
    }
    let clean = crate::autodiff::softmax_rows(&params.logits(x)?);
    pgd(
        |graph, xi| {
            let z = frozen_logits(params, graph, xi)?;
            kl_to_clean(graph, z, &clean)
        },
        x,
        cfg,
    )
}

/// Target perturbation maximizing `lambda1 * Omega(source features, g(x_t)) + lambda2 * CE(f(g(x_t)), pseudo labels)`.
///
/// Source features are constants during the attack. A zero weight removes its
/// term entirely.
#[allow(clippy::too_many_arguments)]
pub fn dart_target_attack(
    params: &ModelParams,
    x_t: &Tensor,
    pseudo_labels: &[usize],
    divergence: &DivergenceKind,
    source_features: &Tensor,
    lambda1: f64,
    lambda2: f64,
    cfg: &AttackConfig,
) -> Result<Tensor> {
    if pseudo_labels.len() != x_t.rows() {
        return Err(Error::MissingPseudoLabels(format!(
            "{} labels for {} target rows",
            pseudo_labels.len(),
            x_t.rows()
        )));
    }
    if !(lambda1 >= 0.0) || !(lambda2 >= 0.0) {
        return Err(Error::Config(format!(
            "attack weights must be >= 0, got ({lambda1}, {lambda2})"
        )));
    }
    if lambda1 == 0.0 && lambda2 == 0.0 {
        cfg.validate()?;
        return Ok(x_t.clone());
    }
    pgd(
        |graph, xi| {
            let names: &[&str] = if lambda1 > 0.0 && divergence.needs_discriminator() {
                &[FEATURES, CLASSIFIER, DISCRIMINATOR]
            } else {
                &[FEATURES, CLASSIFIER]
            };
            let bound = params.bind_frozen(graph, names)?;
            let feats = bound.component(FEATURES)?.forward(graph, xi)?;
            let mut terms = Vec::new();
            if lambda1 > 0.0 {
                let fs = graph.constant(source_features.clone());
                let om = omega(graph, divergence, fs, feats, bound.get(DISCRIMINATOR))?;
                terms.push(graph.scale(om, lambda1)?);
            }
            if lambda2 > 0.0 {
                let z = bound.component(CLASSIFIER)?.forward(graph, feats)?;
                let ce = graph.softmax_cross_entropy(z, pseudo_labels)?;
                terms.push(graph.scale(ce, lambda2)?);
            }
            let mut total = terms[0];
            for &t in &terms[1..] {
                total = graph.add(total, t)?;
            }
            Ok(total)
        },
        x_t,
        cfg,
    )
}

/// Exact minimum of `y (w.x + b)` over the l-infinity ball: `y (w.x + b) - alpha ||w||_1`.
pub fn linear_worst_margin(w: &[f64], b: f64, y: f64, x: &[f64], alpha: f64) -> f64 {
    let z: f64 = w.iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + b;
    let l1: f64 = w.iter().map(|v| v.abs()).sum();
    y * z - alpha * l1
}

/// Every lattice point `x_i + alpha (2k / (P - 1) - 1)`, preceded by `x` itself.
pub fn grid_points(x: &[f64], alpha: f64, points_per_dim: usize) -> Result<Tensor> {
    let dim = x.len();
    if points_per_dim == 0 {
        return Err(Error::Config("points_per_dim must be >= 1".into()));
    }
    let total = (points_per_dim as f64).powi(dim as i32);
    if total > MAX_GRID_POINTS {
        return Err(Error::TooLarge {
            size: total,
            limit: MAX_GRID_POINTS,
        });
    }
    let offsets: Vec<f64> = if points_per_dim == 1 {
        vec![0.0]
    } else {
        (0..points_per_dim)
            .map(|k| alpha * (2.0 * k as f64 / (points_per_dim - 1) as f64 - 1.0))
            .collect()
    };
    let count = total as usize;
    let mut data = Vec::with_capacity((count + 1) * dim);
    data.extend_from_slice(x);
    let mut idx = vec![0usize; dim];
    for _ in 0..count {
        for (d, &k) in idx.iter().enumerate() {
            data.push(x[d] + offsets[k]);
        }
        for slot in idx.iter_mut().rev() {
            *slot += 1;
            if *slot < points_per_dim {
                break;
            }
            *slot = 0;
        }
    }
    Tensor::new(vec![count + 1, dim], data)
}

/// Exhaustive maximization of a batched objective over the lattice around `x`.
///
/// `objective` maps an `[m x d]` batch of candidates to `m` values. Ties keep
/// the earliest candidate, so `x` wins unless something is strictly better.
pub fn grid_bruteforce<F>(
    mut objective: F,
    x: &[f64],
    alpha: f64,
    points_per_dim: usize,
) -> Result<(Vec<f64>, f64)>
where
    F: FnMut(&Tensor) -> Result<Vec<f64>>,
{
    let grid = grid_points(x, alpha, points_per_dim)?;
    let values = objective(&grid)?;
    if values.len() != grid.rows() {
        return Err(Error::shape(
            "grid_bruteforce",
            format!("{} values for {} candidates", values.len(), grid.rows()),
        ));
    }
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    Ok((grid.row(best).to_vec(), values[best]))
}
