//! Empirical domain-divergence proxies on learned features.
//!
//! Every proxy is built from graph primitives so its gradient reaches both
//! the features (and through them the feature extractor or an attacked
//! input) and, for the domain classifier, the discriminator weights.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::models::{BoundComponent, ModelParams, DISCRIMINATOR};
use crate::tensor::Tensor;

/// Range `[a, b]` used to normalize central moments.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CmdRange {
    Fixed {
        a: f64,
        b: f64,
    },
    /// Smallest and largest feature value in the current pair of batches.
    Observed,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DivergenceKind {
    /// Negated loss of the domain classifier `d`.
    #[default]
    Dann,
    /// Biased (V-statistic) MMD with a Gaussian kernel of bandwidth `sigma`.
    Mmd { sigma: f64 },
    /// Squared Frobenius distance between feature covariances.
    Coral,
    /// Central moment discrepancy up to order `moments`.
    Cmd { moments: usize, range: CmdRange },
}

impl DivergenceKind {
    pub fn validate(&self) -> Result<()> {
        match *self {
            DivergenceKind::Dann | DivergenceKind::Coral => Ok(()),
            DivergenceKind::Mmd { sigma } if sigma > 0.0 && sigma.is_finite() => Ok(()),
            DivergenceKind::Mmd { sigma } => Err(Error::Config(format!(
                "mmd bandwidth must be positive, got {sigma}"
            ))),
            DivergenceKind::Cmd { moments: 0, .. } => {
                Err(Error::Config("cmd needs at least one moment".into()))
            }
            DivergenceKind::Cmd {
                range: CmdRange::Fixed { a, b },
                ..
            } if !(b > a) => Err(Error::Config(format!(
                "cmd range needs b > a, got [{a}, {b}]"
            ))),
            DivergenceKind::Cmd { .. } => Ok(()),
        }
    }

    pub fn needs_discriminator(&self) -> bool {
        matches!(self, DivergenceKind::Dann)
    }

    pub fn name(&self) -> &'static str {
        match self {
            DivergenceKind::Dann => "dann",
            DivergenceKind::Mmd { .. } => "mmd",
            DivergenceKind::Coral => "coral",
            DivergenceKind::Cmd { .. } => "cmd",
        }
    }
}

fn check_widths(graph: &Graph, op: &'static str, s: NodeId, t: NodeId) -> Result<()> {
    let (sv, tv) = (graph.value(s), graph.value(t));
    if sv.shape().len() != 2 || tv.shape().len() != 2 || sv.cols() != tv.cols() {
        return Err(Error::shape(
            op,
            format!("feature sets {:?} and {:?}", sv.shape(), tv.shape()),
        ));
    }
    if sv.rows() == 0 || tv.rows() == 0 {
        return Err(Error::shape(op, "empty feature set"));
    }
    Ok(())
}

/// Domain-classifier proxy: `-BCE(d(s), 1) - BCE(d(t), 0)`, each term a mean over its set.
pub fn dann_omega(
    graph: &mut Graph,
    features_s: NodeId,
    features_t: NodeId,
    discriminator: &BoundComponent,
) -> Result<NodeId> {
    check_widths(graph, "dann_omega", features_s, features_t)?;
    let ns = graph.value(features_s).rows();
    let nt = graph.value(features_t).rows();
    let zs = discriminator.forward(graph, features_s)?;
    let zt = discriminator.forward(graph, features_t)?;
    let ls = graph.bce_with_logits(zs, &vec![1.0; ns])?;
    let lt = graph.bce_with_logits(zt, &vec![0.0; nt])?;
    let total = graph.add(ls, lt)?;
    graph.scale(total, -1.0)
}

/// Domain-classifier loss alone (what `d` minimizes): `BCE(d(s), 1) + BCE(d(t), 0)`.
pub fn domain_classifier_loss(
    graph: &mut Graph,
    features_s: NodeId,
    features_t: NodeId,
    discriminator: &BoundComponent,
) -> Result<NodeId> {
    let omega = dann_omega(graph, features_s, features_t, discriminator)?;
    graph.scale(omega, -1.0)
}

/// `||a_i - b_j||^2` for every pair of rows, shaped `[n_a x n_b]`.
fn pairwise_sq_dist(graph: &mut Graph, a: NodeId, b: NodeId) -> Result<NodeId> {
    let (na, k) = (graph.value(a).rows(), graph.value(a).cols());
    let nb = graph.value(b).rows();
    let ones_k = graph.constant(Tensor::full(&[k, 1], 1.0));
    let ones_a = graph.constant(Tensor::full(&[1, na], 1.0));
    let ones_b = graph.constant(Tensor::full(&[1, nb], 1.0));

    let a2 = graph.square(a)?;
    let a_sq = graph.matmul(a2, ones_k)?; // [na x 1]
    let b2 = graph.square(b)?;
    let b_sq = graph.matmul(b2, ones_k)?; // [nb x 1]
    let a_term = graph.matmul(a_sq, ones_b)?; // [na x nb]
    let b_sq_t = graph.transpose(b_sq)?; // [1 x nb]
    let ones_col = graph.transpose(ones_a)?; // [na x 1]
    let b_term = graph.matmul(ones_col, b_sq_t)?;
    let bt = graph.transpose(b)?;
    let cross = graph.matmul(a, bt)?;
    let cross2 = graph.scale(cross, -2.0)?;
    let sum = graph.add(a_term, b_term)?;
    graph.add(sum, cross2)
}

fn mean_gaussian_kernel(graph: &mut Graph, a: NodeId, b: NodeId, sigma: f64) -> Result<NodeId> {
    let d = pairwise_sq_dist(graph, a, b)?;
    let scaled = graph.scale(d, -1.0 / (2.0 * sigma * sigma))?;
    let k = graph.exp(scaled)?;
    graph.mean(k)
}

/// `E_ss k + E_tt k - 2 E_st k` with `k(u, v) = exp(-||u - v||^2 / (2 sigma^2))`, diagonal included.
pub fn mmd(
    graph: &mut Graph,
    features_s: NodeId,
    features_t: NodeId,
    sigma: f64,
) -> Result<NodeId> {
    check_widths(graph, "mmd", features_s, features_t)?;
    if !(sigma > 0.0) {
        return Err(Error::Config(format!(
            "mmd bandwidth must be positive, got {sigma}"
        )));
    }
    let kss = mean_gaussian_kernel(graph, features_s, features_s, sigma)?;
    let ktt = mean_gaussian_kernel(graph, features_t, features_t, sigma)?;
    let kst = mean_gaussian_kernel(graph, features_s, features_t, sigma)?;
    let same = graph.add(kss, ktt)?;
    let cross = graph.scale(kst, -2.0)?;
    graph.add(same, cross)
}

/// Population covariance `(X - mean)^T (X - mean) / n`.
fn covariance(graph: &mut Graph, x: NodeId) -> Result<NodeId> {
    let n = graph.value(x).rows() as f64;
    let mean = graph.mean_rows(x)?;
    let centered = graph.sub(x, mean)?;
    let ct = graph.transpose(centered)?;
    let outer = graph.matmul(ct, centered)?;
    graph.scale(outer, 1.0 / n)
}

/// `||Cov(S) - Cov(T)||_F^2`.
pub fn coral(graph: &mut Graph, features_s: NodeId, features_t: NodeId) -> Result<NodeId> {
    check_widths(graph, "coral", features_s, features_t)?;
    let cs = covariance(graph, features_s)?;
    let ct = covariance(graph, features_t)?;
    let diff = graph.sub(cs, ct)?;
    let sq = graph.square(diff)?;
    graph.sum(sq)
}

fn l2_norm(graph: &mut Graph, v: NodeId) -> Result<NodeId> {
    let sq = graph.square(v)?;
    let s = graph.sum(sq)?;
    graph.sqrt(s)
}

/// Smallest and largest entries across both feature batches.
pub fn observed_range(features_s: &Tensor, features_t: &Tensor) -> (f64, f64) {
    features_s
        .data()
        .iter()
        .chain(features_t.data())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        })
}

/// Central moment discrepancy of orders `1..=moments` normalized by the range `[a, b]`.
pub fn cmd(
    graph: &mut Graph,
    features_s: NodeId,
    features_t: NodeId,
    moments: usize,
    range: CmdRange,
) -> Result<NodeId> {
    check_widths(graph, "cmd", features_s, features_t)?;
    if moments == 0 {
        return Err(Error::Config("cmd needs at least one moment".into()));
    }
    let span = match range {
        CmdRange::Fixed { a, b } => {
            if !(b > a) {
                return Err(Error::Config(format!(
                    "cmd range needs b > a, got [{a}, {b}]"
                )));
            }
            b - a
        }
        CmdRange::Observed => {
            let (lo, hi) = observed_range(graph.value(features_s), graph.value(features_t));
            // All values equal: every moment matches, any positive span gives 0.
            if hi > lo {
                hi - lo
            } else {
                1.0
            }
        }
    };

    let mean_s = graph.mean_rows(features_s)?;
    let mean_t = graph.mean_rows(features_t)?;
    let mean_diff = graph.sub(mean_s, mean_t)?;
    let norm = l2_norm(graph, mean_diff)?;
    let mut total = graph.scale(norm, 1.0 / span)?;
    if moments >= 2 {
        let cs = graph.sub(features_s, mean_s)?;
        let ct = graph.sub(features_t, mean_t)?;
        for k in 2..=moments {
            let ps = graph.powi(cs, k as i32)?;
            let pt = graph.powi(ct, k as i32)?;
            let ms = graph.mean_rows(ps)?;
            let mt = graph.mean_rows(pt)?;
            let diff = graph.sub(ms, mt)?;
            let n = l2_norm(graph, diff)?;
            let term = graph.scale(n, 1.0 / span.powi(k as i32))?;
            total = graph.add(total, term)?;
        }
    }
    Ok(total)
}

/// Dispatches to the proxy selected by `kind`. `discriminator` is required for DANN.
pub fn omega(
    graph: &mut Graph,
    kind: &DivergenceKind,
    features_s: NodeId,
    features_t: NodeId,
    discriminator: Option<&BoundComponent>,
) -> Result<NodeId> {
    match *kind {
        DivergenceKind::Dann => {
            let d = discriminator
                .ok_or_else(|| Error::Config("dann divergence needs a discriminator".into()))?;
            dann_omega(graph, features_s, features_t, d)
        }
        DivergenceKind::Mmd { sigma } => mmd(graph, features_s, features_t, sigma),
        DivergenceKind::Coral => coral(graph, features_s, features_t),
        DivergenceKind::Cmd { moments, range } => {
            cmd(graph, features_s, features_t, moments, range)
        }
    }
}

/// Evaluates a proxy on fixed feature matrices.
pub fn omega_value(
    kind: &DivergenceKind,
    features_s: &Tensor,
    features_t: &Tensor,
    params: Option<&ModelParams>,
) -> Result<f64> {
    let mut graph = Graph::new();
    let s = graph.constant(features_s.clone());
    let t = graph.constant(features_t.clone());
    let bound = match (kind.needs_discriminator(), params) {
        (true, Some(p)) => Some(p.bind_frozen(&mut graph, &[DISCRIMINATOR])?),
        (true, None) => {
            return Err(Error::Config(
                "dann divergence needs a discriminator".into(),
            ))
        }
        (false, _) => None,
    };
    let d = bound
        .as_ref()
        .map(|b| b.component(DISCRIMINATOR))
        .transpose()?;
    let out = omega(&mut graph, kind, s, t, d)?;
    Ok(graph.value(out).item())
}
