//! Training loops: natural UDA pretraining, DART and the robust baselines.

mod config;
mod pseudo;

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use config::{Ablation, Algorithm, AlgorithmConfig, OptimizerConfig, SourceChoice};
pub use pseudo::{maybe_update_pseudo_labels, PseudoLabelState};

use crate::attacks::{
    dart_target_attack, kl_transform, pgd_cross_entropy, AttackConfig, KL_PROB_FLOOR,
};
use crate::autodiff::{Graph, NodeId};
use crate::data::{LabeledSet, UnlabeledSet};
use crate::divergence::{domain_classifier_loss, omega};
use crate::error::{Error, Result};
use crate::models::{BoundComponent, ModelParams, CLASSIFIER, DISCRIMINATOR, FEATURES};
use crate::optim::Adam;
use crate::tensor::Tensor;

/// Shuffles the pool once per epoch and hands out fixed-size batches; the tail of an epoch is dropped.
#[derive(Debug, Clone)]
pub struct EpochSampler {
    order: Vec<usize>,
    batch: usize,
    pos: usize,
    rng: ChaCha8Rng,
}

impl EpochSampler {
    pub fn new(n: usize, batch: usize, seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        let batch = batch.min(n).max(1);
        EpochSampler {
            order: (0..n).collect(),
            batch,
            pos: n,
            rng,
        }
    }

    pub fn next_batch(&mut self) -> Vec<usize> {
        if self.pos + self.batch > self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
        }
        let out = self.order[self.pos..self.pos + self.batch].to_vec();
        self.pos += self.batch;
        out
    }
}

/// Per-iteration seed derived from the run seed.
pub fn derive_seed(seed: u64, iteration: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = seed ^ iteration.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mutable state of one run.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub params: ModelParams,
    pub pseudo: Option<PseudoLabelState>,
    optimizer: Adam,
    discriminator_optimizer: Adam,
}

impl TrainState {
    pub fn new(params: ModelParams, config: &AlgorithmConfig) -> Result<Self> {
        params.validate()?;
        Ok(TrainState {
            params,
            pseudo: None,
            optimizer: Adam::new(config.optimizer.main())?,
            discriminator_optimizer: Adam::new(config.optimizer.discriminator())?,
        })
    }
}

pub type Losses = BTreeMap<String, f64>;

enum TermKind {
    Ce { input: usize, labels: Vec<usize> },
    Kl { adv: usize, clean: usize },
    Omega { source: usize, target: usize },
}

struct Term {
    name: &'static str,
    weight: f64,
    kind: TermKind,
}

/// Weighted sum of loss terms over a few input batches.
#[derive(Default)]
struct Objective {
    inputs: Vec<Tensor>,
    terms: Vec<Term>,
}

impl Objective {
    fn input(&mut self, x: Tensor) -> usize {
        self.inputs.push(x);
        self.inputs.len() - 1
    }

    fn push(&mut self, name: &'static str, weight: f64, kind: TermKind) {
        if weight != 0.0 {
            self.terms.push(Term { name, weight, kind });
        }
    }

    fn omega_inputs(&self) -> Option<(usize, usize)> {
        self.terms.iter().find_map(|t| match t.kind {
            TermKind::Omega { source, target } => Some((source, target)),
            _ => None,
        })
    }
}

/// Mean over rows of `KL(softmax(z_adv) || softmax(z_clean))`, differentiable in both.
fn kl_rows(graph: &mut Graph, z_adv: NodeId, z_clean: NodeId) -> Result<NodeId> {
    let n = graph.value(z_adv).rows() as f64;
    let p = graph.softmax(z_adv)?;
    let pf = graph.clamp_min(p, KL_PROB_FLOOR)?;
    let lp = graph.log(pf)?;
    let q = graph.softmax(z_clean)?;
    let qf = graph.clamp_min(q, KL_PROB_FLOOR)?;
    let lq = graph.log(qf)?;
    let diff = graph.sub(lp, lq)?;
    let terms = graph.mul(p, diff)?;
    let total = graph.sum(terms)?;
    graph.scale(total, 1.0 / n)
}

struct Forward<'a> {
    inputs: &'a [Tensor],
    g: &'a BoundComponent,
    f: &'a BoundComponent,
    feats: Vec<Option<NodeId>>,
    logits: Vec<Option<NodeId>>,
}

impl Forward<'_> {
    fn features(&mut self, graph: &mut Graph, i: usize) -> Result<NodeId> {
        if let Some(h) = self.feats[i] {
            return Ok(h);
        }
        let x = graph.input(self.inputs[i].clone());
        let h = self.g.forward(graph, x)?;
        self.feats[i] = Some(h);
        Ok(h)
    }

    fn logits(&mut self, graph: &mut Graph, i: usize) -> Result<NodeId> {
        if let Some(z) = self.logits[i] {
            return Ok(z);
        }
        let h = self.features(graph, i)?;
        let z = self.f.forward(graph, h)?;
        self.logits[i] = Some(z);
        Ok(z)
    }
}

/// One optimizer update on `objective`, after any alternating discriminator updates.
fn update(
    state: &mut TrainState,
    objective: &Objective,
    config: &AlgorithmConfig,
) -> Result<Losses> {
    let mut losses = Losses::new();
    let dann = objective.omega_inputs().is_some() && config.divergence.needs_discriminator();
    let reversal = dann && config.discriminator_steps == 0;

    if dann && !reversal {
        let (si, ti) = objective.omega_inputs().expect("checked above");
        let fs = state.params.forward(FEATURES, &objective.inputs[si])?;
        let ft = state.params.forward(FEATURES, &objective.inputs[ti])?;
        let mut acc = 0.0;
        for _ in 0..config.discriminator_steps {
            let mut graph = Graph::new();
            let bound = state.params.bind(&mut graph, &[DISCRIMINATOR])?;
            let s = graph.constant(fs.clone());
            let t = graph.constant(ft.clone());
            let loss = domain_classifier_loss(&mut graph, s, t, bound.component(DISCRIMINATOR)?)?;
            acc += graph.value(loss).item();
            let grads = bound.gradients(&graph, loss)?;
            state
                .discriminator_optimizer
                .step(&mut state.params, &grads)?;
        }
        losses.insert(
            "discriminator".into(),
            acc / config.discriminator_steps as f64,
        );
    }

    let mut graph = Graph::new();
    let names: &[&str] = if reversal {
        &[FEATURES, CLASSIFIER, DISCRIMINATOR]
    } else {
        &[FEATURES, CLASSIFIER]
    };
    let bound = state.params.bind(&mut graph, names)?;
    let frozen_d = if dann && !reversal {
        Some(state.params.bind_frozen(&mut graph, &[DISCRIMINATOR])?)
    } else {
        None
    };
    let disc = match (&frozen_d, reversal) {
        (Some(b), _) => Some(b.component(DISCRIMINATOR)?),
        (None, true) => Some(bound.component(DISCRIMINATOR)?),
        (None, false) => None,
    };
    let mut fwd = Forward {
        inputs: &objective.inputs,
        g: bound.component(FEATURES)?,
        f: bound.component(CLASSIFIER)?,
        feats: vec![None; objective.inputs.len()],
        logits: vec![None; objective.inputs.len()],
    };

    let mut total: Option<NodeId> = None;
    let mut total_value = 0.0;
    for term in &objective.terms {
        let (node, value) = match &term.kind {
            TermKind::Ce { input, labels } => {
                let z = fwd.logits(&mut graph, *input)?;
                let ce = graph.softmax_cross_entropy(z, labels)?;
                (ce, graph.value(ce).item())
            }
            TermKind::Kl { adv, clean } => {
                let za = fwd.logits(&mut graph, *adv)?;
                let zc = fwd.logits(&mut graph, *clean)?;
                let kl = kl_rows(&mut graph, za, zc)?;
                (kl, graph.value(kl).item())
            }
            TermKind::Omega { source, target } => {
                let fs = fwd.features(&mut graph, *source)?;
                let ft = fwd.features(&mut graph, *target)?;
                if reversal {
                    let d = disc.expect("bound with reversal");
                    let rs = graph.gradient_reversal(fs, 1.0)?;
                    let rt = graph.gradient_reversal(ft, 1.0)?;
                    let bce = domain_classifier_loss(&mut graph, rs, rt, d)?;
                    (bce, -graph.value(bce).item())
                } else {
                    let om = omega(&mut graph, &config.divergence, fs, ft, disc)?;
                    (om, graph.value(om).item())
                }
            }
        };
        if !value.is_finite() {
            return Err(Error::NonFinite { op: term.name });
        }
        losses.insert(term.name.into(), value);
        total_value += term.weight * value;
        let scaled = if term.weight == 1.0 {
            node
        } else {
            graph.scale(node, term.weight)?
        };
        total = Some(match total {
            None => scaled,
            Some(t) => graph.add(t, scaled)?,
        });
    }
    let total = total.ok_or_else(|| Error::Config("objective has no terms".into()))?;
    losses.insert("total".into(), total_value);

    let mut grads = bound.gradients(&graph, total)?;
    if reversal {
        let mut dgrads = ModelParams::new();
        dgrads.insert(DISCRIMINATOR, grads.remove(DISCRIMINATOR).expect("bound"));
        state.optimizer.step(&mut state.params, &grads)?;
        state
            .discriminator_optimizer
            .step(&mut state.params, &dgrads)?;
    } else {
        state.optimizer.step(&mut state.params, &grads)?;
    }
    Ok(losses)
}

fn step_attack(config: &AlgorithmConfig, seed: u64, random_start: bool) -> AttackConfig {
    let mut cfg = config.train_attack.clone().with_seed(seed);
    // The KL objective has a zero gradient at the clean point, so it needs a random start.
    cfg.random_start |= random_start;
    cfg
}

/// One DART update: transform the source batch, attack the target batch, update `(f, g, d)`.
pub fn dart_step(
    state: &mut TrainState,
    source: (&Tensor, &[usize]),
    target: (&Tensor, &[usize]),
    config: &AlgorithmConfig,
    seed: u64,
) -> Result<Losses> {
    let (xs, ys) = source;
    let (xt, pseudo) = target;
    if pseudo.len() != xt.rows() {
        return Err(Error::MissingPseudoLabels(format!(
            "{} labels for {} target rows",
            pseudo.len(),
            xt.rows()
        )));
    }
    let (l1, l2) = config.effective_lambdas();
    let xs_used = match config.source_choice {
        SourceChoice::Clean => xs.clone(),
        SourceChoice::Adv => {
            pgd_cross_entropy(&state.params, xs, ys, &step_attack(config, seed, false))?
        }
        SourceChoice::Kl => kl_transform(&state.params, xs, &step_attack(config, seed, true))?,
    };
    let xt_adv = if l1 > 0.0 || l2 > 0.0 {
        let fs = state.params.forward(FEATURES, &xs_used)?;
        dart_target_attack(
            &state.params,
            xt,
            pseudo,
            &config.divergence,
            &fs,
            l1,
            l2,
            &step_attack(config, derive_seed(seed, 1), false),
        )?
    } else {
        xt.clone()
    };
    let mut obj = Objective::default();
    let si = obj.input(xs_used);
    let ti = obj.input(xt_adv);
    obj.push(
        "source",
        1.0,
        TermKind::Ce {
            input: si,
            labels: ys.to_vec(),
        },
    );
    obj.push(
        "divergence",
        l1,
        TermKind::Omega {
            source: si,
            target: ti,
        },
    );
    obj.push(
        "target_pseudo",
        l2,
        TermKind::Ce {
            input: ti,
            labels: pseudo.to_vec(),
        },
    );
    update(state, &obj, config)
}

/// One update of any non-DART algorithm. `pseudo` holds labels for the target rows when the tag needs them.
pub fn baseline_step(
    state: &mut TrainState,
    source: (&Tensor, &[usize]),
    target: (&Tensor, Option<&[usize]>),
    config: &AlgorithmConfig,
    seed: u64,
) -> Result<Losses> {
    let (xs, ys) = source;
    let (xt, pseudo) = target;
    let (l1, _) = config.effective_lambdas();
    let beta = config.effective_beta();
    let pseudo_labels = || -> Result<&[usize]> {
        match pseudo {
            Some(p) if p.len() == xt.rows() => Ok(p),
            Some(p) => Err(Error::MissingPseudoLabels(format!(
                "{} labels for {} target rows",
                p.len(),
                xt.rows()
            ))),
            None => Err(Error::MissingPseudoLabels(format!(
                "{} needs pseudo labels",
                config.algorithm.tag()
            ))),
        }
    };
    let atk = step_attack(config, seed, false);
    let kl_atk = step_attack(config, seed, true);
    let mut obj = Objective::default();
    match config.algorithm {
        Algorithm::NaturalUda => {
            let si = obj.input(xs.clone());
            let ti = obj.input(xt.clone());
            obj.push(
                "source",
                1.0,
                TermKind::Ce {
                    input: si,
                    labels: ys.to_vec(),
                },
            );
            obj.push(
                "divergence",
                l1,
                TermKind::Omega {
                    source: si,
                    target: ti,
                },
            );
        }
        Algorithm::AtSrc => {
            let si = obj.input(pgd_cross_entropy(&state.params, xs, ys, &atk)?);
            obj.push(
                "source",
                1.0,
                TermKind::Ce {
                    input: si,
                    labels: ys.to_vec(),
                },
            );
        }
        Algorithm::TradesSrc => {
            let si = obj.input(xs.clone());
            obj.push(
                "source",
                1.0,
                TermKind::Ce {
                    input: si,
                    labels: ys.to_vec(),
                },
            );
            if beta > 0.0 {
                let ai = obj.input(kl_transform(&state.params, xs, &kl_atk)?);
                obj.push("trades", beta, TermKind::Kl { adv: ai, clean: si });
            }
        }
        Algorithm::AtTgtPseudo | Algorithm::AtTgtCg => {
            let labels = pseudo_labels()?;
            let ti = obj.input(pgd_cross_entropy(&state.params, xt, labels, &atk)?);
            obj.push(
                "target_pseudo",
                1.0,
                TermKind::Ce {
                    input: ti,
                    labels: labels.to_vec(),
                },
            );
        }
        Algorithm::TradesTgtPseudo | Algorithm::TradesTgtCg => {
            let labels = pseudo_labels()?;
            let ti = obj.input(xt.clone());
            obj.push(
                "target_pseudo",
                1.0,
                TermKind::Ce {
                    input: ti,
                    labels: labels.to_vec(),
                },
            );
            if beta > 0.0 {
                let ai = obj.input(kl_transform(&state.params, xt, &kl_atk)?);
                obj.push("trades", beta, TermKind::Kl { adv: ai, clean: ti });
            }
        }
        Algorithm::AtPlusUda => {
            let si = obj.input(pgd_cross_entropy(&state.params, xs, ys, &atk)?);
            let ti = obj.input(xt.clone());
            obj.push(
                "source",
                1.0,
                TermKind::Ce {
                    input: si,
                    labels: ys.to_vec(),
                },
            );
            obj.push(
                "divergence",
                l1,
                TermKind::Omega {
                    source: si,
                    target: ti,
                },
            );
        }
        Algorithm::Dart => {
            let labels = pseudo_labels()?;
            return dart_step(state, source, (xt, labels), config, seed);
        }
    }
    update(state, &obj, config)
}

/// Fraction of rows whose argmax logit equals the label.
pub fn accuracy(params: &ModelParams, set: &LabeledSet) -> Result<f64> {
    let pred = params.predict(set.features())?;
    let hits = pred
        .iter()
        .zip(set.labels())
        .filter(|(p, y)| p == y)
        .count();
    Ok(hits as f64 / set.len().max(1) as f64)
}

/// Training pools: labeled source, unlabeled target, labeled target validation (the proxy).
#[derive(Debug, Clone, Copy)]
pub struct TrainData<'a> {
    pub source: &'a LabeledSet,
    pub target: &'a UnlabeledSet,
    pub target_val: &'a LabeledSet,
}

/// One training-log line, written every `K` iterations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub iteration: usize,
    /// Mean of each term over the iterations since the previous record.
    pub losses: Losses,
    pub proxy_accuracy: f64,
    pub pseudo_label_swap: bool,
}

pub struct CheckpointEvent<'a> {
    pub iteration: usize,
    pub params: &'a ModelParams,
    pub record: &'a LogRecord,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub final_params: ModelParams,
    /// Checkpoint with the highest proxy accuracy; later checkpoints win ties.
    pub best_params: ModelParams,
    pub best_iteration: usize,
    pub best_proxy: f64,
    pub log: Vec<LogRecord>,
}

/// Runs `config.iterations` updates from `init`. `observer` sees every checkpoint.
pub fn train(
    config: &AlgorithmConfig,
    data: TrainData<'_>,
    init: ModelParams,
    seed: u64,
    observer: &mut dyn FnMut(&CheckpointEvent<'_>) -> Result<()>,
) -> Result<TrainOutcome> {
    config.validate()?;
    let tag = config.algorithm.tag();
    if data.source.dim() != data.target.dim() || data.source.dim() != data.target_val.dim() {
        return Err(Error::Config("source and target dimensions differ".into()));
    }
    let mut state = TrainState::new(init, config)?;
    let target_x = data.target.features();
    if config.algorithm.uses_pseudo_labels() {
        let proxy = accuracy(&state.params, data.target_val)?;
        state.pseudo = Some(PseudoLabelState::from_model(
            &state.params,
            target_x,
            proxy,
        )?);
    }
    let batch = config
        .batch_size
        .min(data.source.len())
        .min(data.target.len());
    let mut src_sampler = EpochSampler::new(data.source.len(), batch, seed, 1);
    let mut tgt_sampler = EpochSampler::new(data.target.len(), batch, seed, 2);

    let mut log = Vec::new();
    let mut window: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    let mut best: Option<(ModelParams, usize, f64)> = None;
    for t in 1..=config.iterations {
        let si = src_sampler.next_batch();
        let ti = tgt_sampler.next_batch();
        let xs = data.source.features().select_rows(&si);
        let ys: Vec<usize> = si.iter().map(|&i| data.source.labels()[i]).collect();
        let xt = target_x.select_rows(&ti);
        let pseudo = state
            .pseudo
            .as_ref()
            .map(|p| p.labels_for(&ti))
            .transpose()?;
        let step_seed = derive_seed(seed, t as u64);
        let losses = if config.algorithm == Algorithm::Dart {
            let pseudo = pseudo.as_deref().expect("dart keeps pseudo labels");
            dart_step(&mut state, (&xs, &ys), (&xt, pseudo), config, step_seed)
        } else {
            baseline_step(
                &mut state,
                (&xs, &ys),
                (&xt, pseudo.as_deref()),
                config,
                step_seed,
            )
        }
        .map_err(|e| e.in_stage(format!("{tag} iteration {t}")))?;
        for (k, v) in losses {
            let e = window.entry(k).or_insert((0.0, 0));
            e.0 += v;
            e.1 += 1;
        }

        if t % config.checkpoint_frequency == 0 || t == config.iterations {
            let proxy = accuracy(&state.params, data.target_val)?;
            let mut swapped = false;
            if t % config.checkpoint_frequency == 0 && config.algorithm.refreshes_pseudo_labels() {
                if let Some(p) = state.pseudo.as_mut() {
                    swapped = maybe_update_pseudo_labels(
                        p,
                        &state.params,
                        |_| Ok(proxy),
                        t,
                        config.checkpoint_frequency,
                        target_x,
                        &config.ablation,
                    )?;
                }
            }
            let record = LogRecord {
                iteration: t,
                losses: std::mem::take(&mut window)
                    .into_iter()
                    .map(|(k, (s, n))| (k, s / n as f64))
                    .collect(),
                proxy_accuracy: proxy,
                pseudo_label_swap: swapped,
            };
            observer(&CheckpointEvent {
                iteration: t,
                params: &state.params,
                record: &record,
            })?;
            if best.as_ref().is_none_or(|b| proxy >= b.2) {
                best = Some((state.params.clone(), t, proxy));
            }
            log.push(record);
        }
    }
    let (best_params, best_iteration, best_proxy) = best.expect("at least one checkpoint");
    Ok(TrainOutcome {
        final_params: state.params,
        best_params,
        best_iteration,
        best_proxy,
        log,
    })
}

/// Natural UDA pretraining: source cross-entropy plus `lambda1` times the divergence proxy.
pub fn pretrain_natural(
    config: &AlgorithmConfig,
    data: TrainData<'_>,
    init: ModelParams,
    seed: u64,
) -> Result<TrainOutcome> {
    let mut cfg = config.clone();
    cfg.algorithm = Algorithm::NaturalUda;
    cfg.source_choice = SourceChoice::Clean;
    train(&cfg, data, init, seed, &mut |_| Ok(()))
}
