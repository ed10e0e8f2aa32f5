//! Experiment orchestration: data preparation, evaluation, random search and artifacts.

mod search;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub use search::{
    random_search, select_best, Range, SearchResult, SearchSpace, TrialOutcome, TrialScore,
};

use crate::attacks::{pgd_cross_entropy, AttackConfig};
use crate::data::{
    gen_shifted_blobs, gen_two_moons_shift, load_csv, split_source, split_target, CsvData, Domain,
    LabeledSet, UnlabeledSet,
};
use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::models::{init_params, Architecture, ModelParams};
use crate::trainers::{self, accuracy, Algorithm, AlgorithmConfig, LogRecord, TrainData};

/// Where the two domains come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetSpec {
    TwoMoons {
        n: usize,
        rotation_degrees: f64,
        noise: f64,
    },
    Blobs {
        n: usize,
        classes: usize,
        shift: (f64, f64),
        std: f64,
    },
    /// Two labeled CSV files; target labels are only used for validation and testing.
    Csv { source: PathBuf, target: PathBuf },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct Seeds {
    pub data: u64,
    pub init: u64,
    pub train: u64,
    pub attack: u64,
    pub sweep: u64,
}

fn default_eval_attack() -> AttackConfig {
    AttackConfig::eval(0.1)
}

fn default_trials() -> usize {
    4
}

fn default_split() -> (f64, f64, f64) {
    (0.6, 0.2, 0.2)
}

fn default_keep() -> f64 {
    0.8
}

fn default_concurrency() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub dataset: DatasetSpec,
    pub algorithm: AlgorithmConfig,
    /// Defaults to the desk architecture for the data's width and class count.
    #[serde(default)]
    pub architecture: Option<Architecture>,
    /// Natural-UDA pretraining length; defaults to `algorithm.iterations`.
    #[serde(default)]
    pub pretrain_iterations: Option<usize>,
    #[serde(default = "default_eval_attack")]
    pub eval_attack: AttackConfig,
    #[serde(default)]
    pub seeds: Seeds,
    #[serde(default = "default_trials")]
    pub trials: usize,
    #[serde(default)]
    pub search: SearchSpace,
    /// Perturbation radii for the robust-accuracy curve.
    #[serde(default)]
    pub alpha_sweep: Option<Vec<f64>>,
    /// Target `(train, val, test)` ratios.
    #[serde(default = "default_split")]
    pub target_split: (f64, f64, f64),
    #[serde(default = "default_keep")]
    pub source_keep: f64,
    /// Trials run at once during a sweep.
    #[serde(default = "default_concurrency")]
    pub concurrency: usize,
}

impl ExperimentConfig {
    pub fn new(dataset: DatasetSpec, algorithm: AlgorithmConfig) -> Self {
        ExperimentConfig {
            dataset,
            algorithm,
            architecture: None,
            pretrain_iterations: None,
            eval_attack: default_eval_attack(),
            seeds: Seeds::default(),
            trials: default_trials(),
            search: SearchSpace::default(),
            alpha_sweep: None,
            target_split: default_split(),
            source_keep: default_keep(),
            concurrency: default_concurrency(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.algorithm.validate()?;
        self.eval_attack.validate()?;
        if let Some(a) = &self.architecture {
            a.validate()?;
        }
        if self.trials == 0 || self.concurrency == 0 {
            return Err(Error::Config(
                "trials and concurrency must be positive".into(),
            ));
        }
        if self.pretrain_iterations == Some(0) {
            return Err(Error::Config("pretrain_iterations must be positive".into()));
        }
        if let Some(alphas) = &self.alpha_sweep {
            if alphas.is_empty() || alphas.iter().any(|a| !(*a >= 0.0 && a.is_finite())) {
                return Err(Error::Config(format!("bad alpha sweep {alphas:?}")));
            }
        }
        Ok(())
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: ExperimentConfig = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn pretrain_config(&self) -> AlgorithmConfig {
        let mut c = self.algorithm.clone();
        c.algorithm = Algorithm::NaturalUda;
        c.source_choice = Default::default();
        c.ablation = Default::default();
        c.iterations = self.pretrain_iterations.unwrap_or(c.iterations);
        c
    }

    fn eval_attack(&self) -> AttackConfig {
        self.eval_attack.clone().with_seed(self.seeds.attack)
    }
}

/// The four pools every experiment uses.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub source_train: LabeledSet,
    pub target_train: UnlabeledSet,
    pub target_val: LabeledSet,
    pub target_test: LabeledSet,
}

impl PreparedData {
    pub fn train_data(&self) -> TrainData<'_> {
        TrainData {
            source: &self.source_train,
            target: &self.target_train,
            target_val: &self.target_val,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.source_train
            .num_classes()
            .max(self.target_val.num_classes())
    }
}

/// Generates or loads both domains and splits them deterministically from `seed`.
pub fn prepare_data(
    spec: &DatasetSpec,
    target_split: (f64, f64, f64),
    source_keep: f64,
    seed: u64,
) -> Result<PreparedData> {
    let (source, target) = match spec {
        DatasetSpec::TwoMoons {
            n,
            rotation_degrees,
            noise,
        } => gen_two_moons_shift(*n, *rotation_degrees, *noise, seed)?,
        DatasetSpec::Blobs {
            n,
            classes,
            shift,
            std,
        } => gen_shifted_blobs(*n, *classes, *shift, *std, seed)?,
        DatasetSpec::Csv { source, target } => {
            let load = |p: &Path| -> Result<LabeledSet> {
                match load_csv(p, true)? {
                    CsvData::Labeled(s) => Ok(s),
                    CsvData::Unlabeled(_) => unreachable!("loaded with labels"),
                }
            };
            (
                load(source)?.with_domain(Domain::Source),
                load(target)?.with_domain(Domain::Target),
            )
        }
    };
    let source_train = split_source(&source, source_keep, seed.wrapping_add(1))?;
    let (target_train, target_val, target_test) =
        split_target(&target, target_split, seed.wrapping_add(2))?;
    Ok(PreparedData {
        source_train,
        target_train,
        target_val,
        target_test,
    })
}

/// Clean and PGD accuracy on a labeled set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub nat_acc: f64,
    pub robust_acc: f64,
}

/// Rows attacked together; the attack is per example either way.
const EVAL_CHUNK: usize = 512;

/// Standard accuracy and accuracy under a per-example PGD attack on cross-entropy.
pub fn evaluate(
    params: &ModelParams,
    test: &LabeledSet,
    attack: &AttackConfig,
) -> Result<EvalResult> {
    let nat_acc = accuracy(params, test)?;
    if attack.alpha == 0.0 || attack.steps == 0 {
        attack.validate()?;
        return Ok(EvalResult {
            nat_acc,
            robust_acc: nat_acc,
        });
    }
    let mut hits = 0usize;
    let n = test.len();
    let mut start = 0;
    while start < n {
        let end = (start + EVAL_CHUNK).min(n);
        let rows: Vec<usize> = (start..end).collect();
        let x = test.features().select_rows(&rows);
        let y = &test.labels()[start..end];
        // Gradients of a mean over independent rows have the sign of each row's own gradient.
        let adv = pgd_cross_entropy(params, &x, y, attack)?;
        let pred = params.predict(&adv)?;
        hits += pred.iter().zip(y).filter(|(p, t)| p == t).count();
        start = end;
    }
    Ok(EvalResult {
        nat_acc,
        robust_acc: hits as f64 / n.max(1) as f64,
    })
}

/// One row of the robust-accuracy curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlphaRow {
    pub alpha: f64,
    pub algorithm: String,
    pub nat_acc: f64,
    pub robust_acc: f64,
}

/// Evaluates every named model at every radius, scaling the step size with `alpha`.
pub fn alpha_sweep(
    models: &[(String, ModelParams)],
    test: &LabeledSet,
    alphas: &[f64],
    template: &AttackConfig,
) -> Result<Vec<AlphaRow>> {
    let mut rows = Vec::with_capacity(models.len() * alphas.len());
    for (name, params) in models {
        for &alpha in alphas {
            let mut atk = AttackConfig::eval(alpha).with_seed(template.seed);
            atk.steps = template.steps;
            atk.random_start = template.random_start;
            atk.clamp = template.clamp;
            let r = evaluate(params, test, &atk)?;
            rows.push(AlphaRow {
                alpha,
                algorithm: name.clone(),
                nat_acc: r.nat_acc,
                robust_acc: r.robust_acc,
            });
        }
    }
    Ok(rows)
}

pub const ALPHA_CSV_HEADER: &str = "alpha,algorithm,nat_acc,robust_acc";

pub fn alpha_csv(rows: &[AlphaRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(ALPHA_CSV_HEADER.split(','))
        .map_err(|e| Error::Config(e.to_string()))?;
    for r in rows {
        w.serialize((r.alpha, &r.algorithm, r.nat_acc, r.robust_acc))
            .map_err(|e| Error::Config(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Config(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecordKind {
    Checkpoint,
    Final,
}

/// One line of `metrics.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub trial: usize,
    pub kind: RecordKind,
    pub iteration: usize,
    pub val_nat_acc: f64,
    pub val_pgd_acc: f64,
    pub test_nat_acc: Option<f64>,
    pub test_pgd_acc: Option<f64>,
    pub selected: bool,
}

/// Everything one trial produced.
#[derive(Debug, Clone)]
pub struct TrialRun {
    pub config: AlgorithmConfig,
    pub best_params: ModelParams,
    pub best_iteration: usize,
    pub val: EvalResult,
    pub test: EvalResult,
    pub records: Vec<MetricsRecord>,
    pub log: Vec<LogRecord>,
}

/// Trains one configuration from `init` with checkpoint selection on the target
/// validation split (accuracy, then robust accuracy, later checkpoints on ties).
pub fn run_trial(
    trial: usize,
    config: &AlgorithmConfig,
    data: &PreparedData,
    init: ModelParams,
    train_seed: u64,
    eval_attack: &AttackConfig,
) -> Result<TrialRun> {
    let mut records = Vec::new();
    let mut best: Option<(ModelParams, usize, EvalResult)> = None;
    let outcome = trainers::train(config, data.train_data(), init, train_seed, &mut |ev| {
        let val = evaluate(ev.params, &data.target_val, eval_attack)?;
        records.push(MetricsRecord {
            trial,
            kind: RecordKind::Checkpoint,
            iteration: ev.iteration,
            val_nat_acc: val.nat_acc,
            val_pgd_acc: val.robust_acc,
            test_nat_acc: None,
            test_pgd_acc: None,
            selected: false,
        });
        let better = best.as_ref().is_none_or(|(_, _, b)| {
            val.nat_acc > b.nat_acc || (val.nat_acc == b.nat_acc && val.robust_acc >= b.robust_acc)
        });
        if better {
            best = Some((ev.params.clone(), ev.iteration, val));
        }
        Ok(())
    })
    .map_err(|e| e.in_stage(format!("trial {trial} ({})", config.algorithm.tag())))?;
    let (best_params, best_iteration, val) = best.expect("train reports at least one checkpoint");
    let test = evaluate(&best_params, &data.target_test, eval_attack)
        .map_err(|e| e.in_stage(format!("trial {trial} test evaluation")))?;
    records.push(MetricsRecord {
        trial,
        kind: RecordKind::Final,
        iteration: best_iteration,
        val_nat_acc: val.nat_acc,
        val_pgd_acc: val.robust_acc,
        test_nat_acc: Some(test.nat_acc),
        test_pgd_acc: Some(test.robust_acc),
        selected: false,
    });
    Ok(TrialRun {
        config: config.clone(),
        best_params,
        best_iteration,
        val,
        test,
        records,
        log: outcome.log,
    })
}

/// Natural-UDA pretraining from the configured init seed.
pub struct Pretrained {
    pub params: ModelParams,
    pub best_iteration: usize,
    pub log: Vec<LogRecord>,
}

pub fn pretrain(config: &ExperimentConfig, data: &PreparedData) -> Result<Pretrained> {
    let arch = architecture(config, data);
    let init = init_params(&arch, config.seeds.init).map_err(|e| e.in_stage("init"))?;
    let out = trainers::pretrain_natural(
        &config.pretrain_config(),
        data.train_data(),
        init,
        config.seeds.train,
    )
    .map_err(|e| e.in_stage("pretrain"))?;
    Ok(Pretrained {
        params: out.best_params,
        best_iteration: out.best_iteration,
        log: out.log,
    })
}

fn architecture(config: &ExperimentConfig, data: &PreparedData) -> Architecture {
    config
        .architecture
        .clone()
        .unwrap_or_else(|| Architecture::desk_default(data.source_train.dim(), data.num_classes()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialSummary {
    pub trial: usize,
    pub config: AlgorithmConfig,
    pub objective: String,
    pub status: String,
    pub error: Option<String>,
    pub best_iteration: Option<usize>,
    pub val: Option<EvalResult>,
    pub test: Option<EvalResult>,
    pub checkpoint: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSummary {
    pub algorithm: String,
    pub objective: String,
    pub pretrained_checkpoint: String,
    pub selected_checkpoint: String,
    pub best_trial: usize,
    pub best_iteration: usize,
    pub val: EvalResult,
    pub test: EvalResult,
    pub pretrained_test: EvalResult,
    pub trials: Vec<TrialSummary>,
    pub alpha_sweep_csv: Option<String>,
}

fn jsonl<T: Serialize>(items: &[T]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    for item in items {
        serde_json::to_writer(&mut out, item)?;
        out.push(b'\n');
    }
    Ok(out)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

/// Returns the stored summary when `out` already holds a finished run of `config`.
fn completed(config: &ExperimentConfig, out: &Path) -> Result<Option<ExperimentSummary>> {
    let (cfg_path, sum_path) = (out.join("config.json"), out.join("summary.json"));
    if !cfg_path.exists() || !sum_path.exists() {
        return Ok(None);
    }
    let stored: ExperimentConfig = match serde_json::from_str(&std::fs::read_to_string(cfg_path)?) {
        Ok(c) => c,
        Err(_) => return Ok(None),
    };
    if &stored != config {
        return Ok(None);
    }
    Ok(serde_json::from_str(&std::fs::read_to_string(sum_path)?).ok())
}

/// Single run of `config.algorithm` exactly as configured.
pub fn run_experiment(
    config: &ExperimentConfig,
    out: &Path,
    force: bool,
) -> Result<ExperimentSummary> {
    run(config, out, force, None)
}

/// Random search over `config.search` with `config.trials` trials seeded by `config.seeds.sweep`.
pub fn run_sweep(config: &ExperimentConfig, out: &Path, force: bool) -> Result<ExperimentSummary> {
    run(config, out, force, Some(config.trials))
}

fn run(
    config: &ExperimentConfig,
    out: &Path,
    force: bool,
    sweep_trials: Option<usize>,
) -> Result<ExperimentSummary> {
    config.validate()?;
    if !force {
        if let Some(summary) = completed(config, out)? {
            return Ok(summary);
        }
    }
    std::fs::create_dir_all(out)?;
    let _ = std::fs::remove_file(out.join("summary.json"));
    write_json(&out.join("config.json"), config)?;

    let data = prepare_data(
        &config.dataset,
        config.target_split,
        config.source_keep,
        config.seeds.data,
    )
    .map_err(|e| e.in_stage("data"))?;
    let eval_attack = config.eval_attack();
    let ckpt_dir = out.join("checkpoints");
    let natural = config.algorithm.algorithm == Algorithm::NaturalUda;

    // Natural UDA trains from scratch; everything else starts from its pretrained checkpoint.
    let (init, pretrained_path) = if natural {
        let arch = architecture(config, &data);
        (
            init_params(&arch, config.seeds.init).map_err(|e| e.in_stage("init"))?,
            None,
        )
    } else {
        let pre = pretrain(config, &data)?;
        write_atomic(&out.join("pretrain_log.jsonl"), &jsonl(&pre.log)?)?;
        let path = ckpt_dir.join("pretrained.json");
        pre.params.save_checkpoint(&path)?;
        (pre.params, Some(path))
    };

    let run_one = |i: usize, c: &AlgorithmConfig| -> Result<(TrialScore, TrialRun)> {
        let seed = if sweep_trials.is_some() {
            trainers::derive_seed(config.seeds.train, i as u64 + 1)
        } else {
            config.seeds.train
        };
        let r = run_trial(i, c, &data, init.clone(), seed, &eval_attack)?;
        Ok((
            TrialScore {
                val_nat_acc: r.val.nat_acc,
                val_robust_acc: r.val.robust_acc,
            },
            r,
        ))
    };
    let result = match sweep_trials {
        Some(trials) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(config.concurrency)
                .build()
                .map_err(|e| Error::Config(e.to_string()))?;
            pool.install(|| {
                random_search(
                    &config.search,
                    &config.algorithm,
                    trials,
                    config.seeds.sweep,
                    run_one,
                )
            })?
        }
        None => {
            let c = config.algorithm.clone();
            let outcome = match run_one(0, &c) {
                Ok((score, output)) => TrialOutcome::Finished { score, output },
                Err(e) => return Err(e),
            };
            SearchResult {
                configs: vec![c],
                outcomes: vec![outcome],
                best: 0,
            }
        }
    };

    let mut records = Vec::new();
    let mut trials = Vec::new();
    for (i, (cfg, outcome)) in result.configs.iter().zip(&result.outcomes).enumerate() {
        match outcome {
            TrialOutcome::Finished { output, .. } => {
                let path = ckpt_dir.join(format!("trial_{i}.json"));
                output.best_params.save_checkpoint(&path)?;
                write_atomic(
                    &out.join(format!("trials/{i}/train_log.jsonl")),
                    &jsonl(&output.log)?,
                )?;
                for r in &output.records {
                    let mut r = r.clone();
                    r.selected = i == result.best && r.kind == RecordKind::Final;
                    records.push(r);
                }
                trials.push(TrialSummary {
                    trial: i,
                    config: cfg.clone(),
                    objective: cfg.objective_string(),
                    status: "finished".into(),
                    error: None,
                    best_iteration: Some(output.best_iteration),
                    val: Some(output.val),
                    test: Some(output.test),
                    checkpoint: Some(path.display().to_string()),
                });
            }
            TrialOutcome::Failed { error } => trials.push(TrialSummary {
                trial: i,
                config: cfg.clone(),
                objective: cfg.objective_string(),
                status: "failed".into(),
                error: Some(error.clone()),
                best_iteration: None,
                val: None,
                test: None,
                checkpoint: None,
            }),
        }
    }
    write_atomic(&out.join("metrics.jsonl"), &jsonl(&records)?)?;

    let best = match &result.outcomes[result.best] {
        TrialOutcome::Finished { output, .. } => output,
        TrialOutcome::Failed { .. } => unreachable!("best trial finished"),
    };
    let selected_path = ckpt_dir.join("selected.json");
    best.best_params.save_checkpoint(&selected_path)?;
    let pretrained_path = pretrained_path.unwrap_or_else(|| selected_path.clone());
    let pretrained_params = ModelParams::load_checkpoint(&pretrained_path)?;
    let pretrained_test = evaluate(&pretrained_params, &data.target_test, &eval_attack)?;

    let alpha_sweep_csv = match &config.alpha_sweep {
        Some(alphas) => {
            let mut models = vec![(
                config.algorithm.algorithm.tag().to_string(),
                best.best_params.clone(),
            )];
            if !natural {
                models.insert(
                    0,
                    (Algorithm::NaturalUda.tag().to_string(), pretrained_params),
                );
            }
            let rows = alpha_sweep(&models, &data.target_test, alphas, &eval_attack)
                .map_err(|e| e.in_stage("alpha sweep"))?;
            let path = out.join("alpha_sweep.csv");
            write_atomic(&path, alpha_csv(&rows)?.as_bytes())?;
            Some(path.display().to_string())
        }
        None => None,
    };

    let summary = ExperimentSummary {
        algorithm: config.algorithm.algorithm.tag().into(),
        objective: result.configs[result.best].objective_string(),
        pretrained_checkpoint: pretrained_path.display().to_string(),
        selected_checkpoint: selected_path.display().to_string(),
        best_trial: result.best,
        best_iteration: best.best_iteration,
        val: best.val,
        test: best.test,
        pretrained_test,
        trials,
        alpha_sweep_csv,
    };
    write_json(&out.join("summary.json"), &summary)?;
    Ok(summary)
}

/// Short human-readable report of a summary.
pub fn describe(summary: &ExperimentSummary) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{} trial {} iteration {}: test nat {:.4} pgd {:.4} (pretrained nat {:.4} pgd {:.4})",
        summary.algorithm,
        summary.best_trial,
        summary.best_iteration,
        summary.test.nat_acc,
        summary.test.robust_acc,
        summary.pretrained_test.nat_acc,
        summary.pretrained_test.robust_acc
    );
    let _ = writeln!(s, "objective: {}", summary.objective);
    s
}
