use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use dartlab_core::attacks::AttackConfig;
use dartlab_core::data::{gen_shifted_blobs, gen_two_moons_shift, load_csv, save_csv, CsvData};
use dartlab_core::harness::{
    alpha_csv, alpha_sweep, describe, evaluate, run_experiment, run_sweep,
};
use dartlab_core::io::write_atomic;
use dartlab_core::theory::{check_bound, InstanceFile};
use dartlab_core::{ExperimentConfig, ModelParams};

#[derive(Parser)]
#[command(
    name = "dartlab",
    version,
    about = "Robust unsupervised domain adaptation lab"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum DataKind {
    TwoMoons,
    Blobs,
}

#[derive(Subcommand)]
enum Command {
    /// Write labeled source.csv and target.csv for a synthetic shift.
    GenData {
        #[arg(long, value_enum, default_value = "two-moons")]
        kind: DataKind,
        #[arg(long, default_value_t = 2000)]
        n: usize,
        /// Target rotation in degrees (two-moons).
        #[arg(long, default_value_t = 30.0)]
        rotation: f64,
        /// Moon noise, or blob standard deviation.
        #[arg(long, default_value_t = 0.15)]
        noise: f64,
        /// Class count (blobs).
        #[arg(long, default_value_t = 3)]
        classes: usize,
        /// Target translation `dx,dy` (blobs).
        #[arg(long, default_value = "1.0,0.5", value_parser = parse_pair)]
        shift: (f64, f64),
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pretrain, train the configured algorithm once, evaluate and write artifacts.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Rerun even if `out` holds a finished run of the same config.
        #[arg(long)]
        force: bool,
    },
    /// Random search over the configured hyperparameter distributions.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        trials: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Defaults to `sweep-s<seed>` next to the config.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        force: bool,
    },
    /// Standard and PGD accuracy of a checkpoint on a labeled CSV.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 0.1)]
        alpha: f64,
        #[arg(long, default_value_t = 20)]
        steps: usize,
        /// Defaults to `alpha / 8`.
        #[arg(long)]
        step_size: Option<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Check the bound on a finite instance and write a JSON report.
    TheoryCheck {
        #[arg(long)]
        instance: PathBuf,
        /// Report path; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Robust accuracy of several checkpoints over a list of radii, as CSV.
    AlphaSweep {
        #[arg(long, value_delimiter = ',', required = true)]
        alphas: Vec<f64>,
        /// `name=path`, repeatable.
        #[arg(long = "ckpt", required = true, value_parser = parse_named)]
        ckpts: Vec<(String, PathBuf)>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 20)]
        steps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// CSV path; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn parse_pair(s: &str) -> Result<(f64, f64), String> {
    let (a, b) = s.split_once(',').ok_or("expected dx,dy")?;
    Ok((
        a.trim().parse().map_err(|e| format!("{e}"))?,
        b.trim().parse().map_err(|e| format!("{e}"))?,
    ))
}

fn parse_named(s: &str) -> Result<(String, PathBuf), String> {
    let (name, path) = s.split_once('=').ok_or("expected name=path")?;
    Ok((name.to_string(), PathBuf::from(path)))
}

fn load_labeled(path: &Path) -> Result<dartlab_core::LabeledSet> {
    match load_csv(path, true)? {
        CsvData::Labeled(s) => Ok(s),
        CsvData::Unlabeled(_) => bail!("{} has no labels", path.display()),
    }
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => {
            write_atomic(p, text.as_bytes()).with_context(|| format!("writing {}", p.display()))
        }
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::GenData {
            kind,
            n,
            rotation,
            noise,
            classes,
            shift,
            seed,
            out,
        } => {
            let (s, t) = match kind {
                DataKind::TwoMoons => gen_two_moons_shift(n, rotation, noise, seed)?,
                DataKind::Blobs => gen_shifted_blobs(n, classes, shift, noise, seed)?,
            };
            save_csv(&out.join("source.csv"), s.features(), Some(s.labels()))?;
            save_csv(&out.join("target.csv"), t.features(), Some(t.labels()))?;
            println!(
                "wrote {} and {}",
                out.join("source.csv").display(),
                out.join("target.csv").display()
            );
        }
        Command::Train { config, out, force } => {
            let cfg = ExperimentConfig::from_json_file(&config)
                .with_context(|| format!("reading {}", config.display()))?;
            let summary = run_experiment(&cfg, &out, force)?;
            print!("{}", describe(&summary));
        }
        Command::Sweep {
            config,
            trials,
            seed,
            out,
            force,
        } => {
            let mut cfg = ExperimentConfig::from_json_file(&config)
                .with_context(|| format!("reading {}", config.display()))?;
            if let Some(t) = trials {
                cfg.trials = t;
            }
            if let Some(s) = seed {
                cfg.seeds.sweep = s;
            }
            cfg.validate()?;
            let out = out.unwrap_or_else(|| {
                config
                    .parent()
                    .unwrap_or(Path::new("."))
                    .join(format!("sweep-s{}", cfg.seeds.sweep))
            });
            let summary = run_sweep(&cfg, &out, force)?;
            print!("{}", describe(&summary));
            println!("metrics: {}", out.join("metrics.jsonl").display());
        }
        Command::Eval {
            ckpt,
            data,
            alpha,
            steps,
            step_size,
            seed,
        } => {
            let params = ModelParams::load_checkpoint(&ckpt)
                .with_context(|| format!("loading {}", ckpt.display()))?;
            let test = load_labeled(&data)?;
            let mut atk = AttackConfig::eval(alpha).with_seed(seed);
            atk.steps = steps;
            if let Some(s) = step_size {
                atk.step_size = s;
            }
            let r = evaluate(&params, &test, &atk)?;
            println!("{}", serde_json::to_string(&r)?);
        }
        Command::TheoryCheck { instance, out } => {
            let text = std::fs::read_to_string(&instance)
                .with_context(|| format!("reading {}", instance.display()))?;
            let file: InstanceFile = serde_json::from_str(&text)?;
            let report = check_bound(&file.into_instance()?)?;
            let mut json = serde_json::to_string_pretty(&report)?;
            json.push('\n');
            emit(out.as_deref(), &json)?;
            if !report.passed() {
                eprintln!("{} violation(s)", report.violations.len());
                return Ok(ExitCode::from(1));
            }
        }
        Command::AlphaSweep {
            alphas,
            ckpts,
            data,
            steps,
            seed,
            out,
        } => {
            let test = load_labeled(&data)?;
            let models = ckpts
                .into_iter()
                .map(|(name, path)| {
                    ModelParams::load_checkpoint(&path)
                        .with_context(|| format!("loading {}", path.display()))
                        .map(|p| (name, p))
                })
                .collect::<Result<Vec<_>>>()?;
            let mut template = AttackConfig::eval(0.0).with_seed(seed);
            template.steps = steps;
            let rows = alpha_sweep(&models, &test, &alphas, &template)?;
            emit(out.as_deref(), &alpha_csv(&rows)?)?;
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
