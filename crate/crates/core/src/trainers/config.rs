use serde::{Deserialize, Serialize};

use crate::attacks::AttackConfig;
use crate::divergence::DivergenceKind;
use crate::error::{Error, Result};
use crate::optim::AdamConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    NaturalUda,
    AtSrc,
    TradesSrc,
    AtTgtPseudo,
    TradesTgtPseudo,
    AtPlusUda,
    /// Adversarial training on target pseudo labels that keep being refreshed.
    AtTgtCg,
    TradesTgtCg,
    Dart,
}

impl Algorithm {
    pub const ALL: [Algorithm; 9] = [
        Algorithm::NaturalUda,
        Algorithm::AtSrc,
        Algorithm::TradesSrc,
        Algorithm::AtTgtPseudo,
        Algorithm::TradesTgtPseudo,
        Algorithm::AtPlusUda,
        Algorithm::AtTgtCg,
        Algorithm::TradesTgtCg,
        Algorithm::Dart,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            Algorithm::NaturalUda => "natural_uda",
            Algorithm::AtSrc => "at_src",
            Algorithm::TradesSrc => "trades_src",
            Algorithm::AtTgtPseudo => "at_tgt_pseudo",
            Algorithm::TradesTgtPseudo => "trades_tgt_pseudo",
            Algorithm::AtPlusUda => "at_plus_uda",
            Algorithm::AtTgtCg => "at_tgt_cg",
            Algorithm::TradesTgtCg => "trades_tgt_cg",
            Algorithm::Dart => "dart",
        }
    }

    pub fn from_tag(tag: &str) -> Result<Self> {
        Algorithm::ALL
            .into_iter()
            .find(|a| a.tag() == tag)
            .ok_or_else(|| Error::Config(format!("unknown algorithm {tag:?}")))
    }

    pub fn uses_pseudo_labels(self) -> bool {
        matches!(
            self,
            Algorithm::AtTgtPseudo
                | Algorithm::TradesTgtPseudo
                | Algorithm::AtTgtCg
                | Algorithm::TradesTgtCg
                | Algorithm::Dart
        )
    }

    /// Whether pseudo labels follow the model during training.
    pub fn refreshes_pseudo_labels(self) -> bool {
        matches!(
            self,
            Algorithm::AtTgtCg | Algorithm::TradesTgtCg | Algorithm::Dart
        )
    }

    pub fn is_robust(self) -> bool {
        self != Algorithm::NaturalUda
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceChoice {
    #[default]
    Clean,
    Adv,
    Kl,
}

impl SourceChoice {
    pub fn tag(self) -> &'static str {
        match self {
            SourceChoice::Clean => "clean",
            SourceChoice::Adv => "adv",
            SourceChoice::Kl => "kl",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct Ablation {
    /// Forces `lambda1 = 0`.
    pub drop_divergence: bool,
    /// Forces `lambda2 = 0`.
    pub drop_third_term: bool,
    /// Pseudo labels from the pretrained model are never refreshed.
    pub fixed_pseudo_labels: bool,
    /// Pseudo labels always come from the current model.
    pub self_labels: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub beta1: f64,
    #[serde(default)]
    pub weight_decay: f64,
    pub discriminator_lr: f64,
    #[serde(default)]
    pub discriminator_weight_decay: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            lr: 1e-3,
            beta1: 0.5,
            weight_decay: 0.0,
            discriminator_lr: 1e-3,
            discriminator_weight_decay: 0.0,
        }
    }
}

impl OptimizerConfig {
    pub fn main(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            weight_decay: self.weight_decay,
        }
    }

    pub fn discriminator(&self) -> AdamConfig {
        AdamConfig {
            lr: self.discriminator_lr,
            beta1: self.beta1,
            weight_decay: self.discriminator_weight_decay,
        }
    }
}

fn default_lambda() -> f64 {
    1.0
}

fn default_beta() -> f64 {
    1.0
}

fn default_attack() -> AttackConfig {
    AttackConfig::train(0.1)
}

fn default_batch() -> usize {
    128
}

fn default_iterations() -> usize {
    2000
}

fn default_k() -> usize {
    100
}

fn default_disc_steps() -> usize {
    8
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlgorithmConfig {
    pub algorithm: Algorithm,
    #[serde(default)]
    pub source_choice: SourceChoice,
    #[serde(default = "default_lambda")]
    pub lambda1: f64,
    #[serde(default = "default_lambda")]
    pub lambda2: f64,
    #[serde(default = "default_beta")]
    pub trades_beta: f64,
    #[serde(default)]
    pub divergence: DivergenceKind,
    #[serde(default = "default_attack")]
    pub train_attack: AttackConfig,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_iterations")]
    pub iterations: usize,
    /// Pseudo-label refresh and evaluation cadence `K`.
    #[serde(default = "default_k")]
    pub checkpoint_frequency: usize,
    /// Discriminator updates before each model update; 0 trains it through gradient reversal instead.
    #[serde(default = "default_disc_steps")]
    pub discriminator_steps: usize,
    #[serde(default)]
    pub ablation: Ablation,
}

impl AlgorithmConfig {
    pub fn new(algorithm: Algorithm) -> Self {
        AlgorithmConfig {
            algorithm,
            source_choice: SourceChoice::Clean,
            lambda1: default_lambda(),
            lambda2: default_lambda(),
            trades_beta: default_beta(),
            divergence: DivergenceKind::default(),
            train_attack: default_attack(),
            optimizer: OptimizerConfig::default(),
            batch_size: default_batch(),
            iterations: default_iterations(),
            checkpoint_frequency: default_k(),
            discriminator_steps: default_disc_steps(),
            ablation: Ablation::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("trades_beta", self.trades_beta),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!(
                    "{name} must be finite and >= 0, got {v}"
                )));
            }
        }
        if self.algorithm != Algorithm::Dart && self.source_choice != SourceChoice::Clean {
            return Err(Error::Config(format!(
                "source_choice applies to dart only, got {} for {}",
                self.source_choice.tag(),
                self.algorithm.tag()
            )));
        }
        if self.batch_size == 0 || self.iterations == 0 || self.checkpoint_frequency == 0 {
            return Err(Error::Config(
                "batch_size, iterations and checkpoint_frequency must be positive".into(),
            ));
        }
        if self.ablation.fixed_pseudo_labels && self.ablation.self_labels {
            return Err(Error::Config(
                "fixed_pseudo_labels and self_labels are exclusive".into(),
            ));
        }
        self.divergence.validate()?;
        self.train_attack.validate()?;
        self.optimizer.main().validate()?;
        self.optimizer.discriminator().validate()?;
        Ok(())
    }

    /// `(lambda1, lambda2)` after ablations and per-algorithm relevance.
    pub fn effective_lambdas(&self) -> (f64, f64) {
        let l1 = match self.algorithm {
            Algorithm::NaturalUda | Algorithm::AtPlusUda | Algorithm::Dart => self.lambda1,
            _ => 0.0,
        };
        let l2 = match self.algorithm {
            Algorithm::Dart => self.lambda2,
            _ => 0.0,
        };
        (
            if self.ablation.drop_divergence {
                0.0
            } else {
                l1
            },
            if self.ablation.drop_third_term {
                0.0
            } else {
                l2
            },
        )
    }

    /// Effective beta, 0 for non-TRADES algorithms.
    pub fn effective_beta(&self) -> f64 {
        match self.algorithm {
            Algorithm::TradesSrc | Algorithm::TradesTgtPseudo | Algorithm::TradesTgtCg => {
                self.trades_beta
            }
            _ => 0.0,
        }
    }

    pub fn refreshes_pseudo_labels(&self) -> bool {
        self.algorithm.refreshes_pseudo_labels() && !self.ablation.fixed_pseudo_labels
    }

    /// Human-readable objective after ablations; terms with zero weight are dropped.
    pub fn objective_string(&self) -> String {
        let (l1, l2) = self.effective_lambdas();
        let beta = self.effective_beta();
        let div = self.divergence.name();
        let src_in = match (self.algorithm, self.source_choice) {
            (Algorithm::AtSrc | Algorithm::AtPlusUda, _) | (Algorithm::Dart, SourceChoice::Adv) => {
                "adv(x_s)"
            }
            (Algorithm::Dart, SourceChoice::Kl) => "kl(x_s)",
            _ => "x_s",
        };
        let mut terms: Vec<String> = Vec::new();
        match self.algorithm {
            Algorithm::NaturalUda | Algorithm::AtSrc | Algorithm::AtPlusUda | Algorithm::Dart => {
                terms.push(format!("CE({src_in}, y_s)"));
                if l1 > 0.0 {
                    let tgt_in = if self.algorithm == Algorithm::Dart {
                        "adv(x_t)"
                    } else {
                        "x_t"
                    };
                    terms.push(format!("{l1}*{div}(g({src_in}), g({tgt_in}))"));
                }
                if l2 > 0.0 {
                    terms.push(format!("{l2}*CE(adv(x_t), y_pseudo)"));
                }
            }
            Algorithm::TradesSrc => {
                terms.push("CE(x_s, y_s)".into());
                if beta > 0.0 {
                    terms.push(format!("{beta}*KL(kl(x_s) || x_s)"));
                }
            }
            Algorithm::AtTgtPseudo | Algorithm::AtTgtCg => {
                terms.push("CE(adv(x_t), y_pseudo)".into());
            }
            Algorithm::TradesTgtPseudo | Algorithm::TradesTgtCg => {
                terms.push("CE(x_t, y_pseudo)".into());
                if beta > 0.0 {
                    terms.push(format!("{beta}*KL(kl(x_t) || x_t)"));
                }
            }
        }
        terms.join(" + ")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ablations_force_lambdas_to_zero() {
        let mut c = AlgorithmConfig::new(Algorithm::Dart);
        c.lambda1 = 2.0;
        c.lambda2 = 3.0;
        assert_eq!(c.effective_lambdas(), (2.0, 3.0));
        c.ablation.drop_third_term = true;
        assert_eq!(c.effective_lambdas(), (2.0, 0.0));
        c.ablation.drop_divergence = true;
        assert_eq!(c.effective_lambdas(), (0.0, 0.0));
    }

    #[test]
    fn both_ablations_leave_the_source_objective() {
        let mut dart = AlgorithmConfig::new(Algorithm::Dart);
        dart.ablation.drop_divergence = true;
        dart.ablation.drop_third_term = true;
        let mut plain = AlgorithmConfig::new(Algorithm::NaturalUda);
        plain.lambda1 = 0.0;
        assert_eq!(dart.objective_string(), plain.objective_string());
        assert_eq!(dart.objective_string(), "CE(x_s, y_s)");
    }

    #[test]
    fn config_json_defaults_and_validation() {
        let c: AlgorithmConfig = serde_json::from_str(r#"{"algorithm":"trades_src"}"#).unwrap();
        assert_eq!(c, AlgorithmConfig::new(Algorithm::TradesSrc));
        c.validate().unwrap();
        let bad: AlgorithmConfig =
            serde_json::from_str(r#"{"algorithm":"dart","lambda1":-1}"#).unwrap();
        assert!(bad.validate().is_err());
        let bad: AlgorithmConfig =
            serde_json::from_str(r#"{"algorithm":"at_src","source_choice":"kl"}"#).unwrap();
        assert!(bad.validate().is_err());
        assert!(serde_json::from_str::<AlgorithmConfig>(r#"{"algorithm":"dann"}"#).is_err());
    }

    #[test]
    fn tags_round_trip() {
        for a in Algorithm::ALL {
            assert_eq!(Algorithm::from_tag(a.tag()).unwrap(), a);
            let json = serde_json::to_string(&a).unwrap();
            assert_eq!(json, format!("\"{}\"", a.tag()));
        }
    }
}
