use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trainers::AlgorithmConfig;

/// Closed interval `[lo, hi]` sampled uniformly, as an exponent when used as `10^U` or `2^U`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Range {
    pub lo: f64,
    pub hi: f64,
}

impl Range {
    pub const fn new(lo: f64, hi: f64) -> Self {
        Range { lo, hi }
    }

    fn sample(self, rng: &mut ChaCha8Rng) -> f64 {
        if self.hi > self.lo {
            rng.random_range(self.lo..=self.hi)
        } else {
            self.lo
        }
    }
}

/// Hyperparameter distributions for random search.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SearchSpace {
    /// `lambda1 ~ 10^U(lo, hi)`.
    pub log10_lambda1: Range,
    pub log10_lambda2: Range,
    /// `discriminator_steps ~ round(2^U(lo, hi))`.
    pub log2_discriminator_steps: Range,
    pub beta1: Range,
    pub log10_lr: Range,
    pub log10_discriminator_lr: Range,
    pub log10_discriminator_weight_decay: Range,
}

impl Default for SearchSpace {
    fn default() -> Self {
        SearchSpace {
            log10_lambda1: Range::new(-1.0, 1.0),
            log10_lambda2: Range::new(-1.0, 1.0),
            log2_discriminator_steps: Range::new(0.0, 3.0),
            beta1: Range::new(0.0, 0.9),
            log10_lr: Range::new(-4.5, -2.5),
            log10_discriminator_lr: Range::new(-4.5, -2.5),
            log10_discriminator_weight_decay: Range::new(-6.0, -3.0),
        }
    }
}

impl SearchSpace {
    /// Overwrites the searched fields of `base`; everything else is kept.
    pub fn sample(&self, base: &AlgorithmConfig, rng: &mut ChaCha8Rng) -> AlgorithmConfig {
        let mut c = base.clone();
        c.lambda1 = 10f64.powf(self.log10_lambda1.sample(rng));
        c.lambda2 = 10f64.powf(self.log10_lambda2.sample(rng));
        c.discriminator_steps =
            2f64.powf(self.log2_discriminator_steps.sample(rng)).round() as usize;
        c.optimizer.beta1 = self.beta1.sample(rng);
        c.optimizer.lr = 10f64.powf(self.log10_lr.sample(rng));
        c.optimizer.discriminator_lr = 10f64.powf(self.log10_discriminator_lr.sample(rng));
        c.optimizer.discriminator_weight_decay =
            10f64.powf(self.log10_discriminator_weight_decay.sample(rng));
        c.optimizer.weight_decay = 0.0;
        c
    }

    /// `trials` configurations drawn in order from `seed`.
    pub fn sample_many(
        &self,
        base: &AlgorithmConfig,
        trials: usize,
        seed: u64,
    ) -> Vec<AlgorithmConfig> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..trials).map(|_| self.sample(base, &mut rng)).collect()
    }
}

/// What a finished trial reports for selection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialScore {
    pub val_nat_acc: f64,
    pub val_robust_acc: f64,
}

#[derive(Debug, Clone)]
pub enum TrialOutcome<T> {
    Finished { score: TrialScore, output: T },
    Failed { error: String },
}

#[derive(Debug, Clone)]
pub struct SearchResult<T> {
    pub configs: Vec<AlgorithmConfig>,
    pub outcomes: Vec<TrialOutcome<T>>,
    pub best: usize,
}

/// Index of the best finished trial: higher validation accuracy, then higher robust
/// validation accuracy, then lower trial id.
pub fn select_best<T>(outcomes: &[TrialOutcome<T>]) -> Option<usize> {
    let mut best: Option<(usize, &TrialScore)> = None;
    for (i, o) in outcomes.iter().enumerate() {
        if let TrialOutcome::Finished { score, .. } = o {
            let better = match best {
                None => true,
                Some((_, b)) => {
                    score.val_nat_acc > b.val_nat_acc
                        || (score.val_nat_acc == b.val_nat_acc
                            && score.val_robust_acc > b.val_robust_acc)
                }
            };
            if better {
                best = Some((i, score));
            }
        }
    }
    best.map(|(i, _)| i)
}

/// Samples `trials` configurations from `seed` and runs each through `run`.
///
/// `run` gets the trial id and its configuration; a failing trial is kept as
/// [`TrialOutcome::Failed`] and the sweep continues. Trials may run in
/// parallel on the current rayon pool; outcomes stay in trial order.
pub fn random_search<T, F>(
    space: &SearchSpace,
    base: &AlgorithmConfig,
    trials: usize,
    seed: u64,
    run: F,
) -> Result<SearchResult<T>>
where
    T: Send,
    F: Fn(usize, &AlgorithmConfig) -> Result<(TrialScore, T)> + Sync,
{
    use rayon::prelude::*;

    if trials == 0 {
        return Err(Error::Config(
            "random search needs at least one trial".into(),
        ));
    }
    let configs = space.sample_many(base, trials, seed);
    let outcomes: Vec<TrialOutcome<T>> = configs
        .par_iter()
        .enumerate()
        .map(|(i, c)| match c.validate().and_then(|_| run(i, c)) {
            Ok((score, output)) => TrialOutcome::Finished { score, output },
            Err(e) => TrialOutcome::Failed {
                error: e.to_string(),
            },
        })
        .collect();
    let best = select_best(&outcomes)
        .ok_or_else(|| Error::Config(format!("all {trials} trials failed")))?;
    Ok(SearchResult {
        configs,
        outcomes,
        best,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trainers::Algorithm;

    fn score(n: f64, r: f64) -> TrialScore {
        TrialScore {
            val_nat_acc: n,
            val_robust_acc: r,
        }
    }

    #[test]
    fn samples_stay_in_their_ranges_and_are_deterministic() {
        let base = AlgorithmConfig::new(Algorithm::Dart);
        let space = SearchSpace::default();
        let a = space.sample_many(&base, 200, 11);
        assert_eq!(a, space.sample_many(&base, 200, 11));
        assert_ne!(a, space.sample_many(&base, 200, 12));
        for c in &a {
            assert!((0.1..=10.0).contains(&c.lambda1), "{}", c.lambda1);
            assert!((0.1..=10.0).contains(&c.lambda2));
            assert!((1..=8).contains(&c.discriminator_steps));
            assert!((0.0..=0.9).contains(&c.optimizer.beta1));
            assert!(c.optimizer.lr >= 10f64.powf(-4.5) && c.optimizer.lr <= 10f64.powf(-2.5));
            assert_eq!(c.batch_size, 128);
            assert_eq!(c.optimizer.weight_decay, 0.0);
            c.validate().unwrap();
        }
    }

    #[test]
    fn selection_order() {
        let o = |n, r| TrialOutcome::Finished {
            score: score(n, r),
            output: (),
        };
        let failed = TrialOutcome::Failed { error: "x".into() };
        assert_eq!(
            select_best(&[o(0.5, 0.1), o(0.6, 0.0), o(0.6, 0.0)]),
            Some(1)
        );
        assert_eq!(select_best(&[o(0.6, 0.1), o(0.6, 0.3)]), Some(1));
        assert_eq!(select_best(&[failed.clone(), o(0.1, 0.1)]), Some(1));
        assert_eq!(select_best::<()>(&[failed]), None);
    }

    #[test]
    fn single_trial_is_best_and_failures_do_not_abort() {
        let base = AlgorithmConfig::new(Algorithm::Dart);
        let space = SearchSpace::default();
        let r = random_search(&space, &base, 1, 3, |i, _| Ok((score(0.2, 0.1), i))).unwrap();
        assert_eq!(r.best, 0);
        let r = random_search(&space, &base, 4, 3, |i, _| {
            if i % 2 == 0 {
                Err(Error::Config("diverged".into()))
            } else {
                Ok((score(i as f64 / 10.0, 0.0), i))
            }
        })
        .unwrap();
        assert_eq!(r.best, 3);
        assert!(matches!(r.outcomes[0], TrialOutcome::Failed { .. }));
        assert!(
            random_search(&space, &base, 2, 3, |_, _| -> Result<(TrialScore, ())> {
                Err(Error::Config("no".into()))
            })
            .is_err()
        );
    }
}
