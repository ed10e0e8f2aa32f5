//! Adam with L2 weight decay folded into the gradient.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::ModelParams;

pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    #[serde(default)]
    pub weight_decay: f64,
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate must be > 0, got {}",
                self.lr
            )));
        }
        if !(0.0..1.0).contains(&self.beta1) {
            return Err(Error::Config(format!(
                "beta1 must be in [0, 1), got {}",
                self.beta1
            )));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config(format!(
                "weight decay must be >= 0, got {}",
                self.weight_decay
            )));
        }
        Ok(())
    }
}

/// Moment estimates per tensor, keyed by component; weights and biases alternate.
#[derive(Debug, Clone)]
pub struct Adam {
    cfg: AdamConfig,
    t: i32,
    m: BTreeMap<String, Vec<Vec<f64>>>,
    v: BTreeMap<String, Vec<Vec<f64>>>,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Adam {
            cfg,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        })
    }

    pub fn steps_taken(&self) -> i32 {
        self.t
    }

    /// Updates every component of `params` that appears in `grads`.
    pub fn step(&mut self, params: &mut ModelParams, grads: &ModelParams) -> Result<()> {
        self.t += 1;
        let AdamConfig {
            lr,
            beta1,
            weight_decay,
        } = self.cfg;
        let bc1 = 1.0 - beta1.powi(self.t);
        let bc2 = 1.0 - ADAM_BETA2.powi(self.t);
        for (name, glayers) in grads.iter() {
            let layers = params
                .get_mut(name)
                .ok_or_else(|| Error::Config(format!("no parameters for gradient of {name}")))?;
            let sizes: Vec<usize> = layers
                .iter()
                .flat_map(|l| [l.weight.len(), l.bias.len()])
                .collect();
            let m = self
                .m
                .entry(name.to_string())
                .or_insert_with(|| sizes.iter().map(|&s| vec![0.0; s]).collect());
            let v = self
                .v
                .entry(name.to_string())
                .or_insert_with(|| sizes.iter().map(|&s| vec![0.0; s]).collect());
            let tensors = layers
                .iter_mut()
                .flat_map(|l| [&mut l.weight, &mut l.bias])
                .zip(glayers.iter().flat_map(|l| [&l.weight, &l.bias]));
            for ((p, g), (m, v)) in tensors.zip(m.iter_mut().zip(v.iter_mut())) {
                if p.len() != g.len() || m.len() != p.len() {
                    return Err(Error::shape(
                        "adam",
                        format!(
                            "{name}: parameter {:?} vs gradient {:?}",
                            p.shape(),
                            g.shape()
                        ),
                    ));
                }
                for (((w, &gi), mi), vi) in p
                    .data_mut()
                    .iter_mut()
                    .zip(g.data())
                    .zip(m.iter_mut())
                    .zip(v.iter_mut())
                {
                    let gi = gi + weight_decay * *w;
                    *mi = beta1 * *mi + (1.0 - beta1) * gi;
                    *vi = ADAM_BETA2 * *vi + (1.0 - ADAM_BETA2) * gi * gi;
                    *w -= lr * (*mi / bc1) / ((*vi / bc2).sqrt() + ADAM_EPS);
                }
            }
        }
        if !params.all_finite() {
            return Err(Error::NonFinite { op: "adam" });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::Layer;
    use crate::tensor::Tensor;

    fn one(w: f64) -> ModelParams {
        let mut p = ModelParams::new();
        p.insert(
            "g",
            vec![Layer {
                weight: Tensor::new(vec![1, 1], vec![w]).unwrap(),
                bias: Tensor::zeros(&[1, 1]),
            }],
        );
        p
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut p = one(1.0);
        let mut adam = Adam::new(AdamConfig {
            lr: 0.1,
            beta1: 0.9,
            weight_decay: 0.0,
        })
        .unwrap();
        adam.step(&mut p, &one(3.0)).unwrap();
        let w = p.layers("g").unwrap()[0].weight.item();
        assert!((w - 0.9).abs() < 1e-7, "{w}");
        // Zero gradient leaves the bias alone.
        assert_eq!(p.layers("g").unwrap()[0].bias.item(), 0.0);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut p = one(5.0);
        let mut adam = Adam::new(AdamConfig {
            lr: 0.05,
            beta1: 0.5,
            weight_decay: 0.0,
        })
        .unwrap();
        for _ in 0..2000 {
            let w = p.layers("g").unwrap()[0].weight.item();
            adam.step(&mut p, &one(2.0 * (w - 2.0))).unwrap();
        }
        let w = p.layers("g").unwrap()[0].weight.item();
        assert!((w - 2.0).abs() < 1e-3, "{w}");
    }

    #[test]
    fn rejects_bad_config() {
        for cfg in [
            AdamConfig {
                lr: 0.0,
                beta1: 0.5,
                weight_decay: 0.0,
            },
            AdamConfig {
                lr: 1e-3,
                beta1: 1.0,
                weight_decay: 0.0,
            },
            AdamConfig {
                lr: 1e-3,
                beta1: 0.5,
                weight_decay: -1.0,
            },
        ] {
            assert!(Adam::new(cfg).is_err());
        }
    }
}
