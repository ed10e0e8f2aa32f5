//! Adversarially robust unsupervised domain adaptation on small tabular
//! problems: a reverse-mode autodiff engine, small MLPs, PGD attacks,
//! domain divergence proxies, training algorithms, an experiment harness,
//! and exact bound checks on finite instances.

// Validation is written as `!(x >= 0.0)` on purpose so NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attacks;
pub mod autodiff;
pub mod data;
pub mod divergence;
pub mod error;
pub mod harness;
pub mod io;
pub mod models;
pub mod optim;
pub mod tensor;
pub mod theory;
pub mod trainers;

pub use attacks::AttackConfig;
pub use autodiff::{Graph, NodeId};
pub use data::{Domain, LabeledSet, Split, UnlabeledSet};
pub use divergence::{CmdRange, DivergenceKind};
pub use error::{Error, Result};
pub use harness::{evaluate, EvalResult, ExperimentConfig, MetricsRecord};
pub use models::{init_params, Architecture, MlpSpec, ModelParams};
pub use tensor::Tensor;
pub use trainers::{Algorithm, AlgorithmConfig, SourceChoice};
