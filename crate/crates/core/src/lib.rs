//! Domain-adversarial training with transductive interim labels.
//!
//! Modules, bottom-up: [`diffcore`] (reverse-mode autodiff), [`nets`]
//! (feature extractor, label predictor, domain classifier), [`losses`],
//! [`assigner`] (balanced interim labels), [`trainers`], [`divergence`]
//! (proxy distance and bound report), [`data`] and [`harness`] (experiment
//! grids, comparison tables, plot series).

pub mod assigner;
pub mod data;
pub mod diffcore;
pub mod divergence;
pub mod error;
pub mod harness;
pub mod losses;
pub mod nets;
pub mod rng;
pub mod trainers;

pub use assigner::{assign_interim_labels, estimate_class_budget, ClassBudget, PriorSource, ScoreMatrix};
pub use data::{LabeledSet, UnlabeledSet};
pub use diffcore::{Tape, Tensor, Var};
pub use error::{Error, Result};
pub use losses::{dann_loss, transdann_loss, Batch, LossWeights};
pub use nets::{init_params, ModelParams, NetSpec};
pub use trainers::{train_dann, train_transdann, CycleTrace, DomainData, TrainConfig};
