//! Adversarial knowledge distillation on small models.
//!
//! The crate bundles a reverse-mode autodiff engine ([`autodiff`]), small
//! classifiers and teacher ensembles ([`model`]), L∞ attacks ([`attack`]),
//! the distillation objectives ([`loss`]), SGD training and robust
//! evaluation ([`train`]), trajectory analysis ([`analysis`]) and
//! deterministic datasets ([`data`]).

pub mod analysis;
pub mod attack;
pub mod autodiff;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod loss;
pub mod model;
pub mod seed;
pub mod tensor;
pub mod train;

pub use attack::{AttackConfig, AttackMethod};
pub use autodiff::{Graph, Op, Var};
pub use data::{Dataset, Split};
pub use error::{Error, Result};
pub use loss::{LossInputs, LossVariant, SoftTarget};
pub use model::{Checkpoint, EnsembleTeacher, Model, ModelSpec, Params};
pub use tensor::Tensor;
pub use train::{EarlyStop, EpochRecord, EvalResult, RunLog, Schedule, TrainConfig, TrainOutcome};
