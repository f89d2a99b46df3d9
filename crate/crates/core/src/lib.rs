//! Confounder-aware adversarial fine-tuning at desk scale.
//!
//! A shared feature extractor feeds a task head, a domain classifier, and
//! one head per annotated confounder. Training alternates between fitting the
//! domain classifier and pushing the representation toward domain confusion
//! while it stays predictive of the task and the confounders.
//!
//! The numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below name the common instantiations.

pub mod autodiff;
pub mod checkpoint;
pub mod data;
pub mod datagen;
pub mod error;
pub mod eval;
pub mod losses;
pub mod model;
pub mod nn;
pub mod scalar;
pub mod tensor;
pub mod trainer;

pub use autodiff::{Gradients, ParamKey, Tape, Var};
pub use data::{Benchmark, Instance, Split};
pub use error::{Error, Result};
pub use eval::{ComparisonTable, MetricsRecord};
pub use model::{CadaftModel, ModelConfig, ModelDims, ParamGroup};
pub use scalar::Scalar;
pub use tensor::Tensor;
pub use trainer::{Ablation, TrainConfig, TrainData, TrainState};

pub type Tensor64 = Tensor<f64>;
pub type Tensor32 = Tensor<f32>;
pub type Tape64 = Tape<f64>;
pub type Tape32 = Tape<f32>;
pub type Model64 = CadaftModel<f64>;
pub type Model32 = CadaftModel<f32>;
pub type TrainState64 = TrainState<f64>;
pub type TrainState32 = TrainState<f32>;
