//! Half fine-tuning laboratory: a toy transformer whose parameters are
//! partitioned per round into trainable and frozen halves, with task-vector
//! merging, a continual-learning harness and drift analytics.

pub mod analysis;
pub mod continual;
pub mod error;
pub mod io;
pub mod merge;
pub mod model;
pub mod selection;
pub mod tasks;
pub mod tensor;
pub mod trainer;

pub use error::{CheckpointError, Error, Result};
pub use model::{build_model, Category, Model, ModelConfig, ParameterRegistry};
pub use selection::{SelectionHistory, SelectionPlan, Strategy};
pub use tensor::{DType, Element, Tensor};
