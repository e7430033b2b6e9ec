//! Converts dense SwiGLU transformers into mixture-of-experts models without
//! training, then runs, trains and evaluates the converted models.
//!
//! Pipeline: [`calibration`] captures token-averaged gate activations,
//! [`specialization`] turns them into per-layer shared/routed budgets,
//! [`weaving`] partitions neuron slices into experts and builds the router,
//! and [`runtime`] executes the result in pruning or downcycling mode.

pub mod calibration;
pub mod error;
pub mod evaluation;
pub mod kernels;
pub mod model;
pub mod runtime;
pub mod seed;
pub mod specialization;
pub mod tokenizer;
pub mod training;
pub mod weaving;

pub use calibration::{ActivationMatrix, CalibrationSet};
pub use error::{Error, Result};
pub use kernels::Matrix;
pub use model::{DenseGluLayer, DenseGluModel, HParams};
pub use runtime::RoutingRecord;
pub use specialization::{LayerAllocation, Mode, WeaverConfig};
pub use weaving::{ExpertPartition, MoeLayer, MoeModel};
