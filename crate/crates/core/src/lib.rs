//! Real-time segmentation networks built from multi-resolution feature
//! fusion and class-boundary supervision, on a small autograd core.

pub mod ablation;
pub mod autograd;
pub mod checkpoint;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod kernels;
pub mod kv;
pub mod labels;
pub mod model;
pub mod t4;
pub mod tensor;
pub mod train;

pub use autograd::{BnMode, BnState, Gradients, Tape, Var};
pub use error::{Error, Result};
pub use labels::{BoundaryConfig, BoundaryMap, BoundaryMode, LabelMap, IGNORE};
pub use model::{build_model, Model, ModelConfig};
pub use tensor::{ConvSpec, Real, Tensor};
