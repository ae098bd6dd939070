//! Dense tensors, reverse-mode autodiff, parameters and checkpoints.

mod checkpoint;
mod error;
mod float;
mod gradcheck;
mod loss;
mod graph;
mod params;
mod tensor;

pub use checkpoint::{Checkpoint, MAGIC as CHECKPOINT_MAGIC, VERSION as CHECKPOINT_VERSION};
pub use error::{NumericsError, Result};
pub use float::{DType, Float};
pub use gradcheck::{grad_check, GradCheck, GradCheckReport, ParamCheck};
pub use graph::{AttnMask, Graph, Var};
pub use loss::{cross_entropy, Target};
pub use params::{fan_in_uniform, uniform, Gradients, ParamId, ParamStore, Parameter};
pub use tensor::{argmax, topk, Tensor};

pub(crate) use error::shape_err;

#[cfg(test)]
mod tests;
