//! Speculative decoding with staged-adaptation draft heads on a tiny causal transformer.

// `!(x > 0.0)` also rejects NaN; index loops in the kernels mirror the math.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

mod error;
pub mod drafter;
pub mod harness;
pub mod model;
pub mod numerics;
pub mod speculation;
pub mod training;

pub use error::{Error, Result};
pub use drafter::{DraftOutput, DraftState, Drafter, DrafterConfig, Variant};
pub use model::{KvCache, ModelConfig, TargetModel, TargetOutput};
pub use numerics::{Checkpoint, Float, Graph, ParamStore, Tensor};
