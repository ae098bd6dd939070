//! The frozen target model: a small causal transformer with KV caching and
//! tree-masked decoding.

mod cache;
mod config;
mod layers;
mod sample;
mod target;

pub use cache::{KvCache, LayerCache};
pub use config::ModelConfig;
pub use layers::{Attention, Block, FeedForward, Linear, RmsNorm};
pub use sample::{sample, sample_weights, tempered_probs};
pub use target::{TargetModel, TargetOutput, TARGET_PREFIX};

#[cfg(test)]
mod tests;
