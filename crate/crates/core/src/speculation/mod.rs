//! Draft trees, tree-attention masks, verification rules and the speculative decoding loop.

mod session;
mod topology;
mod tree;
mod verify;

pub use session::{
    generate_ar, generate_speculative, Generation, OracleProposer, Proposer, SpecConfig, StepRecord,
};
pub use topology::TreeTopology;
pub use tree::{build_mask, distribution, expand_tree, sample_chain, DraftTree};
pub use verify::{verify, VerifyResult, VerifyRule, TYPICAL_DELTA, TYPICAL_EPSILON};
