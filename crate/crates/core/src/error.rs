use thiserror::Error;

use crate::numerics::NumericsError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Numerics(#[from] NumericsError),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("sequence overflow: {needed} positions exceed max_seq_len {max}")]
    Overflow { needed: usize, max: usize },

    #[error("empty token list")]
    EmptyInput,

    #[error("token {token} out of range for vocabulary of {vocab}")]
    TokenOutOfRange { token: usize, vocab: usize },

    #[error("tree mask/positions mismatch: {0}")]
    MaskMismatch(String),

    #[error("temperature must be >= 0, got {0}")]
    NegativeTemperature(f64),

    #[error("cannot truncate cache of length {len} to {requested}")]
    Truncate { len: usize, requested: usize },

    #[error("cache path out of range: {0}")]
    PathOutOfRange(String),

    #[error("invalid topology: {0}")]
    Topology(String),

    #[error("{rule} verification requires {requirement}")]
    RuleTemperature {
        rule: &'static str,
        requirement: &'static str,
    },

    #[error("inconsistent cache lengths: {0}")]
    CacheState(String),

    #[error("corpus too short: {0}")]
    CorpusTooShort(String),

    #[error("target model parameters are not frozen: {0}")]
    TargetNotFrozen(String),

    #[error("unknown variant or mode `{0}`")]
    UnknownVariant(String),

    #[error("no topology preset for a budget of {0} nodes")]
    NoPreset(usize),

    #[error("{0}")]
    Invariant(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
