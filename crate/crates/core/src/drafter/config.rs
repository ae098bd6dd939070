use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How target hidden states are adapted before reaching the heads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Adaptation {
    /// Two causal adaptation layers; the first half of the heads reads the first.
    Staged,
    /// One adaptation layer feeding every head.
    OneLayer,
    /// Heads read the target hidden state directly.
    None,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DrafterConfig {
    /// Number of drafting heads; head `k` predicts the token `k + 1` steps past the next one.
    pub heads: usize,
    pub adaptation: Adaptation,
    pub use_sampled_token: bool,
    pub use_auto_embedding: bool,
    pub use_positional_encoding: bool,
    pub encoder_layers: usize,
    /// `None` for full `d x V` heads, `Some(r)` for `d x r` then `r x V`.
    pub lm_head_rank: Option<usize>,
    pub sal_heads: usize,
    pub sal_ffn_dim: usize,
    pub encoder_heads: usize,
    pub encoder_ffn_dim: usize,
    pub top_k_per_head: Vec<usize>,
}

impl Default for DrafterConfig {
    fn default() -> Self {
        Self::variant(Variant::Amphista, 64)
    }
}

/// Named drafter configurations used by the ablation suite.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    Amphista,
    Medusa,
    NoAutoEmbedding,
    NoPositionEncoding,
    NoStagedAdaptation,
    OneAdaptationLayer,
    NoSampledToken,
}

impl Variant {
    pub const ALL: [Variant; 7] = [
        Variant::Medusa,
        Variant::NoAutoEmbedding,
        Variant::NoPositionEncoding,
        Variant::NoStagedAdaptation,
        Variant::OneAdaptationLayer,
        Variant::NoSampledToken,
        Variant::Amphista,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Amphista => "amphista",
            Variant::Medusa => "medusa",
            Variant::NoAutoEmbedding => "wo-auto-embedding",
            Variant::NoPositionEncoding => "wo-position-encoding",
            Variant::NoStagedAdaptation => "wo-staged-adaptation",
            Variant::OneAdaptationLayer => "one-adaptation-layer",
            Variant::NoSampledToken => "wo-sampled-token",
        }
    }

    /// Average accepted length reported for this variant on MT-Bench with a 7B target.
    pub fn reference_accepted_length(self) -> f64 {
        match self {
            Variant::Amphista => 3.50,
            Variant::Medusa => 2.52,
            Variant::NoAutoEmbedding => 3.16,
            Variant::NoPositionEncoding => 3.47,
            Variant::NoStagedAdaptation => 2.91,
            Variant::OneAdaptationLayer => 3.36,
            Variant::NoSampledToken => 3.11,
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .or_else(|| (s == "full").then_some(Variant::Amphista))
            .ok_or_else(|| Error::UnknownVariant(s.to_string()))
    }
}

impl DrafterConfig {
    /// Preset for `variant` with four heads and adaptation widths derived from `hidden_dim`.
    pub fn variant(variant: Variant, hidden_dim: usize) -> Self {
        let c = Self {
            heads: 4,
            adaptation: Adaptation::Staged,
            use_sampled_token: true,
            use_auto_embedding: true,
            use_positional_encoding: true,
            encoder_layers: 1,
            lm_head_rank: None,
            sal_heads: 4,
            sal_ffn_dim: 4 * hidden_dim,
            encoder_heads: 4,
            encoder_ffn_dim: 4 * hidden_dim,
            top_k_per_head: vec![10; 4],
        };
        c.with_variant(variant)
    }

    /// Keeps sizes and head settings, replacing the architecture switches with those of `variant`.
    pub fn with_variant(mut self, variant: Variant) -> Self {
        self.adaptation = Adaptation::Staged;
        self.use_sampled_token = true;
        self.use_auto_embedding = true;
        self.use_positional_encoding = true;
        match variant {
            Variant::Amphista => {}
            Variant::Medusa => {
                self.adaptation = Adaptation::None;
                self.use_sampled_token = false;
                self.use_auto_embedding = false;
                self.use_positional_encoding = false;
            }
            Variant::NoAutoEmbedding => self.use_auto_embedding = false,
            Variant::NoPositionEncoding => self.use_positional_encoding = false,
            Variant::NoStagedAdaptation => self.adaptation = Adaptation::None,
            Variant::OneAdaptationLayer => self.adaptation = Adaptation::OneLayer,
            Variant::NoSampledToken => self.use_sampled_token = false,
        }
        self
    }

    /// The variant whose architecture switches this config carries, if any.
    pub fn variant_of(&self) -> Option<Variant> {
        Variant::ALL.into_iter().find(|&v| {
            let r = self.clone().with_variant(v);
            (r.adaptation, r.use_sampled_token, r.use_auto_embedding, r.use_positional_encoding)
                == (
                    self.adaptation,
                    self.use_sampled_token,
                    self.use_auto_embedding,
                    self.use_positional_encoding,
                )
        })
    }

    pub fn validate(&self, hidden_dim: usize) -> Result<()> {
        if self.heads < 2 {
            return Err(Error::Config(format!("need at least 2 heads, got {}", self.heads)));
        }
        if self.top_k_per_head.len() != self.heads || self.top_k_per_head.contains(&0) {
            return Err(Error::Config(format!(
                "top_k_per_head must have {} entries >= 1, got {:?}",
                self.heads, self.top_k_per_head
            )));
        }
        if self.encoder_layers == 0 {
            return Err(Error::Config("encoder_layers must be >= 1".into()));
        }
        if self.lm_head_rank == Some(0) {
            return Err(Error::Config("lm_head_rank must be positive".into()));
        }
        for (name, heads) in [("sal_heads", self.sal_heads), ("encoder_heads", self.encoder_heads)] {
            if heads == 0 || !hidden_dim.is_multiple_of(heads) {
                return Err(Error::Config(format!(
                    "{name} = {heads} must divide hidden_dim {hidden_dim}"
                )));
            }
        }
        if self.sal_ffn_dim == 0 || self.encoder_ffn_dim == 0 {
            return Err(Error::Config("ffn widths must be positive".into()));
        }
        Ok(())
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        toml::from_str(s).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("plain struct serializes")
    }
}
