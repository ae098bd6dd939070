use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Shape of the target transformer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub hidden_dim: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ffn_dim: usize,
    pub max_seq_len: usize,
    pub norm_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 256,
            hidden_dim: 64,
            n_layers: 4,
            n_heads: 4,
            ffn_dim: 256,
            max_seq_len: 512,
            norm_eps: 1e-5,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 2 {
            return Err(Error::Config("vocab_size must be >= 2".into()));
        }
        if self.max_seq_len < 2 {
            return Err(Error::Config("max_seq_len must be >= 2".into()));
        }
        if self.hidden_dim == 0 || self.n_heads == 0 || !self.hidden_dim.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "hidden_dim {} must be a positive multiple of n_heads {}",
                self.hidden_dim, self.n_heads
            )));
        }
        if self.n_layers == 0 || self.ffn_dim == 0 {
            return Err(Error::Config("n_layers and ffn_dim must be positive".into()));
        }
        if !(self.norm_eps > 0.0) {
            return Err(Error::Config("norm_eps must be positive".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.n_heads
    }

    /// Parses the key/value text form (`key = value` per line).
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("plain struct serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_the_toy_config() {
        let c = ModelConfig::default();
        assert_eq!((c.vocab_size, c.hidden_dim, c.n_layers, c.n_heads), (256, 64, 4, 4));
        assert_eq!((c.ffn_dim, c.max_seq_len), (256, 512));
        c.validate().unwrap();
    }

    #[test]
    fn text_round_trip_and_validation() {
        let c = ModelConfig {
            hidden_dim: 32,
            ..ModelConfig::default()
        };
        assert_eq!(ModelConfig::from_toml_str(&c.to_toml_string()).unwrap(), c);
        assert!(ModelConfig::from_toml_str("hidden_dim = 30\nn_heads = 4").is_err());
        assert!(ModelConfig::from_toml_str("vocab_size = 1").is_err());
        assert!(ModelConfig::from_toml_str("bogus = 1").is_err());
    }
}
