use std::path::Path;

use amphista::drafter::DrafterConfig;
use amphista::harness::{AblationConfig, CorpusConfig, Mode, RunConfig};
use amphista::model::ModelConfig;
use amphista::training::{PretrainConfig, TrainConfig};
use anyhow::{Context as _, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub budgets: Vec<usize>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            budgets: vec![5, 22, 35, 45, 64],
        }
    }
}

/// Everything a subcommand needs. Every table is optional in the file.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Initialization seed of the target; the drafter is initialized from `train.seed`.
    pub seed: u64,
    pub model: ModelConfig,
    pub drafter: DrafterConfig,
    pub pretrain: PretrainConfig,
    pub train: TrainConfig,
    pub corpus: CorpusConfig,
    pub run: RunConfig,
    pub ablation: AblationConfig,
    pub sweep: SweepConfig,
}

/// Command-line values that replace config entries.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    /// Replaces the initialization, pretraining, training and decoding seeds.
    pub seed: Option<u64>,
    pub mode: Option<Mode>,
    pub temperature: Option<f64>,
    pub topology: Option<String>,
}

impl ExperimentConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        Ok(toml::from_str(s)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::from_toml_str(&text).with_context(|| format!("parsing {}", path.display()))
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config is plain data")
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(seed) = o.seed {
            self.seed = seed;
            self.pretrain.seed = seed;
            self.train.seed = seed;
            self.run.seed = seed;
        }
        if let Some(mode) = o.mode {
            self.run.mode = mode;
        }
        if let Some(t) = o.temperature {
            self.run.temperature = t;
        }
        if let Some(t) = &o.topology {
            self.run.topology = t.clone();
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.drafter.validate(self.model.hidden_dim)?;
        self.train.validate()?;
        Ok(())
    }

    /// Settings that determine the pretrained target.
    pub fn target_fingerprint(&self) -> String {
        #[derive(Serialize)]
        struct Fp<'a> {
            seed: u64,
            model: &'a ModelConfig,
            pretrain: &'a PretrainConfig,
            corpus: &'a CorpusConfig,
        }
        toml::to_string(&Fp {
            seed: self.seed,
            model: &self.model,
            pretrain: &self.pretrain,
            corpus: &self.corpus,
        })
        .expect("plain data")
    }

    /// Settings that determine the trained drafter.
    pub fn drafter_fingerprint(&self) -> String {
        #[derive(Serialize)]
        struct Fp<'a> {
            drafter: &'a DrafterConfig,
            train: &'a TrainConfig,
        }
        let own = toml::to_string(&Fp {
            drafter: &self.drafter,
            train: &self.train,
        })
        .expect("plain data");
        format!("{}{own}", self.target_fingerprint())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use amphista::drafter::Variant;

    #[test]
    fn empty_file_gives_defaults() {
        let c = ExperimentConfig::from_toml_str("").unwrap();
        assert_eq!(c, ExperimentConfig::default());
        c.validate().unwrap();
    }

    #[test]
    fn round_trips_through_toml() {
        let mut c = ExperimentConfig::default();
        c.run.mode = Mode::Tree(Variant::Medusa);
        c.drafter.lm_head_rank = Some(16);
        c.sweep.budgets = vec![5, 45];
        let back = ExperimentConfig::from_toml_str(&c.to_toml_string()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(ExperimentConfig::from_toml_str("[train]\nepoch = 3").is_err());
        assert!(ExperimentConfig::from_toml_str("[bogus]").is_err());
    }

    #[test]
    fn overrides_replace_entries() {
        let mut c = ExperimentConfig::default();
        c.apply(&Overrides {
            seed: Some(7),
            mode: Some(Mode::Ar),
            temperature: Some(0.5),
            topology: Some("chain".into()),
        });
        assert_eq!((c.seed, c.train.seed, c.pretrain.seed, c.run.seed), (7, 7, 7, 7));
        assert_eq!(c.run.mode, Mode::Ar);
        assert_eq!(c.run.temperature, 0.5);
        assert_eq!(c.run.topology, "chain");
    }

    #[test]
    fn fingerprints_track_their_sections() {
        let a = ExperimentConfig::default();
        let mut b = a.clone();
        b.run.max_new_tokens = 7;
        assert_eq!(a.drafter_fingerprint(), b.drafter_fingerprint());
        b.train.epochs = 1;
        assert_eq!(a.target_fingerprint(), b.target_fingerprint());
        assert_ne!(a.drafter_fingerprint(), b.drafter_fingerprint());
        b.pretrain.epochs = 1;
        assert_ne!(a.target_fingerprint(), b.target_fingerprint());
    }
}
