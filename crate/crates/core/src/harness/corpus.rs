use std::path::PathBuf;

use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::tokenizer::ByteTokenizer;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorpusKind {
    Markov,
    Text,
}

/// Corpus source. Markov fields are ignored for text corpora and vice versa.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    pub kind: CorpusKind,
    /// Text file split into `seq_len`-token sequences.
    pub path: Option<PathBuf>,
    pub order: usize,
    pub symbols: usize,
    /// Token id of symbol 0.
    pub offset: usize,
    /// Probability mass on each context's favourite successor.
    pub peak: f64,
    pub sequences: usize,
    pub seq_len: usize,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            kind: CorpusKind::Markov,
            path: None,
            order: 2,
            symbols: 32,
            offset: 64,
            peak: 0.7,
            sequences: 256,
            seq_len: 64,
            seed: 0,
        }
    }
}

/// Order-`k` Markov chain over `symbols` tokens starting at `offset`.
///
/// Every context puts `peak` on one seeded favourite successor and spreads the
/// rest with seeded random weights.
#[derive(Debug, Clone)]
pub struct MarkovChain {
    order: usize,
    symbols: usize,
    offset: usize,
    /// `[symbols^order, symbols]`, row-major.
    probs: Vec<f64>,
    samplers: Vec<WeightedIndex<f64>>,
}

impl MarkovChain {
    pub fn new(order: usize, symbols: usize, offset: usize, peak: f64, seed: u64) -> Result<Self> {
        let contexts = symbols
            .checked_pow(order as u32)
            .filter(|&c| c <= 1 << 20)
            .ok_or_else(|| Error::Config(format!("{symbols}^{order} Markov contexts is too many")))?;
        if order == 0 || symbols < 2 || !(0.0..=1.0).contains(&peak) {
            return Err(Error::Config(format!(
                "Markov chain needs order >= 1, symbols >= 2 and peak in [0, 1], got {order}, {symbols}, {peak}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut probs = Vec::with_capacity(contexts * symbols);
        for _ in 0..contexts {
            let favourite = rng.gen_range(0..symbols);
            let w: Vec<f64> = (0..symbols).map(|_| rng.gen::<f64>() + 1e-3).collect();
            let sum: f64 = w.iter().sum();
            let start = probs.len();
            probs.extend(w.iter().map(|x| (1.0 - peak) * x / sum));
            probs[start + favourite] += peak;
        }
        let samplers = probs
            .chunks(symbols)
            .map(|row| WeightedIndex::new(row).map_err(|e| Error::Config(e.to_string())))
            .collect::<Result<_>>()?;
        Ok(Self {
            order,
            symbols,
            offset,
            probs,
            samplers,
        })
    }

    pub fn from_config(c: &CorpusConfig) -> Result<Self> {
        Self::new(c.order, c.symbols, c.offset, c.peak, c.seed)
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn symbols(&self) -> usize {
        self.symbols
    }

    pub fn offset(&self) -> usize {
        self.offset
    }

    fn context_index(&self, history: &[usize]) -> Result<usize> {
        if history.len() < self.order {
            return Err(Error::EmptyInput);
        }
        history[history.len() - self.order..].iter().try_fold(0, |acc, &t| {
            let s = t
                .checked_sub(self.offset)
                .filter(|&s| s < self.symbols)
                .ok_or(Error::TokenOutOfRange {
                    token: t,
                    vocab: self.offset + self.symbols,
                })?;
            Ok(acc * self.symbols + s)
        })
    }

    /// Successor distribution over symbols given the last `order` tokens of `history`.
    pub fn next_probs(&self, history: &[usize]) -> Result<&[f64]> {
        let c = self.context_index(history)?;
        Ok(&self.probs[c * self.symbols..(c + 1) * self.symbols])
    }

    /// A sequence of `len` tokens; the first `order` are uniform.
    pub fn sample(&self, len: usize, rng: &mut impl Rng) -> Vec<usize> {
        let mut out: Vec<usize> = Vec::with_capacity(len);
        while out.len() < len {
            let s = if out.len() < self.order {
                rng.gen_range(0..self.symbols)
            } else {
                let c = self.context_index(&out).expect("generated tokens are in range");
                self.samplers[c].sample(rng)
            };
            out.push(self.offset + s);
        }
        out
    }
}

/// Training sequences plus the means to draw evaluation prompts.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub name: String,
    pub sequences: Vec<Vec<usize>>,
    chain: Option<MarkovChain>,
}

impl Corpus {
    pub fn load(config: &CorpusConfig) -> Result<Self> {
        match config.kind {
            CorpusKind::Markov => Self::markov(config),
            CorpusKind::Text => {
                let path = config
                    .path
                    .as_ref()
                    .ok_or_else(|| Error::Config("text corpus needs `path`".into()))?;
                let bytes = std::fs::read(path)?;
                let name = path.display().to_string();
                Self::from_bytes(name, &bytes, config.seq_len)
            }
        }
    }

    pub fn markov(config: &CorpusConfig) -> Result<Self> {
        let chain = MarkovChain::from_config(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_c0de);
        let sequences = (0..config.sequences).map(|_| chain.sample(config.seq_len, &mut rng)).collect();
        Ok(Self {
            name: format!("markov{}-{}sym", config.order, config.symbols),
            sequences,
            chain: Some(chain),
        })
    }

    /// Byte-tokenized text cut into consecutive `seq_len` windows; a short tail is kept
    /// when it has at least two tokens.
    pub fn from_bytes(name: String, bytes: &[u8], seq_len: usize) -> Result<Self> {
        if seq_len < 2 {
            return Err(Error::Config("seq_len must be at least 2".into()));
        }
        let tokens = ByteTokenizer.tokenize(bytes);
        let sequences: Vec<Vec<usize>> = tokens
            .chunks(seq_len)
            .filter(|c| c.len() >= 2)
            .map(<[usize]>::to_vec)
            .collect();
        if sequences.is_empty() {
            return Err(Error::CorpusTooShort(format!("{name} has {} bytes", bytes.len())));
        }
        Ok(Self {
            name,
            sequences,
            chain: None,
        })
    }

    pub fn chain(&self) -> Option<&MarkovChain> {
        self.chain.as_ref()
    }

    pub fn token_count(&self) -> usize {
        self.sequences.iter().map(Vec::len).sum()
    }

    /// `n` prompts of `len` tokens. Markov corpora sample fresh sequences; text
    /// corpora take seeded windows of the token stream.
    pub fn prompts(&self, n: usize, len: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
        if len == 0 {
            return Err(Error::EmptyInput);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        if let Some(chain) = &self.chain {
            return Ok((0..n).map(|_| chain.sample(len, &mut rng)).collect());
        }
        let stream: Vec<usize> = self.sequences.concat();
        if stream.len() < len {
            return Err(Error::CorpusTooShort(format!("{} tokens for prompts of {len}", stream.len())));
        }
        Ok((0..n)
            .map(|_| {
                let start = rng.gen_range(0..=stream.len() - len);
                stream[start..start + len].to_vec()
            })
            .collect())
    }
}
