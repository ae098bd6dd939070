use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::{uniform, AttnMask, Checkpoint, Float, Graph, ParamId, ParamStore, Parameter, Tensor, Var};

use super::cache::KvCache;
use super::config::ModelConfig;
use super::layers::{Block, Linear, RmsNorm};

/// Final-layer hidden states and logits for the tokens of one forward call.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetOutput<T: Float = f32> {
    /// `[n_new, hidden_dim]`, after the final norm.
    pub hidden: Tensor<T>,
    /// `[n_new, vocab_size]`.
    pub logits: Tensor<T>,
}

/// Small pre-norm causal decoder with learned absolute positions.
#[derive(Debug, Clone)]
pub struct TargetModel<T: Float = f32> {
    config: ModelConfig,
    store: ParamStore<T>,
    tok_embed: ParamId,
    pos_embed: ParamId,
    blocks: Vec<Block>,
    final_norm: RmsNorm,
    lm_head: Linear,
}

impl<T: Float> TargetModel<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let d = config.hidden_dim;
        let tok_embed = store.insert("tok_embed", uniform(&mut rng, &[config.vocab_size, d], 0.5))?;
        let pos_embed = store.insert("pos_embed", uniform(&mut rng, &[config.max_seq_len, d], 0.1))?;
        let blocks = (0..config.n_layers)
            .map(|i| {
                Block::new(
                    &mut store,
                    &format!("layers.{i}"),
                    d,
                    config.n_heads,
                    config.ffn_dim,
                    config.norm_eps,
                    &mut rng,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let final_norm = RmsNorm::new(&mut store, "final_norm", d, config.norm_eps)?;
        let lm_head = Linear::new(&mut store, "lm_head", d, config.vocab_size, false, &mut rng)?;
        Ok(Self {
            config,
            store,
            tok_embed,
            pos_embed,
            blocks,
            final_norm,
            lm_head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    pub fn token_embedding(&self) -> &Parameter<T> {
        self.store.get(self.tok_embed)
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    /// Marks every parameter as not requiring gradients.
    pub fn freeze(&mut self) {
        self.store.set_requires_grad(false);
    }

    pub fn is_frozen(&self) -> bool {
        self.store.iter().all(|p| !p.requires_grad())
    }

    pub fn new_cache(&self) -> KvCache<T> {
        KvCache::new(self.config.n_layers, self.config.hidden_dim, self.config.max_seq_len)
    }

    pub fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        if let Some(&t) = tokens.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(Error::TokenOutOfRange {
                token: t,
                vocab: self.config.vocab_size,
            });
        }
        Ok(())
    }

    /// Runs `tokens` on top of `cache` and appends their keys/values to it.
    ///
    /// Without `mask`, attention is causal and positions continue from `cache.len()`.
    /// With `mask` (row-major `n x n`, `n = tokens.len()`), token `i` attends to the
    /// whole cache plus new token `j` iff `mask[i * n + j]`; `positions` must be given.
    pub fn forward(
        &self,
        tokens: &[usize],
        cache: &mut KvCache<T>,
        mask: Option<&[bool]>,
        positions: Option<&[usize]>,
    ) -> Result<TargetOutput<T>> {
        let n = tokens.len();
        if n == 0 {
            return Err(Error::EmptyInput);
        }
        cache.check_room(n)?;
        let base = cache.len();
        let positions: Vec<usize> = match (mask, positions) {
            (Some(m), Some(p)) => {
                if m.len() != n * n || p.len() != n {
                    return Err(Error::MaskMismatch(format!(
                        "{n} tokens, mask of {} entries, {} positions",
                        m.len(),
                        p.len()
                    )));
                }
                p.to_vec()
            }
            (Some(_), None) => {
                return Err(Error::MaskMismatch("tree mask requires position ids".into()))
            }
            (None, Some(p)) => {
                if p.len() != n {
                    return Err(Error::MaskMismatch(format!("{n} tokens, {} positions", p.len())));
                }
                p.to_vec()
            }
            (None, None) => (base..base + n).collect(),
        };
        let attn_mask = match mask {
            Some(m) => AttnMask::Tree(Arc::new(m.to_vec())),
            None => AttnMask::Causal,
        };
        let g = Graph::inference();
        let result = self.forward_graph(&g, tokens, &positions, attn_mask, Some(cache));
        match result {
            Ok((hidden, logits)) => {
                cache.commit_append(n);
                Ok(TargetOutput {
                    hidden: (*g.value(hidden)).clone(),
                    logits: (*g.value(logits)).clone(),
                })
            }
            Err(e) => {
                cache.truncate(base)?;
                Err(e)
            }
        }
    }

    /// Forward pass on a caller-supplied graph. Returns `(hidden, logits)` vars.
    ///
    /// With a cache, every layer's keys/values are appended but the cache length is
    /// not advanced; [`TargetModel::forward`] does that once all layers succeed.
    pub(crate) fn forward_graph(
        &self,
        g: &Graph<T>,
        tokens: &[usize],
        positions: &[usize],
        mask: AttnMask,
        mut cache: Option<&mut KvCache<T>>,
    ) -> Result<(Var, Var)> {
        self.check_tokens(tokens)?;
        if let Some(&p) = positions.iter().find(|&&p| p >= self.config.max_seq_len) {
            return Err(Error::Overflow {
                needed: p + 1,
                max: self.config.max_seq_len,
            });
        }
        let tok = g.gather_rows(g.param(self.store.get(self.tok_embed)), tokens)?;
        let pos = g.gather_rows(g.param(self.store.get(self.pos_embed)), positions)?;
        let mut x = g.add(tok, pos)?;
        for (i, block) in self.blocks.iter().enumerate() {
            let layer_cache = cache.as_deref_mut().map(|c| (c, i));
            x = block.forward(g, &self.store, x, mask.clone(), layer_cache)?;
        }
        let hidden = self.final_norm.forward(g, &self.store, x)?;
        let logits = self.lm_head.forward(g, &self.store, hidden)?;
        Ok((hidden, logits))
    }

    /// Uncached causal forward over a whole sequence.
    pub fn forward_full(&self, tokens: &[usize]) -> Result<TargetOutput<T>> {
        let mut cache = self.new_cache();
        self.forward(tokens, &mut cache, None, None)
    }

    pub fn cast<U: Float>(&self) -> TargetModel<U> {
        TargetModel {
            config: self.config.clone(),
            store: self.store.cast(),
            tok_embed: self.tok_embed,
            pos_embed: self.pos_embed,
            blocks: self.blocks.clone(),
            final_norm: self.final_norm.clone(),
            lm_head: self.lm_head.clone(),
        }
    }

    pub fn save_into(&self, ck: &mut Checkpoint<T>) {
        ck.add_store(TARGET_PREFIX, &self.store);
    }

    pub fn load_from(&mut self, ck: &Checkpoint<T>) -> Result<()> {
        Ok(ck.load_into(TARGET_PREFIX, &mut self.store)?)
    }
}

pub const TARGET_PREFIX: &str = "target.";
