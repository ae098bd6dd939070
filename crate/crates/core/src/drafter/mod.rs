//! Draft heads: staged adaptation of target hidden states, an auto-embedding
//! encoder that lets the heads attend to one another, and per-head LM heads.

mod config;
mod state;

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{Block, Linear, ModelConfig, RmsNorm, TargetModel};
use crate::numerics::{
    fan_in_uniform, shape_err, topk, AttnMask, Checkpoint, Float, Graph, ParamId, ParamStore, Tensor, Var,
};

pub use config::{Adaptation, DrafterConfig, Variant};
pub use state::DraftState;

/// Checkpoint name prefix for drafter parameters.
pub const DRAFTER_PREFIX: &str = "drafter.";

/// A causal decoder layer followed by a final norm.
#[derive(Debug, Clone)]
struct Sal {
    fc: Linear,
    block: Block,
    norm: RmsNorm,
}

#[derive(Debug, Clone)]
enum LmHead {
    Full(ParamId),
    LowRank(ParamId, ParamId),
}

/// Per-head draft logits for one decoding step.
#[derive(Debug, Clone, PartialEq)]
pub struct DraftOutput<T: Float = f32> {
    /// `[K, V]`, row `k` from head `k`.
    pub d_logits: Tensor<T>,
    /// Per head, the `top_k_per_head[k]` most probable tokens with their probabilities, descending.
    pub topk: Vec<Vec<(usize, f64)>>,
}

impl<T: Float> DraftOutput<T> {
    /// Wraps `[K, V]` logits, filling head `k`'s list with its `top_k[k]` most probable tokens.
    pub fn from_logits(d_logits: Tensor<T>, top_k: &[usize]) -> Result<Self> {
        if d_logits.shape().len() != 2 || d_logits.rows() != top_k.len() {
            return Err(shape_err(
                "draft_output",
                format!("logits {:?} for {} heads", d_logits.shape(), top_k.len()),
            )
            .into());
        }
        let topk = top_k
            .iter()
            .enumerate()
            .map(|(k, &n)| topk(&softmax_f64(d_logits.row(k)), n))
            .collect();
        Ok(Self { d_logits, topk })
    }

    pub fn heads(&self) -> usize {
        self.d_logits.rows()
    }

    /// Softmax of head `k`'s logits.
    pub fn probs(&self, k: usize) -> Vec<f64> {
        softmax_f64(self.d_logits.row(k))
    }

    /// The `n` most probable tokens of head `k`, descending, lowest token id first on ties.
    pub fn candidates(&self, k: usize, n: usize) -> Vec<(usize, f64)> {
        let p = self.probs(k);
        topk(&p, n)
    }
}

fn softmax_f64<T: Float>(row: &[T]) -> Vec<f64> {
    let max = row.iter().map(|x| x.as_f64()).fold(f64::NEG_INFINITY, f64::max);
    let mut p: Vec<f64> = row.iter().map(|x| (x.as_f64() - max).exp()).collect();
    let s: f64 = p.iter().sum();
    p.iter_mut().for_each(|x| *x /= s);
    p
}

/// Which time steps of a batched forward reach the heads.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Rows {
    All,
    Last,
}

/// Intermediate values of one drafter forward.
#[derive(Debug, Clone)]
#[allow(dead_code)]
pub(crate) struct DraftVars {
    pub h1: Var,
    pub h2: Var,
    /// Encoder output per head, `[rows, d]` each.
    pub attn_o: Vec<Var>,
    /// Head logits, `[rows, V]` each.
    pub logits: Vec<Var>,
}

#[derive(Debug, Clone)]
pub struct Drafter<T: Float = f32> {
    config: DrafterConfig,
    dim: usize,
    vocab: usize,
    max_len: usize,
    embed: Arc<Tensor<T>>,
    pub(crate) store: ParamStore<T>,
    sal1: Option<Sal>,
    sal2: Option<Sal>,
    mlps: Vec<Linear>,
    pe: Option<ParamId>,
    encoder: Vec<Block>,
    heads: Vec<LmHead>,
}

impl<T: Float> Drafter<T> {
    /// Builds a drafter for `target`, sharing its token embedding table.
    pub fn new(config: DrafterConfig, target: &TargetModel<T>, seed: u64) -> Result<Self> {
        Self::with_embedding(config, target.config(), target.token_embedding().value().clone(), seed)
    }

    pub fn with_embedding(
        config: DrafterConfig,
        model: &ModelConfig,
        embed: Tensor<T>,
        seed: u64,
    ) -> Result<Self> {
        let d = model.hidden_dim;
        let v = model.vocab_size;
        config.validate(d)?;
        if embed.shape() != [v, d] {
            return Err(Error::Config(format!(
                "embedding table {:?} does not match [{v}, {d}]",
                embed.shape()
            )));
        }
        let eps = model.norm_eps;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let sal = |store: &mut ParamStore<T>, rng: &mut ChaCha8Rng, i: usize| -> Result<Sal> {
            Ok(Sal {
                fc: Linear::new(store, &format!("fc{i}"), 2 * d, d, true, rng)?,
                block: Block::new(store, &format!("sal{i}"), d, config.sal_heads, config.sal_ffn_dim, eps, rng)?,
                norm: RmsNorm::new(store, &format!("sal{i}.norm"), d, eps)?,
            })
        };
        let (sal1, sal2) = match config.adaptation {
            Adaptation::Staged => (Some(sal(&mut store, &mut rng, 1)?), Some(sal(&mut store, &mut rng, 2)?)),
            Adaptation::OneLayer => (Some(sal(&mut store, &mut rng, 1)?), None),
            Adaptation::None => (None, None),
        };
        let mlps = (0..config.heads)
            .map(|k| Linear::new(&mut store, &format!("mlp.{k}"), d, d, true, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let pe = if config.use_positional_encoding {
            Some(store.insert("pe", Tensor::zeros(vec![config.heads, d]))?)
        } else {
            None
        };
        let encoder = if config.use_auto_embedding {
            (0..config.encoder_layers)
                .map(|i| {
                    Block::new(
                        &mut store,
                        &format!("encoder.{i}"),
                        d,
                        config.encoder_heads,
                        config.encoder_ffn_dim,
                        eps,
                        &mut rng,
                    )
                })
                .collect::<Result<Vec<_>>>()?
        } else {
            Vec::new()
        };
        let mut heads = Vec::with_capacity(config.heads);
        for k in 0..config.heads {
            heads.push(match config.lm_head_rank {
                None => LmHead::Full(store.insert(format!("head.{k}.weight"), fan_in_uniform(&mut rng, d, v))?),
                Some(r) => LmHead::LowRank(
                    store.insert(format!("head.{k}.a"), fan_in_uniform(&mut rng, d, r))?,
                    store.insert(format!("head.{k}.b"), fan_in_uniform(&mut rng, r, v))?,
                ),
            });
        }
        Ok(Self {
            config,
            dim: d,
            vocab: v,
            max_len: model.max_seq_len,
            embed: Arc::new(embed),
            store,
            sal1,
            sal2,
            mlps,
            pe,
            encoder,
            heads,
        })
    }

    pub fn config(&self) -> &DrafterConfig {
        &self.config
    }

    pub fn hidden_dim(&self) -> usize {
        self.dim
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab
    }

    /// Replaces the per-head candidate list sizes.
    pub fn set_top_k_per_head(&mut self, top_k: Vec<usize>) -> Result<()> {
        let mut c = self.config.clone();
        c.top_k_per_head = top_k;
        c.validate(self.dim)?;
        self.config = c;
        Ok(())
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    pub fn embedding(&self) -> &Tensor<T> {
        &self.embed
    }

    /// Number of scalars in LM head `k`.
    pub fn head_param_count(&self, k: usize) -> usize {
        match self.heads[k] {
            LmHead::Full(w) => self.store.get(w).value().len(),
            LmHead::LowRank(a, b) => self.store.get(a).value().len() + self.store.get(b).value().len(),
        }
    }

    pub fn new_state(&self) -> DraftState<T> {
        DraftState::new(
            self.sal1.as_ref().map(|_| self.new_sal_cache()),
            self.sal2.as_ref().map(|_| self.new_sal_cache()),
        )
    }

    fn new_sal_cache(&self) -> crate::model::KvCache<T> {
        crate::model::KvCache::new(1, self.dim, self.max_len)
    }

    fn check_token(&self, token: usize) -> Result<()> {
        if token >= self.vocab {
            return Err(Error::TokenOutOfRange {
                token,
                vocab: self.vocab,
            });
        }
        Ok(())
    }

    fn check_hidden(&self, op: &'static str, h: &[T]) -> Result<()> {
        if h.len() != self.dim {
            return Err(shape_err(op, format!("hidden of length {} for d={}", h.len(), self.dim)).into());
        }
        Ok(())
    }

    fn sal_forward(
        &self,
        g: &Graph<T>,
        sal: &Sal,
        h: Var,
        e: Var,
        cache: Option<&mut crate::model::KvCache<T>>,
    ) -> Result<Var> {
        let x = sal.fc.forward(g, &self.store, g.concat_cols(h, e)?)?;
        let x = sal
            .block
            .forward(g, &self.store, x, AttnMask::Causal, cache.map(|c| (c, 0)))?;
        sal.norm.forward(g, &self.store, x)
    }

    /// Runs the adaptation layers over `hidden` (`[P, d]`, one row per time step).
    fn adapt_graph(
        &self,
        g: &Graph<T>,
        hidden: Var,
        next_tokens: &[usize],
        state: Option<&mut DraftState<T>>,
    ) -> Result<(Var, Var)> {
        let p = next_tokens.len();
        if p == 0 {
            return Err(Error::EmptyInput);
        }
        if g.shape(hidden) != [p, self.dim] {
            return Err(shape_err(
                "adapt",
                format!("hidden {:?} for {p} tokens and d={}", g.shape(hidden), self.dim),
            )
            .into());
        }
        for &t in next_tokens {
            self.check_token(t)?;
        }
        if self.config.adaptation == Adaptation::None {
            if let Some(s) = state {
                s.advance(p);
            }
            return Ok((hidden, hidden));
        }
        let e = if self.config.use_sampled_token {
            g.gather_rows(g.constant_shared(Arc::clone(&self.embed)), next_tokens)?
        } else {
            g.constant(Tensor::zeros(vec![p, self.dim]))
        };
        let sal1 = self.sal1.as_ref().expect("adaptation layer present");
        let Some(state) = state else {
            let h1 = self.sal_forward(g, sal1, hidden, e, None)?;
            let h2 = match &self.sal2 {
                Some(sal2) => self.sal_forward(g, sal2, h1, e, None)?,
                None => h1,
            };
            return Ok((h1, h2));
        };
        state.check()?;
        let base = state.len();
        state.check_room(p)?;
        let result = (|| {
            let h1 = self.sal_forward(g, sal1, hidden, e, state.kv1.as_mut())?;
            let h2 = match &self.sal2 {
                Some(sal2) => self.sal_forward(g, sal2, h1, e, state.kv2.as_mut())?,
                None => h1,
            };
            Ok((h1, h2))
        })();
        match result {
            Ok(out) => {
                state.commit(p);
                Ok(out)
            }
            Err(e) => {
                state.rollback(base)?;
                Err(e)
            }
        }
    }

    /// Per-head encoder outputs for `rows` rows of `h1`/`h2`.
    fn auto_embed_graph(&self, g: &Graph<T>, h1: Var, h2: Var) -> Result<Vec<Var>> {
        let k_heads = self.config.heads;
        let rows = g.shape(h1)[0];
        let split = k_heads / 2;
        let projected = self
            .mlps
            .iter()
            .enumerate()
            .map(|(k, mlp)| {
                let src = if k < split { h1 } else { h2 };
                let y = g.silu(mlp.forward(g, &self.store, src)?)?;
                Ok(g.add(src, y)?)
            })
            .collect::<Result<Vec<_>>>()?;
        if !self.config.use_auto_embedding {
            return projected
                .into_iter()
                .enumerate()
                .map(|(k, h)| match self.pe {
                    Some(pe) => {
                        let pe_rows = g.gather_rows(g.param(self.store.get(pe)), &vec![k; rows])?;
                        Ok(g.add(h, pe_rows)?)
                    }
                    None => Ok(h),
                })
                .collect();
        }
        // Stack head-major, then reorder so each time step's K rows are contiguous.
        let mut stacked = projected[0];
        for &h in &projected[1..] {
            stacked = g.concat_rows(stacked, h)?;
        }
        let perm: Vec<usize> = (0..rows * k_heads)
            .map(|i| (i % k_heads) * rows + i / k_heads)
            .collect();
        let mut x = g.gather_rows(stacked, &perm)?;
        if let Some(pe) = self.pe {
            let idx: Vec<usize> = (0..rows * k_heads).map(|i| i % k_heads).collect();
            x = g.add(x, g.gather_rows(g.param(self.store.get(pe)), &idx)?)?;
        }
        x = self.encode(g, x)?;
        (0..k_heads)
            .map(|k| {
                let idx: Vec<usize> = (0..rows).map(|p| p * k_heads + k).collect();
                Ok(g.gather_rows(x, &idx)?)
            })
            .collect()
    }

    /// Bidirectional encoder over `[rows * K, d]`, attention confined to each step's K rows.
    fn encode(&self, g: &Graph<T>, mut x: Var) -> Result<Var> {
        for block in &self.encoder {
            x = block.forward(g, &self.store, x, AttnMask::Block(self.config.heads), None)?;
        }
        Ok(x)
    }

    fn head_graph(&self, g: &Graph<T>, k: usize, x: Var) -> Result<Var> {
        Ok(match self.heads[k] {
            LmHead::Full(w) => g.matmul(x, g.param(self.store.get(w)))?,
            LmHead::LowRank(a, b) => {
                let z = g.matmul(x, g.param(self.store.get(a)))?;
                g.matmul(z, g.param(self.store.get(b)))?
            }
        })
    }

    pub(crate) fn forward_graph(
        &self,
        g: &Graph<T>,
        hidden: Var,
        next_tokens: &[usize],
        state: Option<&mut DraftState<T>>,
        rows: Rows,
    ) -> Result<DraftVars> {
        let (mut h1, mut h2) = self.adapt_graph(g, hidden, next_tokens, state)?;
        if rows == Rows::Last {
            let last = [next_tokens.len() - 1];
            let same = h1 == h2;
            h1 = g.gather_rows(h1, &last)?;
            h2 = if same { h1 } else { g.gather_rows(h2, &last)? };
        }
        let attn_o = self.auto_embed_graph(g, h1, h2)?;
        let logits = attn_o
            .iter()
            .enumerate()
            .map(|(k, &x)| self.head_graph(g, k, x))
            .collect::<Result<Vec<_>>>()?;
        Ok(DraftVars {
            h1,
            h2,
            attn_o,
            logits,
        })
    }

    /// Training forward over a whole sequence without caches.
    ///
    /// Row `t` of `hidden` is the target's hidden state at step `t` and
    /// `next_tokens[t]` the token that followed it. Returns one `[P, V]` logits
    /// var per head.
    pub fn forward_batch(&self, g: &Graph<T>, hidden: Var, next_tokens: &[usize]) -> Result<Vec<Var>> {
        Ok(self.forward_graph(g, hidden, next_tokens, None, Rows::All)?.logits)
    }

    /// Feeds one step through the adaptation layers, extending the state by one.
    pub fn adapt(
        &self,
        h_t: &[T],
        next_token: usize,
        state: &mut DraftState<T>,
    ) -> Result<(Tensor<T>, Tensor<T>)> {
        self.check_hidden("adapt", h_t)?;
        let g = Graph::inference();
        let h = g.constant(Tensor::new(vec![1, self.dim], h_t.to_vec())?);
        let (h1, h2) = self.adapt_graph(&g, h, &[next_token], Some(state))?;
        let flat = |v: Var| (*g.value(v)).clone().reshape(vec![self.dim]);
        Ok((flat(h1)?, flat(h2)?))
    }

    /// Projects the adapted states into `K` head inputs, `[K, d]`.
    pub fn auto_embed(&self, h1: &[T], h2: &[T]) -> Result<Tensor<T>> {
        self.check_hidden("auto_embed", h1)?;
        self.check_hidden("auto_embed", h2)?;
        let g = Graph::inference();
        let a = g.constant(Tensor::new(vec![1, self.dim], h1.to_vec())?);
        let b = g.constant(Tensor::new(vec![1, self.dim], h2.to_vec())?);
        let rows = self.auto_embed_graph(&g, a, b)?;
        let mut data = Vec::with_capacity(self.config.heads * self.dim);
        for r in rows {
            data.extend_from_slice(g.value(r).data());
        }
        Ok(Tensor::new(vec![self.config.heads, self.dim], data)?)
    }

    /// Maps row `k` of `attn_o` through head `k`.
    pub fn head_logits(&self, attn_o: &Tensor<T>) -> Result<DraftOutput<T>> {
        if attn_o.shape() != [self.config.heads, self.dim] {
            return Err(shape_err(
                "head_logits",
                format!("attn_o {:?} for K={} d={}", attn_o.shape(), self.config.heads, self.dim),
            )
            .into());
        }
        let g = Graph::inference();
        let x = g.constant(attn_o.clone());
        let logits = (0..self.config.heads)
            .map(|k| {
                let row = g.gather_rows(x, &[k])?;
                self.head_graph(&g, k, row)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(self.output(&g, &logits))
    }

    fn output(&self, g: &Graph<T>, logits: &[Var]) -> DraftOutput<T> {
        let mut data = Vec::with_capacity(self.config.heads * self.vocab);
        for &l in logits {
            let v = g.value(l);
            data.extend_from_slice(v.row(v.rows() - 1));
        }
        let d_logits = Tensor::new(vec![self.config.heads, self.vocab], data).expect("K x V");
        DraftOutput::from_logits(d_logits, &self.config.top_k_per_head).expect("K rows")
    }

    /// One drafting step: adapt, auto-embed and heads.
    pub fn draft(&self, h_t: &[T], next_token: usize, state: &mut DraftState<T>) -> Result<DraftOutput<T>> {
        self.check_hidden("draft", h_t)?;
        let hidden = Tensor::new(vec![1, self.dim], h_t.to_vec())?;
        self.advance(&hidden, &[next_token], state)
    }

    /// Feeds several consecutive steps (`hidden` is `[n, d]`) and drafts from the last.
    pub fn advance(
        &self,
        hidden: &Tensor<T>,
        next_tokens: &[usize],
        state: &mut DraftState<T>,
    ) -> Result<DraftOutput<T>> {
        let g = Graph::inference();
        let h = g.constant(hidden.clone());
        let vars = self.forward_graph(&g, h, next_tokens, Some(state), Rows::Last)?;
        Ok(self.output(&g, &vars.logits))
    }

    /// Uncached recomputation of the draft at the last of `next_tokens.len()` steps.
    pub fn draft_uncached(&self, hidden: &Tensor<T>, next_tokens: &[usize]) -> Result<DraftOutput<T>> {
        let g = Graph::inference();
        let h = g.constant(hidden.clone());
        let vars = self.forward_graph(&g, h, next_tokens, None, Rows::Last)?;
        Ok(self.output(&g, &vars.logits))
    }

    pub fn cast<U: Float>(&self) -> Drafter<U> {
        Drafter {
            config: self.config.clone(),
            dim: self.dim,
            vocab: self.vocab,
            max_len: self.max_len,
            embed: Arc::new(self.embed.cast()),
            store: self.store.cast(),
            sal1: self.sal1.clone(),
            sal2: self.sal2.clone(),
            mlps: self.mlps.clone(),
            pe: self.pe,
            encoder: self.encoder.clone(),
            heads: self.heads.clone(),
        }
    }

    pub fn save_into(&self, ck: &mut Checkpoint<T>) {
        ck.add_store(DRAFTER_PREFIX, &self.store);
    }

    pub fn load_from(&mut self, ck: &Checkpoint<T>) -> Result<()> {
        Ok(ck.load_into(DRAFTER_PREFIX, &mut self.store)?)
    }

    /// Zeroes both residual branches of every adaptation layer.
    pub fn zero_sal_branches(&mut self) {
        for sal in [&self.sal1, &self.sal2].into_iter().flatten() {
            sal.block.zero_branches(&mut self.store);
        }
    }

    #[cfg(test)]
    pub(crate) fn sal_parts(&self, i: usize) -> Option<(&Linear, &RmsNorm)> {
        let sal = if i == 1 { self.sal1.as_ref() } else { self.sal2.as_ref() };
        sal.map(|s| (&s.fc, &s.norm))
    }
}
