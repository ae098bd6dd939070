use std::sync::Arc;

use rand::Rng;

use crate::drafter::{DraftOutput, DraftState, Drafter};
use crate::error::{Error, Result};
use crate::model::{sample, TargetModel};
use crate::numerics::{Float, Tensor};

use super::topology::TreeTopology;
use super::tree::{expand_tree, sample_chain, DraftTree};
use super::verify::{verify, VerifyRule};

/// Source of per-head drafts during speculative decoding.
pub trait Proposer<T: Float> {
    type State;

    fn heads(&self) -> usize;

    /// Candidate list length each head supplies.
    fn top_k(&self) -> Vec<usize>;

    fn new_state(&self) -> Self::State;

    /// Steps consumed by `state`, when the proposer tracks them.
    fn state_len(&self, state: &Self::State) -> Option<usize>;

    /// Consumes newly committed steps and drafts from the last one.
    ///
    /// Row `i` of `hidden` is the target hidden state of a committed position and
    /// `next_tokens[i]` the token that followed it. `context` is the whole committed
    /// sequence, ending with `next_tokens.last()`.
    fn propose(
        &self,
        context: &[usize],
        hidden: &Tensor<T>,
        next_tokens: &[usize],
        state: &mut Self::State,
    ) -> Result<DraftOutput<T>>;
}

impl<T: Float> Proposer<T> for Drafter<T> {
    type State = DraftState<T>;

    fn heads(&self) -> usize {
        self.config().heads
    }

    fn top_k(&self) -> Vec<usize> {
        self.config().top_k_per_head.clone()
    }

    fn new_state(&self) -> DraftState<T> {
        Drafter::new_state(self)
    }

    fn state_len(&self, state: &DraftState<T>) -> Option<usize> {
        Some(state.len())
    }

    fn propose(
        &self,
        _context: &[usize],
        hidden: &Tensor<T>,
        next_tokens: &[usize],
        state: &mut DraftState<T>,
    ) -> Result<DraftOutput<T>> {
        self.advance(hidden, next_tokens, state)
    }
}

/// Test hook whose head `k` reproduces the target's greedy continuation `k + 1` tokens ahead.
#[derive(Debug, Clone)]
pub struct OracleProposer<'a, T: Float = f32> {
    model: &'a TargetModel<T>,
    heads: usize,
    top_k: Vec<usize>,
}

impl<'a, T: Float> OracleProposer<'a, T> {
    pub fn new(model: &'a TargetModel<T>, heads: usize, top_k: Vec<usize>) -> Result<Self> {
        if top_k.len() != heads || top_k.contains(&0) {
            return Err(Error::Config(format!("top_k {top_k:?} for {heads} heads")));
        }
        Ok(Self { model, heads, top_k })
    }

    /// Target logits of the `heads` greedy steps following `context`.
    pub fn greedy_logits(&self, context: &[usize]) -> Result<Tensor<T>> {
        let v = self.model.config().vocab_size;
        let max = self.model.config().max_seq_len;
        if context.len() > max {
            // No step can follow a full context; any draft will do.
            return Ok(Tensor::zeros(vec![self.heads, v]));
        }
        let mut cache = self.model.new_cache();
        let mut data = Vec::with_capacity(self.heads * v);
        let mut out = self.model.forward(context, &mut cache, None, None)?;
        for k in 0..self.heads {
            let row = out.logits.row(out.logits.rows() - 1).to_vec();
            let next = crate::numerics::argmax(&row);
            data.extend_from_slice(&row);
            if k + 1 < self.heads && cache.len() < max {
                out = self.model.forward(&[next], &mut cache, None, None)?;
            }
        }
        Ok(Tensor::new(vec![self.heads, v], data)?)
    }
}

impl<T: Float> Proposer<T> for OracleProposer<'_, T> {
    type State = ();

    fn heads(&self) -> usize {
        self.heads
    }

    fn top_k(&self) -> Vec<usize> {
        self.top_k.clone()
    }

    fn new_state(&self) {}

    fn state_len(&self, _state: &()) -> Option<usize> {
        None
    }

    fn propose(
        &self,
        context: &[usize],
        _hidden: &Tensor<T>,
        _next_tokens: &[usize],
        _state: &mut (),
    ) -> Result<DraftOutput<T>> {
        DraftOutput::from_logits(self.greedy_logits(context)?, &self.top_k)
    }
}

#[derive(Debug, Clone)]
pub struct SpecConfig {
    pub topology: Arc<TreeTopology>,
    pub rule: VerifyRule,
    pub temperature: f64,
}

impl SpecConfig {
    pub fn new(topology: TreeTopology, rule: VerifyRule, temperature: f64) -> Self {
        Self {
            topology: Arc::new(topology),
            rule,
            temperature,
        }
    }

    /// Greedy or typical acceptance over `topology`, chosen by temperature.
    pub fn tree(topology: TreeTopology, temperature: f64) -> Self {
        Self::new(topology, VerifyRule::for_temperature(temperature), temperature)
    }
}

/// One target verification forward.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StepRecord {
    pub step: usize,
    /// Tree nodes verified, root included.
    pub nodes: usize,
    pub accepted_len: usize,
    pub bonus: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Generation {
    /// New tokens, at most `max_new_tokens`.
    pub tokens: Vec<usize>,
    /// Every verification forward; the prompt prefill is not included.
    pub steps: Vec<StepRecord>,
}

impl Generation {
    /// Tokens emitted per verification forward, counted before truncation to the budget.
    pub fn tokens_per_step(&self) -> f64 {
        if self.steps.is_empty() {
            return 0.0;
        }
        self.emitted_total() as f64 / self.steps.len() as f64
    }

    pub fn emitted_total(&self) -> usize {
        self.steps.iter().map(|s| s.accepted_len + 1).sum()
    }
}

fn check_prompt<T: Float>(model: &TargetModel<T>, prompt: &[usize]) -> Result<()> {
    if prompt.is_empty() {
        return Err(Error::EmptyInput);
    }
    let max = model.config().max_seq_len;
    if prompt.len() > max {
        return Err(Error::Overflow {
            needed: prompt.len(),
            max,
        });
    }
    model.check_tokens(prompt)
}

/// Plain decoding: one target forward per token. Stops early when the sequence is full.
pub fn generate_ar<T: Float>(
    model: &TargetModel<T>,
    prompt: &[usize],
    max_new_tokens: usize,
    temperature: f64,
    rng: &mut impl Rng,
) -> Result<Generation> {
    check_prompt(model, prompt)?;
    let mut cache = model.new_cache();
    let p = prompt.len();
    if p > 1 {
        model.forward(&prompt[..p - 1], &mut cache, None, None)?;
    }
    let mut root = prompt[p - 1];
    let mut gen = Generation::default();
    while gen.tokens.len() < max_new_tokens && cache.len() < model.config().max_seq_len {
        let out = model.forward(&[root], &mut cache, None, None)?;
        root = sample(out.logits.row(0), temperature, rng)?;
        gen.steps.push(StepRecord {
            step: gen.steps.len(),
            nodes: 1,
            accepted_len: 0,
            bonus: root,
        });
        gen.tokens.push(root);
    }
    Ok(gen)
}

/// Speculative decoding: each step drafts a tree, verifies it in one masked
/// forward and commits the accepted path plus the bonus token.
///
/// Falls back to a root-only step when the draft tree does not fit; stops early
/// when not even the root fits.
pub fn generate_speculative<T: Float, P: Proposer<T>>(
    model: &TargetModel<T>,
    proposer: &P,
    prompt: &[usize],
    max_new_tokens: usize,
    config: &SpecConfig,
    rng: &mut impl Rng,
) -> Result<Generation> {
    check_prompt(model, prompt)?;
    let topology = &config.topology;
    match config.rule {
        VerifyRule::Chain => {
            if topology.depth_max() > proposer.heads() || topology.leaf_count() != 1 {
                return Err(Error::Topology("chain rule needs a single path within the head count".into()));
            }
        }
        _ => topology.check_compatible(proposer.heads(), &proposer.top_k())?,
    }
    let max_len = model.config().max_seq_len;
    let mut cache = model.new_cache();
    let mut state = proposer.new_state();
    let mut context = prompt.to_vec();
    let p = prompt.len();
    let mut pending = None;
    if p > 1 {
        let out = model.forward(&prompt[..p - 1], &mut cache, None, None)?;
        pending = Some(proposer.propose(&context, &out.hidden, &prompt[1..], &mut state)?);
    }
    let mut gen = Generation::default();
    while gen.tokens.len() < max_new_tokens {
        let c = cache.len();
        let root = *context.last().expect("non-empty");
        let tree = match &pending {
            Some(draft) if c + topology.node_count() <= max_len => match config.rule {
                VerifyRule::Chain => {
                    sample_chain(draft, topology.depth_max(), root, c, config.temperature, rng)?
                }
                _ => expand_tree(draft, topology, root, c)?,
            },
            _ if c < max_len => DraftTree::root_only(root, c),
            _ => break,
        };
        let out = model.forward(tree.tokens(), &mut cache, Some(tree.mask()), Some(tree.positions()))?;
        let result = verify(&tree, &out.logits, config.rule, config.temperature, rng)?;
        cache.select_path(c, &result.accepted_nodes)?;

        let emitted = result.emitted(&tree);
        let d = out.hidden.cols();
        let mut rows = Vec::with_capacity(result.accepted_nodes.len() * d);
        for &n in &result.accepted_nodes {
            rows.extend_from_slice(out.hidden.row(n));
        }
        let hidden = Tensor::new(vec![result.accepted_nodes.len(), d], rows)?;
        context.extend_from_slice(&emitted);
        pending = Some(proposer.propose(&context, &hidden, &emitted, &mut state)?);
        if let Some(len) = proposer.state_len(&state) {
            if len != cache.len() {
                return Err(Error::CacheState(format!(
                    "draft state has {len} steps, target cache {}",
                    cache.len()
                )));
            }
        }

        gen.steps.push(StepRecord {
            step: gen.steps.len(),
            nodes: tree.node_count(),
            accepted_len: result.accepted_len,
            bonus: result.bonus_token,
        });
        let room = max_new_tokens - gen.tokens.len();
        gen.tokens.extend(emitted.into_iter().take(room));
    }
    Ok(gen)
}
