use std::sync::Arc;

use rand::Rng;

use crate::drafter::DraftOutput;
use crate::error::{Error, Result};
use crate::model::{sample_weights, tempered_probs};
use crate::numerics::{argmax, Float};

use super::topology::TreeTopology;

/// Row-major `n x n` mask with `mask[i][j]` true iff `j` is `i` or one of its ancestors.
pub fn build_mask(topology: &TreeTopology) -> Vec<bool> {
    let n = topology.node_count();
    let mut mask = vec![false; n * n];
    for i in 0..n {
        mask[i * n + i] = true;
        if let Some(p) = topology.parent(i) {
            // Parents precede children, so row `p` is already complete.
            for j in 0..p + 1 {
                mask[i * n + j] = mask[p * n + j];
            }
        }
    }
    mask
}

/// A topology filled with concrete candidate tokens, ready for one masked target forward.
#[derive(Debug, Clone)]
pub struct DraftTree {
    topology: Arc<TreeTopology>,
    tokens: Vec<usize>,
    probs: Vec<f64>,
    positions: Vec<usize>,
    mask: Arc<Vec<bool>>,
    /// Per node, the distribution its token was drawn from; set only for sampled chains.
    proposals: Option<Vec<Vec<f64>>>,
}

impl DraftTree {
    pub fn topology(&self) -> &TreeTopology {
        &self.topology
    }

    pub fn node_count(&self) -> usize {
        self.tokens.len()
    }

    pub fn tokens(&self) -> &[usize] {
        &self.tokens
    }

    /// Draft probability of each node's token; 1 for the root.
    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn positions(&self) -> &[usize] {
        &self.positions
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn proposal(&self, node: usize) -> Option<&[f64]> {
        self.proposals.as_ref().map(|p| p[node].as_slice())
    }

    /// The root alone at position `prefix_len`.
    pub fn root_only(root: usize, prefix_len: usize) -> Self {
        Self {
            topology: Arc::new(TreeTopology::root_only()),
            tokens: vec![root],
            probs: vec![1.0],
            positions: vec![prefix_len],
            mask: Arc::new(vec![true]),
            proposals: None,
        }
    }
}

/// Fills `topology` from the heads' top-k lists: a node at depth `k` with choice
/// `c` takes head `k`'s `c`-th most probable token.
pub fn expand_tree<T: Float>(
    draft: &DraftOutput<T>,
    topology: &Arc<TreeTopology>,
    last_token: usize,
    prefix_len: usize,
) -> Result<DraftTree> {
    if topology.depth_max() > draft.heads() {
        return Err(Error::Topology(format!(
            "depth {} exceeds {} heads",
            topology.depth_max(),
            draft.heads()
        )));
    }
    let n = topology.node_count();
    let mut tokens = Vec::with_capacity(n);
    let mut probs = Vec::with_capacity(n);
    tokens.push(last_token);
    probs.push(1.0);
    for node in 1..n {
        let k = topology.depth(node) - 1;
        let c = topology.choice(node).expect("non-root");
        let &(tok, p) = draft.topk[k].get(c).ok_or_else(|| {
            Error::Topology(format!(
                "node {node} takes choice {c} of head {} which supplies only {}",
                k + 1,
                draft.topk[k].len()
            ))
        })?;
        tokens.push(tok);
        probs.push(p);
    }
    let positions = (0..n).map(|i| prefix_len + topology.depth(i)).collect();
    Ok(DraftTree {
        topology: Arc::clone(topology),
        tokens,
        probs,
        positions,
        mask: Arc::new(build_mask(topology)),
        proposals: None,
    })
}

/// Distribution used for sampling at `temperature`: one-hot argmax at zero.
pub fn distribution<T: Float>(logits: &[T], temperature: f64) -> Vec<f64> {
    if temperature == 0.0 {
        let mut p = vec![0.0; logits.len()];
        p[argmax(logits)] = 1.0;
        p
    } else {
        tempered_probs(logits, temperature)
    }
}

/// A chain of `depth` tokens, the `k`-th drawn from head `k` at `temperature`.
pub fn sample_chain<T: Float>(
    draft: &DraftOutput<T>,
    depth: usize,
    last_token: usize,
    prefix_len: usize,
    temperature: f64,
    rng: &mut impl Rng,
) -> Result<DraftTree> {
    if depth > draft.heads() {
        return Err(Error::Topology(format!("depth {depth} exceeds {} heads", draft.heads())));
    }
    if !(temperature >= 0.0) {
        return Err(Error::NegativeTemperature(temperature));
    }
    let topology = Arc::new(TreeTopology::chain(depth));
    let mut tokens = vec![last_token];
    let mut probs = vec![1.0];
    let mut proposals = vec![Vec::new()];
    for k in 0..depth {
        let q = distribution(draft.d_logits.row(k), temperature);
        let tok = sample_weights(&q, rng);
        tokens.push(tok);
        probs.push(q[tok]);
        proposals.push(q);
    }
    Ok(DraftTree {
        mask: Arc::new(build_mask(&topology)),
        topology,
        tokens,
        probs,
        positions: (0..=depth).map(|d| prefix_len + d).collect(),
        proposals: Some(proposals),
    })
}
