use rand::Rng;

use crate::error::{Error, Result};
use crate::model::sample_weights;
use crate::numerics::{argmax, shape_err, Float, Tensor};

use super::tree::{distribution, DraftTree};

/// Typical-acceptance defaults: posterior floor and entropy scale.
pub const TYPICAL_EPSILON: f64 = 0.09;
pub const TYPICAL_DELTA: f64 = 0.3;

/// How draft tokens are accepted against the target distribution.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum VerifyRule {
    /// Follow the target argmax; requires temperature 0.
    Greedy,
    /// Accept `x` when `p(x) >= min(epsilon, delta * exp(-H(p)))`; requires temperature > 0.
    Typical { epsilon: f64, delta: f64 },
    /// Rejection sampling along a sampled chain; preserves the target distribution.
    Chain,
}

impl VerifyRule {
    pub fn typical() -> Self {
        VerifyRule::Typical {
            epsilon: TYPICAL_EPSILON,
            delta: TYPICAL_DELTA,
        }
    }

    /// Greedy at temperature 0, typical acceptance otherwise.
    pub fn for_temperature(temperature: f64) -> Self {
        if temperature == 0.0 {
            VerifyRule::Greedy
        } else {
            Self::typical()
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            VerifyRule::Greedy => "greedy",
            VerifyRule::Typical { .. } => "typical",
            VerifyRule::Chain => "chain",
        }
    }

    fn check_temperature(&self, temperature: f64) -> Result<()> {
        if !(temperature >= 0.0) {
            return Err(Error::NegativeTemperature(temperature));
        }
        match self {
            VerifyRule::Greedy if temperature != 0.0 => Err(Error::RuleTemperature {
                rule: "greedy",
                requirement: "temperature 0",
            }),
            VerifyRule::Typical { .. } if temperature == 0.0 => Err(Error::RuleTemperature {
                rule: "typical",
                requirement: "temperature > 0",
            }),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VerifyResult {
    /// Accepted nodes from the root (always first) down the tree.
    pub accepted_nodes: Vec<usize>,
    /// Accepted draft tokens, excluding the root.
    pub accepted_len: usize,
    /// Token emitted after the accepted ones: the correction or continuation.
    pub bonus_token: usize,
}

impl VerifyResult {
    pub fn tokens_emitted(&self) -> usize {
        self.accepted_len + 1
    }

    /// Accepted draft tokens followed by the bonus token.
    pub fn emitted(&self, tree: &DraftTree) -> Vec<usize> {
        let mut out: Vec<usize> = self.accepted_nodes[1..].iter().map(|&n| tree.tokens()[n]).collect();
        out.push(self.bonus_token);
        out
    }
}

fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&x| x > 0.0).map(|x| x * x.ln()).sum::<f64>()
}

/// Walks `tree` against the target logits of every node (row `i` from the masked forward).
pub fn verify<T: Float>(
    tree: &DraftTree,
    node_logits: &Tensor<T>,
    rule: VerifyRule,
    temperature: f64,
    rng: &mut impl Rng,
) -> Result<VerifyResult> {
    rule.check_temperature(temperature)?;
    if node_logits.shape().len() != 2 || node_logits.rows() != tree.node_count() {
        return Err(shape_err(
            "verify",
            format!("logits {:?} for {} nodes", node_logits.shape(), tree.node_count()),
        )
        .into());
    }
    let topo = tree.topology();
    let tokens = tree.tokens();
    let mut path = vec![0];
    let mut node = 0;
    let bonus = loop {
        let row = node_logits.row(node);
        let children = topo.children(node);
        match rule {
            VerifyRule::Greedy => {
                let g = argmax(row);
                match children.iter().find(|&&c| tokens[c] == g) {
                    Some(&c) => node = c,
                    None => break g,
                }
            }
            VerifyRule::Typical { epsilon, delta } => {
                let p = distribution(row, temperature);
                let threshold = epsilon.min(delta * (-entropy(&p)).exp());
                let best = children
                    .iter()
                    .copied()
                    .filter(|&c| p[tokens[c]] >= threshold)
                    .fold(None, |best: Option<usize>, c| match best {
                        Some(b) if tree.probs()[b] >= tree.probs()[c] => Some(b),
                        _ => Some(c),
                    });
                match best {
                    Some(c) => node = c,
                    None => break sample_weights(&p, rng),
                }
            }
            VerifyRule::Chain => {
                if children.len() > 1 {
                    return Err(Error::Topology("chain rule needs a single-path tree".into()));
                }
                let p = distribution(row, temperature);
                let Some(&c) = children.first() else {
                    break sample_weights(&p, rng);
                };
                let q = tree
                    .proposal(c)
                    .ok_or_else(|| Error::Topology("chain rule needs sampled proposals".into()))?;
                let x = tokens[c];
                let u: f64 = rng.gen();
                if q[x] > 0.0 && u < p[x] / q[x] {
                    node = c;
                } else {
                    let residual: Vec<f64> = p.iter().zip(q).map(|(a, b)| (a - b).max(0.0)).collect();
                    let total: f64 = residual.iter().sum();
                    break if total > 0.0 {
                        sample_weights(&residual, rng)
                    } else {
                        sample_weights(&p, rng)
                    };
                }
            }
        }
        path.push(node);
    };
    Ok(VerifyResult {
        accepted_len: path.len() - 1,
        accepted_nodes: path,
        bonus_token: bonus,
    })
}
