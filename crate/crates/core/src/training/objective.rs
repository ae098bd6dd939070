use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::drafter::Drafter;
use crate::error::{Error, Result};
use crate::model::TargetModel;
use crate::numerics::{shape_err, Float, Graph, Tensor, Var};

/// Weights of the alignment and language-modelling terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda1: 1.0,
            lambda2: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda1 >= 0.0 && self.lambda2 >= 0.0 && self.lambda1 + self.lambda2 > 0.0) {
            return Err(Error::Config(format!(
                "loss weights must be non-negative with a positive sum, got {} and {}",
                self.lambda1, self.lambda2
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Losses<V = f64> {
    pub total: V,
    pub alignment: V,
    pub lm: V,
}

fn log_softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
    row.iter().map(|x| x - lse).collect()
}

/// Per-step losses of `K` head rows: soft cross-entropy against the target's
/// distribution and hard cross-entropy against the true tokens, each averaged over heads.
pub fn compute_losses<T: Float>(
    d_logits: &Tensor<T>,
    target_logits: &Tensor<T>,
    gt: &[usize],
    weights: LossWeights,
) -> Result<Losses> {
    if d_logits.shape() != target_logits.shape() || d_logits.shape().len() != 2 || gt.len() != d_logits.rows() {
        return Err(shape_err(
            "compute_losses",
            format!(
                "draft {:?}, target {:?}, {} labels",
                d_logits.shape(),
                target_logits.shape(),
                gt.len()
            ),
        )
        .into());
    }
    let v = d_logits.cols();
    if let Some(&token) = gt.iter().find(|&&t| t >= v) {
        return Err(Error::TokenOutOfRange { token, vocab: v });
    }
    let k = gt.len() as f64;
    let (mut alignment, mut lm) = (0.0, 0.0);
    for (i, &label) in gt.iter().enumerate() {
        let to_f64 = |r: &[T]| r.iter().map(|x| x.as_f64()).collect::<Vec<_>>();
        let logq = log_softmax(&to_f64(d_logits.row(i)));
        let logp = log_softmax(&to_f64(target_logits.row(i)));
        alignment -= logp.iter().zip(&logq).map(|(lp, lq)| lp.exp() * lq).sum::<f64>() / k;
        lm -= logq[label] / k;
    }
    Ok(Losses {
        total: weights.lambda1 * alignment + weights.lambda2 * lm,
        alignment,
        lm,
    })
}

/// Frozen-target outputs for one training sequence.
#[derive(Debug, Clone)]
pub struct TeacherSeq<T: Float = f32> {
    pub tokens: Vec<usize>,
    /// `[L, d]` final hidden states.
    pub hidden: Arc<Tensor<T>>,
    /// `[L, V]` next-token distributions.
    pub probs: Arc<Tensor<T>>,
}

impl<T: Float> TeacherSeq<T> {
    pub fn new(model: &TargetModel<T>, tokens: &[usize]) -> Result<Self> {
        let out = model.forward_full(tokens)?;
        let probs = out.logits.softmax(1)?;
        Ok(Self {
            tokens: tokens.to_vec(),
            hidden: Arc::new(out.hidden),
            probs: Arc::new(probs),
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Drafter positions that contribute to the loss: every step with all `heads` targets in range.
pub fn loss_positions(seq_len: usize, heads: usize) -> Result<std::ops::RangeInclusive<usize>> {
    if seq_len < heads + 2 {
        return Err(Error::CorpusTooShort(format!(
            "sequence of {seq_len} tokens; {heads} heads need at least {}",
            heads + 2
        )));
    }
    Ok(0..=seq_len - 2 - heads)
}

/// Teacher-forced loss of one sequence as graph vars.
///
/// Step `t` feeds the target hidden state `h_t` with the true next token.
/// Head `i` (1-based) is scored at step `t` against the target distribution
/// for token `t + 1 + i` and against that token itself.
pub fn sequence_loss<T: Float>(
    g: &Graph<T>,
    drafter: &Drafter<T>,
    seq: &TeacherSeq<T>,
    weights: LossWeights,
) -> Result<Losses<Var>> {
    let heads = drafter.config().heads;
    let l = seq.len();
    let positions: Vec<usize> = loss_positions(l, heads)?.collect();
    let hidden = g.gather_rows(g.constant_shared(Arc::clone(&seq.hidden)), &(0..l - 1).collect::<Vec<_>>())?;
    let logits = drafter.forward_batch(g, hidden, &seq.tokens[1..])?;
    let v = drafter.vocab_size();
    let inv_k = T::lit(1.0 / heads as f64);
    let mut alignment = None;
    let mut lm = None;
    for (k, &head_logits) in logits.iter().enumerate() {
        let i = k + 1;
        let rows = g.gather_rows(head_logits, &positions)?;
        let mut target = Vec::with_capacity(positions.len() * v);
        for &t in &positions {
            target.extend_from_slice(seq.probs.row(t + i));
        }
        let target = Arc::new(Tensor::new(vec![positions.len(), v], target)?);
        let labels: Vec<usize> = positions.iter().map(|&t| seq.tokens[t + 1 + i]).collect();
        let a = g.scale(g.cross_entropy_soft(rows, target)?, inv_k)?;
        let h = g.scale(g.cross_entropy_hard(rows, &labels)?, inv_k)?;
        alignment = Some(match alignment {
            Some(acc) => g.add(acc, a)?,
            None => a,
        });
        lm = Some(match lm {
            Some(acc) => g.add(acc, h)?,
            None => h,
        });
    }
    let (alignment, lm) = (alignment.expect("K >= 2"), lm.expect("K >= 2"));
    let total = g.add(
        g.scale(alignment, T::lit(weights.lambda1))?,
        g.scale(lm, T::lit(weights.lambda2))?,
    )?;
    Ok(Losses { total, alignment, lm })
}

/// Mean of [`sequence_loss`] over `batch`.
pub fn batch_loss<T: Float>(
    g: &Graph<T>,
    drafter: &Drafter<T>,
    batch: &[TeacherSeq<T>],
    weights: LossWeights,
) -> Result<Losses<Var>> {
    if batch.is_empty() {
        return Err(Error::EmptyInput);
    }
    let inv = T::lit(1.0 / batch.len() as f64);
    let mut acc: Option<Losses<Var>> = None;
    for seq in batch {
        let s = sequence_loss(g, drafter, seq, weights)?;
        acc = Some(match acc {
            None => s,
            Some(a) => Losses {
                total: g.add(a.total, s.total)?,
                alignment: g.add(a.alignment, s.alignment)?,
                lm: g.add(a.lm, s.lm)?,
            },
        });
    }
    let a = acc.expect("non-empty");
    Ok(Losses {
        total: g.scale(a.total, inv)?,
        alignment: g.scale(a.alignment, inv)?,
        lm: g.scale(a.lm, inv)?,
    })
}
