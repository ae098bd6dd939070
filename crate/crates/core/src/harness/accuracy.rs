use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::model::TargetModel;
use crate::numerics::{Float, Tensor};
use crate::training::{head_accuracy, loss_positions, HeadAccuracy, HeadScorer, TeacherSeq};

/// Test hook: every head puts all its mass on the true future token.
#[derive(Debug, Clone, Copy)]
pub struct TruthOracle {
    pub heads: usize,
    pub vocab: usize,
}

impl<T: Float> HeadScorer<T> for TruthOracle {
    fn heads(&self) -> usize {
        self.heads
    }

    fn score(&self, seq: &TeacherSeq<T>) -> Result<Vec<Tensor<T>>> {
        let steps = seq.len() - 1;
        Ok((0..self.heads)
            .map(|k| {
                let mut t = Tensor::zeros(vec![steps, self.vocab]);
                for s in 0..steps {
                    if let Some(&tok) = seq.tokens.get(s + 2 + k) {
                        t.row_mut(s)[tok] = T::one();
                    }
                }
                t
            })
            .collect())
    }
}

/// Heads with independent uniform random logits, seeded per sequence.
#[derive(Debug, Clone, Copy)]
pub struct RandomScorer {
    pub heads: usize,
    pub vocab: usize,
    pub seed: u64,
}

impl<T: Float> HeadScorer<T> for RandomScorer {
    fn heads(&self) -> usize {
        self.heads
    }

    fn score(&self, seq: &TeacherSeq<T>) -> Result<Vec<Tensor<T>>> {
        let key = seq
            .tokens
            .iter()
            .fold(self.seed, |h, &t| h.wrapping_mul(0x100_0000_01b3).wrapping_add(t as u64 + 1));
        let mut rng = ChaCha8Rng::seed_from_u64(key);
        let steps = seq.len() - 1;
        Ok((0..self.heads)
            .map(|_| {
                let data = (0..steps * self.vocab).map(|_| T::lit(rng.gen::<f64>())).collect();
                Tensor::new(vec![steps, self.vocab], data).expect("sized above")
            })
            .collect())
    }
}

/// Per-head top-n accuracy over `sequences`, teacher-forced through the frozen target.
pub fn measure_head_accuracy<T: Float>(
    sequences: &[Vec<usize>],
    model: &TargetModel<T>,
    scorer: &impl HeadScorer<T>,
    top_ns: &[usize],
) -> Result<HeadAccuracy> {
    for s in sequences {
        loss_positions(s.len(), scorer.heads())?;
    }
    let seqs = sequences
        .iter()
        .map(|s| TeacherSeq::new(model, s))
        .collect::<Result<Vec<_>>>()?;
    head_accuracy(scorer, &seqs, top_ns)
}

/// `head,top1,top5,...` table with one row per head.
pub fn accuracy_csv(acc: &HeadAccuracy) -> String {
    let mut s = String::from("head");
    for n in &acc.top_ns {
        s.push_str(&format!(",top{n}"));
    }
    s.push_str(",positions\n");
    for k in 0..acc.heads() {
        s.push_str(&(k + 1).to_string());
        for j in 0..acc.top_ns.len() {
            s.push_str(&format!(",{:.6}", acc.rate(k, j)));
        }
        s.push_str(&format!(",{}\n", acc.positions));
    }
    s
}
