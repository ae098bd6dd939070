use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::drafter::Drafter;
use crate::error::{Error, Result};
use crate::model::TargetModel;
use crate::numerics::{AttnMask, Float, Graph, Tensor};

use super::objective::{batch_loss, loss_positions, LossWeights, Losses, TeacherSeq};
use super::optim::{optimizer_step, AdamWConfig, OptimState, Schedule};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub warmup_frac: f64,
    /// Share of sequences held out for accuracy measurement.
    pub holdout_frac: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 4,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 0.0,
            batch_size: 2,
            seed: 0,
            lambda1: 1.0,
            lambda2: 1.0,
            warmup_frac: 0.05,
            holdout_frac: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn weights(&self) -> LossWeights {
        LossWeights {
            lambda1: self.lambda1,
            lambda2: self.lambda2,
        }
    }

    fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            beta1: self.beta1,
            beta2: self.beta2,
            weight_decay: self.weight_decay,
            ..AdamWConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.weights().validate()?;
        if self.epochs == 0 || self.batch_size == 0 || !(self.lr > 0.0) {
            return Err(Error::Config("epochs, batch_size and lr must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.holdout_frac) {
            return Err(Error::Config(format!("holdout_frac {} not in [0, 1)", self.holdout_frac)));
        }
        Ok(())
    }
}

/// Language-model pretraining of the target on the corpus before it is frozen.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub warmup_frac: f64,
    pub weight_decay: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            lr: 3e-3,
            batch_size: 4,
            seed: 0,
            warmup_frac: 0.05,
            weight_decay: 0.0,
        }
    }
}

/// Per-head top-n hit counts.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadAccuracy {
    pub top_ns: Vec<usize>,
    /// `hits[k][j]`: positions where head `k` ranked the true token within `top_ns[j]`.
    pub hits: Vec<Vec<usize>>,
    pub positions: usize,
}

impl HeadAccuracy {
    pub fn new(heads: usize, top_ns: &[usize]) -> Self {
        Self {
            top_ns: top_ns.to_vec(),
            hits: vec![vec![0; top_ns.len()]; heads],
            positions: 0,
        }
    }

    /// Scores one head row against the true token.
    pub fn record<T: Float>(&mut self, head: usize, logits: &[T], truth: usize) {
        let r = rank(logits, truth);
        for (j, &n) in self.top_ns.iter().enumerate() {
            if r < n {
                self.hits[head][j] += 1;
            }
        }
    }

    pub fn rate(&self, head: usize, j: usize) -> f64 {
        if self.positions == 0 {
            return 0.0;
        }
        self.hits[head][j] as f64 / self.positions as f64
    }

    pub fn heads(&self) -> usize {
        self.hits.len()
    }
}

/// Position of `token` when `logits` are sorted descending, lower index first on ties.
pub fn rank<T: Float>(logits: &[T], token: usize) -> usize {
    let x = logits[token];
    logits
        .iter()
        .enumerate()
        .filter(|&(j, &y)| y > x || (y == x && j < token))
        .count()
}

/// Per-step head logits over a teacher-forced sequence.
pub trait HeadScorer<T: Float> {
    fn heads(&self) -> usize;

    /// One `[L - 1, V]` tensor per head; row `t` is the prediction made at step `t`.
    fn score(&self, seq: &TeacherSeq<T>) -> Result<Vec<Tensor<T>>>;
}

impl<T: Float> HeadScorer<T> for Drafter<T> {
    fn heads(&self) -> usize {
        self.config().heads
    }

    fn score(&self, seq: &TeacherSeq<T>) -> Result<Vec<Tensor<T>>> {
        let l = seq.len();
        let g = Graph::inference();
        let rows: Vec<usize> = (0..l - 1).collect();
        let hidden = g.gather_rows(g.constant_shared(seq.hidden.clone()), &rows)?;
        let logits = self.forward_batch(&g, hidden, &seq.tokens[1..])?;
        Ok(logits.iter().map(|&v| (*g.value(v)).clone()).collect())
    }
}

/// Accuracy of every head on teacher-forced sequences.
///
/// Head `k` (0-based) at step `t` is scored against token `t + 2 + k`.
pub fn head_accuracy<T: Float>(
    scorer: &impl HeadScorer<T>,
    seqs: &[TeacherSeq<T>],
    top_ns: &[usize],
) -> Result<HeadAccuracy> {
    let heads = scorer.heads();
    let mut acc = HeadAccuracy::new(heads, top_ns);
    for seq in seqs {
        let positions = loss_positions(seq.len(), heads)?;
        let logits = scorer.score(seq)?;
        if logits.len() != heads {
            return Err(Error::Invariant(format!("scorer gave {} heads, expected {heads}", logits.len())));
        }
        for t in positions {
            for (k, v) in logits.iter().enumerate() {
                acc.record(k, v.row(t), seq.tokens[t + 2 + k]);
            }
            acc.positions += 1;
        }
    }
    Ok(acc)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    /// Mean losses over the epoch's batches, each measured before its update.
    pub losses: Losses,
    /// Held-out accuracy after the epoch, `[head][top_n index]`.
    pub accuracy: HeadAccuracy,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub epochs: Vec<EpochStats>,
    pub steps: u64,
}

pub const REPORT_TOP_NS: [usize; 2] = [1, 5];

impl TrainReport {
    pub fn final_accuracy(&self) -> &HeadAccuracy {
        &self.epochs.last().expect("at least one epoch").accuracy
    }

    /// `epoch,alignment_loss,lm_loss,total,head_1_top1,..,head_K_top1,head_1_top5,..`
    pub fn to_csv(&self) -> String {
        let heads = self.final_accuracy().heads();
        let mut s = String::from("epoch,alignment_loss,lm_loss,total");
        for n in REPORT_TOP_NS {
            for k in 1..=heads {
                write!(s, ",head_{k}_top{n}").unwrap();
            }
        }
        s.push('\n');
        for e in &self.epochs {
            write!(
                s,
                "{},{:.6},{:.6},{:.6}",
                e.epoch, e.losses.alignment, e.losses.lm, e.losses.total
            )
            .unwrap();
            for j in 0..REPORT_TOP_NS.len() {
                for k in 0..heads {
                    write!(s, ",{:.6}", e.accuracy.rate(k, j)).unwrap();
                }
            }
            s.push('\n');
        }
        s
    }
}

/// Training and held-out sequences: the final `holdout_frac` share is held out,
/// at least one sequence is kept for training, and with nothing held out both
/// halves are the whole corpus.
pub fn holdout_split(corpus: &[Vec<usize>], holdout_frac: f64) -> (&[Vec<usize>], &[Vec<usize>]) {
    let n = corpus.len();
    let hold = ((holdout_frac * n as f64).round() as usize).min(n.saturating_sub(1));
    if hold == 0 {
        return (corpus, corpus);
    }
    corpus.split_at(n - hold)
}

/// Trains the drafter against the frozen target with teacher forcing.
///
/// The final share of `corpus` given by `holdout_frac` is held out and used only
/// for the per-epoch accuracy table; with no held-out sequences the training
/// set is scored instead.
pub fn train<T: Float>(
    corpus: &[Vec<usize>],
    model: &TargetModel<T>,
    drafter: &mut Drafter<T>,
    config: &TrainConfig,
) -> Result<TrainReport> {
    config.validate()?;
    if !model.is_frozen() {
        let live: Vec<&str> = model
            .store()
            .iter()
            .filter(|p| p.requires_grad())
            .map(|p| p.name())
            .take(3)
            .collect();
        return Err(Error::TargetNotFrozen(live.join(", ")));
    }
    if corpus.is_empty() {
        return Err(Error::CorpusTooShort("no sequences".into()));
    }
    let heads = drafter.config().heads;
    for seq in corpus {
        loss_positions(seq.len(), heads)?;
    }
    let (train_set, holdout) = holdout_split(corpus, config.holdout_frac);
    let teach = |seqs: &[Vec<usize>]| -> Result<Vec<TeacherSeq<T>>> {
        seqs.iter().map(|s| TeacherSeq::new(model, s)).collect()
    };
    let train_teachers = teach(train_set)?;
    let holdout_teachers = teach(holdout)?;

    let batches_per_epoch = train_teachers.len().div_ceil(config.batch_size);
    let total = (config.epochs * batches_per_epoch) as u64;
    let schedule = Schedule::new(config.lr, config.warmup_frac, total)?;
    let mut opt = OptimState::new(drafter.store(), config.adamw());
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..train_teachers.len()).collect();
    let weights = config.weights();
    let mut step = 0u64;
    let mut epochs = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut sums = Losses::<f64>::default();
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<TeacherSeq<T>> = chunk.iter().map(|&i| train_teachers[i].clone()).collect();
            let g = Graph::new();
            let losses = batch_loss(&g, drafter, &batch, weights)?;
            sums.total += g.value(losses.total).item().as_f64();
            sums.alignment += g.value(losses.alignment).item().as_f64();
            sums.lm += g.value(losses.lm).item().as_f64();
            let grads = g.gradients(losses.total)?;
            drop(g);
            drafter.store_mut().accumulate(&grads);
            optimizer_step(drafter.store_mut(), &mut opt, schedule.lr_at(step)?)?;
            drafter.store_mut().zero_grad();
            step += 1;
        }
        let n = batches_per_epoch as f64;
        epochs.push(EpochStats {
            epoch: epoch + 1,
            losses: Losses {
                total: sums.total / n,
                alignment: sums.alignment / n,
                lm: sums.lm / n,
            },
            accuracy: head_accuracy(drafter, &holdout_teachers, &REPORT_TOP_NS)?,
        });
    }
    Ok(TrainReport { epochs, steps: step })
}

/// Next-token training of the target itself. Returns the mean loss of each epoch.
pub fn pretrain_target<T: Float>(
    corpus: &[Vec<usize>],
    model: &mut TargetModel<T>,
    config: &PretrainConfig,
) -> Result<Vec<f64>> {
    if config.epochs == 0 || config.batch_size == 0 || !(config.lr > 0.0) {
        return Err(Error::Config("pretrain epochs, batch_size and lr must be positive".into()));
    }
    if corpus.is_empty() || corpus.iter().any(|s| s.len() < 2) {
        return Err(Error::CorpusTooShort("pretraining needs sequences of at least 2 tokens".into()));
    }
    let max = model.config().max_seq_len;
    if let Some(s) = corpus.iter().find(|s| s.len() - 1 > max) {
        return Err(Error::Overflow {
            needed: s.len() - 1,
            max,
        });
    }
    let batches = corpus.len().div_ceil(config.batch_size);
    let schedule = Schedule::new(config.lr, config.warmup_frac, (config.epochs * batches) as u64)?;
    let adamw = AdamWConfig {
        weight_decay: config.weight_decay,
        ..AdamWConfig::default()
    };
    let mut opt = OptimState::new(model.store(), adamw);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let mut step = 0;
    let mut out = Vec::with_capacity(config.epochs);
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let g = Graph::new();
            let inv = T::lit(1.0 / chunk.len() as f64);
            let mut total = None;
            for &i in chunk {
                let s = &corpus[i];
                let inputs = &s[..s.len() - 1];
                let positions: Vec<usize> = (0..inputs.len()).collect();
                let (_, logits) = model.forward_graph(&g, inputs, &positions, AttnMask::Causal, None)?;
                let ce = g.scale(g.cross_entropy_hard(logits, &s[1..])?, inv)?;
                total = Some(match total {
                    Some(t) => g.add(t, ce)?,
                    None => ce,
                });
            }
            let total = total.expect("non-empty chunk");
            sum += g.value(total).item().as_f64();
            let grads = g.gradients(total)?;
            drop(g);
            model.store_mut().accumulate(&grads);
            optimizer_step(model.store_mut(), &mut opt, schedule.lr_at(step)?)?;
            model.store_mut().zero_grad();
            step += 1;
        }
        out.push(sum / batches as f64);
    }
    Ok(out)
}
