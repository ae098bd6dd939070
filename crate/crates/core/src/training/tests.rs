use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::drafter::{Drafter, DrafterConfig, Variant};
use crate::error::Error;
use crate::model::{ModelConfig, TargetModel};
use crate::numerics::{Float, GradCheck, Graph, NumericsError, ParamStore, Tensor};

fn model_config(d: usize, v: usize) -> ModelConfig {
    ModelConfig {
        vocab_size: v,
        hidden_dim: d,
        n_layers: 1,
        n_heads: 2,
        ffn_dim: 2 * d,
        max_seq_len: 32,
        norm_eps: 1e-5,
    }
}

fn drafter_config(variant: Variant, d: usize) -> DrafterConfig {
    let mut c = DrafterConfig::variant(variant, d);
    c.sal_heads = 2;
    c.encoder_heads = 2;
    c.sal_ffn_dim = 2 * d;
    c.encoder_ffn_dim = 2 * d;
    c
}

fn frozen_target<T: Float>(d: usize, v: usize, seed: u64) -> TargetModel<T> {
    let mut m = TargetModel::new(model_config(d, v), seed).unwrap();
    m.freeze();
    m
}

fn corpus(n: usize, len: usize, v: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| (0..len).map(|_| rng.gen_range(0..v)).collect()).collect()
}

fn tensor(rows: usize, cols: usize, data: &[f64]) -> Tensor<f64> {
    Tensor::from_f64(vec![rows, cols], data).unwrap()
}

#[test]
fn self_alignment_equals_entropy() {
    let logits = tensor(2, 3, &[0.5, -1.0, 2.0, 0.0, 0.3, -0.2]);
    let l = compute_losses(&logits, &logits, &[2, 0], LossWeights::default()).unwrap();
    let entropy: f64 = (0..2)
        .map(|r| {
            let p = logits.softmax(1).unwrap();
            -p.row(r).iter().map(|x| x * x.ln()).sum::<f64>()
        })
        .sum::<f64>()
        / 2.0;
    assert!((l.alignment - entropy).abs() < 1e-12);
}

#[test]
fn uniform_draft_costs_log_vocab() {
    let v = 256;
    let draft = Tensor::<f64>::zeros(vec![4, v]);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let target = crate::numerics::uniform::<f64>(&mut rng, &[4, v], 3.0);
    let l = compute_losses(&draft, &target, &[1, 7, 200, 255], LossWeights::default()).unwrap();
    let ln = (v as f64).ln();
    assert!((l.alignment - ln).abs() < 1e-12);
    assert!((l.lm - ln).abs() < 1e-12);
    assert!((l.total - 2.0 * ln).abs() < 1e-12);
}

#[test]
fn scalar_loss_oracle() {
    // Two heads over four tokens, worked by hand.
    let draft = tensor(2, 4, &[1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 2.0, 0.0]);
    let target = tensor(2, 4, &[0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 5.0]);
    let w = LossWeights { lambda1: 0.5, lambda2: 2.0 };
    let l = compute_losses(&draft, &target, &[0, 1], w).unwrap();
    let lse0 = (1f64.exp() + 3.0).ln();
    let lse1 = (2f64.exp() + 3.0).ln();
    let q1 = [-lse1, -lse1, 2.0 - lse1, -lse1];
    let p1 = {
        let z = 5f64.exp() + 3.0;
        [1.0 / z, 1.0 / z, 1.0 / z, 5f64.exp() / z]
    };
    let head0 = -(0.25 * (1.0 - lse0) + 0.75 * -lse0);
    let head1 = -(0..4).map(|j| p1[j] * q1[j]).sum::<f64>();
    let align = (head0 + head1) / 2.0;
    let lm = ((lse0 - 1.0) + lse1) / 2.0;
    assert!((l.alignment - align).abs() < 1e-12);
    assert!((l.lm - lm).abs() < 1e-12);
    assert!((l.total - (0.5 * align + 2.0 * lm)).abs() < 1e-12);
}

#[test]
fn compute_losses_rejects_bad_input() {
    let a = tensor(2, 3, &[0.0; 6]);
    let b = tensor(1, 3, &[0.0; 3]);
    assert!(compute_losses(&a, &b, &[0, 1], LossWeights::default()).is_err());
    assert!(matches!(
        compute_losses(&a, &a, &[0, 3], LossWeights::default()),
        Err(Error::TokenOutOfRange { token: 3, vocab: 3 })
    ));
    assert!(LossWeights { lambda1: -1.0, lambda2: 1.0 }.validate().is_err());
}

#[test]
fn loss_positions_cover_full_head_windows() {
    assert_eq!(loss_positions(10, 4).unwrap(), 0..=4);
    assert_eq!(loss_positions(6, 4).unwrap(), 0..=0);
    assert!(matches!(loss_positions(5, 4), Err(Error::CorpusTooShort(_))));
}

/// Store with one parameter and a loss of `sum(w * c)`, so the gradient is `c`.
fn linear_grad(store: &mut ParamStore<f64>, c: &[f64]) {
    let g = Graph::new();
    let w = g.param(store.by_name("w").unwrap());
    let c = g.constant(Tensor::vector(c.to_vec()).unwrap());
    let loss = g.sum(g.mul(w, c).unwrap()).unwrap();
    let grads = g.gradients(loss).unwrap();
    store.zero_grad();
    store.accumulate(&grads);
}

#[test]
fn adamw_matches_hand_formula() {
    let mut store = ParamStore::<f64>::new();
    store.insert("w", Tensor::vector(vec![1.0, -2.0, 0.5]).unwrap()).unwrap();
    let cfg = AdamWConfig {
        weight_decay: 0.1,
        ..AdamWConfig::default()
    };
    let mut state = OptimState::new(&store, cfg);
    let grads = [[0.3, -0.1, 0.0], [0.2, 0.4, -0.5]];
    let lrs = [0.01, 0.02];
    let mut x = [1.0f64, -2.0, 0.5];
    let (mut m, mut v) = ([0.0f64; 3], [0.0f64; 3]);
    for (t, (gr, lr)) in grads.iter().zip(lrs).enumerate() {
        linear_grad(&mut store, gr);
        optimizer_step(&mut store, &mut state, lr).unwrap();
        let t = t as i32 + 1;
        for j in 0..3 {
            m[j] = 0.9 * m[j] + 0.1 * gr[j];
            v[j] = 0.999 * v[j] + 0.001 * gr[j] * gr[j];
            let mh = m[j] / (1.0 - 0.9f64.powi(t));
            let vh = v[j] / (1.0 - 0.999f64.powi(t));
            x[j] = x[j] - lr * 0.1 * x[j] - lr * mh / (vh.sqrt() + 1e-8);
        }
    }
    for (a, b) in store.by_name("w").unwrap().value().data().iter().zip(x) {
        assert!((a - b).abs() < 1e-14, "{a} vs {b}");
    }
    assert_eq!(state.step(), 2);
}

#[test]
fn adamw_zero_grad_without_decay_is_identity() {
    let mut store = ParamStore::<f64>::new();
    store.insert("w", Tensor::vector(vec![1.0, -2.0]).unwrap()).unwrap();
    let mut state = OptimState::new(&store, AdamWConfig::default());
    optimizer_step(&mut store, &mut state, 0.1).unwrap();
    assert_eq!(store.by_name("w").unwrap().value().data(), &[1.0, -2.0]);
}

#[test]
fn adamw_decay_is_decoupled() {
    let mut store = ParamStore::<f64>::new();
    store.insert("w", Tensor::vector(vec![1.0, -2.0]).unwrap()).unwrap();
    let cfg = AdamWConfig {
        weight_decay: 0.5,
        ..AdamWConfig::default()
    };
    let mut state = OptimState::new(&store, cfg);
    optimizer_step(&mut store, &mut state, 0.1).unwrap();
    // With a zero gradient only the decay term acts: x (1 - lr wd).
    assert_eq!(store.by_name("w").unwrap().value().data(), &[0.95, -1.9]);
}

#[test]
fn adamw_skips_frozen_parameters() {
    let mut store = ParamStore::<f64>::new();
    store.insert("w", Tensor::vector(vec![1.0]).unwrap()).unwrap();
    linear_grad(&mut store, &[1.0]);
    store.set_requires_grad(false);
    let mut state = OptimState::new(&store, AdamWConfig::default());
    optimizer_step(&mut store, &mut state, 0.1).unwrap();
    assert_eq!(store.by_name("w").unwrap().value().data(), &[1.0]);
}

#[test]
fn schedule_warmup_and_cosine() {
    let s = Schedule::new(1e-3, 0.05, 200).unwrap();
    assert_eq!(s.warmup_steps, 10);
    assert_eq!(lr_at(0, &s).unwrap(), 0.0);
    assert!((lr_at(5, &s).unwrap() - 5e-4).abs() < 1e-18);
    assert!((lr_at(10, &s).unwrap() - 1e-3).abs() < 1e-18);
    assert!((lr_at(105, &s).unwrap() - 5e-4).abs() < 1e-15);
    assert!(lr_at(200, &s).unwrap().abs() < 1e-18);
    assert!(lr_at(201, &s).is_err());
    assert!(Schedule::new(1e-3, 0.05, 0).is_err());
}

proptest! {
    #[test]
    fn schedule_is_bounded(total in 1u64..500, frac in 0.0f64..0.5, step_frac in 0.0f64..=1.0) {
        let s = Schedule::new(2e-3, frac, total).unwrap();
        let step = (step_frac * total as f64) as u64;
        let lr = s.lr_at(step).unwrap();
        prop_assert!((0.0..=2e-3 + 1e-15).contains(&lr));
    }

    #[test]
    fn rank_counts_strictly_better(logits in prop::collection::vec(-3i32..3, 1..12), pick in 0usize..12) {
        let logits: Vec<f64> = logits.into_iter().map(f64::from).collect();
        let token = pick % logits.len();
        let r = rank(&logits, token);
        let top = crate::numerics::topk(&logits, r + 1);
        prop_assert_eq!(top.last().unwrap().0, token);
    }
}

#[test]
fn sequence_loss_matches_scalar_losses() {
    let (d, v) = (8, 16);
    let target = frozen_target::<f64>(d, v, 1);
    let drafter = Drafter::new(drafter_config(Variant::Amphista, d), &target, 2).unwrap();
    let tokens = corpus(1, 9, v, 3).remove(0);
    let seq = TeacherSeq::new(&target, &tokens).unwrap();
    let g = Graph::new();
    let w = LossWeights { lambda1: 0.7, lambda2: 1.3 };
    let l = sequence_loss(&g, &drafter, &seq, w).unwrap();
    let total = g.value(l.total).item();

    let heads = drafter.config().heads;
    let positions: Vec<usize> = loss_positions(tokens.len(), heads).unwrap().collect();
    let mut expect = 0.0;
    for &t in &positions {
        let mut state = drafter.new_state();
        let mut out = None;
        for s in 0..=t {
            out = Some(drafter.draft(seq.hidden.row(s), tokens[s + 1], &mut state).unwrap());
        }
        let out = out.unwrap();
        let mut target_logits = Vec::new();
        let mut gt = Vec::new();
        for i in 1..=heads {
            target_logits.extend(seq.probs.row(t + i).iter().map(|p| p.ln()));
            gt.push(tokens[t + 1 + i]);
        }
        let target_logits = Tensor::new(vec![heads, v], target_logits).unwrap();
        expect += compute_losses(&out.d_logits, &target_logits, &gt, w).unwrap().total;
    }
    expect /= positions.len() as f64;
    assert!((total - expect).abs() < 1e-9, "{total} vs {expect}");
}

#[test]
fn drafter_loss_gradients_match_finite_differences() {
    let (d, v) = (8, 12);
    let target = frozen_target::<f64>(d, v, 4);
    let mut cfg = drafter_config(Variant::Amphista, d);
    cfg.lm_head_rank = Some(3);
    let mut drafter = Drafter::new(cfg, &target, 5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for p in drafter.store_mut().iter_mut() {
        for x in p.value_mut().data_mut() {
            *x = rng.gen_range(-0.4..0.4);
        }
    }
    let batch: Vec<_> = corpus(2, 7, v, 7)
        .iter()
        .map(|s| TeacherSeq::new(&target, s).unwrap())
        .collect();
    let mut store = drafter.store().clone();
    let report = GradCheck::default()
        .run(&mut store, |g, store| {
            let mut d = drafter.clone();
            d.store = store.clone();
            batch_loss(g, &d, &batch, LossWeights::default())
                .map(|l| l.total)
                .map_err(|e| match e {
                    Error::Numerics(n) => n,
                    other => NumericsError::Checkpoint(other.to_string()),
                })
        })
        .unwrap();
    assert!(report.passed(), "failures: {:?}", report.failures());
}

fn small_setup(seed: u64) -> (TargetModel<f32>, Drafter<f32>, Vec<Vec<usize>>) {
    let (d, v) = (16, 24);
    let target = frozen_target(d, v, 11);
    let drafter = Drafter::new(drafter_config(Variant::Amphista, d), &target, seed).unwrap();
    (target, drafter, corpus(6, 12, v, 12))
}

#[test]
fn training_leaves_target_bit_identical() {
    let (target, mut drafter, data) = small_setup(1);
    let before = target.store().clone();
    let cfg = TrainConfig {
        epochs: 1,
        batch_size: 2,
        ..TrainConfig::default()
    };
    train(&data, &target, &mut drafter, &cfg).unwrap();
    for (a, b) in target.store().iter().zip(before.iter()) {
        assert_eq!(a.value().data(), b.value().data(), "{}", a.name());
    }
}

#[test]
fn training_requires_frozen_target() {
    let (d, v) = (16, 24);
    let target = TargetModel::<f32>::new(model_config(d, v), 11).unwrap();
    let mut drafter = Drafter::new(drafter_config(Variant::Amphista, d), &target, 1).unwrap();
    let data = corpus(4, 12, v, 1);
    assert!(matches!(
        train(&data, &target, &mut drafter, &TrainConfig::default()),
        Err(Error::TargetNotFrozen(_))
    ));
}

#[test]
fn training_rejects_short_sequences() {
    let (target, mut drafter, mut data) = small_setup(1);
    data.push(vec![1, 2, 3]);
    assert!(matches!(
        train(&data, &target, &mut drafter, &TrainConfig::default()),
        Err(Error::CorpusTooShort(_))
    ));
}

#[test]
fn training_is_deterministic() {
    let cfg = TrainConfig {
        epochs: 2,
        batch_size: 2,
        seed: 9,
        ..TrainConfig::default()
    };
    let run = || {
        let (target, mut drafter, data) = small_setup(3);
        let report = train(&data, &target, &mut drafter, &cfg).unwrap();
        (report.to_csv(), drafter.store().clone())
    };
    let (csv_a, store_a) = run();
    let (csv_b, store_b) = run();
    assert_eq!(csv_a, csv_b);
    for (a, b) in store_a.iter().zip(store_b.iter()) {
        assert_eq!(a.value().data(), b.value().data());
    }
}

#[test]
fn report_csv_layout() {
    let (target, mut drafter, data) = small_setup(2);
    let cfg = TrainConfig {
        epochs: 2,
        batch_size: 3,
        holdout_frac: 0.2,
        ..TrainConfig::default()
    };
    let report = train(&data, &target, &mut drafter, &cfg).unwrap();
    assert_eq!(report.steps, 4);
    let csv = report.to_csv();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(
        lines[0],
        "epoch,alignment_loss,lm_loss,total,head_1_top1,head_2_top1,head_3_top1,head_4_top1,\
         head_1_top5,head_2_top5,head_3_top5,head_4_top5"
    );
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("1,") && lines[2].starts_with("2,"));
    for e in &report.epochs {
        for k in 0..4 {
            assert!(e.accuracy.rate(k, 1) >= e.accuracy.rate(k, 0));
        }
    }
}

#[test]
fn first_update_lowers_the_loss() {
    for seed in 0..5 {
        let (target, mut drafter, data) = small_setup(seed);
        let batch: Vec<_> = data.iter().map(|s| TeacherSeq::new(&target, s).unwrap()).collect();
        let loss = |d: &Drafter<f32>| {
            let g = Graph::inference();
            let l = batch_loss(&g, d, &batch, LossWeights::default()).unwrap();
            g.value(l.total).item()
        };
        let before = loss(&drafter);
        let g = Graph::new();
        let l = batch_loss(&g, &drafter, &batch, LossWeights::default()).unwrap();
        let grads = g.gradients(l.total).unwrap();
        drop(g);
        drafter.store_mut().accumulate(&grads);
        let mut state = OptimState::new(drafter.store(), AdamWConfig::default());
        optimizer_step(drafter.store_mut(), &mut state, 1e-4).unwrap();
        let after = loss(&drafter);
        assert!(after < before, "seed {seed}: {before} -> {after}");
    }
}

#[test]
fn head_accuracy_of_truth_logits_is_perfect() {
    let mut acc = HeadAccuracy::new(2, &[1, 5]);
    let truth = [3usize, 0];
    for (k, &t) in truth.iter().enumerate() {
        let mut row = vec![0.0f32; 8];
        row[t] = 1.0;
        acc.record(k, &row, t);
    }
    acc.positions = 1;
    for k in 0..2 {
        assert_eq!(acc.rate(k, 0), 1.0);
        assert_eq!(acc.rate(k, 1), 1.0);
    }
    // Ties resolve toward the lower index.
    assert_eq!(rank(&[0.0f32, 0.0, 0.0], 2), 2);
}

#[test]
fn pretraining_reduces_target_loss() {
    let (d, v) = (16, 8);
    let mut target = TargetModel::<f32>::new(model_config(d, v), 1).unwrap();
    // Deterministic cycle 0..8 so the next token is fully predictable.
    let data: Vec<Vec<usize>> = (0..8).map(|o| (0..16).map(|i| (i + o) % v).collect()).collect();
    let cfg = PretrainConfig {
        epochs: 6,
        batch_size: 4,
        lr: 1e-2,
        ..PretrainConfig::default()
    };
    let losses = pretrain_target(&data, &mut target, &cfg).unwrap();
    assert!(losses.last().unwrap() < &(0.5 * losses[0]), "{losses:?}");
}
