use proptest::prelude::*;

use super::*;
use crate::error::Error;

fn small() -> ModelConfig {
    ModelConfig {
        vocab_size: 32,
        hidden_dim: 16,
        n_layers: 2,
        n_heads: 2,
        ffn_dim: 32,
        max_seq_len: 64,
        norm_eps: 1e-5,
    }
}

fn max_abs_diff(a: &[f32], b: &[f32]) -> f32 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max)
}

fn last_row(t: &crate::numerics::Tensor<f32>) -> &[f32] {
    t.row(t.rows() - 1)
}

/// Decodes `tokens` one at a time on `cache`, returning each step's logits row.
fn step_by_step(m: &TargetModel<f32>, cache: &mut KvCache<f32>, tokens: &[usize]) -> Vec<Vec<f32>> {
    tokens
        .iter()
        .map(|&t| m.forward(&[t], cache, None, None).unwrap().logits.row(0).to_vec())
        .collect()
}

#[test]
fn cached_step_matches_uncached_forward() {
    let m = TargetModel::<f32>::new(ModelConfig::default(), 1).unwrap();
    let tokens: Vec<usize> = (0..11).map(|i| (i * 37 + 5) % 256).collect();
    let mut cache = m.new_cache();
    m.forward(&tokens[..10], &mut cache, None, None).unwrap();
    let step = m.forward(&tokens[10..], &mut cache, None, None).unwrap();
    let full = m.forward_full(&tokens).unwrap();
    assert!(max_abs_diff(step.logits.row(0), last_row(&full.logits)) <= 1e-5);
    assert!(max_abs_diff(step.hidden.row(0), last_row(&full.hidden)) <= 1e-5);
    assert_eq!(cache.len(), 11);
}

#[test]
fn logits_are_lm_head_of_hidden() {
    let m = TargetModel::<f32>::new(small(), 2).unwrap();
    let out = m.forward_full(&[1, 2, 3]).unwrap();
    let w = m.store().by_name("lm_head.weight").unwrap().value();
    assert_eq!(out.hidden.matmul(w).unwrap(), out.logits);
}

#[test]
fn chain_mask_matches_sequential() {
    let m = TargetModel::<f32>::new(small(), 3).unwrap();
    let prefix = [4, 8, 15];
    let chain = [16, 23, 42 % 32, 7];
    let mut seq_cache = m.new_cache();
    m.forward(&prefix, &mut seq_cache, None, None).unwrap();
    let seq = step_by_step(&m, &mut seq_cache, &chain);

    let mut tree_cache = m.new_cache();
    m.forward(&prefix, &mut tree_cache, None, None).unwrap();
    let n = chain.len();
    let mask: Vec<bool> = (0..n * n).map(|k| k % n <= k / n).collect();
    let positions: Vec<usize> = (3..3 + n).collect();
    let tree = m.forward(&chain, &mut tree_cache, Some(&mask), Some(&positions)).unwrap();
    for i in 0..n {
        assert!(max_abs_diff(tree.logits.row(i), &seq[i]) <= 1e-5);
    }
}

#[test]
fn branching_tree_matches_each_path() {
    // root -> {a, b}, a -> c ; positions by depth
    let m = TargetModel::<f32>::new(small(), 4).unwrap();
    let prefix = [1, 2, 3, 4];
    let tokens = [9, 10, 11, 12];
    let parents = [None, Some(0), Some(0), Some(1)];
    let depth = [0, 1, 1, 2];
    let n = tokens.len();
    let mut mask = vec![false; n * n];
    for i in 0..n {
        let mut j = Some(i);
        while let Some(a) = j {
            mask[i * n + a] = true;
            j = parents[a];
        }
    }
    let positions: Vec<usize> = depth.iter().map(|d| prefix.len() + d).collect();
    let mut cache = m.new_cache();
    m.forward(&prefix, &mut cache, None, None).unwrap();
    let tree = m.forward(&tokens, &mut cache, Some(&mask), Some(&positions)).unwrap();
    for (node, path) in [(1usize, vec![9, 10]), (2, vec![9, 11]), (3, vec![9, 10, 12])] {
        let mut c = m.new_cache();
        m.forward(&prefix, &mut c, None, None).unwrap();
        let seq = step_by_step(&m, &mut c, &path);
        assert!(max_abs_diff(tree.logits.row(node), seq.last().unwrap()) <= 1e-5);
    }
}

#[test]
fn forward_errors() {
    let m = TargetModel::<f32>::new(small(), 5).unwrap();
    let mut cache = m.new_cache();
    assert!(matches!(m.forward(&[], &mut cache, None, None), Err(Error::EmptyInput)));
    assert!(matches!(
        m.forward(&[40], &mut cache, None, None),
        Err(Error::TokenOutOfRange { .. })
    ));
    assert!(matches!(
        m.forward(&[1, 2], &mut cache, Some(&[true; 4]), None),
        Err(Error::MaskMismatch(_))
    ));
    assert!(matches!(
        m.forward(&[1, 2], &mut cache, Some(&[true; 3]), Some(&[0, 1])),
        Err(Error::MaskMismatch(_))
    ));
    let long = vec![1; 65];
    assert!(matches!(m.forward(&long, &mut cache, None, None), Err(Error::Overflow { .. })));
    assert_eq!(cache.len(), 0);
}

#[test]
fn truncate_to_zero_equals_fresh_prefill() {
    let m = TargetModel::<f32>::new(small(), 6).unwrap();
    let mut cache = m.new_cache();
    m.forward(&[5, 6, 7], &mut cache, None, None).unwrap();
    cache.truncate(0).unwrap();
    let again = m.forward(&[1, 2], &mut cache, None, None).unwrap();
    let fresh = m.forward_full(&[1, 2]).unwrap();
    assert_eq!(again, fresh);
}

#[test]
fn truncate_and_replay() {
    let m = TargetModel::<f32>::new(small(), 7).unwrap();
    let mut cache = m.new_cache();
    m.forward(&[3, 1, 4], &mut cache, None, None).unwrap();
    let tail = [1usize, 5, 9, 2, 6];
    m.forward(&tail, &mut cache, None, None).unwrap();
    cache.truncate(cache.len() - 2).unwrap();
    let replay = m.forward(&tail[3..], &mut cache, None, None).unwrap();
    let next = m.forward(&[5], &mut cache, None, None).unwrap();

    let mut clean = m.new_cache();
    m.forward(&[3, 1, 4], &mut clean, None, None).unwrap();
    let full = m.forward(&tail, &mut clean, None, None).unwrap();
    let next_clean = m.forward(&[5], &mut clean, None, None).unwrap();
    assert!(max_abs_diff(replay.logits.row(1), full.logits.row(4)) <= 1e-6);
    assert!(max_abs_diff(next.logits.row(0), next_clean.logits.row(0)) <= 1e-6);

    let len = clean.len();
    clean.truncate(len).unwrap();
    assert_eq!(clean.len(), len);
}

#[test]
fn select_path_matches_sequential_decode() {
    let m = TargetModel::<f32>::new(small(), 8).unwrap();
    let prefix = [2, 7, 1, 8];
    // root 20 -> {21, 22}; 22 -> 23 ; accept root, 22, 23
    let tokens = [20, 21, 22, 23];
    let mask = [
        true, false, false, false, //
        true, true, false, false, //
        true, false, true, false, //
        true, false, true, true,
    ];
    let positions = [4, 5, 5, 6];
    let mut cache = m.new_cache();
    m.forward(&prefix, &mut cache, None, None).unwrap();
    m.forward(&tokens, &mut cache, Some(&mask), Some(&positions)).unwrap();
    cache.select_path(4, &[0, 2, 3]).unwrap();
    assert_eq!(cache.len(), 7);
    let next = m.forward(&[9], &mut cache, None, None).unwrap();

    let seq = m.forward_full(&[2, 7, 1, 8, 20, 22, 23, 9]).unwrap();
    assert!(max_abs_diff(next.logits.row(0), last_row(&seq.logits)) <= 1e-5);

    let mut root_only = m.new_cache();
    m.forward(&prefix, &mut root_only, None, None).unwrap();
    m.forward(&tokens, &mut root_only, Some(&mask), Some(&positions)).unwrap();
    root_only.select_path(4, &[0]).unwrap();
    assert_eq!(root_only.len(), 5);
    assert!(root_only.select_path(4, &[0, 9]).is_err());
}

#[test]
fn chain_tree_path_selection_equals_sequential_cache() {
    let m = TargetModel::<f32>::new(small(), 9).unwrap();
    let chain = [3, 4, 5];
    let mask = [true, false, false, true, true, false, true, true, true];
    let mut tree_cache = m.new_cache();
    m.forward(&[1], &mut tree_cache, None, None).unwrap();
    m.forward(&chain, &mut tree_cache, Some(&mask), Some(&[1, 2, 3])).unwrap();
    tree_cache.select_path(1, &[0, 1, 2]).unwrap();
    let mut seq_cache = m.new_cache();
    m.forward(&[1], &mut seq_cache, None, None).unwrap();
    step_by_step(&m, &mut seq_cache, &chain);
    for l in 0..2 {
        assert!(max_abs_diff(tree_cache.layer(l).keys(), seq_cache.layer(l).keys()) <= 1e-5);
    }
}

#[test]
fn forward_is_deterministic() {
    let a = TargetModel::<f32>::new(small(), 10).unwrap();
    let b = TargetModel::<f32>::new(small(), 10).unwrap();
    let x = a.forward_full(&[1, 2, 3, 4]).unwrap();
    let y = b.forward_full(&[1, 2, 3, 4]).unwrap();
    let bits = |t: &crate::numerics::Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&x.logits), bits(&y.logits));
}

#[test]
fn checkpoint_round_trip() {
    let a = TargetModel::<f32>::new(small(), 11).unwrap();
    let mut ck = crate::numerics::Checkpoint::new();
    a.save_into(&mut ck);
    let mut b = TargetModel::<f32>::new(small(), 12).unwrap();
    b.load_from(&ck).unwrap();
    assert_eq!(a.forward_full(&[1, 2]).unwrap(), b.forward_full(&[1, 2]).unwrap());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn prefill_step_split_is_consistent(
        tokens in proptest::collection::vec(0usize..32, 2..24),
        split_frac in 0.0f64..1.0,
    ) {
        let m = TargetModel::<f32>::new(small(), 13).unwrap();
        let split = 1 + ((tokens.len() - 1) as f64 * split_frac) as usize;
        let mut cache = m.new_cache();
        m.forward(&tokens[..split], &mut cache, None, None).unwrap();
        let mut last = None;
        if split < tokens.len() {
            last = Some(m.forward(&tokens[split..], &mut cache, None, None).unwrap());
        }
        let full = m.forward_full(&tokens).unwrap();
        if let Some(out) = last {
            prop_assert!(max_abs_diff(last_row(&out.logits), last_row(&full.logits)) <= 1e-5);
        }
    }
}
