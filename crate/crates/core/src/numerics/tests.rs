use std::sync::Arc;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;

fn store_with(rng: &mut ChaCha8Rng, shapes: &[(&str, &[usize])]) -> ParamStore<f64> {
    let mut s = ParamStore::new();
    for (name, shape) in shapes {
        s.insert(*name, uniform(rng, shape, 1.0)).unwrap();
    }
    s
}

fn p<'a>(s: &'a ParamStore<f64>, name: &str) -> &'a Parameter<f64> {
    s.by_name(name).unwrap()
}

#[test]
fn backward_of_sum_is_ones() {
    let mut s = ParamStore::<f64>::new();
    s.insert("w", Tensor::from_f64(vec![3], &[0.3, -2.0, 5.0]).unwrap()).unwrap();
    let g = Graph::new();
    let w = g.param(p(&s, "w"));
    let loss = g.sum(w).unwrap();
    s.accumulate(&g.gradients(loss).unwrap());
    assert_eq!(p(&s, "w").grad().data(), &[1.0, 1.0, 1.0]);
}

#[test]
fn backward_of_dot_and_accumulation() {
    let mut s = ParamStore::<f64>::new();
    s.insert("w", Tensor::from_f64(vec![2], &[1.0, 2.0]).unwrap()).unwrap();
    let run = |s: &mut ParamStore<f64>| {
        let g = Graph::new();
        let w = g.param(p(s, "w"));
        let sq = g.mul(w, w).unwrap();
        let loss = g.sum(sq).unwrap();
        s.accumulate(&g.gradients(loss).unwrap());
    };
    run(&mut s);
    assert_eq!(p(&s, "w").grad().data(), &[2.0, 4.0]);
    run(&mut s);
    assert_eq!(p(&s, "w").grad().data(), &[4.0, 8.0]);
    s.zero_grad();
    run(&mut s);
    assert_eq!(p(&s, "w").grad().data(), &[2.0, 4.0]);
}

#[test]
fn non_scalar_loss_rejected() {
    let g = Graph::<f64>::new();
    let x = g.constant(Tensor::zeros(vec![2]));
    assert!(matches!(g.gradients(x), Err(NumericsError::NonScalarLoss(_))));
}

#[test]
fn non_finite_is_an_error() {
    let g = Graph::<f32>::new();
    let x = g.constant(Tensor::full(vec![1, 2], 1e30));
    let y = g.mul(x, x);
    assert!(matches!(y, Err(NumericsError::NonFinite { op: "mul" })));
}

#[test]
fn cross_entropy_uniform_is_ln_n() {
    let logits = Tensor::<f64>::zeros(vec![4]);
    for i in 0..4 {
        let ce = cross_entropy(&logits, Target::Index(i)).unwrap();
        assert!((ce - 4f64.ln()).abs() < 1e-12);
    }
}

#[test]
fn cross_entropy_against_scalar_oracle() {
    let logits = Tensor::<f32>::from_f64(vec![3], &[2.0, 0.0, 0.0]).unwrap();
    let ce = cross_entropy(&logits, Target::Index(0)).unwrap() as f64;
    let want = -(2f64.exp() / (2f64.exp() + 2.0)).ln();
    assert!((ce - want).abs() <= 1e-6, "{ce} vs {want}");
}

#[test]
fn soft_cross_entropy_self_target_is_entropy() {
    let logits = Tensor::<f64>::from_f64(vec![4], &[0.1, 1.2, -0.7, 0.4]).unwrap();
    let p = logits.softmax(0).unwrap();
    let h: f64 = -p.data().iter().map(|x| x * x.ln()).sum::<f64>();
    let ce = cross_entropy(&logits, Target::Dist(p.data())).unwrap();
    assert!((ce - h).abs() < 1e-12);
}

#[test]
fn cross_entropy_errors() {
    let logits = Tensor::<f64>::zeros(vec![3]);
    assert!(matches!(
        cross_entropy(&logits, Target::Index(3)),
        Err(NumericsError::Index { .. })
    ));
    assert!(matches!(
        cross_entropy(&logits, Target::Dist(&[0.5, 0.4, 0.0])),
        Err(NumericsError::NotNormalized { .. })
    ));
    let g = Graph::<f64>::new();
    let l = g.constant(Tensor::zeros(vec![1, 3]));
    let bad = Arc::new(Tensor::from_f64(vec![1, 3], &[0.2, 0.2, 0.2]).unwrap());
    assert!(g.cross_entropy_soft(l, bad).is_err());
    assert!(g.cross_entropy_hard(l, &[5]).is_err());
}

#[test]
fn graph_cross_entropy_matches_scalar_version() {
    let g = Graph::<f64>::new();
    let rows = [[0.3, -1.0, 2.0], [1.0, 1.0, 0.0]];
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    let l = g.constant(Tensor::from_f64(vec![2, 3], &flat).unwrap());
    let hard = g.value(g.cross_entropy_hard(l, &[2, 0]).unwrap()).item();
    let want = (0..2)
        .map(|i| {
            let t = Tensor::<f64>::from_f64(vec![3], &rows[i]).unwrap();
            cross_entropy(&t, Target::Index([2, 0][i])).unwrap()
        })
        .sum::<f64>()
        / 2.0;
    assert!((hard - want).abs() < 1e-12);
}

/// Composite function touching every differentiable op.
fn composite(g: &Graph<f64>, s: &ParamStore<f64>, mask: AttnMask) -> Result<Var> {
    let table = g.param(p(s, "table"));
    let emb = g.gather_rows(table, &[0, 2, 1, 2])?;
    let extra = g.param(p(s, "extra"));
    let x = g.concat_cols(emb, extra)?;
    let gain = g.param(p(s, "gain"));
    let xn = g.rms_norm(x, gain, 1e-5)?;
    let w = g.param(p(s, "w"));
    let b = g.param(p(s, "b"));
    let h = g.add_bias(g.matmul(xn, w)?, b)?;
    let h = g.silu(h)?;
    let prefix = g.param(p(s, "prefix"));
    let kv = g.concat_rows(prefix, h)?;
    let att = g.attention(h, kv, kv, 2, mask)?;
    let mixed = g.add(att, g.scale(h, 0.5)?)?;
    let gate = g.mul(mixed, g.softmax(h)?)?;
    let head = g.param(p(s, "head"));
    let logits = g.matmul(gate, head)?;
    let hard = g.cross_entropy_hard(logits, &[0, 4, 2, 1])?;
    let soft_t = Arc::new(Tensor::from_f64(vec![4, 5], &[0.2; 20])?);
    let soft = g.cross_entropy_soft(logits, soft_t)?;
    let row = g.gather_rows(logits, &[3])?;
    let top = g.topk_values(row, 2)?;
    let picked = g.select(logits, &[1, 7, 13])?;
    let tail = g.add(g.mean(top)?, g.sum(picked)?)?;
    let a = g.add(hard, soft)?;
    g.add(a, g.scale(tail, 0.1)?)
}

fn composite_store(seed: u64) -> ParamStore<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    store_with(
        &mut rng,
        &[
            ("table", &[3, 3]),
            ("extra", &[4, 1]),
            ("gain", &[4]),
            ("w", &[4, 4]),
            ("b", &[4]),
            ("prefix", &[2, 4]),
            ("head", &[4, 5]),
        ],
    )
}

#[test]
fn chain_rule_holds_for_every_op_over_seeds() {
    let tree = Arc::new(vec![
        true, false, false, false, //
        true, true, false, false, //
        true, false, true, false, //
        true, false, true, true,
    ]);
    for seed in 0..5 {
        for mask in [AttnMask::Causal, AttnMask::Full, AttnMask::Tree(tree.clone())] {
            let mut s = composite_store(seed);
            let m = mask.clone();
            let report = GradCheck::default()
                .run(&mut s, move |g, s| composite(g, s, m.clone()))
                .unwrap();
            assert!(report.passed(), "seed {seed} {mask:?}: {:?}", report.worst());
        }
    }
}

#[test]
fn block_attention_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut s = store_with(&mut rng, &[("x", &[6, 4]), ("w", &[4, 4])]);
    let report = GradCheck::default()
        .run(&mut s, |g, s| {
            let x = g.param(p(s, "x"));
            let q = g.matmul(x, g.param(p(s, "w")))?;
            let a = g.attention(q, x, x, 2, AttnMask::Block(3))?;
            let sq = g.mul(a, a)?;
            g.sum(sq)
        })
        .unwrap();
    assert!(report.passed(), "{:?}", report.worst());
}

#[test]
fn block_attention_isolates_blocks() {
    let g = Graph::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x: Tensor<f64> = uniform(&mut rng, &[4, 2], 1.0);
    let mut y = x.clone();
    y.data_mut()[6] += 1.0;
    let (xa, ya) = (g.constant(x), g.constant(y));
    let a = g.value(g.attention(xa, xa, xa, 1, AttnMask::Block(2)).unwrap());
    let b = g.value(g.attention(ya, ya, ya, 1, AttnMask::Block(2)).unwrap());
    assert_eq!(a.row(0), b.row(0));
    assert_eq!(a.row(1), b.row(1));
    assert_ne!(a.row(2), b.row(2));
}

#[test]
fn grad_check_quadratic_form() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut s = store_with(&mut rng, &[("W", &[3, 2]), ("x", &[1, 3])]);
    let report = grad_check(
        &mut s,
        |g, s| {
            let y = g.matmul(g.param(p(s, "x")), g.param(p(s, "W")))?;
            let sq = g.mul(y, y)?;
            g.sum(sq)
        },
        1e-3,
        1e-5,
    )
    .unwrap();
    assert!(report.passed(), "{report:?}");
}

#[test]
fn grad_check_excludes_frozen() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut s = store_with(&mut rng, &[("W", &[3, 2]), ("x", &[1, 3])]);
    s.set_requires_grad_for("x", false).unwrap();
    let report = grad_check(
        &mut s,
        |g, s| {
            let y = g.matmul(g.param(p(s, "x")), g.param(p(s, "W")))?;
            let sq = g.mul(y, y)?;
            g.sum(sq)
        },
        1e-3,
        1e-5,
    )
    .unwrap();
    let x = report.params.iter().find(|c| c.name == "x").unwrap();
    assert!(x.frozen && x.checked == 0);
    assert!(s.by_name("x").unwrap().grad().data().iter().all(|v| *v == 0.0));
    assert!(report.passed());
}

#[test]
fn grad_check_names_corrupted_rule() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut s = store_with(&mut rng, &[("good", &[2]), ("bad", &[2])]);
    let report = grad_check(
        &mut s,
        |g, s| {
            let good = g.param(p(s, "good"));
            let bad = g.param(p(s, "bad"));
            let bv = g.value(bad);
            let sq: Vec<f64> = bv.data().iter().map(|x| x * x).collect();
            // Correct derivative would be 2x.
            let broken = g.custom(&[bad], Tensor::vector(sq)?, |inputs, gout| {
                let gx = inputs[0]
                    .data()
                    .iter()
                    .zip(gout.data())
                    .map(|(x, gv)| 3.0 * x * gv)
                    .collect();
                vec![Some(Tensor::vector(gx).unwrap())]
            })?;
            let a = g.sum(g.mul(good, good)?)?;
            g.add(a, g.sum(broken)?)
        },
        1e-3,
        1e-4,
    )
    .unwrap();
    assert!(!report.passed());
    assert_eq!(report.failures(), vec!["bad"]);
    assert_eq!(report.norm_failures(), vec!["bad"]);
}

#[test]
fn norm_error_of_cubic_matches_closed_form() {
    // The central difference of x^3 is exactly 3x^2 + eps^2.
    let mut s = ParamStore::<f64>::new();
    s.insert("x", Tensor::vector(vec![1.0, 1e-3]).unwrap()).unwrap();
    let eps = 1e-3;
    let report = grad_check(
        &mut s,
        |g, s| {
            let x = g.param(p(s, "x"));
            g.sum(g.mul(g.mul(x, x)?, x)?)
        },
        eps,
        1e-4,
    )
    .unwrap();
    let c = &report.params[0];
    let small = 3e-6;
    assert!((c.max_rel_error - eps * eps / (small + eps * eps)).abs() < 1e-6);
    let numeric = ((3.0 + eps * eps).powi(2) + (small + eps * eps).powi(2)).sqrt();
    let expect = 2f64.sqrt() * eps * eps / numeric;
    assert!((c.norm_rel_error / expect - 1.0).abs() < 1e-5, "{}", c.norm_rel_error);
    assert!(!report.passed());
    assert!(report.passed_norm());
}

#[test]
fn grad_check_detects_nondeterminism() {
    use std::cell::Cell;
    let mut s = ParamStore::<f64>::new();
    s.insert("w", Tensor::scalar(1.0)).unwrap();
    let calls = Cell::new(0.0);
    let err = grad_check(
        &mut s,
        |g, s| {
            calls.set(calls.get() + 1.0);
            let c = g.constant(Tensor::scalar(calls.get()));
            g.add(g.param(p(s, "w")), c)
        },
        1e-3,
        1e-4,
    );
    assert!(matches!(err, Err(NumericsError::NonDeterministic { .. })));
}

proptest! {
    #[test]
    fn softmax_shift_invariance(xs in proptest::collection::vec(-10.0f64..10.0, 1..12), c in -100.0f64..100.0) {
        let a = Tensor::<f64>::vector(xs.clone()).unwrap().softmax(0).unwrap();
        let b = Tensor::<f64>::vector(xs.iter().map(|x| x + c).collect()).unwrap().softmax(0).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            prop_assert!((x - y).abs() <= 1e-6);
        }
        let sum: f64 = a.data().iter().sum();
        prop_assert!((sum - 1.0).abs() < 1e-9);
        prop_assert!(a.data().iter().all(|v| *v > 0.0));
    }

    #[test]
    fn gibbs_inequality(seed in any::<u64>()) {
        // For a fixed target p, the cross-entropy is minimized by logits whose softmax is p.
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let matched: Tensor<f64> = uniform(&mut rng, &[8], 3.0);
        let p = matched.softmax(0).unwrap();
        let other: Tensor<f64> = uniform(&mut rng, &[8], 3.0);
        let best = cross_entropy(&matched, Target::Dist(p.data())).unwrap();
        let worse = cross_entropy(&other, Target::Dist(p.data())).unwrap();
        prop_assert!(best <= worse + 1e-12);
    }

    #[test]
    fn ops_stay_finite_on_bounded_inputs(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = Graph::<f32>::new();
        let x = g.constant(uniform(&mut rng, &[4, 8], 1e3));
        let gain = g.constant(Tensor::full(vec![8], 1.0));
        let n = g.rms_norm(x, gain, 1e-5).unwrap();
        let s = g.silu(x).unwrap();
        let sm = g.softmax(x).unwrap();
        let a = g.attention(n, n, n, 2, AttnMask::Causal).unwrap();
        let ce = g.cross_entropy_hard(x, &[0, 1, 2, 3]).unwrap();
        for v in [n, s, sm, a, ce] {
            prop_assert!(g.value(v).all_finite());
        }
    }
}
