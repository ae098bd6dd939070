use std::sync::Arc;

use amphista::harness::{run_prompts, Mode, RunConfig};
use amphista::speculation::{build_mask, expand_tree, verify, TreeTopology, VerifyRule};
use amphista::Tensor;
use amphista_bench::Fixture;
use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const CONTEXT: usize = 64;

fn target_forward(c: &mut Criterion) {
    let f = Fixture::new(CONTEXT);
    let mut cache = f.model.new_cache();
    f.model.forward(&f.context, &mut cache, None, None).unwrap();
    c.bench_function("target/decode_one_token", |b| {
        b.iter(|| {
            f.model.forward(&[1], &mut cache, None, None).unwrap();
            cache.truncate(CONTEXT).unwrap();
        })
    });
    for preset in ["chain", "sparse-22", "cartesian", "nodes-64"] {
        let topology = TreeTopology::preset(preset).unwrap();
        let n = topology.node_count();
        let mask = build_mask(&topology);
        let positions: Vec<usize> = (0..n).map(|i| CONTEXT + topology.depth(i)).collect();
        let tokens: Vec<usize> = (0..n).map(|i| i % 256).collect();
        c.bench_function(&format!("target/verify_tree_{n}_nodes"), |b| {
            b.iter(|| {
                f.model
                    .forward(&tokens, &mut cache, Some(&mask), Some(&positions))
                    .unwrap();
                cache.truncate(CONTEXT).unwrap();
            })
        });
    }
}

fn drafter_step(c: &mut Criterion) {
    let f = Fixture::new(CONTEXT);
    let out = f.model.forward_full(&f.context).unwrap();
    let d = f.model.config().hidden_dim;
    let hidden = Tensor::new(vec![CONTEXT - 1, d], out.hidden.data()[..(CONTEXT - 1) * d].to_vec()).unwrap();
    let mut state = f.drafter.new_state();
    f.drafter.advance(&hidden, &f.context[1..], &mut state).unwrap();
    let last = out.hidden.row(CONTEXT - 1).to_vec();
    c.bench_function("drafter/draft_one_step", |b| {
        b.iter(|| {
            f.drafter.draft(&last, 7, &mut state).unwrap();
            state.rollback(CONTEXT - 1).unwrap();
        })
    });
}

fn tree_ops(c: &mut Criterion) {
    let f = Fixture::new(CONTEXT);
    let topology = Arc::new(TreeTopology::preset("cartesian").unwrap());
    c.bench_function("tree/build_mask_45", |b| b.iter(|| build_mask(&topology)));
    let out = f.model.forward_full(&f.context).unwrap();
    let draft = f
        .drafter
        .draft_uncached(
            &Tensor::new(vec![1, f.model.config().hidden_dim], out.hidden.row(CONTEXT - 1).to_vec()).unwrap(),
            &[3],
        )
        .unwrap();
    c.bench_function("tree/expand_45", |b| {
        b.iter(|| expand_tree(&draft, &topology, 3, CONTEXT).unwrap())
    });
    let tree = expand_tree(&draft, &topology, 3, CONTEXT).unwrap();
    let mut cache = f.model.new_cache();
    f.model.forward(&f.context, &mut cache, None, None).unwrap();
    let logits = f
        .model
        .forward(tree.tokens(), &mut cache, Some(tree.mask()), Some(tree.positions()))
        .unwrap()
        .logits;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    c.bench_function("tree/verify_greedy_45", |b| {
        b.iter(|| verify(&tree, &logits, VerifyRule::Greedy, 0.0, &mut rng).unwrap())
    });
}

fn end_to_end(c: &mut Criterion) {
    let f = Fixture::new(16);
    let prompts = vec![f.context.clone()];
    let mut group = c.benchmark_group("generate_64_tokens");
    group.sample_size(10);
    for mode in ["ar", "vanilla_chain", "amphista"] {
        let run = RunConfig {
            mode: mode.parse::<Mode>().unwrap(),
            max_new_tokens: 64,
            timing_repeats: 0,
            ..RunConfig::default()
        };
        group.bench_function(mode, |b| {
            b.iter_batched(
                || (),
                |_| run_prompts(&f.model, &f.drafter, &prompts, &run, None).unwrap(),
                BatchSize::SmallInput,
            )
        });
    }
    group.finish();
}

criterion_group!(benches, target_forward, drafter_step, tree_ops, end_to_end);
criterion_main!(benches);
