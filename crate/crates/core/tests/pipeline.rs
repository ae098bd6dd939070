//! The public API end to end on a small model: pretrain, train a drafter, decode.

use amphista::drafter::{Drafter, DrafterConfig, Variant};
use amphista::harness::{ar_reference, run_prompts, Corpus, CorpusConfig, Mode, RunConfig};
use amphista::model::{ModelConfig, TargetModel};
use amphista::numerics::Checkpoint;
use amphista::training::{pretrain_target, train, PretrainConfig, TrainConfig};

fn small_model() -> ModelConfig {
    ModelConfig {
        hidden_dim: 32,
        n_layers: 2,
        n_heads: 2,
        ffn_dim: 64,
        max_seq_len: 160,
        ..ModelConfig::default()
    }
}

fn small_drafter(variant: Variant) -> DrafterConfig {
    let mut c = DrafterConfig::variant(variant, 32);
    c.sal_heads = 2;
    c.encoder_heads = 2;
    c.sal_ffn_dim = 64;
    c.encoder_ffn_dim = 64;
    c
}

fn setup() -> (Corpus, TargetModel) {
    let corpus = Corpus::load(&CorpusConfig {
        sequences: 48,
        seq_len: 32,
        ..CorpusConfig::default()
    })
    .unwrap();
    let mut model = TargetModel::new(small_model(), 0).unwrap();
    let losses = pretrain_target(
        &corpus.sequences,
        &mut model,
        &PretrainConfig {
            epochs: 3,
            ..PretrainConfig::default()
        },
    )
    .unwrap();
    assert!(losses[2] < losses[0], "{losses:?}");
    model.freeze();
    (corpus, model)
}

#[test]
fn trained_drafters_decode_losslessly_and_survive_checkpointing() {
    let (corpus, model) = setup();
    let prompts = corpus.prompts(4, 8, 1).unwrap();
    let reference = ar_reference(&model, &prompts, 48).unwrap();
    for variant in [Variant::Amphista, Variant::Medusa] {
        let mut drafter = Drafter::new(small_drafter(variant), &model, 0).unwrap();
        let cfg = TrainConfig {
            epochs: 1,
            ..TrainConfig::default()
        };
        let report = train(&corpus.sequences, &model, &mut drafter, &cfg).unwrap();
        assert_eq!(report.epochs.len(), 1);
        for topology in ["chain", "cartesian", "sparse-22"] {
            let run = RunConfig {
                mode: Mode::Tree(variant),
                topology: topology.into(),
                max_new_tokens: 48,
                timing_repeats: 0,
                ..RunConfig::default()
            };
            let out = run_prompts(&model, &drafter, &prompts, &run, Some(&reference)).unwrap();
            assert_eq!(out.metrics.lossless, Some(true), "{variant} {topology}");
            assert!(out.metrics.tokens_per_step >= 1.0);
        }

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("drafter.ckpt");
        let mut ck = Checkpoint::new();
        drafter.save_into(&mut ck);
        ck.save(&path).unwrap();
        let mut restored = Drafter::new(small_drafter(variant), &model, 99).unwrap();
        restored.load_from(&Checkpoint::load(&path).unwrap()).unwrap();
        let run = RunConfig {
            mode: Mode::Tree(variant),
            max_new_tokens: 32,
            timing_repeats: 0,
            ..RunConfig::default()
        };
        let a = run_prompts(&model, &drafter, &prompts, &run, None).unwrap();
        let b = run_prompts(&model, &restored, &prompts, &run, None).unwrap();
        assert_eq!(a.event_log(), b.event_log(), "{variant}");
    }
}

#[test]
fn sampled_decoding_is_seeded() {
    let (corpus, model) = setup();
    let drafter = Drafter::new(small_drafter(Variant::Amphista), &model, 0).unwrap();
    let prompts = corpus.prompts(3, 8, 2).unwrap();
    let run = |mode: Mode, seed: u64| {
        let cfg = RunConfig {
            mode,
            temperature: 0.7,
            max_new_tokens: 32,
            timing_repeats: 0,
            seed,
            ..RunConfig::default()
        };
        run_prompts(&model, &drafter, &prompts, &cfg, None).unwrap()
    };
    for mode in [Mode::Ar, Mode::VanillaChain, Mode::Tree(Variant::Amphista)] {
        let a = run(mode, 5);
        assert_eq!(a.event_log(), run(mode, 5).event_log(), "{mode}");
        assert_ne!(a.event_log(), run(mode, 6).event_log(), "{mode}");
        assert_eq!(a.metrics.lossless, None);
    }
}
