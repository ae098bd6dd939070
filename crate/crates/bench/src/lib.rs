//! Fixtures shared by the benchmarks: an untrained default-size target and drafter.
//!
//! Timings depend only on shapes, so random weights measure the same work as trained ones.

use amphista::drafter::{Drafter, DrafterConfig};
use amphista::model::{ModelConfig, TargetModel};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub struct Fixture {
    pub model: TargetModel,
    pub drafter: Drafter,
    pub context: Vec<usize>,
}

impl Fixture {
    /// Default model and drafter shapes with a random context of `context_len` tokens.
    pub fn new(context_len: usize) -> Self {
        let mut model = TargetModel::new(ModelConfig::default(), 0).expect("default config is valid");
        model.freeze();
        let drafter = Drafter::new(DrafterConfig::default(), &model, 1).expect("default config is valid");
        let v = model.config().vocab_size;
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let context = (0..context_len).map(|_| rng.gen_range(0..v)).collect();
        Self { model, drafter, context }
    }
}
