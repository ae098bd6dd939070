//! Corpora, tokenizer, decoding runs, metrics and comparative suites.

mod accuracy;
mod corpus;
mod run;
mod suite;
mod tokenizer;

pub use accuracy::{accuracy_csv, measure_head_accuracy, RandomScorer, TruthOracle};
pub use corpus::{Corpus, CorpusConfig, CorpusKind, MarkovChain};
pub use run::{
    ar_reference, event_log, generate, measure_timing, parse_event_log, prompt_rng, recount_tokens_per_step,
    run_prompts, MetricsReport, Mode, RunConfig, RunOutcome, Timing, EVENT_LOG_HEADER,
};
pub use suite::{
    node_sweep, run_ablation_suite, AblationConfig, AblationReport, AblationRow, SweepReport, SweepRow,
    TrainedVariant,
};
pub use tokenizer::ByteTokenizer;
