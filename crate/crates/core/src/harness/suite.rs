use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::drafter::{Drafter, DrafterConfig, Variant};
use crate::error::{Error, Result};
use crate::model::TargetModel;
use crate::numerics::Float;
use crate::speculation::TreeTopology;
use crate::training::{train, TrainConfig, TrainReport};

use super::corpus::Corpus;
use super::run::{ar_reference, measure_timing, recount_tokens_per_step, run_prompts, Mode, RunConfig, Timing};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    pub variants: Vec<String>,
    /// Drafter seeds; each variant trains once per seed.
    pub seeds: Vec<u64>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            variants: Variant::ALL.iter().map(|v| v.name().to_string()).collect(),
            seeds: vec![0],
        }
    }
}

impl AblationConfig {
    pub fn parsed_variants(&self) -> Result<Vec<Variant>> {
        if self.variants.is_empty() || self.seeds.is_empty() {
            return Err(Error::Config("ablation needs at least one variant and one seed".into()));
        }
        self.variants.iter().map(|v| v.parse()).collect()
    }
}

#[derive(Debug, Clone)]
pub struct AblationRow {
    pub variant: Variant,
    /// Tokens per step for each seed, in seed order.
    pub per_seed: Vec<f64>,
    pub head1_top1: f64,
    pub lossless: Option<bool>,
    pub timing: Option<Timing>,
}

impl AblationRow {
    pub fn tokens_per_step(&self) -> f64 {
        self.per_seed.iter().sum::<f64>() / self.per_seed.len() as f64
    }
}

#[derive(Debug, Clone)]
pub struct AblationReport {
    pub seeds: Vec<u64>,
    pub prompts: usize,
    /// Ranked by mean tokens per step, best first.
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn row(&self, v: Variant) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == v)
    }

    /// Deterministic ranked table with the larger-scale reference accepted length
    /// of each variant as a trailing orientation column.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("rank,variant,tokens_per_step");
        for seed in &self.seeds {
            write!(s, ",tokens_per_step_seed_{seed}").unwrap();
        }
        s.push_str(",head_1_top1,lossless,prompts,reference_accepted_length\n");
        for (i, r) in self.rows.iter().enumerate() {
            write!(s, "{},{},{:.6}", i + 1, r.variant, r.tokens_per_step()).unwrap();
            for x in &r.per_seed {
                write!(s, ",{x:.6}").unwrap();
            }
            writeln!(
                s,
                ",{:.6},{},{},{:.2}",
                r.head1_top1,
                r.lossless.map_or("na".to_string(), |b| b.to_string()),
                self.prompts,
                r.variant.reference_accepted_length()
            )
            .unwrap();
        }
        s
    }

    pub fn timing_csv(&self) -> String {
        let mut s = format!("{}\n", Timing::CSV_HEADER);
        for r in &self.rows {
            if let Some(t) = &r.timing {
                writeln!(s, "{}", t.csv_row(r.variant.name())).unwrap();
            }
        }
        s
    }
}

/// A trained ablation drafter.
pub struct TrainedVariant<T: Float> {
    pub variant: Variant,
    pub seed: u64,
    pub drafter: Drafter<T>,
    pub report: TrainReport,
    /// Event log of the evaluation run.
    pub events: String,
}

/// Trains every variant on the same corpus, budget and seeds, then decodes the
/// same evaluation prompts with each.
///
/// `base` supplies sizes and head settings; each variant only swaps the
/// architecture switches. Wall-clock timing, unless `run.timing_repeats` is 0,
/// uses the first seed's drafter.
pub fn run_ablation_suite<T: Float>(
    model: &TargetModel<T>,
    corpus: &Corpus,
    base: &DrafterConfig,
    train_config: &TrainConfig,
    run: &RunConfig,
    ablation: &AblationConfig,
) -> Result<(AblationReport, Vec<TrainedVariant<T>>)> {
    let variants = ablation.parsed_variants()?;
    let prompts = corpus.prompts(run.prompts, run.prompt_len, run.seed)?;
    let reference = if run.temperature == 0.0 {
        Some(ar_reference(model, &prompts, run.max_new_tokens)?)
    } else {
        None
    };
    let mut rows = Vec::with_capacity(variants.len());
    let mut trained = Vec::new();
    for &variant in &variants {
        let config = base.clone().with_variant(variant);
        let mut run = run.clone();
        run.mode = Mode::Tree(variant);
        let mut per_seed = Vec::with_capacity(ablation.seeds.len());
        let mut head1 = 0.0;
        let mut lossless = None;
        let mut timing = None;
        for &seed in &ablation.seeds {
            let mut drafter = Drafter::new(config.clone(), model, seed)?;
            let tc = TrainConfig {
                seed,
                ..train_config.clone()
            };
            let report = train(&corpus.sequences, model, &mut drafter, &tc)?;
            let outcome = run_prompts(model, &drafter, &prompts, &run, reference.as_deref())?;
            per_seed.push(outcome.metrics.tokens_per_step);
            head1 += report.final_accuracy().rate(0, 0) / ablation.seeds.len() as f64;
            if let Some(l) = outcome.metrics.lossless {
                lossless = Some(lossless.unwrap_or(true) && l);
            }
            if run.timing_repeats > 0 && timing.is_none() {
                timing = Some(measure_timing(model, &drafter, &prompts, &run)?);
            }
            trained.push(TrainedVariant {
                variant,
                seed,
                drafter,
                report,
                events: outcome.event_log(),
            });
        }
        rows.push(AblationRow {
            variant,
            per_seed,
            head1_top1: head1,
            lossless,
            timing,
        });
    }
    rows.sort_by(|a, b| b.tokens_per_step().total_cmp(&a.tokens_per_step()));
    Ok((
        AblationReport {
            seeds: ablation.seeds.clone(),
            prompts: prompts.len(),
            rows,
        },
        trained,
    ))
}

#[derive(Debug, Clone)]
pub struct SweepRow {
    pub budget: usize,
    pub nodes: usize,
    pub tokens_per_step: f64,
    /// The same metric recounted from the run's raw event log.
    pub recount: f64,
    pub lossless: Option<bool>,
    pub timing: Option<Timing>,
    pub events: String,
}

#[derive(Debug, Clone)]
pub struct SweepReport {
    pub rows: Vec<SweepRow>,
}

impl SweepReport {
    /// Soft check: tokens per step never drops as the node budget grows.
    pub fn monotone(&self) -> bool {
        let mut rows: Vec<&SweepRow> = self.rows.iter().collect();
        rows.sort_by_key(|r| r.nodes);
        rows.windows(2).all(|w| w[1].tokens_per_step >= w[0].tokens_per_step)
    }

    pub fn row(&self, budget: usize) -> Option<&SweepRow> {
        self.rows.iter().find(|r| r.budget == budget)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("budget,nodes,tokens_per_step,recount_tokens_per_step,lossless\n");
        for r in &self.rows {
            writeln!(
                s,
                "{},{},{:.6},{:.6},{}",
                r.budget,
                r.nodes,
                r.tokens_per_step,
                r.recount,
                r.lossless.map_or("na".to_string(), |b| b.to_string())
            )
            .unwrap();
        }
        s
    }

    pub fn timing_csv(&self) -> String {
        let mut s = format!("{}\n", Timing::CSV_HEADER);
        for r in &self.rows {
            if let Some(t) = &r.timing {
                writeln!(s, "{}", t.csv_row(&format!("nodes-{}", r.budget))).unwrap();
            }
        }
        s
    }
}

/// Tree speculation with the preset topology of each node budget, on the same
/// drafter and prompts. Timed unless `run.timing_repeats` is 0.
pub fn node_sweep<T: Float>(
    model: &TargetModel<T>,
    drafter: &Drafter<T>,
    prompts: &[Vec<usize>],
    run: &RunConfig,
    budgets: &[usize],
) -> Result<SweepReport> {
    let topologies = budgets
        .iter()
        .map(|&b| TreeTopology::for_budget(b))
        .collect::<Result<Vec<_>>>()?;
    let reference = if run.temperature == 0.0 {
        Some(ar_reference(model, prompts, run.max_new_tokens)?)
    } else {
        None
    };
    let mut rows = Vec::with_capacity(budgets.len());
    for (&budget, topology) in budgets.iter().zip(topologies) {
        let mut run = run.clone();
        if !matches!(run.mode, Mode::Tree(_)) {
            run.mode = Mode::Tree(drafter.config().variant_of().unwrap_or(Variant::Amphista));
        }
        run.topology = format!("nodes-{budget}");
        let nodes = topology.node_count();
        let outcome = run_prompts(model, drafter, prompts, &run, reference.as_deref())?;
        let events = outcome.event_log();
        let recount = recount_tokens_per_step(&events)?;
        rows.push(SweepRow {
            budget,
            nodes,
            tokens_per_step: outcome.metrics.tokens_per_step,
            recount,
            lossless: outcome.metrics.lossless,
            timing: if run.timing_repeats > 0 {
                Some(measure_timing(model, drafter, prompts, &run)?)
            } else {
                None
            },
            events,
        });
    }
    Ok(SweepReport { rows })
}
