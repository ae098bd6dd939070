use std::fmt::{self, Write as _};
use std::str::FromStr;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::drafter::{Drafter, Variant};
use crate::error::{Error, Result};
use crate::model::TargetModel;
use crate::numerics::Float;
use crate::speculation::{
    generate_ar, generate_speculative, Generation, Proposer, SpecConfig, StepRecord, TreeTopology, VerifyRule,
};

/// Decoding loop selected for a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Mode {
    /// One target forward per token.
    Ar,
    /// Tree speculation with a drafter of the given architecture.
    Tree(Variant),
    /// Single top-1 (or sampled) path, verified greedily or by rejection sampling.
    VanillaChain,
}

impl Mode {
    pub fn name(&self) -> String {
        self.to_string()
    }

    /// Errors when `drafter` is not built as this mode's variant.
    pub fn check_drafter<T: Float>(&self, drafter: &Drafter<T>) -> Result<()> {
        if let Mode::Tree(v) = self {
            let actual = drafter.config().variant_of();
            if actual != Some(*v) {
                return Err(Error::Config(format!(
                    "mode `{v}` needs a {v} drafter, loaded drafter is {}",
                    actual.map_or("a custom configuration".to_string(), |a| a.to_string())
                )));
            }
        }
        Ok(())
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Mode::Ar => f.write_str("ar"),
            Mode::Tree(v) => write!(f, "{v}"),
            Mode::VanillaChain => f.write_str("vanilla_chain"),
        }
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ar" => Ok(Mode::Ar),
            "vanilla_chain" | "vanilla-chain" => Ok(Mode::VanillaChain),
            _ => s.parse().map(Mode::Tree),
        }
    }
}

impl TryFrom<String> for Mode {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Mode> for String {
    fn from(m: Mode) -> String {
        m.to_string()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub mode: Mode,
    pub temperature: f64,
    /// Topology file or preset name.
    pub topology: String,
    pub max_new_tokens: usize,
    pub prompts: usize,
    pub prompt_len: usize,
    pub seed: u64,
    /// Repeats per wall-clock measurement, the median being reported; 0 skips timing.
    pub timing_repeats: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Tree(Variant::Amphista),
            temperature: 0.0,
            topology: "cartesian".into(),
            max_new_tokens: 200,
            prompts: 20,
            prompt_len: 16,
            seed: 0,
            timing_repeats: 3,
        }
    }
}

impl RunConfig {
    /// Decoding setup for a proposer with `heads` heads; `None` for plain decoding.
    pub fn spec_config(&self, heads: usize) -> Result<Option<SpecConfig>> {
        if self.temperature < 0.0 || !self.temperature.is_finite() {
            return Err(Error::NegativeTemperature(self.temperature));
        }
        Ok(match self.mode {
            Mode::Ar => None,
            Mode::Tree(_) => Some(SpecConfig::tree(TreeTopology::resolve(&self.topology)?, self.temperature)),
            Mode::VanillaChain => {
                let rule = if self.temperature == 0.0 {
                    VerifyRule::Greedy
                } else {
                    VerifyRule::Chain
                };
                Some(SpecConfig::new(TreeTopology::chain(heads), rule, self.temperature))
            }
        })
    }
}

/// Per-prompt sampling stream, independent of how many prompts run before it.
pub fn prompt_rng(seed: u64, prompt: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(prompt as u64);
    rng
}

/// Run-level metrics. Wall-clock fields stay `None` until timed.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub mode: String,
    pub prompts: usize,
    /// Target verification forwards, prefill excluded.
    pub total_steps: usize,
    /// Tokens emitted by those forwards, before truncation to the budget.
    pub total_tokens: usize,
    pub tokens_per_step: f64,
    /// Greedy speculative runs only: every output equals plain greedy decoding.
    pub lossless: Option<bool>,
    pub head_top1: Option<Vec<f64>>,
    pub head_top5: Option<Vec<f64>>,
    pub timing: Option<Timing>,
}

impl MetricsReport {
    pub fn from_generations(mode: &str, generations: &[Generation], lossless: Option<bool>) -> Self {
        let total_steps = generations.iter().map(|g| g.steps.len()).sum();
        let total_tokens = generations.iter().map(Generation::emitted_total).sum();
        Self {
            mode: mode.to_string(),
            prompts: generations.len(),
            total_steps,
            total_tokens,
            tokens_per_step: if total_steps == 0 {
                0.0
            } else {
                total_tokens as f64 / total_steps as f64
            },
            lossless,
            head_top1: None,
            head_top5: None,
            timing: None,
        }
    }

    pub const CSV_HEADER: &'static str =
        "mode,prompts,total_steps,total_tokens,tokens_per_step,lossless,head_top1,head_top5";

    /// Deterministic columns only; wall-clock figures go to [`Timing::csv_row`].
    /// Per-head accuracies are `;`-separated, head 1 first.
    pub fn csv_row(&self) -> String {
        let heads = |h: &Option<Vec<f64>>| {
            h.as_ref().map_or("na".to_string(), |v| {
                v.iter().map(|x| format!("{x:.6}")).collect::<Vec<_>>().join(";")
            })
        };
        format!(
            "{},{},{},{},{:.6},{},{},{}",
            self.mode,
            self.prompts,
            self.total_steps,
            self.total_tokens,
            self.tokens_per_step,
            self.lossless.map_or("na".to_string(), |b| b.to_string()),
            heads(&self.head_top1),
            heads(&self.head_top5)
        )
    }
}

/// Median wall-clock figures for one speculative setup against plain decoding.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Timing {
    pub ar_secs: f64,
    pub spec_secs: f64,
    pub tokens_per_sec: f64,
    pub speedup_vs_ar: f64,
}

impl Timing {
    pub const CSV_HEADER: &'static str = "label,ar_secs,spec_secs,tokens_per_sec,speedup_vs_ar";

    pub fn csv_row(&self, label: &str) -> String {
        format!(
            "{label},{:.6},{:.6},{:.2},{:.4}",
            self.ar_secs, self.spec_secs, self.tokens_per_sec, self.speedup_vs_ar
        )
    }
}

/// Outputs of one mode over a prompt set.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub generations: Vec<Generation>,
    pub metrics: MetricsReport,
}

impl RunOutcome {
    pub fn event_log(&self) -> String {
        event_log(&self.generations)
    }
}

/// Plain greedy outputs used as the losslessness reference.
pub fn ar_reference<T: Float>(model: &TargetModel<T>, prompts: &[Vec<usize>], max_new: usize) -> Result<Vec<Vec<usize>>> {
    prompts
        .iter()
        .enumerate()
        .map(|(i, p)| Ok(generate_ar(model, p, max_new, 0.0, &mut prompt_rng(0, i))?.tokens))
        .collect()
}

fn decode_all<T: Float, P: Proposer<T>>(
    model: &TargetModel<T>,
    proposer: &P,
    prompts: &[Vec<usize>],
    run: &RunConfig,
    spec: Option<&SpecConfig>,
) -> Result<Vec<Generation>> {
    prompts
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let mut rng = prompt_rng(run.seed, i);
            match spec {
                None => generate_ar(model, p, run.max_new_tokens, run.temperature, &mut rng),
                Some(cfg) => generate_speculative(model, proposer, p, run.max_new_tokens, cfg, &mut rng),
            }
        })
        .collect()
}

/// Decodes every prompt in `run.mode`.
///
/// Greedy speculative runs compare against `reference` (computed here when not
/// supplied) and set the losslessness flag.
pub fn run_prompts<T: Float, P: Proposer<T>>(
    model: &TargetModel<T>,
    proposer: &P,
    prompts: &[Vec<usize>],
    run: &RunConfig,
    reference: Option<&[Vec<usize>]>,
) -> Result<RunOutcome> {
    if prompts.is_empty() {
        return Err(Error::EmptyInput);
    }
    let spec = run.spec_config(proposer.heads())?;
    let generations = decode_all(model, proposer, prompts, run, spec.as_ref())?;
    let lossless = if spec.is_some() && run.temperature == 0.0 {
        let computed;
        let reference = match reference {
            Some(r) => r,
            None => {
                computed = ar_reference(model, prompts, run.max_new_tokens)?;
                &computed
            }
        };
        if reference.len() != prompts.len() {
            return Err(Error::Invariant("reference does not cover every prompt".into()));
        }
        Some(generations.iter().zip(reference).all(|(g, r)| g.tokens == *r))
    } else {
        None
    };
    Ok(RunOutcome {
        metrics: MetricsReport::from_generations(&run.mode.name(), &generations, lossless),
        generations,
    })
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

/// Median-of-`run.timing_repeats` wall clock for plain decoding and for `run.mode`
/// over the same prompts, in this process and build.
pub fn measure_timing<T: Float, P: Proposer<T>>(
    model: &TargetModel<T>,
    proposer: &P,
    prompts: &[Vec<usize>],
    run: &RunConfig,
) -> Result<Timing> {
    let repeats = run.timing_repeats.max(1);
    let spec = run.spec_config(proposer.heads())?;
    let clock = |spec: Option<&SpecConfig>| -> Result<(f64, usize)> {
        let mut secs = Vec::with_capacity(repeats);
        let mut tokens = 0;
        for _ in 0..repeats {
            let start = Instant::now();
            let gens = decode_all(model, proposer, prompts, run, spec)?;
            secs.push(start.elapsed().as_secs_f64());
            tokens = gens.iter().map(|g| g.tokens.len()).sum();
        }
        Ok((median(secs), tokens))
    };
    let (ar_secs, _) = clock(None)?;
    let (spec_secs, tokens) = clock(spec.as_ref())?;
    Ok(Timing {
        ar_secs,
        spec_secs,
        tokens_per_sec: tokens as f64 / spec_secs.max(f64::MIN_POSITIVE),
        speedup_vs_ar: ar_secs / spec_secs.max(f64::MIN_POSITIVE),
    })
}

/// One prompt through `run.mode`, timed unless `run.timing_repeats` is 0.
pub fn generate<T: Float, P: Proposer<T>>(
    prompt: &[usize],
    run: &RunConfig,
    model: &TargetModel<T>,
    proposer: &P,
) -> Result<(Vec<usize>, MetricsReport)> {
    let prompts = [prompt.to_vec()];
    let mut outcome = run_prompts(model, proposer, &prompts, run, None)?;
    if run.timing_repeats > 0 {
        outcome.metrics.timing = Some(measure_timing(model, proposer, &prompts, run)?);
    }
    let tokens = outcome.generations.pop().expect("one prompt").tokens;
    Ok((tokens, outcome.metrics))
}

pub const EVENT_LOG_HEADER: &str = "prompt,step,nodes,accepted_len,bonus";

/// One line per target verification forward.
pub fn event_log(generations: &[Generation]) -> String {
    let mut s = String::from(EVENT_LOG_HEADER);
    s.push('\n');
    for (p, g) in generations.iter().enumerate() {
        for r in &g.steps {
            writeln!(s, "{p},{},{},{},{}", r.step, r.nodes, r.accepted_len, r.bonus).unwrap();
        }
    }
    s
}

/// Inverse of [`event_log`].
pub fn parse_event_log(text: &str) -> Result<Vec<(usize, StepRecord)>> {
    let mut lines = text.lines();
    if lines.next() != Some(EVENT_LOG_HEADER) {
        return Err(Error::Config("event log header missing".into()));
    }
    lines
        .filter(|l| !l.is_empty())
        .map(|line| {
            let f: Vec<usize> = line
                .split(',')
                .map(|x| x.parse().map_err(|_| Error::Config(format!("bad event line `{line}`"))))
                .collect::<Result<_>>()?;
            match f[..] {
                [prompt, step, nodes, accepted_len, bonus] => Ok((
                    prompt,
                    StepRecord {
                        step,
                        nodes,
                        accepted_len,
                        bonus,
                    },
                )),
                _ => Err(Error::Config(format!("bad event line `{line}`"))),
            }
        })
        .collect()
}

/// Tokens per verification forward recomputed from a raw event log.
pub fn recount_tokens_per_step(text: &str) -> Result<f64> {
    let events = parse_event_log(text)?;
    if events.is_empty() {
        return Ok(0.0);
    }
    let emitted: usize = events.iter().map(|(_, r)| r.accepted_len + 1).sum();
    Ok(emitted as f64 / events.len() as f64)
}
