use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use amphista::drafter::{Drafter, Variant};
use amphista::harness::{
    accuracy_csv, ar_reference, measure_head_accuracy, measure_timing, node_sweep, run_ablation_suite, run_prompts,
    ByteTokenizer, Corpus, MetricsReport, Mode, RunConfig, Timing,
};
use amphista::model::TargetModel;
use amphista::numerics::{argmax, Checkpoint};
use amphista::speculation::{build_mask, OracleProposer, TreeTopology};
use amphista::training::{holdout_split, pretrain_target, train, REPORT_TOP_NS};
use anyhow::{bail, Context as _, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::ExperimentConfig;

/// A resolved config and the directory every artifact is written to.
#[derive(Debug, Clone)]
pub struct Workspace {
    pub config: ExperimentConfig,
    pub out: PathBuf,
}

/// What a subcommand did. Any violation makes the process exit nonzero.
#[derive(Debug, Default)]
pub struct Outcome {
    pub summary: Vec<String>,
    pub violations: Vec<String>,
    pub written: Vec<PathBuf>,
}

impl Outcome {
    fn note(&mut self, line: impl Into<String>) {
        self.summary.push(line.into());
    }

    fn violation(&mut self, line: impl Into<String>) {
        self.violations.push(line.into());
    }

    fn write(&mut self, ws: &Workspace, name: &str, contents: impl AsRef<[u8]>) -> Result<()> {
        let path = ws.out.join(name);
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))?;
        self.written.push(path);
        Ok(())
    }
}

fn read_opt(path: &Path) -> Option<String> {
    std::fs::read_to_string(path).ok()
}

fn target_bytes(model: &TargetModel) -> Vec<u8> {
    let mut ck = Checkpoint::new();
    model.save_into(&mut ck);
    ck.to_bytes()
}

fn corpus(ws: &Workspace) -> Result<Corpus> {
    Ok(Corpus::load(&ws.config.corpus)?)
}

/// The pretrained, frozen target: loaded when the checkpoint in `out` was made
/// with the same settings, otherwise pretrained and saved.
fn prepare_target(ws: &Workspace, corpus: &Corpus, o: &mut Outcome) -> Result<TargetModel> {
    let cfg = &ws.config;
    let fp = cfg.target_fingerprint();
    let ckpt = ws.out.join("target.ckpt");
    let mut model = TargetModel::new(cfg.model.clone(), cfg.seed)?;
    if ckpt.is_file() && read_opt(&ws.out.join("target.toml")).as_deref() == Some(fp.as_str()) {
        model.load_from(&Checkpoint::load(&ckpt)?)?;
        o.note(format!("target: reused {}", ckpt.display()));
    } else {
        let losses = pretrain_target(&corpus.sequences, &mut model, &cfg.pretrain)?;
        let mut csv = String::from("epoch,loss\n");
        for (i, l) in losses.iter().enumerate() {
            writeln!(csv, "{},{l:.6}", i + 1)?;
        }
        o.write(ws, "pretrain.csv", csv)?;
        o.write(ws, "target.ckpt", target_bytes(&model))?;
        o.write(ws, "target.toml", &fp)?;
        o.note(format!(
            "target: pretrained {} epochs, final loss {:.4}",
            losses.len(),
            losses.last().copied().unwrap_or(f64::NAN)
        ));
    }
    model.freeze();
    Ok(model)
}

fn new_drafter(ws: &Workspace, model: &TargetModel) -> Result<Drafter> {
    Ok(Drafter::new(ws.config.drafter.clone(), model, ws.config.train.seed)?)
}

/// The trained drafter, reused from `out` under the same rule as the target.
fn prepare_drafter(ws: &Workspace, model: &TargetModel, corpus: &Corpus, o: &mut Outcome) -> Result<Drafter> {
    let cfg = &ws.config;
    let fp = cfg.drafter_fingerprint();
    let ckpt = ws.out.join("drafter.ckpt");
    let mut drafter = new_drafter(ws, model)?;
    if ckpt.is_file() && read_opt(&ws.out.join("drafter.toml")).as_deref() == Some(fp.as_str()) {
        drafter.load_from(&Checkpoint::load(&ckpt)?)?;
        o.note(format!("drafter: reused {}", ckpt.display()));
        return Ok(drafter);
    }
    let before = target_bytes(model);
    let report = train(&corpus.sequences, model, &mut drafter, &cfg.train)?;
    if target_bytes(model) != before {
        o.violation("target parameters changed during drafter training");
    }
    o.write(ws, "train.csv", report.to_csv())?;
    let mut ck = Checkpoint::new();
    drafter.save_into(&mut ck);
    o.write(ws, "drafter.ckpt", ck.to_bytes())?;
    o.write(ws, "drafter.toml", &fp)?;
    let last = report.epochs.last().expect("at least one epoch");
    o.note(format!(
        "drafter: trained {} epochs ({} steps), total loss {:.4}, head-1 top-1 {:.4}",
        report.epochs.len(),
        report.steps,
        last.losses.total,
        last.accuracy.rate(0, 0)
    ));
    Ok(drafter)
}

fn render(tokens: &[usize]) -> String {
    match ByteTokenizer.detokenize(tokens) {
        Ok(bytes) => bytes.escape_ascii().to_string(),
        Err(_) => tokens.iter().map(usize::to_string).collect::<Vec<_>>().join(" "),
    }
}

fn check_lossless(m: &MetricsReport, o: &mut Outcome) {
    if m.lossless == Some(false) {
        o.violation(format!("{}: greedy speculative output differs from plain greedy decoding", m.mode));
    }
}

fn timing_csv<'a>(rows: impl IntoIterator<Item = (String, &'a Timing)>) -> String {
    let mut s = format!("{}\n", Timing::CSV_HEADER);
    for (label, t) in rows {
        writeln!(s, "{}", t.csv_row(&label)).unwrap();
    }
    s
}

/// Pretrains the target and trains the drafter.
pub fn cmd_train(ws: &Workspace) -> Result<Outcome> {
    let mut o = Outcome::default();
    let corpus = corpus(ws)?;
    o.note(format!(
        "corpus: {} ({} sequences, {} tokens)",
        corpus.name,
        corpus.sequences.len(),
        corpus.token_count()
    ));
    let model = prepare_target(ws, &corpus, &mut o)?;
    prepare_drafter(ws, &model, &corpus, &mut o)?;
    Ok(o)
}

fn prompts(ws: &Workspace, corpus: &Corpus) -> Result<Vec<Vec<usize>>> {
    let run = &ws.config.run;
    Ok(corpus.prompts(run.prompts, run.prompt_len, run.seed)?)
}

/// Decodes the evaluation prompts in the configured mode.
pub fn cmd_generate(ws: &Workspace) -> Result<Outcome> {
    let mut o = Outcome::default();
    let corpus = corpus(ws)?;
    let model = prepare_target(ws, &corpus, &mut o)?;
    let drafter = prepare_drafter(ws, &model, &corpus, &mut o)?;
    let run = &ws.config.run;
    run.mode.check_drafter(&drafter)?;
    let prompts = prompts(ws, &corpus)?;
    let mut outcome = run_prompts(&model, &drafter, &prompts, run, None)?;
    if run.timing_repeats > 0 {
        outcome.metrics.timing = Some(measure_timing(&model, &drafter, &prompts, run)?);
    }
    let m = &outcome.metrics;
    check_lossless(m, &mut o);
    o.write(ws, "generate.csv", format!("{}\n{}\n", MetricsReport::CSV_HEADER, m.csv_row()))?;
    o.write(ws, "events.log", outcome.event_log())?;
    let mut samples = String::new();
    for (i, (p, g)) in prompts.iter().zip(&outcome.generations).enumerate() {
        writeln!(samples, "{i}\t{}\t{}", render(p), render(&g.tokens))?;
    }
    o.write(ws, "samples.txt", samples)?;
    if let Some(t) = &m.timing {
        o.write(ws, "timing.csv", timing_csv([(m.mode.clone(), t)]))?;
        o.note(format!(
            "wall clock: {:.1} tokens/s, speed-up {:.3}x over plain decoding",
            t.tokens_per_sec, t.speedup_vs_ar
        ));
    }
    o.note(format!(
        "{}: {} prompts, {} steps, {:.4} tokens/step, lossless {}",
        m.mode,
        m.prompts,
        m.total_steps,
        m.tokens_per_step,
        m.lossless.map_or("n/a".into(), |b| b.to_string())
    ));
    Ok(o)
}

/// Plain decoding, the vanilla chain and the configured tree mode on the same prompts.
pub fn cmd_bench(ws: &Workspace) -> Result<Outcome> {
    let mut o = Outcome::default();
    let corpus = corpus(ws)?;
    let model = prepare_target(ws, &corpus, &mut o)?;
    let drafter = prepare_drafter(ws, &model, &corpus, &mut o)?;
    let base = &ws.config.run;
    let prompts = prompts(ws, &corpus)?;
    let reference = if base.temperature == 0.0 {
        Some(ar_reference(&model, &prompts, base.max_new_tokens)?)
    } else {
        None
    };
    let (_, holdout) = holdout_split(&corpus.sequences, ws.config.train.holdout_frac);
    let acc = measure_head_accuracy(holdout, &model, &drafter, &REPORT_TOP_NS)?;
    let tree_mode = match base.mode {
        Mode::Tree(v) => v,
        _ => drafter.config().variant_of().unwrap_or(Variant::Amphista),
    };
    let mut csv = format!("{}\n", MetricsReport::CSV_HEADER);
    let mut timings = Vec::new();
    for mode in [Mode::Ar, Mode::VanillaChain, Mode::Tree(tree_mode)] {
        mode.check_drafter(&drafter)?;
        let run = RunConfig { mode, ..base.clone() };
        let mut outcome = run_prompts(&model, &drafter, &prompts, &run, reference.as_deref())?;
        let m = &mut outcome.metrics;
        if mode == Mode::Ar && m.tokens_per_step != 1.0 {
            o.violation(format!("plain decoding reported {} tokens/step", m.tokens_per_step));
        }
        if matches!(mode, Mode::Tree(_)) {
            m.head_top1 = Some((0..acc.heads()).map(|k| acc.rate(k, 0)).collect());
            m.head_top5 = Some((0..acc.heads()).map(|k| acc.rate(k, 1)).collect());
        }
        check_lossless(m, &mut o);
        writeln!(csv, "{}", m.csv_row())?;
        o.write(ws, &format!("events_{}.log", mode.name()), outcome.event_log())?;
        if mode != Mode::Ar && run.timing_repeats > 0 {
            timings.push((mode.name(), measure_timing(&model, &drafter, &prompts, &run)?));
        }
        o.note(format!("{:<22} {:.4} tokens/step", mode.name(), outcome.metrics.tokens_per_step));
    }
    o.write(ws, "bench.csv", csv)?;
    if !timings.is_empty() {
        o.write(ws, "timing.csv", timing_csv(timings.iter().map(|(l, t)| (l.clone(), t))))?;
        for (l, t) in &timings {
            o.note(format!("{l:<22} speed-up {:.3}x, {:.1} tokens/s", t.speedup_vs_ar, t.tokens_per_sec));
        }
    }
    Ok(o)
}

/// Trains and evaluates every configured variant.
pub fn cmd_ablate(ws: &Workspace) -> Result<Outcome> {
    let mut o = Outcome::default();
    let corpus = corpus(ws)?;
    let model = prepare_target(ws, &corpus, &mut o)?;
    let cfg = &ws.config;
    let before = target_bytes(&model);
    let (report, trained) = run_ablation_suite(&model, &corpus, &cfg.drafter, &cfg.train, &cfg.run, &cfg.ablation)?;
    if target_bytes(&model) != before {
        o.violation("target parameters changed during ablation training");
    }
    o.write(ws, "ablation.csv", report.to_csv())?;
    if report.rows.iter().any(|r| r.timing.is_some()) {
        o.write(ws, "ablation_timing.csv", report.timing_csv())?;
    }
    for t in &trained {
        let stem = format!("ablation/{}_seed{}", t.variant, t.seed);
        o.write(ws, &format!("{stem}_events.log"), &t.events)?;
        o.write(ws, &format!("{stem}_train.csv"), t.report.to_csv())?;
    }
    for r in &report.rows {
        if r.lossless == Some(false) {
            o.violation(format!("{}: greedy speculative output differs from plain greedy decoding", r.variant));
        }
        o.note(format!(
            "{:<22} {:.4} tokens/step (reference {:.2})",
            r.variant.name(),
            r.tokens_per_step(),
            r.variant.reference_accepted_length()
        ));
    }
    if let Some(full) = report.row(Variant::Amphista) {
        for other in [Variant::NoAutoEmbedding, Variant::Medusa] {
            if let Some(r) = report.row(other) {
                let status = if full.tokens_per_step() >= r.tokens_per_step() { "pass" } else { "warn" };
                o.note(format!("direction amphista >= {other}: {status}"));
            }
        }
    }
    Ok(o)
}

/// Tokens per step across the preset node budgets.
pub fn cmd_node_sweep(ws: &Workspace) -> Result<Outcome> {
    let mut o = Outcome::default();
    let corpus = corpus(ws)?;
    let model = prepare_target(ws, &corpus, &mut o)?;
    let drafter = prepare_drafter(ws, &model, &corpus, &mut o)?;
    let prompts = prompts(ws, &corpus)?;
    let sweep = node_sweep(&model, &drafter, &prompts, &ws.config.run, &ws.config.sweep.budgets)?;
    o.write(ws, "sweep.csv", sweep.to_csv())?;
    if sweep.rows.iter().any(|r| r.timing.is_some()) {
        o.write(ws, "sweep_timing.csv", sweep.timing_csv())?;
    }
    for r in &sweep.rows {
        o.write(ws, &format!("sweep/nodes-{}_events.log", r.budget), &r.events)?;
        if r.recount != r.tokens_per_step {
            o.violation(format!(
                "budget {}: event log gives {} tokens/step, run reported {}",
                r.budget, r.recount, r.tokens_per_step
            ));
        }
        if r.lossless == Some(false) {
            o.violation(format!("budget {}: greedy output differs from plain greedy decoding", r.budget));
        }
        o.note(format!("nodes {:>3}: {:.4} tokens/step", r.nodes, r.tokens_per_step));
    }
    o.note(format!(
        "monotone in node count: {}",
        if sweep.monotone() { "yes" } else { "no (soft check)" }
    ));
    Ok(o)
}

/// Per-head top-1/top-5 accuracy on the held-out split.
pub fn cmd_head_acc(ws: &Workspace) -> Result<Outcome> {
    let mut o = Outcome::default();
    let corpus = corpus(ws)?;
    let model = prepare_target(ws, &corpus, &mut o)?;
    let drafter = prepare_drafter(ws, &model, &corpus, &mut o)?;
    let (_, holdout) = holdout_split(&corpus.sequences, ws.config.train.holdout_frac);
    let acc = measure_head_accuracy(holdout, &model, &drafter, &REPORT_TOP_NS)?;
    o.write(ws, "head_acc.csv", accuracy_csv(&acc))?;
    for k in 0..acc.heads() {
        o.note(format!("head {}: top-1 {:.4}, top-5 {:.4}", k + 1, acc.rate(k, 0), acc.rate(k, 1)));
    }
    Ok(o)
}

fn random_topology(rng: &mut ChaCha8Rng, depth: usize, max_nodes: usize) -> Result<TreeTopology> {
    let mut paths: Vec<Vec<usize>> = Vec::new();
    while paths.len() + 1 < max_nodes {
        let len = rng.gen_range(1..=depth);
        let path: Vec<usize> = (0..len).map(|_| rng.gen_range(0..3)).collect();
        for l in 1..=path.len() {
            if !paths.contains(&path[..l].to_vec()) && paths.len() + 1 < max_nodes {
                paths.push(path[..l].to_vec());
            }
        }
        if rng.gen_bool(0.2) {
            break;
        }
    }
    Ok(TreeTopology::from_paths(paths)?)
}

/// Quick invariant checks on an untrained model of the configured shape.
pub fn cmd_selfcheck(ws: &Workspace) -> Result<Outcome> {
    let mut o = Outcome::default();
    let cfg = &ws.config;
    let mut model = TargetModel::new(cfg.model.clone(), cfg.seed)?;
    model.freeze();
    let drafter = new_drafter(ws, &model)?;
    let heads = drafter.config().heads;
    let v = cfg.model.vocab_size;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut rows = vec![];

    let mut worst: f64 = 0.0;
    for _ in 0..8 {
        let prefix: Vec<usize> = (0..rng.gen_range(1..12)).map(|_| rng.gen_range(0..v)).collect();
        let topology = random_topology(&mut rng, heads, 16)?;
        let n = topology.node_count();
        let c = prefix.len() - 1;
        let mut tokens = vec![prefix[c]];
        tokens.extend((1..n).map(|_| rng.gen_range(0..v)));
        let positions: Vec<usize> = (0..n).map(|i| c + topology.depth(i)).collect();
        let mut cache = model.new_cache();
        if c > 0 {
            model.forward(&prefix[..c], &mut cache, None, None)?;
        }
        let out = model.forward(&tokens, &mut cache, Some(&build_mask(&topology)), Some(&positions))?;
        for node in 0..n {
            let mut seq = prefix[..c].to_vec();
            seq.extend(topology.path_to(node).iter().map(|&i| tokens[i]));
            let full = model.forward_full(&seq)?;
            let row = full.logits.row(seq.len() - 1);
            for (a, b) in row.iter().zip(out.logits.row(node)) {
                worst = worst.max((a - b).abs() as f64);
            }
        }
    }
    rows.push(("tree_attention", worst <= 1e-4, format!("max |diff| {worst:.2e}")));

    let prompts: Vec<Vec<usize>> = (0..3).map(|_| (0..6).map(|_| rng.gen_range(0..v)).collect()).collect();
    let base = RunConfig {
        max_new_tokens: 24,
        timing_repeats: 0,
        ..cfg.run.clone()
    };
    let ar = run_prompts(&model, &drafter, &prompts, &RunConfig { mode: Mode::Ar, temperature: 0.0, ..base.clone() }, None)?;
    rows.push((
        "ar_tokens_per_step",
        ar.metrics.tokens_per_step == 1.0,
        format!("{}", ar.metrics.tokens_per_step),
    ));

    let oracle = OracleProposer::new(&model, heads, vec![1; heads])?;
    let chain = RunConfig {
        mode: Mode::VanillaChain,
        temperature: 0.0,
        ..base.clone()
    };
    let perfect = run_prompts(&model, &oracle, &prompts, &chain, None)?;
    rows.push((
        "oracle_bound",
        perfect.metrics.tokens_per_step == (heads + 1) as f64,
        format!("{} (bound {})", perfect.metrics.tokens_per_step, heads + 1),
    ));

    let reference = ar_reference(&model, &prompts, base.max_new_tokens)?;
    let mut lossless = true;
    let mut logs = Vec::new();
    let variant = drafter.config().variant_of().unwrap_or(Variant::Amphista);
    for topology in ["chain", "cartesian", "sparse-22"] {
        let run = RunConfig {
            mode: Mode::Tree(variant),
            temperature: 0.0,
            topology: topology.into(),
            ..base.clone()
        };
        let r = run_prompts(&model, &drafter, &prompts, &run, Some(&reference))?;
        lossless &= r.metrics.lossless == Some(true);
        logs.push((run, r.event_log()));
    }
    rows.push(("greedy_lossless", lossless, "chain, cartesian, sparse-22".into()));

    let (run, first) = &logs[1];
    let again = run_prompts(&model, &drafter, &prompts, run, Some(&reference))?.event_log();
    rows.push(("determinism", &again == first, "repeated run, identical event log".into()));

    let greedy = model.forward_full(&prompts[0])?;
    let next = argmax(greedy.logits.row(prompts[0].len() - 1));
    rows.push((
        "first_token",
        reference[0].first() == Some(&next),
        "plain decoding starts with the prompt's argmax".into(),
    ));

    let mut csv = String::from("check,status,detail\n");
    for (name, ok, detail) in rows {
        let status = if ok { "pass" } else { "fail" };
        writeln!(csv, "{name},{status},{detail}")?;
        o.note(format!("{status:<4} {name}: {detail}"));
        if !ok {
            o.violation(format!("selfcheck {name} failed: {detail}"));
        }
    }
    o.write(ws, "selfcheck.csv", csv)?;
    Ok(o)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Subcommand {
    Train,
    Generate,
    Bench,
    Ablate,
    NodeSweep,
    HeadAcc,
    Selfcheck,
}

impl Subcommand {
    pub const ALL: [Subcommand; 7] = [
        Subcommand::Train,
        Subcommand::Generate,
        Subcommand::Bench,
        Subcommand::Ablate,
        Subcommand::NodeSweep,
        Subcommand::HeadAcc,
        Subcommand::Selfcheck,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Subcommand::Train => "train",
            Subcommand::Generate => "generate",
            Subcommand::Bench => "bench",
            Subcommand::Ablate => "ablate",
            Subcommand::NodeSweep => "node-sweep",
            Subcommand::HeadAcc => "head-acc",
            Subcommand::Selfcheck => "selfcheck",
        }
    }
}

/// Validates the config, writes it to `out/config.toml` and runs `cmd`.
pub fn run(cmd: Subcommand, ws: &Workspace) -> Result<Outcome> {
    ws.config.validate()?;
    std::fs::create_dir_all(&ws.out).with_context(|| format!("creating {}", ws.out.display()))?;
    let mut outcome = match cmd {
        Subcommand::Train => cmd_train(ws),
        Subcommand::Generate => cmd_generate(ws),
        Subcommand::Bench => cmd_bench(ws),
        Subcommand::Ablate => cmd_ablate(ws),
        Subcommand::NodeSweep => cmd_node_sweep(ws),
        Subcommand::HeadAcc => cmd_head_acc(ws),
        Subcommand::Selfcheck => cmd_selfcheck(ws),
    }?;
    let path = ws.out.join("config.toml");
    std::fs::write(&path, ws.config.to_toml_string())?;
    outcome.written.push(path);
    if outcome.written.is_empty() {
        bail!("{} wrote nothing", cmd.name());
    }
    Ok(outcome)
}
