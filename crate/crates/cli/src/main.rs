use std::path::PathBuf;
use std::process::ExitCode;

use amphista::harness::Mode;
use amphista_cli::{run, ExperimentConfig, Overrides, Subcommand, Workspace};
use clap::{Args, Parser, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "amphista", version, about = "Speculative decoding with staged-adaptation draft heads")]
struct Cli {
    #[arg(value_enum)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Command {
    /// Pretrain the target, then train the drafter.
    Train,
    /// Decode the evaluation prompts in the configured mode.
    Generate,
    /// Plain decoding, vanilla chain and tree speculation side by side.
    Bench,
    /// Train and compare every drafter variant.
    Ablate,
    /// Tokens per step across preset node budgets.
    NodeSweep,
    /// Per-head top-1/top-5 accuracy on held-out data.
    HeadAcc,
    /// Fast invariant checks on an untrained model.
    Selfcheck,
}

#[derive(Debug, Args)]
struct Common {
    /// TOML file with [model], [drafter], [pretrain], [train], [corpus], [run], [ablation] and [sweep] tables.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Replaces every seed in the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for reports, event logs and checkpoints.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// `ar`, `vanilla_chain` or a variant name such as `amphista` or `medusa`.
    #[arg(long)]
    mode: Option<Mode>,
    #[arg(long)]
    temperature: Option<f64>,
    /// Topology file or preset (`chain`, `cartesian`, `sparse-22`, `nodes-64`, ...).
    #[arg(long)]
    topology: Option<String>,
}

impl From<Command> for Subcommand {
    fn from(c: Command) -> Self {
        match c {
            Command::Train => Subcommand::Train,
            Command::Generate => Subcommand::Generate,
            Command::Bench => Subcommand::Bench,
            Command::Ablate => Subcommand::Ablate,
            Command::NodeSweep => Subcommand::NodeSweep,
            Command::HeadAcc => Subcommand::HeadAcc,
            Command::Selfcheck => Subcommand::Selfcheck,
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let c = cli.common;
    let mut config = match &c.config {
        Some(path) => match ExperimentConfig::load(path) {
            Ok(cfg) => cfg,
            Err(e) => {
                eprintln!("error: {e:#}");
                return ExitCode::from(1);
            }
        },
        None => ExperimentConfig::default(),
    };
    config.apply(&Overrides {
        seed: c.seed,
        mode: c.mode,
        temperature: c.temperature,
        topology: c.topology,
    });
    let ws = Workspace { config, out: c.out };
    match run(cli.command.into(), &ws) {
        Ok(outcome) => {
            for line in &outcome.summary {
                println!("{line}");
            }
            if outcome.violations.is_empty() {
                ExitCode::SUCCESS
            } else {
                for v in &outcome.violations {
                    eprintln!("invariant violated: {v}");
                }
                ExitCode::from(2)
            }
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
