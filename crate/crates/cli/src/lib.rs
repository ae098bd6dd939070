//! Subcommands of the `amphista` binary, callable from tests.

mod commands;
mod config;

pub use commands::{
    cmd_ablate, cmd_bench, cmd_generate, cmd_head_acc, cmd_node_sweep, cmd_selfcheck, cmd_train, run, Outcome,
    Subcommand, Workspace,
};
pub use config::{ExperimentConfig, Overrides, SweepConfig};
