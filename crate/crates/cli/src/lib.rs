//! Library side of the `tfgrad` command-line tool: run configuration and
//! the subcommands, callable without spawning a process.

pub mod commands;
pub mod config;

pub use commands::{
    cmd_init_density, cmd_inspect_tf, cmd_optimize, cmd_render, cmd_synth, inspect_tf, render_view, InitDensityOutput,
    OptimizeOutput, SynthKind, SynthOutput, TfSummary, ViewArgs,
};
pub use config::{RunConfig, ScorerChoice};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// A field that failed validation, named by its dotted config key.
    #[error("{field}: {message}")]
    Validation { field: String, message: String },

    #[error("config: {0}")]
    Parse(String),

    #[error(transparent)]
    Runtime(#[from] tfgrad::Error),
}

impl CliError {
    /// 1 for bad input, 2 for failures while running.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation { .. } | CliError::Parse(_) => 1,
            CliError::Runtime(tfgrad::Error::Format(_) | tfgrad::Error::InvalidArgument(_)) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}
