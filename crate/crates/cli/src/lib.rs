//! Command-line front end: configuration, run directories and reports.

pub mod cli;
pub mod commands;
pub mod config;
pub mod output;

pub use cli::{Cli, Command};

/// Exit code 2 for configuration problems, 1 for everything else.
#[derive(Debug)]
pub enum CliError {
    Config(config::ConfigError),
    Run(anyhow::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Run(_) => 1,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(e) => write!(f, "configuration error: {e}"),
            CliError::Run(e) => write!(f, "{e:#}"),
        }
    }
}

impl From<config::ConfigError> for CliError {
    fn from(e: config::ConfigError) -> Self {
        CliError::Config(e)
    }
}

impl From<anyhow::Error> for CliError {
    fn from(e: anyhow::Error) -> Self {
        CliError::Run(e)
    }
}

impl From<archlab_core::LabError> for CliError {
    fn from(e: archlab_core::LabError) -> Self {
        CliError::Run(e.into())
    }
}

pub fn run(cli: &Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::Pretrain(a) => commands::pretrain(cli, a),
        Command::Sweep(a) => commands::sweep(cli, a),
        Command::Analyze(a) => commands::analyze(cli, a),
        Command::Eval(a) => commands::eval(cli, a),
        Command::Align(a) => commands::align(cli, a),
        Command::Report(a) => commands::report(cli, a),
    }
}
