//! Batch runner for kvnsim scenarios.

pub mod config;
pub mod output;
pub mod run;

pub use config::{parse_scenario, parse_scenario_str, Scenario, ScenarioConfig};
pub use run::{check, resources, run, scaling, RunOptions, RunReport};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("cannot read {path}: {source}")]
    Read { path: String, source: std::io::Error },
    #[error("parse error at line {line}, column {column}: {message}")]
    Parse { line: usize, column: usize, message: String },
    #[error("invalid `{key}`: {message}")]
    Invalid { key: String, message: String },
    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: &'static str,
        source: kvnsim::KvnError,
    },
    #[error("cannot write {path}: {source}")]
    Write { path: String, source: std::io::Error },
}

impl CliError {
    /// Process exit code for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Read { .. } | CliError::Parse { .. } | CliError::Invalid { .. } => 2,
            CliError::Stage { .. } | CliError::Write { .. } => 3,
        }
    }
}

/// Exit code of a run whose tolerance gates failed.
pub const GATES_FAILED: i32 = 1;
