//! Experiment orchestration for the `strata` command: configuration,
//! staged runs with checkpoints and resumption, reports and ablations.

pub mod ablate;
pub mod config;
pub mod data;
pub mod pipeline;
pub mod plots;
pub mod report;

use std::fmt::Display;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("stage {stage} failed: {message}")]
    Stage { stage: String, message: String },
    #[error("{0}")]
    Io(String),
}

impl CliError {
    pub fn stage(stage: &str, e: impl Display) -> Self {
        Self::Stage { stage: stage.to_string(), message: e.to_string() }
    }

    pub fn io(what: impl Display, e: impl Display) -> Self {
        Self::Io(format!("{what}: {e}"))
    }

    /// Process exit status: 2 for configuration problems, 3 for failures
    /// while running.
    pub fn exit_code(&self) -> u8 {
        match self {
            Self::Config(_) => 2,
            Self::Stage { .. } | Self::Io(_) => 3,
        }
    }
}
