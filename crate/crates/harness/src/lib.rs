//! Experiment harness and live teleoperation server for teleforge.
//!
//! # Seeds
//!
//! Every run derives all of its randomness from the single config seed
//! (`--seed`, or `TFORGE_SEED`) through [`sub_seed`], a splitmix64 mix of
//! `(parent, index)`:
//!
//! | use                                   | seed                                          |
//! |---------------------------------------|-----------------------------------------------|
//! | training (all three stages)           | `seed` itself; the pipeline derives children 1, 10, 11, 20, 21 and 31 |
//! | evaluation episode `j` of task `k`    | `sub_seed(sub_seed(seed, 100), 1000 * k + j)` |
//! | held-force direction of that episode  | first draw of `sub_seed(episode_seed, 0xF0)`  |
//! | `gradcheck` networks                  | `sub_seed(seed, 200)`                         |
//!
//! Controllers and conditions share evaluation seeds, so every comparison
//! is paired: same command script, same randomized dynamics, same force.

pub mod config;
pub mod experiment;
pub mod protocol;
pub mod report;
pub mod server;

use std::path::PathBuf;

use thiserror::Error;

pub use config::ExperimentConfig;
pub use teleforge_core::training::episode_seed as sub_seed;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("{0}")]
    Config(String),
    #[error("checkpoint not found: {}", .0.display())]
    MissingCheckpoint(PathBuf),
    #[error("checkpoint {}: {source}", path.display())]
    BadCheckpoint {
        path: PathBuf,
        #[source]
        source: teleforge_core::policy::ParamsIoError,
    },
    #[error("gradient check failed: max relative error {0:.3e}")]
    GradCheckFailed(f64),
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
    #[error("port {port} unavailable: {source}")]
    Bind {
        port: u16,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Core(#[from] teleforge_core::Error),
    #[error(transparent)]
    Pipeline(#[from] teleforge_core::training::PipelineError),
}

impl HarnessError {
    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        HarnessError::Io {
            context: context.into(),
            source,
        }
    }

    /// Process exit status for this error. Status 2 is reserved for bad
    /// command-line flags and 1 for anything unclassified.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(_) => 3,
            HarnessError::MissingCheckpoint(_) => 4,
            HarnessError::BadCheckpoint { .. } => 5,
            HarnessError::GradCheckFailed(_) => 6,
            HarnessError::Io { .. } => 7,
            HarnessError::Core(_) | HarnessError::Pipeline(_) => 8,
            HarnessError::Bind { .. } => 9,
        }
    }

    /// Stable token printed in the one-line error report.
    pub fn kind(&self) -> &'static str {
        match self {
            HarnessError::Config(_) => "invalid_config",
            HarnessError::MissingCheckpoint(_) => "missing_checkpoint",
            HarnessError::BadCheckpoint { .. } => "bad_checkpoint",
            HarnessError::GradCheckFailed(_) => "gradcheck_failed",
            HarnessError::Io { .. } => "io",
            HarnessError::Core(_) | HarnessError::Pipeline(_) => "runtime",
            HarnessError::Bind { .. } => "port_unavailable",
        }
    }
}

/// `error kind=<token> code=<n> msg=<text>` on one line.
pub fn error_line(kind: &str, code: i32, message: &str) -> String {
    let flat: Vec<&str> = message.split_whitespace().collect();
    format!("error kind={kind} code={code} msg={}", flat.join(" "))
}
