//! Benchmarks, repair measurements, demo applications and cost tables on
//! top of `legio-core`.

pub mod apps;
pub mod bench;
pub mod comm;
pub mod costtab;
pub mod repair;
pub mod schedule;

use legio_core::simnet::{ProcessId, Step};

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("deadlock at step {step}: processes {blocked:?} blocked")]
    Deadlock { step: Step, blocked: Vec<ProcessId> },
    #[error("simulation trapped at step {step}: {reason}")]
    Trapped { step: Step, reason: String },
    #[error("step limit reached at step {0}")]
    StepLimit(Step),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl HarnessError {
    pub fn config(msg: impl Into<String>) -> Self {
        HarnessError::Config(msg.into())
    }

    /// Process exit code for this error.
    pub fn exit_code(&self) -> u8 {
        match self {
            HarnessError::Config(_) => 2,
            HarnessError::Deadlock { .. } => 3,
            _ => 1,
        }
    }
}

pub type Result<T, E = HarnessError> = std::result::Result<T, E>;
