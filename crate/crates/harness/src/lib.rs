//! Training, evaluation and case studies for a platoon with one CAV behind a
//! safety filter.
//!
//! * [`config`]: the TOML run configuration.
//! * [`reward`]: the CAV's per-step reward.
//! * [`sim`]: estimators, controllers and the filtered simulation step.
//! * [`train`]: PPO training and evaluation episodes.
//! * [`scenario`] and [`region`]: pulse case studies and safety-region sweeps.
//! * [`bench`]: the system-identification comparison.
//! * [`io`]: CSV and JSON artifacts.

use std::path::PathBuf;

use platoon_core::dynamics::DynamicsError;
use platoon_core::safety::SafetyError;
use thiserror::Error;

pub mod bench;
pub mod config;
pub mod io;
pub mod region;
pub mod reward;
pub mod scenario;
pub mod sim;
pub mod train;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("missing checkpoint {}", .0.display())]
    MissingCheckpoint(PathBuf),
    /// `dump` holds a JSON snapshot of the parameters when one was available.
    #[error("numerical failure: {context}")]
    Numerical { context: String, dump: Option<String> },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error(transparent)]
    Safety(#[from] SafetyError),
}

impl HarnessError {
    /// Process exit status for the command line: 2 for configuration and
    /// input problems, 3 for numerical failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) | Self::MissingCheckpoint(_) | Self::Io(_) => 2,
            Self::Numerical { .. } | Self::Dynamics(_) | Self::Safety(_) => 3,
        }
    }
}
