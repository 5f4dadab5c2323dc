//! Reproducible experiment harness: strict configs, dataset generation
//! with ground-truth sidecars, training/eval/sampling dispatch, binary
//! checkpoints, CSV metrics, and the self-check registry behind
//! `verify`.
//!
//! Everything here is deliberately rigid. Configs reject unknown keys,
//! the CSV dialect admits exactly one spelling of every value, and every
//! artifact directory carries a manifest naming the config hash and seed
//! that produced it, so two runs can be compared byte for byte.

pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod metrics;
pub mod run;
pub mod verify;

use thiserror::Error;

/// Version stamp written into manifests; bump when any artifact layout
/// changes incompatibly.
pub const ARTIFACT_VERSION: u32 = 1;

// Fixed top-level stream ids: each subcommand draws from its own lane of
// the seeded generator so that, say, generating data and then training
// with the same seed never share randomness.
pub const STREAM_DATA: u64 = 0;
pub const STREAM_TRAIN: u64 = 1;
pub const STREAM_EVAL: u64 = 2;
pub const STREAM_SAMPLE: u64 = 3;
pub const STREAM_VERIFY: u64 = 4;
pub const STREAM_GRADCHECK: u64 = 5;

#[derive(Debug, Error)]
pub enum HarnessError {
    /// Anything wrong with how the run was asked for: bad config keys,
    /// missing files, capability mismatches. Exit code 1.
    #[error("{0}")]
    Config(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    /// The run itself failed numerically (divergence, non-finite values,
    /// invalid parameters). Exit code 2.
    #[error("numerical failure: {0}")]
    Numerical(String),
    /// One or more registered invariants failed. Exit code 3.
    #[error("verification failed: {failed} of {total} checks")]
    Verification { failed: usize, total: usize },
}

impl HarnessError {
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(_) | HarnessError::Io(_) => 1,
            HarnessError::Numerical(_) => 2,
            HarnessError::Verification { .. } => 3,
        }
    }
}

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use config::Ini;
pub use dataset::{gen_data, sidecar_path, DataSpec, Truth};
pub use metrics::{read_metrics, sha256_hex, write_manifest, write_metrics, TrainReport, TrainRow};
pub use run::{run_eval, run_sample, run_train, Method, Topology, TrainOutcome};
pub use verify::{run_gradcheck, run_suite, CheckResult, Suite};
