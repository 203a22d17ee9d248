//! Dual-stream masked-image pretraining with teacher-guided semantic
//! distillation, four feature-fusion strategies, a fine-tuning stage with
//! mixup and soft targets, dataset split tooling, and saliency export.

pub mod autograd;
pub mod backbone;
pub mod cli;
pub mod config;
pub mod data;
pub mod distill;
pub mod eval;
pub mod fusion;
pub mod objectives;
pub mod params;
pub mod rng;
pub mod train;

pub use autograd::{Graph, Precision, Var};
pub use config::Config;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

/// Errors surfaced by the pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("io error at {path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    Invalid(String),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }
}
