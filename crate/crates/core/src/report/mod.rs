//! CLI orchestration: stage pipeline with checkpoints and report
//! emission.

pub mod config;
pub mod emit;
pub mod pipeline;

pub use config::PipelineConfig;
pub use pipeline::{run_pipeline, ManifestEntry, ReportBundle, Stage};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config error: {0}")]
    Config(String),
    #[error("stage {stage} failed: {cause}")]
    Stage { stage: String, cause: String },
}

impl PipelineError {
    /// CLI exit code: 1 for config errors, 2 for stage failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) => 1,
            PipelineError::Stage { .. } => 2,
        }
    }
}
