//! Configuration, orchestration, log files and the command line.

pub mod cli;
pub mod config;
pub mod layout;
pub mod pipeline;
pub mod records;

use std::path::Path;

use thiserror::Error;

pub use config::{MeasurementPoint, PipelineConfig, TrackerSection};
pub use pipeline::{
    evaluate_run, fuse_twin, run_pipeline, simulate, simulate_world, summary_table, track_all, track_sensor, DetectionFrame,
    PipelineOutcome, RunManifest, SensorDetections, SensorTrackLog, Simulation,
};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config error: {0}")]
    Config(String),
    #[error("{path}:{line}: {msg}")]
    Malformed { path: String, line: usize, msg: String },
    #[error("missing track stream for sensor {0}")]
    MissingStream(String),
    #[error("no time overlap: {0}")]
    NoOverlap(String),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{0}")]
    Stage(String),
}

impl HarnessError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        HarnessError::Io {
            path: path.display().to_string(),
            source,
        }
    }

    pub fn stage(e: impl std::fmt::Display) -> Self {
        HarnessError::Stage(e.to_string())
    }

    /// Process exit status for this failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(_) => 2,
            HarnessError::Malformed { .. } => 3,
            HarnessError::MissingStream(_) => 4,
            HarnessError::NoOverlap(_) => 5,
            HarnessError::Io { .. } | HarnessError::Stage(_) => 1,
        }
    }
}
