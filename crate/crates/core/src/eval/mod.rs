//! Synthetic benchmark generation, dataset I/O and evaluation metrics.

pub mod dataset;
pub mod metrics;
pub mod synth;

use thiserror::Error;

pub use dataset::{load_dataset, load_results, save_dataset, save_results, QueryResult};
pub use metrics::{compute_metrics, default_thresholds, MetricsReport, QueryOutcome, Threshold};
pub use synth::{synth_scene, Profile, Split, SyntheticDataset, SyntheticSceneSpec, SyntheticView};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("invalid spec: {0}")]
    InvalidSpec(String),
    #[error("i/o error: {0}")]
    Io(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("id mismatch: {0}")]
    IdMismatch(String),
}
