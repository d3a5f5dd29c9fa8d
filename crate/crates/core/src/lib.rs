//! Coarse-to-fine neural decoding pipeline: recording I/O and conditioning,
//! spatial-context pretraining of a channel-level transformer, attention-based
//! channel clustering, a product-quantized VQ-VAE over the selected channels,
//! code-index mask modeling, and classification/CTC fine-tuning.

pub mod augment;
pub mod channel_graph;
pub mod coarse;
pub mod downstream;
pub mod dpq;
pub mod fine;
pub mod mae;
pub mod preprocess;
pub mod recording;
pub mod synth;
pub mod train;

pub use recording::{
    read_recording, split_trials, write_recording, DatasetSplit, Recording, ReferenceScheme, TrialBatch, TrialLabels,
    TrialTable,
};

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid recording: {0}")]
    InvalidRecording(String),
    #[error("invalid trials: {0}")]
    InvalidTrials(String),
    #[error("invalid split: {0}")]
    InvalidSplit(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("non-finite values in {0}")]
    NonFinite(String),
    #[error("out of range: {0}")]
    OutOfRange(String),
    #[error("empty input: {0}")]
    Empty(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("training diverged: {0}")]
    Diverged(String),
    #[error("io error: {0}")]
    Io(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("checkpoint: {0}")]
    Checkpoint(#[from] strata_autograd::Error),
    #[error("probe failed: {0}")]
    Probe(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
