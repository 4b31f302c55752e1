//! Speech emotion recognition with a stacked LSTM written from scratch.
//!
//! The pipeline reads a WAV file, downmixes and resamples it to 16 kHz mono,
//! extracts a 20 × 40 MFCC matrix, and classifies it into one of eight
//! emotions with one or two LSTM layers followed by a dense softmax head.
//! Training uses hand-derived backpropagation through time and Adam.

pub mod audio;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod features;
pub mod metrics;
pub mod nn;
pub mod numeric;
pub mod optim;
pub mod persistence;
pub mod pipeline;
pub mod rng;
pub mod train;

use std::path::PathBuf;

use thiserror::Error;

pub use audio::{AudioClip, AudioError};
pub use config::{ConfigError, RunConfig};
pub use dataset::{DatasetError, RavdessLabel, EMOTION_NAMES, NUM_EMOTIONS};
pub use features::{FeatureError, MfccConfig, MfccExtractor, Standardizer};
pub use metrics::{ConfusionMatrix, MetricsReport};
pub use nn::{Model, ModelConfig, NnError};
pub use numeric::{Matrix, NumericError};
pub use optim::{AdamConfig, AdamState, LrSchedule, OptimError};
pub use persistence::{Checkpoint, PersistError};
pub use pipeline::{PipelineError, Prediction, Predictor};
pub use train::{TrainConfig, TrainError};

/// Process exit status for usage and configuration errors.
pub const EXIT_USAGE: i32 = 1;
/// Process exit status for unreadable, missing or malformed data.
pub const EXIT_DATA: i32 = 2;
/// Process exit status for numerical failures.
pub const EXIT_NUMERIC: i32 = 3;

/// Any failure surfaced by the command-line front end.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Audio(#[from] AudioError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Persist(#[from] PersistError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Numeric(String),
}

impl Error {
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Usage(_) | Error::Config(_) => EXIT_USAGE,
            Error::Audio(_) | Error::Dataset(_) | Error::Persist(_) | Error::Io { .. } | Error::Data(_) => EXIT_DATA,
            Error::Feature(e) => feature_code(e),
            Error::Nn(_) | Error::Optim(_) | Error::Numeric(_) => EXIT_NUMERIC,
            Error::Train(e) => match e {
                TrainError::Config(_) => EXIT_USAGE,
                TrainError::Dataset(_) => EXIT_DATA,
                TrainError::Feature(f) => feature_code(f),
                TrainError::Nn(NnError::Config(_)) => EXIT_USAGE,
                TrainError::Nn(_) | TrainError::Optim(_) | TrainError::NonFiniteLoss { .. } | TrainError::Pool(_) => EXIT_NUMERIC,
            },
            Error::Pipeline(e) => match e {
                PipelineError::Audio(_) => EXIT_DATA,
                PipelineError::Feature(f) => feature_code(f),
                PipelineError::Nn(_) => EXIT_NUMERIC,
            },
        }
    }
}

fn feature_code(e: &FeatureError) -> i32 {
    match e {
        FeatureError::Config(_) => EXIT_USAGE,
        _ => EXIT_DATA,
    }
}
