//! WAV file to class probabilities, end to end.

use std::path::Path;

use thiserror::Error;

use crate::audio::{read_wav, resample, to_mono, AudioClip, AudioError};
use crate::dataset::EMOTION_NAMES;
use crate::features::{FeatureError, MfccExtractor, Standardizer};
use crate::nn::{Model, NnError};
use crate::numeric::{argmax, Matrix};
use crate::persistence::Checkpoint;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Audio(#[from] AudioError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Nn(#[from] NnError),
}

/// Decodes, downmixes and resamples a WAV file to a mono clip at `rate`.
pub fn load_mono(path: impl AsRef<Path>, rate: u32) -> Result<AudioClip, AudioError> {
    let clip = to_mono(&read_wav(path)?)?;
    resample(&clip, rate)
}

/// Pooled, unstandardized MFCCs for one WAV file and whether it was padded.
pub fn featurize_wav(path: impl AsRef<Path>, extractor: &MfccExtractor) -> Result<(Matrix, bool), PipelineError> {
    let clip = load_mono(path, extractor.config().sample_rate)?;
    let (features, padded) = extractor.featurize(&clip)?;
    Ok((features.into_matrix(), padded))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub probabilities: Vec<f64>,
    pub class: usize,
}

impl Prediction {
    pub fn emotion_name(&self) -> &'static str {
        EMOTION_NAMES.get(self.class).copied().unwrap_or("unknown")
    }
}

/// A trained model bundled with the feature settings it was trained on.
pub struct Predictor {
    pub model: Model,
    pub extractor: MfccExtractor,
    pub standardizer: Standardizer,
}

impl Predictor {
    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self, FeatureError> {
        Ok(Self {
            extractor: MfccExtractor::new(ckpt.mfcc)?,
            model: ckpt.model,
            standardizer: ckpt.standardizer,
        })
    }

    /// Prediction from raw (unstandardized) pooled MFCCs.
    pub fn predict_features(&self, raw: &Matrix) -> Result<Prediction, PipelineError> {
        let probabilities = self.model.predict(&self.standardizer.apply(raw)?)?;
        let class = argmax(&probabilities);
        Ok(Prediction { probabilities, class })
    }

    pub fn predict_clip(&self, clip: &AudioClip) -> Result<Prediction, PipelineError> {
        let clip = resample(&to_mono(clip)?, self.extractor.config().sample_rate)?;
        let (features, _) = self.extractor.featurize(&clip)?;
        self.predict_features(features.frames())
    }

    pub fn predict_wav(&self, path: impl AsRef<Path>) -> Result<Prediction, PipelineError> {
        let (raw, _) = featurize_wav(path, &self.extractor)?;
        self.predict_features(&raw)
    }
}
