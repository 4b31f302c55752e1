//! Run configuration: a flat `key = value` text file with `[section]` headers.
//!
//! ```text
//! # comment
//! [train]
//! epochs = 60
//! schedule = exponential
//! ```
//!
//! Every key must belong to a section and be known; values are overridden by
//! `section.key=value` strings from the command line in the order given.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::dataset::NUM_EMOTIONS;
use crate::features::MfccConfig;
use crate::nn::{HeadInput, ModelConfig};
use crate::optim::{AdamConfig, LrSchedule};
use crate::train::TrainConfig;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("{origin}:{line}: {reason}")]
    Syntax {
        origin: String,
        line: usize,
        reason: String,
    },
    #[error("{origin}: unknown key `{key}`")]
    UnknownKey { origin: String, key: String },
    #[error("{origin}: invalid value `{value}` for `{key}`: {reason}")]
    Value {
        origin: String,
        key: String,
        value: String,
        reason: String,
    },
    #[error("cannot read config file {path}: {reason}")]
    Io { path: PathBuf, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScheduleKind {
    Exponential,
    Step,
}

/// Every tunable of a run. Defaults reproduce the reference setup.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub data_root: Option<PathBuf>,
    pub include_song: bool,

    pub num_lstm_layers: usize,
    pub hidden_dim: usize,
    pub dropout_rate: f64,
    pub head: HeadInput,

    pub mfcc: MfccConfig,

    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub schedule: ScheduleKind,
    pub decay: f64,
    pub step_every: usize,
    pub step_factor: f64,
    pub adam: AdamConfig,
    pub clip_norm: Option<f64>,
    pub seed: u64,
    pub split_fraction: f64,
    pub speaker_disjoint: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        let model = ModelConfig::default();
        let train = TrainConfig::default();
        Self {
            data_root: None,
            include_song: false,
            num_lstm_layers: model.num_lstm_layers,
            hidden_dim: model.hidden_dim,
            dropout_rate: model.dropout_rate,
            head: model.head,
            mfcc: MfccConfig::default(),
            epochs: train.epochs,
            batch_size: train.batch_size,
            lr0: train.lr0,
            schedule: ScheduleKind::Exponential,
            decay: 0.98,
            step_every: 20,
            step_factor: 0.5,
            adam: train.adam,
            clip_norm: train.clip_norm,
            seed: train.seed,
            split_fraction: train.split_fraction,
            speaker_disjoint: train.speaker_disjoint,
        }
    }
}

fn parse<T: std::str::FromStr>(origin: &str, key: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: std::fmt::Display,
{
    value.parse::<T>().map_err(|e| ConfigError::Value {
        origin: origin.to_string(),
        key: key.to_string(),
        value: value.to_string(),
        reason: e.to_string(),
    })
}

fn value_error(origin: &str, key: &str, value: &str, reason: &str) -> ConfigError {
    ConfigError::Value {
        origin: origin.to_string(),
        key: key.to_string(),
        value: value.to_string(),
        reason: reason.to_string(),
    }
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        let mut cfg = Self::default();
        cfg.merge_text(&text, &path.display().to_string())?;
        Ok(cfg)
    }

    /// Applies every assignment in `text` on top of the current values.
    pub fn merge_text(&mut self, text: &str, origin: &str) -> Result<(), ConfigError> {
        let mut section: Option<String> = None;
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let syntax = |reason: &str| ConfigError::Syntax {
                origin: origin.to_string(),
                line: n + 1,
                reason: reason.to_string(),
            };
            if let Some(rest) = line.strip_prefix('[') {
                let name = rest.strip_suffix(']').ok_or_else(|| syntax("unterminated section header"))?.trim();
                if name.is_empty() {
                    return Err(syntax("empty section name"));
                }
                section = Some(name.to_string());
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| syntax("expected `key = value`"))?;
            let section = section.as_deref().ok_or_else(|| syntax("key outside of a section"))?;
            self.set(&format!("{section}.{}", key.trim()), value.trim(), origin)?;
        }
        Ok(())
    }

    /// Applies a `section.key=value` override.
    pub fn apply_override(&mut self, assignment: &str) -> Result<(), ConfigError> {
        let (key, value) = assignment.split_once('=').ok_or_else(|| ConfigError::Syntax {
            origin: "--set".into(),
            line: 1,
            reason: format!("expected section.key=value, got `{assignment}`"),
        })?;
        self.set(key.trim(), value.trim(), "--set")
    }

    pub fn set(&mut self, key: &str, value: &str, origin: &str) -> Result<(), ConfigError> {
        let o = origin;
        match key {
            "data.root" => self.data_root = if value.is_empty() { None } else { Some(PathBuf::from(value)) },
            "data.include_song" => self.include_song = parse(o, key, value)?,
            "model.layers" => self.num_lstm_layers = parse(o, key, value)?,
            "model.hidden_dim" => self.hidden_dim = parse(o, key, value)?,
            "model.dropout" => self.dropout_rate = parse(o, key, value)?,
            "model.head" => self.head = parse(o, key, value)?,
            "mfcc.sample_rate" => self.mfcc.sample_rate = parse(o, key, value)?,
            "mfcc.frame_len_ms" => self.mfcc.frame_len_ms = parse(o, key, value)?,
            "mfcc.hop_ms" => self.mfcc.hop_ms = parse(o, key, value)?,
            "mfcc.fft_size" => self.mfcc.fft_size = parse(o, key, value)?,
            "mfcc.mel_filters" => self.mfcc.mel_filters = parse(o, key, value)?,
            "mfcc.num_coeffs" => self.mfcc.num_coeffs = parse(o, key, value)?,
            "mfcc.target_frames" => self.mfcc.target_frames = parse(o, key, value)?,
            "mfcc.preemphasis" => self.mfcc.preemphasis = parse(o, key, value)?,
            "mfcc.log_floor" => self.mfcc.log_floor = parse(o, key, value)?,
            "mfcc.fmin" => self.mfcc.fmin = parse(o, key, value)?,
            "mfcc.fmax" => self.mfcc.fmax = parse(o, key, value)?,
            "train.epochs" => self.epochs = parse(o, key, value)?,
            "train.batch_size" => self.batch_size = parse(o, key, value)?,
            "train.lr0" => self.lr0 = parse(o, key, value)?,
            "train.schedule" => {
                self.schedule = match value {
                    "exponential" => ScheduleKind::Exponential,
                    "step" => ScheduleKind::Step,
                    _ => return Err(value_error(o, key, value, "expected `exponential` or `step`")),
                }
            }
            "train.decay" => self.decay = parse(o, key, value)?,
            "train.step_every" => self.step_every = parse(o, key, value)?,
            "train.step_factor" => self.step_factor = parse(o, key, value)?,
            "train.beta1" => self.adam.beta1 = parse(o, key, value)?,
            "train.beta2" => self.adam.beta2 = parse(o, key, value)?,
            "train.epsilon" => self.adam.epsilon = parse(o, key, value)?,
            "train.clip_norm" => {
                self.clip_norm = match value {
                    "off" | "none" | "" => None,
                    v => Some(parse(o, key, v)?),
                }
            }
            "train.seed" => self.seed = parse(o, key, value)?,
            "train.split_fraction" => self.split_fraction = parse(o, key, value)?,
            "train.speaker_disjoint" => self.speaker_disjoint = parse(o, key, value)?,
            _ => {
                return Err(ConfigError::UnknownKey {
                    origin: origin.to_string(),
                    key: key.to_string(),
                })
            }
        }
        Ok(())
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            num_lstm_layers: self.num_lstm_layers,
            hidden_dim: self.hidden_dim,
            input_dim: self.mfcc.num_coeffs,
            seq_len: self.mfcc.target_frames,
            num_classes: NUM_EMOTIONS,
            dropout_rate: self.dropout_rate,
            head: self.head,
        }
    }

    pub fn lr_schedule(&self) -> LrSchedule {
        match self.schedule {
            ScheduleKind::Exponential => LrSchedule::Exponential { decay: self.decay },
            ScheduleKind::Step => LrSchedule::Step {
                every: self.step_every,
                factor: self.step_factor,
            },
        }
    }

    pub fn train_config(&self, jobs: usize) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr0: self.lr0,
            schedule: self.lr_schedule(),
            adam: self.adam,
            seed: self.seed,
            split_fraction: self.split_fraction,
            speaker_disjoint: self.speaker_disjoint,
            clip_norm: self.clip_norm,
            jobs,
        }
    }

    /// The full configuration in the file format, readable back by [`RunConfig::merge_text`].
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let m = &self.mfcc;
        let _ = writeln!(s, "[data]");
        let _ = writeln!(
            s,
            "root = {}",
            self.data_root.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
        );
        let _ = writeln!(s, "include_song = {}", self.include_song);
        let _ = writeln!(s, "\n[model]");
        let _ = writeln!(s, "layers = {}", self.num_lstm_layers);
        let _ = writeln!(s, "hidden_dim = {}", self.hidden_dim);
        let _ = writeln!(s, "dropout = {:?}", self.dropout_rate);
        let _ = writeln!(s, "head = {}", self.head.as_str());
        let _ = writeln!(s, "\n[mfcc]");
        let _ = writeln!(s, "sample_rate = {}", m.sample_rate);
        let _ = writeln!(s, "frame_len_ms = {:?}", m.frame_len_ms);
        let _ = writeln!(s, "hop_ms = {:?}", m.hop_ms);
        let _ = writeln!(s, "fft_size = {}", m.fft_size);
        let _ = writeln!(s, "mel_filters = {}", m.mel_filters);
        let _ = writeln!(s, "num_coeffs = {}", m.num_coeffs);
        let _ = writeln!(s, "target_frames = {}", m.target_frames);
        let _ = writeln!(s, "preemphasis = {:?}", m.preemphasis);
        let _ = writeln!(s, "log_floor = {:?}", m.log_floor);
        let _ = writeln!(s, "fmin = {:?}", m.fmin);
        let _ = writeln!(s, "fmax = {:?}", m.fmax);
        let _ = writeln!(s, "\n[train]");
        let _ = writeln!(s, "epochs = {}", self.epochs);
        let _ = writeln!(s, "batch_size = {}", self.batch_size);
        let _ = writeln!(s, "lr0 = {:?}", self.lr0);
        let schedule = match self.schedule {
            ScheduleKind::Exponential => "exponential",
            ScheduleKind::Step => "step",
        };
        let _ = writeln!(s, "schedule = {schedule}");
        let _ = writeln!(s, "decay = {:?}", self.decay);
        let _ = writeln!(s, "step_every = {}", self.step_every);
        let _ = writeln!(s, "step_factor = {:?}", self.step_factor);
        let _ = writeln!(s, "beta1 = {:?}", self.adam.beta1);
        let _ = writeln!(s, "beta2 = {:?}", self.adam.beta2);
        let _ = writeln!(s, "epsilon = {:?}", self.adam.epsilon);
        let _ = writeln!(
            s,
            "clip_norm = {}",
            self.clip_norm.map_or_else(|| "off".to_string(), |v| format!("{v:?}"))
        );
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "split_fraction = {:?}", self.split_fraction);
        let _ = writeln!(s, "speaker_disjoint = {}", self.speaker_disjoint);
        s
    }
}
