//! Mini-batch training with Adam, evaluation, and the 1-vs-2-layer comparison.
//!
//! Batch gradients are computed in fixed chunks of [`GRADIENT_CHUNK`] samples.
//! Each chunk sums its per-sample gradients in order, chunks may run on any
//! worker, and the chunk partial sums are then added in chunk order. The
//! arithmetic is therefore identical for every worker count.

use std::collections::HashMap;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{split_by_speaker, split_dataset, DatasetEntry, DatasetError, DatasetIndex, SplitSpec};
use crate::features::{FeatureError, Standardizer};
use crate::metrics::{ConfusionMatrix, LatencyStats, MetricsReport};
use crate::nn::{accumulate_gradients, cross_entropy_class, ForwardMode, Model, ModelConfig, ModelParams, NnError};
use crate::numeric::{argmax, Matrix};
use crate::optim::{AdamConfig, AdamState, LrSchedule, OptimError};
use crate::persistence::FeatureArchive;
use crate::rng::{derive_seed, XorShift64Star};

pub const GRADIENT_CHUNK: usize = 4;
/// Evaluation repeats inference until at least this many latency samples exist.
pub const MIN_LATENCY_REPETITIONS: usize = 100;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("non-finite training loss in epoch {epoch}")]
    NonFiniteLoss {
        epoch: usize,
        /// Parameters at the end of the last finite epoch.
        last_good: Box<Model>,
    },
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("worker pool: {0}")]
    Pool(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub schedule: LrSchedule,
    pub adam: AdamConfig,
    pub seed: u64,
    pub split_fraction: f64,
    pub speaker_disjoint: bool,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
    pub jobs: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 60,
            batch_size: 64,
            lr0: 0.001,
            schedule: LrSchedule::default(),
            adam: AdamConfig::default(),
            seed: 0,
            split_fraction: 0.8,
            speaker_disjoint: false,
            clip_norm: None,
            jobs: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.epochs == 0 || self.batch_size == 0 || self.jobs == 0 {
            return Err(TrainError::Config(
                "epochs, batch_size and jobs must be at least 1".into(),
            ));
        }
        if !(self.lr0 >= 0.0 && self.lr0.is_finite()) {
            return Err(TrainError::Config(format!("lr0 must be non-negative, got {}", self.lr0)));
        }
        Ok(())
    }
}

/// A standardized feature matrix and its class index.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub features: Matrix,
    pub class: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochLog {
    /// 1-based epoch number.
    pub epoch: usize,
    pub lr: f64,
    /// Mean per-sample loss, every sample weighted equally.
    pub train_loss: f64,
    /// Accuracy of the training-mode predictions made during the epoch.
    pub train_acc: f64,
    pub test_acc: Option<f64>,
}

pub fn epoch_log_csv(log: &[EpochLog]) -> String {
    let mut out = String::from("epoch,lr,train_loss,train_acc,test_acc\n");
    for e in log {
        let test = e.test_acc.map_or_else(String::new, |v| v.to_string());
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            e.epoch, e.lr, e.train_loss, e.train_acc, test
        ));
    }
    out
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    pub optimizer: AdamState,
    /// Model after the epoch with the highest test accuracy (first one on ties);
    /// the final model when there is no test set.
    pub best_model: Model,
    pub best_epoch: usize,
    pub best_test_accuracy: Option<f64>,
    pub log: Vec<EpochLog>,
}

struct BatchResult {
    grads: ModelParams,
    loss_sum: f64,
    correct: usize,
}

fn chunk_gradients(model: &Model, items: &[(&Sample, u64)], scale: f64) -> Result<BatchResult, NnError> {
    let mut grads = model.params.zeros_like();
    let mut loss_sum = 0.0;
    let mut correct = 0;
    for (s, seed) in items {
        let out = model.forward(&s.features, ForwardMode::Train { dropout_seed: *seed })?;
        let probs = out.probs.data();
        loss_sum += cross_entropy_class(probs, s.class);
        if argmax(probs) == s.class {
            correct += 1;
        }
        accumulate_gradients(model, &out.cache, s.class, scale, &mut grads)?;
    }
    Ok(BatchResult {
        grads,
        loss_sum,
        correct,
    })
}

/// Mean gradient over the batch plus loss sum and correct count.
fn batch_gradients(
    model: &Model,
    items: &[(&Sample, u64)],
    pool: Option<&rayon::ThreadPool>,
) -> Result<BatchResult, NnError> {
    let scale = 1.0 / items.len() as f64;
    let chunks: Vec<&[(&Sample, u64)]> = items.chunks(GRADIENT_CHUNK).collect();
    let partials: Vec<BatchResult> = match pool {
        Some(pool) => pool.install(|| {
            chunks
                .par_iter()
                .map(|c| chunk_gradients(model, c, scale))
                .collect::<Result<_, _>>()
        })?,
        None => chunks
            .iter()
            .map(|c| chunk_gradients(model, c, scale))
            .collect::<Result<_, _>>()?,
    };
    let mut iter = partials.into_iter();
    let mut total = iter.next().expect("nonempty batch");
    for p in iter {
        total.grads.add_assign(&p.grads);
        total.loss_sum += p.loss_sum;
        total.correct += p.correct;
    }
    Ok(total)
}

pub fn accuracy(model: &Model, samples: &[Sample]) -> Result<f64, NnError> {
    if samples.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0;
    for s in samples {
        if argmax(&model.predict(&s.features)?) == s.class {
            correct += 1;
        }
    }
    Ok(correct as f64 / samples.len() as f64)
}

fn build_pool(jobs: usize) -> Result<Option<rayon::ThreadPool>, TrainError> {
    if jobs <= 1 {
        return Ok(None);
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map(Some)
        .map_err(|e| TrainError::Pool(e.to_string()))
}

/// Per-sample dropout seed for sample `position` of batch `batch` in epoch `epoch`.
pub fn dropout_seed(run_seed: u64, epoch: usize, batch: usize, position: usize) -> u64 {
    derive_seed(&[run_seed, epoch as u64, batch as u64, position as u64])
}

/// The permutation of `0..n` used as the batch order of `epoch` (0-based).
pub fn epoch_order(run_seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    XorShift64Star::new(derive_seed(&[run_seed, 0xE90C, epoch as u64])).shuffle(&mut order);
    order
}

/// Trains a freshly initialized model (weights drawn from `cfg.seed`).
pub fn train(model_cfg: &ModelConfig, cfg: &TrainConfig, train_set: &[Sample], test_set: &[Sample]) -> Result<TrainOutcome, TrainError> {
    let model = Model::new(model_cfg.clone(), derive_seed(&[cfg.seed, 0x1417]))?;
    let optimizer = AdamState::new(cfg.adam, model.params.blocks());
    train_from(model, optimizer, 0, cfg, train_set, test_set, |_| {})
}

/// Continues training from `model`/`optimizer` for epochs `start_epoch..cfg.epochs`.
/// `on_epoch` is called after every epoch with its log row.
pub fn train_from(
    mut model: Model,
    mut optimizer: AdamState,
    start_epoch: usize,
    cfg: &TrainConfig,
    train_set: &[Sample],
    test_set: &[Sample],
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(TrainError::Config("training set is empty".into()));
    }
    if let Some(s) = train_set.iter().chain(test_set).find(|s| s.class >= model.config.num_classes) {
        return Err(NnError::Class {
            class: s.class,
            num_classes: model.config.num_classes,
        }
        .into());
    }
    let pool = build_pool(cfg.jobs)?;
    let mut log = Vec::with_capacity(cfg.epochs.saturating_sub(start_epoch));
    let mut best: Option<(f64, usize, Model)> = None;

    for epoch in start_epoch..cfg.epochs {
        let last_good = model.clone();
        let lr = cfg.schedule.rate(epoch, cfg.lr0);
        let order = epoch_order(cfg.seed, epoch, train_set.len());
        let mut loss_sum = 0.0;
        let mut correct = 0;
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let items: Vec<(&Sample, u64)> = batch
                .iter()
                .enumerate()
                .map(|(k, &i)| (&train_set[i], dropout_seed(cfg.seed, epoch, b, k)))
                .collect();
            let mut result = batch_gradients(&model, &items, pool.as_ref())?;
            if !result.loss_sum.is_finite() {
                return Err(TrainError::NonFiniteLoss {
                    epoch: epoch + 1,
                    last_good: Box::new(last_good),
                });
            }
            loss_sum += result.loss_sum;
            correct += result.correct;
            if let Some(max_norm) = cfg.clip_norm {
                let norm = result.grads.l2_norm();
                if norm > max_norm {
                    result.grads.scale_in_place(max_norm / norm);
                }
            }
            let grad_blocks: Vec<&Matrix> = result.grads.blocks().into_iter().map(|(_, m)| m).collect();
            let mut param_blocks: Vec<&mut Matrix> = model.params.blocks_mut().into_iter().map(|(_, m)| m).collect();
            optimizer.step(&mut param_blocks, &grad_blocks, lr)?;
        }
        if !model.params.is_finite() {
            return Err(TrainError::NonFiniteLoss {
                epoch: epoch + 1,
                last_good: Box::new(last_good),
            });
        }
        let test_acc = if test_set.is_empty() {
            None
        } else {
            Some(accuracy(&model, test_set)?)
        };
        let row = EpochLog {
            epoch: epoch + 1,
            lr,
            train_loss: loss_sum / train_set.len() as f64,
            train_acc: correct as f64 / train_set.len() as f64,
            test_acc,
        };
        on_epoch(&row);
        log.push(row);
        if let Some(acc) = test_acc {
            if best.as_ref().map_or(true, |(b, _, _)| acc > *b) {
                best = Some((acc, epoch + 1, model.clone()));
            }
        }
    }

    let (best_test_accuracy, best_epoch, best_model) = match best {
        Some((acc, e, m)) => (Some(acc), e, m),
        None => (None, cfg.epochs, model.clone()),
    };
    Ok(TrainOutcome {
        model,
        optimizer,
        best_model,
        best_epoch,
        best_test_accuracy,
        log,
    })
}

/// Inference over `samples`, filling the confusion matrix and timing the
/// feature-to-probability path per clip.
pub fn evaluate(model: &Model, samples: &[Sample]) -> Result<MetricsReport, NnError> {
    let mut confusion = ConfusionMatrix::new(model.config.num_classes);
    let mut timings = Vec::with_capacity(samples.len().max(MIN_LATENCY_REPETITIONS));
    let mut streaming_correct = 0u64;
    for s in samples {
        let start = Instant::now();
        let probs = model.predict(&s.features)?;
        timings.push(start.elapsed().as_secs_f64());
        let predicted = argmax(&probs);
        if predicted == s.class {
            streaming_correct += 1;
        }
        confusion.record(s.class, predicted);
    }
    if !samples.is_empty() {
        let mut k = 0;
        while timings.len() < MIN_LATENCY_REPETITIONS {
            let start = Instant::now();
            std::hint::black_box(model.predict(&samples[k % samples.len()].features)?);
            timings.push(start.elapsed().as_secs_f64());
            k += 1;
        }
    }
    debug_assert_eq!(streaming_correct, confusion.trace());
    Ok(MetricsReport::from_confusion(
        confusion,
        LatencyStats::from_samples(&timings),
        model.config.num_lstm_layers,
        model.num_params(),
    ))
}

/// Train/test samples standardized with statistics from the training split.
pub struct PreparedData {
    pub standardizer: Standardizer,
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
    pub split: SplitSpec,
}

/// Splits archive records into train/test positions (indices into `archive.records`).
pub fn split_archive(archive: &FeatureArchive, fraction: f64, seed: u64, speaker_disjoint: bool) -> Result<SplitSpec, TrainError> {
    let index = DatasetIndex::new(
        archive
            .records
            .iter()
            .map(|r| DatasetEntry {
                path: r.path.clone(),
                label: r.label,
            })
            .collect(),
    )?;
    // DatasetIndex sorts by path; map back to archive positions.
    let position: HashMap<&Path, usize> = archive
        .records
        .iter()
        .enumerate()
        .map(|(i, r)| (r.path.as_path(), i))
        .collect();
    let mut split = if speaker_disjoint {
        split_by_speaker(&index, fraction, seed)?
    } else {
        split_dataset(&index, fraction, seed)?
    };
    for side in [&mut split.train, &mut split.test] {
        for i in side.iter_mut() {
            *i = position[index.entries()[*i].path.as_path()];
        }
    }
    Ok(split)
}

/// Standardized samples for the given archive positions.
pub fn archive_samples(archive: &FeatureArchive, ids: &[usize], standardizer: &Standardizer) -> Result<Vec<Sample>, FeatureError> {
    ids.iter()
        .map(|&i| {
            let r = &archive.records[i];
            Ok(Sample {
                features: standardizer.apply(&r.features)?,
                class: r.label.emotion_index(),
            })
        })
        .collect()
}

/// Splits an archive and standardizes both sides with training-split statistics.
pub fn prepare_data(archive: &FeatureArchive, fraction: f64, seed: u64, speaker_disjoint: bool) -> Result<PreparedData, TrainError> {
    let split = split_archive(archive, fraction, seed, speaker_disjoint)?;
    let standardizer = Standardizer::fit(split.train.iter().map(|&i| &archive.records[i].features))?;
    let train = archive_samples(archive, &split.train, &standardizer)?;
    let test = archive_samples(archive, &split.test, &standardizer)?;
    Ok(PreparedData {
        standardizer,
        train,
        test,
        split,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CompareRow {
    pub num_lstm_layers: usize,
    pub num_params: usize,
    pub accuracy: f64,
    pub macro_f1: f64,
    pub mean_latency_s: f64,
    pub p95_latency_s: f64,
    pub final_train_loss: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct CompareReport {
    pub seed: u64,
    pub rows: Vec<CompareRow>,
    pub reports: Vec<MetricsReport>,
    #[serde(skip)]
    pub outcomes: Vec<TrainOutcome>,
}

impl CompareReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("layers,params,accuracy,macro_f1,mean_latency_s,p95_latency_s,final_train_loss\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.num_lstm_layers, r.num_params, r.accuracy, r.macro_f1, r.mean_latency_s, r.p95_latency_s, r.final_train_loss
            ));
        }
        out
    }
}

/// Trains the 1-layer and 2-layer variants of `base` with identical data,
/// seed and hyperparameters, then evaluates both on `test_set`.
pub fn compare_architectures(
    base: &ModelConfig,
    cfg: &TrainConfig,
    train_set: &[Sample],
    test_set: &[Sample],
) -> Result<CompareReport, TrainError> {
    let mut rows = Vec::new();
    let mut reports = Vec::new();
    let mut outcomes = Vec::new();
    for layers in [1, 2] {
        let model_cfg = ModelConfig {
            num_lstm_layers: layers,
            ..base.clone()
        };
        let outcome = train(&model_cfg, cfg, train_set, test_set)?;
        let report = evaluate(&outcome.model, test_set)?;
        rows.push(CompareRow {
            num_lstm_layers: layers,
            num_params: report.num_params,
            accuracy: report.accuracy,
            macro_f1: report.macro_f1,
            mean_latency_s: report.latency.mean_s,
            p95_latency_s: report.latency.p95_s,
            final_train_loss: outcome.log.last().map_or(f64::NAN, |e| e.train_loss),
        });
        reports.push(report);
        outcomes.push(outcome);
    }
    Ok(CompareReport {
        seed: cfg.seed,
        rows,
        reports,
        outcomes,
    })
}
