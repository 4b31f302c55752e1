//! MFCC front end producing the fixed `target_frames × num_coeffs` model input.
//!
//! Pipeline per clip: pre-emphasis, Hann-windowed framing, real FFT power
//! spectrum, triangular mel filterbank, natural log (floored), orthonormal
//! DCT-II, then contiguous mean-pooling of the variable number of raw frames
//! down to `target_frames` rows.

use std::f64::consts::PI;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio::AudioClip;
use crate::numeric::Matrix;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FeatureError {
    #[error("signal too short: {got} samples, need at least {required}")]
    TooShort { required: usize, got: usize },
    #[error("only {got} raw frames, need at least {required}")]
    TooFewFrames { required: usize, got: usize },
    #[error("invalid MFCC configuration: {0}")]
    Config(String),
    #[error("expected a mono clip at {expected} Hz, got {channels} channel(s) at {got} Hz")]
    ClipFormat {
        expected: u32,
        got: u32,
        channels: usize,
    },
    #[error("standardizer expects {expected} coefficients, got {got}")]
    Width { expected: usize, got: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MfccConfig {
    pub sample_rate: u32,
    pub frame_len_ms: f64,
    pub hop_ms: f64,
    pub fft_size: usize,
    pub mel_filters: usize,
    pub num_coeffs: usize,
    pub target_frames: usize,
    pub preemphasis: f64,
    pub log_floor: f64,
    pub fmin: f64,
    pub fmax: f64,
}

impl Default for MfccConfig {
    fn default() -> Self {
        Self {
            sample_rate: 16_000,
            frame_len_ms: 25.0,
            hop_ms: 10.0,
            fft_size: 512,
            mel_filters: 64,
            num_coeffs: 40,
            target_frames: 20,
            preemphasis: 0.97,
            log_floor: 1e-10,
            fmin: 0.0,
            fmax: 8_000.0,
        }
    }
}

impl MfccConfig {
    pub fn frame_samples(&self) -> usize {
        (self.frame_len_ms * f64::from(self.sample_rate) / 1000.0).round() as usize
    }

    pub fn hop_samples(&self) -> usize {
        (self.hop_ms * f64::from(self.sample_rate) / 1000.0).round() as usize
    }

    /// Shortest signal that yields `target_frames` raw frames.
    pub fn min_samples(&self) -> usize {
        self.frame_samples() + (self.target_frames - 1) * self.hop_samples()
    }

    pub fn validate(&self) -> Result<(), FeatureError> {
        let bad = |m: String| Err(FeatureError::Config(m));
        if self.num_coeffs == 0 || self.num_coeffs > self.mel_filters {
            return bad(format!(
                "num_coeffs ({}) must be in 1..=mel_filters ({})",
                self.num_coeffs, self.mel_filters
            ));
        }
        if self.frame_samples() == 0 || self.hop_samples() == 0 {
            return bad("frame and hop must be at least one sample".into());
        }
        if self.fft_size < self.frame_samples() {
            return bad(format!(
                "fft_size ({}) smaller than frame length ({} samples)",
                self.fft_size,
                self.frame_samples()
            ));
        }
        if self.target_frames == 0 {
            return bad("target_frames must be at least 1".into());
        }
        if !(0.0..=f64::from(self.sample_rate) / 2.0).contains(&self.fmax) || self.fmin >= self.fmax
        {
            return bad(format!(
                "mel band {}..{} Hz invalid for {} Hz",
                self.fmin, self.fmax, self.sample_rate
            ));
        }
        if !(self.log_floor > 0.0) {
            return bad("log_floor must be positive".into());
        }
        Ok(())
    }
}

/// One clip's model input: `target_frames` rows of `num_coeffs` coefficients.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    frames: Matrix,
}

impl FeatureMatrix {
    pub fn new(frames: Matrix) -> Self {
        Self { frames }
    }

    pub fn frames(&self) -> &Matrix {
        &self.frames
    }

    pub fn into_matrix(self) -> Matrix {
        self.frames
    }

    pub fn shape(&self) -> (usize, usize) {
        self.frames.shape()
    }
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Periodic Hann window.
pub fn hann_window(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 * (1.0 - (2.0 * PI * i as f64 / n as f64).cos()))
        .collect()
}

/// Pre-emphasizes and slices the signal into Hann-windowed frames,
/// one frame per row.
pub fn frame_signal(samples: &[f64], cfg: &MfccConfig) -> Result<Matrix, FeatureError> {
    cfg.validate()?;
    let frame = cfg.frame_samples();
    let hop = cfg.hop_samples();
    if samples.len() < frame {
        return Err(FeatureError::TooShort {
            required: frame,
            got: samples.len(),
        });
    }
    let mut emphasized = Vec::with_capacity(samples.len());
    emphasized.push(samples[0]);
    for w in samples.windows(2) {
        emphasized.push(w[1] - cfg.preemphasis * w[0]);
    }
    let window = hann_window(frame);
    let n_frames = 1 + (samples.len() - frame) / hop;
    Ok(Matrix::from_fn(n_frames, frame, |r, c| {
        emphasized[r * hop + c] * window[c]
    }))
}

/// Center frequencies (Hz) of the mel filters, strictly increasing.
pub fn mel_centers(cfg: &MfccConfig) -> Vec<f64> {
    mel_edges(cfg)[1..=cfg.mel_filters].to_vec()
}

fn mel_edges(cfg: &MfccConfig) -> Vec<f64> {
    let (lo, hi) = (hz_to_mel(cfg.fmin), hz_to_mel(cfg.fmax));
    let n = cfg.mel_filters + 2;
    (0..n)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (n - 1) as f64))
        .collect()
}

/// Triangular mel filters over the `fft_size/2 + 1` FFT bins.
///
/// Each triangle is evaluated at the bin frequencies and rescaled so its
/// largest sampled weight is exactly 1.
pub fn mel_filterbank(cfg: &MfccConfig) -> Result<Matrix, FeatureError> {
    cfg.validate()?;
    let bins = cfg.fft_size / 2 + 1;
    let edges = mel_edges(cfg);
    let bin_hz = f64::from(cfg.sample_rate) / cfg.fft_size as f64;
    let mut fb = Matrix::zeros(cfg.mel_filters, bins);
    for m in 0..cfg.mel_filters {
        let (left, center, right) = (edges[m], edges[m + 1], edges[m + 2]);
        let row = fb.row_mut(m);
        for (k, w) in row.iter_mut().enumerate() {
            let f = k as f64 * bin_hz;
            *w = if f > left && f <= center {
                (f - left) / (center - left)
            } else if f > center && f < right {
                (right - f) / (right - center)
            } else {
                0.0
            };
        }
        let peak = row.iter().copied().fold(0.0, f64::max);
        if peak <= 0.0 {
            return Err(FeatureError::Config(format!(
                "mel filter {m} covers no FFT bin; increase fft_size or reduce mel_filters"
            )));
        }
        row.iter_mut().for_each(|w| *w /= peak);
    }
    Ok(fb)
}

/// Orthonormal DCT-II basis, `num_coeffs × n`.
pub fn dct_matrix(num_coeffs: usize, n: usize) -> Matrix {
    Matrix::from_fn(num_coeffs, n, |k, i| {
        let scale = if k == 0 {
            (1.0 / n as f64).sqrt()
        } else {
            (2.0 / n as f64).sqrt()
        };
        scale * (PI * k as f64 * (2 * i + 1) as f64 / (2 * n) as f64).cos()
    })
}

/// Precomputed filterbank, DCT basis, and FFT plan for one configuration.
pub struct MfccExtractor {
    cfg: MfccConfig,
    filterbank: Matrix,
    dct: Matrix,
    fft: Arc<dyn Fft<f64>>,
}

impl MfccExtractor {
    pub fn new(cfg: MfccConfig) -> Result<Self, FeatureError> {
        let filterbank = mel_filterbank(&cfg)?;
        let dct = dct_matrix(cfg.num_coeffs, cfg.mel_filters);
        let fft = FftPlanner::new().plan_fft_forward(cfg.fft_size);
        Ok(Self {
            cfg,
            filterbank,
            dct,
            fft,
        })
    }

    pub fn config(&self) -> &MfccConfig {
        &self.cfg
    }

    /// Raw MFCCs, one row per analysis frame.
    pub fn compute(&self, clip: &AudioClip) -> Result<Matrix, FeatureError> {
        if clip.num_channels() != 1 || clip.sample_rate() != self.cfg.sample_rate {
            return Err(FeatureError::ClipFormat {
                expected: self.cfg.sample_rate,
                got: clip.sample_rate(),
                channels: clip.num_channels(),
            });
        }
        self.compute_samples(clip.samples())
    }

    pub fn compute_samples(&self, samples: &[f64]) -> Result<Matrix, FeatureError> {
        let frames = frame_signal(samples, &self.cfg)?;
        let bins = self.cfg.fft_size / 2 + 1;
        let mut out = Matrix::zeros(frames.rows(), self.cfg.num_coeffs);
        let mut buf = vec![Complex::new(0.0, 0.0); self.cfg.fft_size];
        let mut power = vec![0.0; bins];
        let mut log_mel = vec![0.0; self.cfg.mel_filters];
        for r in 0..frames.rows() {
            buf.iter_mut().for_each(|c| *c = Complex::new(0.0, 0.0));
            for (b, &s) in buf.iter_mut().zip(frames.row(r)) {
                b.re = s;
            }
            self.fft.process(&mut buf);
            for (p, c) in power.iter_mut().zip(&buf) {
                *p = c.norm_sqr();
            }
            for (m, lm) in log_mel.iter_mut().enumerate() {
                let e: f64 = self
                    .filterbank
                    .row(m)
                    .iter()
                    .zip(&power)
                    .map(|(w, p)| w * p)
                    .sum();
                *lm = e.max(self.cfg.log_floor).ln();
            }
            for (k, o) in out.row_mut(r).iter_mut().enumerate() {
                *o = self
                    .dct
                    .row(k)
                    .iter()
                    .zip(&log_mel)
                    .map(|(d, l)| d * l)
                    .sum();
            }
        }
        Ok(out)
    }

    /// Full per-clip featurization: zero-pads clips shorter than
    /// [`MfccConfig::min_samples`], computes MFCCs, then pools to `target_frames`.
    /// The flag reports whether padding happened.
    pub fn featurize(&self, clip: &AudioClip) -> Result<(FeatureMatrix, bool), FeatureError> {
        let min = self.cfg.min_samples();
        let padded = clip.len() < min;
        let raw = if padded {
            if clip.num_channels() != 1 || clip.sample_rate() != self.cfg.sample_rate {
                return Err(FeatureError::ClipFormat {
                    expected: self.cfg.sample_rate,
                    got: clip.sample_rate(),
                    channels: clip.num_channels(),
                });
            }
            let mut s = clip.samples().to_vec();
            s.resize(min, 0.0);
            self.compute_samples(&s)?
        } else {
            self.compute(clip)?
        };
        Ok((pool_frames(&raw, self.cfg.target_frames)?, padded))
    }
}

/// Convenience wrapper building a one-off [`MfccExtractor`].
pub fn compute_mfcc(clip: &AudioClip, cfg: &MfccConfig) -> Result<Matrix, FeatureError> {
    MfccExtractor::new(cfg.clone())?.compute(clip)
}

/// Mean-pools `raw` rows into `target_frames` contiguous buckets; bucket `b`
/// covers rows `⌊b·N/T⌋ .. ⌊(b+1)·N/T⌋`.
pub fn pool_frames(raw: &Matrix, target_frames: usize) -> Result<FeatureMatrix, FeatureError> {
    let n = raw.rows();
    if target_frames == 0 || n < target_frames {
        return Err(FeatureError::TooFewFrames {
            required: target_frames,
            got: n,
        });
    }
    let mut out = Matrix::zeros(target_frames, raw.cols());
    for b in 0..target_frames {
        let (start, end) = (b * n / target_frames, (b + 1) * n / target_frames);
        let row = out.row_mut(b);
        for r in start..end {
            for (o, v) in row.iter_mut().zip(raw.row(r)) {
                *o += v;
            }
        }
        let count = (end - start) as f64;
        row.iter_mut().for_each(|o| *o /= count);
    }
    Ok(FeatureMatrix::new(out))
}

/// Per-coefficient z-scoring with statistics from the training split.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub const MIN_STD: f64 = 1e-8;

    pub fn identity(width: usize) -> Self {
        Self {
            mean: vec![0.0; width],
            std: vec![1.0; width],
        }
    }

    /// Statistics over every frame of every feature matrix, accumulated in input order.
    pub fn fit<'a>(features: impl IntoIterator<Item = &'a Matrix>) -> Result<Self, FeatureError> {
        let mut sum: Vec<f64> = Vec::new();
        let mut sum_sq: Vec<f64> = Vec::new();
        let mut count = 0usize;
        for m in features {
            if sum.is_empty() {
                sum = vec![0.0; m.cols()];
                sum_sq = vec![0.0; m.cols()];
            }
            if m.cols() != sum.len() {
                return Err(FeatureError::Width {
                    expected: sum.len(),
                    got: m.cols(),
                });
            }
            for r in 0..m.rows() {
                for (c, &v) in m.row(r).iter().enumerate() {
                    sum[c] += v;
                    sum_sq[c] += v * v;
                }
            }
            count += m.rows();
        }
        if count == 0 {
            return Err(FeatureError::Config(
                "cannot fit standardization on zero frames".into(),
            ));
        }
        let n = count as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let std = sum_sq
            .iter()
            .zip(&mean)
            .map(|(sq, m)| {
                let var = (sq / n - m * m).max(0.0);
                let s = var.sqrt();
                if s < Self::MIN_STD {
                    1.0
                } else {
                    s
                }
            })
            .collect();
        Ok(Self { mean, std })
    }

    pub fn width(&self) -> usize {
        self.mean.len()
    }

    pub fn apply(&self, m: &Matrix) -> Result<Matrix, FeatureError> {
        if m.cols() != self.width() {
            return Err(FeatureError::Width {
                expected: self.width(),
                got: m.cols(),
            });
        }
        Ok(Matrix::from_fn(m.rows(), m.cols(), |r, c| {
            (m.get(r, c) - self.mean[c]) / self.std[c]
        }))
    }

    /// `2 × width` matrix: row 0 holds the means, row 1 the standard deviations.
    pub fn to_matrix(&self) -> Matrix {
        let mut data = self.mean.clone();
        data.extend_from_slice(&self.std);
        Matrix::new(2, self.width(), data).expect("nonempty standardizer")
    }

    pub fn from_matrix(m: &Matrix) -> Result<Self, FeatureError> {
        if m.rows() != 2 {
            return Err(FeatureError::Config(format!(
                "standardizer matrix must have 2 rows, got {}",
                m.rows()
            )));
        }
        Ok(Self {
            mean: m.row(0).to_vec(),
            std: m.row(1).to_vec(),
        })
    }
}
