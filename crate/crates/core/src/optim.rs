//! Adam with bias correction, plus per-epoch learning-rate schedules.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numeric::Matrix;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OptimError {
    #[error("parameter block {block}: shape {param:?} does not match gradient {grad:?}")]
    Shape {
        block: String,
        param: (usize, usize),
        grad: (usize, usize),
    },
    #[error("expected {expected} parameter blocks, got {got}")]
    BlockCount { expected: usize, got: usize },
    #[error("non-finite gradient in block {block} at index {index} (value {value})")]
    NonFinite {
        block: String,
        index: usize,
        value: f64,
    },
    #[error("learning rate must be finite and non-negative, got {0}")]
    LearningRate(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// First and second moment estimates for a list of named parameter blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub names: Vec<String>,
    pub m: Vec<Matrix>,
    pub v: Vec<Matrix>,
    pub t: u64,
}

impl AdamState {
    pub fn new<'a>(config: AdamConfig, blocks: impl IntoIterator<Item = (String, &'a Matrix)>) -> Self {
        let mut names = Vec::new();
        let mut m = Vec::new();
        for (name, p) in blocks {
            names.push(name);
            m.push(Matrix::zeros(p.rows(), p.cols()));
        }
        let v = m.clone();
        Self {
            config,
            names,
            m,
            v,
            t: 0,
        }
    }

    /// One Adam update of `params` (in place) with learning rate `lr`.
    ///
    /// All gradients are validated before anything is modified, so a failed
    /// step leaves both parameters and moments untouched.
    pub fn step(&mut self, params: &mut [&mut Matrix], grads: &[&Matrix], lr: f64) -> Result<(), OptimError> {
        if !(lr >= 0.0 && lr.is_finite()) {
            return Err(OptimError::LearningRate(lr));
        }
        for got in [params.len(), grads.len()] {
            if got != self.m.len() {
                return Err(OptimError::BlockCount {
                    expected: self.m.len(),
                    got,
                });
            }
        }
        for (b, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() || p.shape() != self.m[b].shape() {
                return Err(OptimError::Shape {
                    block: self.names[b].clone(),
                    param: p.shape(),
                    grad: g.shape(),
                });
            }
            if let Some((index, &value)) = g.data().iter().enumerate().find(|(_, v)| !v.is_finite()) {
                return Err(OptimError::NonFinite {
                    block: self.names[b].clone(),
                    index,
                    value,
                });
            }
        }

        self.t += 1;
        let AdamConfig {
            beta1,
            beta2,
            epsilon,
        } = self.config;
        let t = self.t as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        for (b, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let m = self.m[b].data_mut();
            let v = self.v[b].data_mut();
            for (((theta, &g), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                let m_hat = if bc1 > 0.0 { *m / bc1 } else { *m };
                let v_hat = if bc2 > 0.0 { *v / bc2 } else { *v };
                *theta -= lr * m_hat / (v_hat.sqrt() + epsilon);
            }
        }
        Ok(())
    }
}

/// How the learning rate shrinks across epochs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LrSchedule {
    /// `lr0 · decay^epoch`
    Exponential { decay: f64 },
    /// `lr0 · factor^⌊epoch / every⌋`
    Step { every: usize, factor: f64 },
}

impl Default for LrSchedule {
    fn default() -> Self {
        LrSchedule::Exponential { decay: 0.98 }
    }
}

impl LrSchedule {
    pub fn rate(&self, epoch: usize, lr0: f64) -> f64 {
        match *self {
            LrSchedule::Exponential { decay } => lr_schedule(epoch, lr0, decay),
            LrSchedule::Step { every, factor } => lr0 * factor.powi((epoch / every.max(1)) as i32),
        }
    }
}

/// Exponential per-epoch decay, `lr0 · decay^epoch` (epochs counted from 0).
pub fn lr_schedule(epoch: usize, lr0: f64, decay: f64) -> f64 {
    lr0 * decay.powi(epoch as i32)
}
