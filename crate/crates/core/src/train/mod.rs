//! Shared training recipe: warmup + cosine schedule, label-smoothed loss,
//! NAG / Adam, curve logging and run manifests.

mod calib;
mod classifier;
mod curves;

pub use crate::pipeline::FidelitySource;
pub use calib::{evaluate_calibration, fit_calibration, CalibData, CalibFit};
pub use classifier::{evaluate_classifier, fit_classifier, ClassifierData, ClassifierFit, Evaluation, Regime};
pub use curves::{Curves, EpochRecord, RunManifest};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{ParamStore, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Nag,
    Adam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub optimizer: OptimizerKind,
    pub lr_init: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub label_smoothing_eps: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl TrainConfig {
    /// Classifier and calibration recipe: NAG, lr 0.001, batch 64, 5 warmup
    /// epochs, smoothing 0.1.
    pub fn nag(epochs: usize, seed: u64) -> Self {
        Self {
            optimizer: OptimizerKind::Nag,
            lr_init: 1e-3,
            batch_size: 64,
            epochs,
            warmup_epochs: 5.min(epochs),
            label_smoothing_eps: 0.1,
            momentum: 0.9,
            weight_decay: 0.0,
            seed,
        }
    }

    /// Restoration recipe: Adam, lr 1e-4, batch 128.
    pub fn adam(epochs: usize, seed: u64) -> Self {
        Self {
            optimizer: OptimizerKind::Adam,
            lr_init: 1e-4,
            batch_size: 128,
            label_smoothing_eps: 0.0,
            ..Self::nag(epochs, seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr_init > 0.0) {
            return Err(Error::Config(format!("lr_init must be positive, got {}", self.lr_init)));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("batch_size and epochs must be positive".into()));
        }
        if self.epochs < self.warmup_epochs {
            return Err(Error::Config(format!(
                "epochs ({}) must be at least warmup_epochs ({})",
                self.epochs, self.warmup_epochs
            )));
        }
        if !(0.0..1.0).contains(&self.label_smoothing_eps) {
            return Err(Error::Config("label_smoothing_eps must lie in [0, 1)".into()));
        }
        Ok(())
    }

    pub fn schedule(&self, steps_per_epoch: usize) -> LRSchedule {
        LRSchedule {
            total_steps: self.epochs * steps_per_epoch,
            warmup_steps: self.warmup_epochs * steps_per_epoch,
            lr_init: self.lr_init,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LRSchedule {
    pub total_steps: usize,
    pub warmup_steps: usize,
    pub lr_init: f64,
}

/// Linear warmup `lr·(step+1)/warmup`, then half-cosine decay to 0.
pub fn lr_at(s: &LRSchedule, step: usize) -> Result<f64> {
    if step >= s.total_steps {
        return Err(Error::invalid(format!("step {step} outside schedule of {} steps", s.total_steps)));
    }
    if step < s.warmup_steps {
        return Ok(s.lr_init * (step + 1) as f64 / s.warmup_steps as f64);
    }
    let span = s.total_steps - s.warmup_steps;
    let progress = (step - s.warmup_steps) as f64 / span as f64;
    Ok(s.lr_init * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
}

/// Cross-entropy of one logit row against `(1-eps)·onehot + eps/K`.
pub fn smoothed_loss(logits: &[f64], target: usize, eps: f64) -> Result<f64> {
    let k = logits.len();
    if k < 2 {
        return Err(Error::invalid("need at least two classes"));
    }
    if target >= k {
        return Err(Error::invalid(format!("class id {target} out of range for {k} classes")));
    }
    if !(0.0..1.0).contains(&eps) {
        return Err(Error::invalid("eps must lie in [0, 1)"));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    Ok(logits
        .iter()
        .enumerate()
        .map(|(c, z)| {
            let t = eps / k as f64 + if c == target { 1.0 - eps } else { 0.0 };
            t * (lse - z)
        })
        .sum())
}

/// Per-parameter optimizer state. Frozen parameters are never touched.
pub struct Optimizer {
    kind: OptimizerKind,
    momentum: f32,
    weight_decay: f32,
    m: Vec<Tensor<f32>>,
    v: Vec<Tensor<f32>>,
    t: i32,
}

impl Optimizer {
    pub fn new(cfg: &TrainConfig, store: &ParamStore<f32>) -> Self {
        let zeros: Vec<Tensor<f32>> = store.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        Self {
            kind: cfg.optimizer,
            momentum: cfg.momentum as f32,
            weight_decay: cfg.weight_decay as f32,
            v: if cfg.optimizer == OptimizerKind::Adam {
                zeros.clone()
            } else {
                Vec::new()
            },
            m: zeros,
            t: 0,
        }
    }

    pub fn step(&mut self, store: &mut ParamStore<f32>, grads: &[Tensor<f32>], lr: f64) {
        let lr = lr as f32;
        self.t += 1;
        let (b1, b2, eps) = (0.9f32, 0.999f32, 1e-8f32);
        let (c1, c2) = (1.0 - b1.powi(self.t), 1.0 - b2.powi(self.t));
        for (i, p) in store.entries_mut().iter_mut().enumerate() {
            if !p.trainable {
                continue;
            }
            let w = p.value.data_mut();
            let g = grads[i].data();
            match self.kind {
                OptimizerKind::Nag => {
                    let buf = self.m[i].data_mut();
                    for j in 0..w.len() {
                        let gj = g[j] + self.weight_decay * w[j];
                        buf[j] = self.momentum * buf[j] + gj;
                        w[j] -= lr * (gj + self.momentum * buf[j]);
                    }
                }
                OptimizerKind::Adam => {
                    let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
                    for j in 0..w.len() {
                        let gj = g[j] + self.weight_decay * w[j];
                        m[j] = b1 * m[j] + (1.0 - b1) * gj;
                        v[j] = b2 * v[j] + (1.0 - b2) * gj * gj;
                        w[j] -= lr * (m[j] / c1) / ((v[j] / c2).sqrt() + eps);
                    }
                }
            }
        }
    }
}

pub(crate) fn check_finite(loss: f64, what: &str, epoch: usize, step: usize) -> Result<()> {
    if !loss.is_finite() {
        return Err(Error::Diverged(format!(
            "{what}: non-finite loss {loss} at epoch {epoch}, step {step}; lower lr_init or check inputs"
        )));
    }
    Ok(())
}

pub(crate) fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}
