//! Adam with global-norm gradient clipping.
//!
//! Callers accumulate gradients over `accum_steps` backward passes (the
//! buffers sum), then invoke [`Adam::step`], which clips the summed
//! gradients at `clip_norm`, applies the update, and clears the buffers.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::Parameters;
use crate::tensor::Tensor;

/// Shared training hyperparameters for the summarizer and discriminator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub dropout: f64,
    /// Only 1 is supported: per-document cluster statistics are
    /// unambiguous without cross-document batching.
    pub batch_size: usize,
    pub lr: f64,
    /// Backward passes whose gradients are summed before each update.
    pub grad_accum: usize,
    /// Global gradient-norm ceiling.
    pub grad_clip: f64,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            dropout: 0.1,
            batch_size: 1,
            lr: 3e-5,
            grad_accum: 2,
            grad_clip: 0.1,
            epochs: 5,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size != 1 {
            return Err(Error::Config(format!(
                "batch_size {} unsupported (only 1)",
                self.batch_size
            )));
        }
        if self.lr <= 0.0 {
            return Err(Error::Config(format!("lr {} must be positive", self.lr)));
        }
        if self.grad_accum == 0 || self.epochs == 0 {
            return Err(Error::Config("grad_accum and epochs must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0,1)", self.dropout)));
        }
        if self.grad_clip <= 0.0 {
            return Err(Error::Config(format!("grad_clip {} must be positive", self.grad_clip)));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            clip_norm: Some(self.grad_clip),
            ..AdamConfig::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm ceiling; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 3e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: Some(0.1),
        }
    }
}

#[derive(Debug)]
pub struct Adam {
    cfg: AdamConfig,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    step: u64,
}

impl Adam {
    pub fn new(cfg: AdamConfig, params: &Parameters) -> Adam {
        let m = params.ids().map(|id| Tensor::zeros(params.value(id).shape())).collect();
        let v = params.ids().map(|id| Tensor::zeros(params.value(id).shape())).collect();
        Adam { cfg, m, v, step: 0 }
    }

    pub fn config(&self) -> &AdamConfig {
        &self.cfg
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Clip accumulated gradients, apply one Adam update, zero the buffers.
    /// Returns the pre-clip global gradient norm.
    pub fn step(&mut self, params: &mut Parameters) -> f64 {
        let norm = params.grad_global_norm();
        if let Some(clip) = self.cfg.clip_norm {
            if norm > clip && norm > 0.0 {
                params.scale_grads(clip / norm);
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.cfg.beta1.powi(t);
        let bc2 = 1.0 - self.cfg.beta2.powi(t);
        for id in params.ids() {
            let i = id.0;
            let g = params.grad(id).clone();
            for ((m, v), &gd) in self.m[i]
                .data_mut()
                .iter_mut()
                .zip(self.v[i].data_mut())
                .zip(g.data())
            {
                *m = self.cfg.beta1 * *m + (1.0 - self.cfg.beta1) * gd;
                *v = self.cfg.beta2 * *v + (1.0 - self.cfg.beta2) * gd * gd;
            }
            let lr = self.cfg.lr;
            let eps = self.cfg.eps;
            let value = params.value_mut(id);
            for ((p, &m), &v) in value
                .data_mut()
                .iter_mut()
                .zip(self.m[i].data())
                .zip(self.v[i].data())
            {
                let mhat = m / bc1;
                let vhat = v / bc2;
                *p -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        params.zero_grads();
        norm
    }
}
