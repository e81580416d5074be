//! Adam with decoupled weight decay, plus the cosine learning-rate schedule
//! with linear warmup.

use crate::error::{Error, Result};
use crate::lm::{LmConfig, TinyLm};

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const EPS: f64 = 1e-8;

/// Decoupled-weight-decay adaptive-moment optimizer over a model's
/// parameter arrays.
pub struct AdamW {
    m: TinyLm,
    v: TinyLm,
    step: usize,
    weight_decay: f64,
}

impl AdamW {
    pub fn new(config: LmConfig, weight_decay: f64) -> Result<Self> {
        if weight_decay < 0.0 {
            return Err(Error::InvalidParameter(
                "weight decay must be non-negative".into(),
            ));
        }
        Ok(Self {
            m: TinyLm::zeros(config)?,
            v: TinyLm::zeros(config)?,
            step: 0,
            weight_decay,
        })
    }

    /// One update: `p -= lr * (m̂ / (√v̂ + ε) + wd * p)`.
    ///
    /// A zero gradient therefore leaves parameters untouched except for the
    /// decay term, and exactly untouched when the decay is zero.
    pub fn apply(&mut self, params: &mut TinyLm, grads: &TinyLm, lr: f64) -> Result<()> {
        if params.config != grads.config {
            return Err(Error::InvalidInput(
                "parameter/gradient configurations differ".into(),
            ));
        }
        self.step += 1;
        let bc1 = 1.0 - BETA1.powi(self.step as i32);
        let bc2 = 1.0 - BETA2.powi(self.step as i32);
        let wd = self.weight_decay;
        let ms = self.m.arrays_mut();
        let vs = self.v.arrays_mut();
        let ps = params.arrays_mut();
        let gs = grads.arrays();
        for (((p, g), m), v) in ps.into_iter().zip(gs).zip(ms).zip(vs) {
            for i in 0..p.len() {
                let gi = g[i];
                m[i] = BETA1 * m[i] + (1.0 - BETA1) * gi;
                v[i] = BETA2 * v[i] + (1.0 - BETA2) * gi * gi;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p[i] -= lr * (mhat / (vhat.sqrt() + EPS) + wd * p[i]);
            }
        }
        Ok(())
    }
}

/// Cosine decay from `base` to zero with linear warmup over the first
/// `warmup_ratio` of `total_steps`. `step` is zero-based.
pub fn cosine_lr(base: f64, step: usize, total_steps: usize, warmup_ratio: f64) -> f64 {
    if total_steps == 0 {
        return base;
    }
    let warmup = (warmup_ratio * total_steps as f64).ceil() as usize;
    if step < warmup {
        return base * (step + 1) as f64 / warmup as f64;
    }
    let span = (total_steps - warmup).max(1) as f64;
    let progress = (step - warmup) as f64 / span;
    base * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}
