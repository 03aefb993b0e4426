//! Training loop: v-prediction MSE, AdamW, linear warmup into cosine decay and
//! global-norm gradient clipping.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::ops::Tensor;
use super::{spatial_for, Model};
use crate::diffusion::Schedule;
use crate::error::{Error, Result};
use crate::grid::CHANNELS;
use crate::microstructure::Dataset;
use crate::rng::stream_rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub peak_lr: f64,
    pub warmup: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    /// Log the smoothed loss every this many steps (0 disables).
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 100_000,
            batch: 128,
            peak_lr: 1e-3,
            warmup: 5000,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-2,
            grad_clip: 1.0,
            log_every: 500,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 || !(self.peak_lr > 0.0) || !(self.grad_clip > 0.0) {
            return Err(Error::InvalidArgument("batch, learning rate and clip norm must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return Err(Error::InvalidArgument("invalid optimizer moments".into()));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::InvalidArgument("weight decay must be non-negative".into()));
        }
        Ok(())
    }
}

/// Learning rate at 0-based `step`: linear warmup, then half-cosine to zero.
pub fn lr_at(cfg: &TrainConfig, step: usize) -> f64 {
    if step < cfg.warmup {
        return cfg.peak_lr * step as f64 / cfg.warmup.max(1) as f64;
    }
    let span = cfg.steps.saturating_sub(cfg.warmup).max(1) as f64;
    let progress = ((step - cfg.warmup) as f64 / span).min(1.0);
    cfg.peak_lr * 0.5 * (1.0 + (PI * progress).cos())
}

/// Adam with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW {
    m: Vec<f32>,
    v: Vec<f32>,
    t: u32,
    mask: Vec<bool>,
}

impl AdamW {
    pub fn new(mask: Vec<bool>) -> Self {
        AdamW {
            m: vec![0.0; mask.len()],
            v: vec![0.0; mask.len()],
            t: 0,
            mask,
        }
    }

    pub fn step(&mut self, params: &mut [f32], grads: &[f32], lr: f64, cfg: &TrainConfig) {
        self.t += 1;
        let (b1, b2) = (cfg.beta1 as f32, cfg.beta2 as f32);
        let c1 = 1.0 - cfg.beta1.powi(self.t as i32);
        let c2 = 1.0 - cfg.beta2.powi(self.t as i32);
        let step = (lr / c1) as f32;
        let c2s = (1.0 / c2).sqrt() as f32;
        let decay = (1.0 - lr * cfg.weight_decay) as f32;
        let eps = cfg.eps as f32;
        for i in 0..params.len() {
            if !self.mask[i] {
                continue;
            }
            let g = grads[i];
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g;
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * g * g;
            params[i] = params[i] * decay - step * self.m[i] / (self.v[i].sqrt() * c2s + eps);
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TrainReport {
    pub steps: usize,
    pub losses: Vec<f32>,
    pub grad_norms: Vec<f32>,
}

impl TrainReport {
    /// Mean loss over the `window` steps ending at `step` (exclusive).
    pub fn smoothed(&self, step: usize, window: usize) -> f64 {
        let end = step.min(self.losses.len());
        let start = end.saturating_sub(window);
        if end == start {
            return f64::NAN;
        }
        self.losses[start..end].iter().map(|&v| v as f64).sum::<f64>() / (end - start) as f64
    }
}

/// One noisy training batch: `(x_t, target v, timesteps)`.
pub(crate) fn make_batch(
    data: &Dataset,
    schedule: &Schedule,
    indices: &[usize],
    ts: &[usize],
    noise: &[f64],
) -> (Tensor, Tensor) {
    let sp = spatial_for(data.dims(), data.side());
    let s = sp.len();
    let nb = indices.len();
    let mut x = Tensor::zeros(CHANNELS, nb, sp);
    let mut v = Tensor::zeros(CHANNELS, nb, sp);
    for (b, (&i, &t)) in indices.iter().zip(ts).enumerate() {
        let (a, sg) = schedule.coefficients(t);
        let g = data.grid_f32(i);
        for c in 0..CHANNELS {
            for p in 0..s {
                let x0 = g[p * CHANNELS + c] as f64;
                let e = noise[(b * CHANNELS + c) * s + p];
                x.data[(c * nb + b) * s + p] = (a * x0 + sg * e) as f32;
                v.data[(c * nb + b) * s + p] = (a * e - sg * x0) as f32;
            }
        }
    }
    (x, v)
}

/// Trains `model` in place. Deterministic for a given seed: batches, timesteps
/// and noise come from one random stream and all reductions run in a fixed order.
pub fn train(model: &mut Model, data: &Dataset, schedule: &Schedule, cfg: &TrainConfig, seed: u64) -> Result<TrainReport> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::InvalidArgument("training dataset is empty".into()));
    }
    if data.dims() != model.config.dims || data.side() % model.config.side_multiple() != 0 {
        return Err(Error::InvalidArgument("dataset does not match the denoiser configuration".into()));
    }
    use rand::Rng;
    let mut rng = stream_rng(seed, 0x7261_696e);
    let mut opt = AdamW::new(model.trainable_mask());
    let mut grads = vec![0.0f32; model.n_params()];
    let mut report = TrainReport::default();
    let sp = spatial_for(data.dims(), data.side());
    let n_noise = cfg.batch * CHANNELS * sp.len();
    let mut noise = vec![0.0f64; n_noise];
    for step in 0..cfg.steps {
        let indices: Vec<usize> = (0..cfg.batch).map(|_| rng.random_range(0..data.len())).collect();
        let ts: Vec<usize> = (0..cfg.batch).map(|_| rng.random_range(0..schedule.steps())).collect();
        crate::rng::fill_normal(&mut rng, &mut noise);
        let (x, target) = make_batch(data, schedule, &indices, &ts, &noise);
        let tf: Vec<f32> = ts.iter().map(|&t| t as f32).collect();
        let (out, cache) = model.forward(&x, &tf, true);
        let n = out.data.len() as f64;
        let mut loss = 0.0f64;
        let mut dy = Tensor::zeros(out.c, out.b, out.sp);
        for ((d, &o), &v) in dy.data.iter_mut().zip(&out.data).zip(&target.data) {
            let r = (o - v) as f64;
            loss += r * r;
            *d = (2.0 * r / n) as f32;
        }
        loss /= n;
        if !loss.is_finite() {
            return Err(Error::TrainingDiverged { step, loss });
        }
        grads.iter_mut().for_each(|g| *g = 0.0);
        model.backward(&cache.expect("cache kept"), &dy, Some(&mut grads), false);
        let norm = grads.iter().map(|&g| (g as f64).powi(2)).sum::<f64>().sqrt();
        if !norm.is_finite() {
            return Err(Error::TrainingDiverged { step, loss: norm });
        }
        if norm > cfg.grad_clip {
            let s = (cfg.grad_clip / (norm + 1e-6)) as f32;
            grads.iter_mut().for_each(|g| *g *= s);
        }
        opt.step(&mut model.params, &grads, lr_at(cfg, step), cfg);
        report.losses.push(loss as f32);
        report.grad_norms.push(norm as f32);
        report.steps = step + 1;
        if cfg.log_every > 0 && (step + 1) % cfg.log_every == 0 {
            log::info!(
                "step {}: loss {:.5} (mean of last {}), lr {:.2e}",
                step + 1,
                report.smoothed(step + 1, cfg.log_every),
                cfg.log_every,
                lr_at(cfg, step)
            );
        }
    }
    Ok(report)
}

/// Mean squared v-error of `model` on `indices`, next to that of the zero predictor,
/// with timesteps and noise drawn from `seed`.
pub fn validation_mse(model: &Model, data: &Dataset, schedule: &Schedule, indices: &[usize], seed: u64) -> (f64, f64) {
    use rand::Rng;
    let mut rng = stream_rng(seed, 0x7661_6c);
    let sp = spatial_for(data.dims(), data.side());
    let (mut err, mut zero, mut count) = (0.0, 0.0, 0.0);
    for chunk in indices.chunks(8) {
        let ts: Vec<usize> = chunk.iter().map(|_| rng.random_range(0..schedule.steps())).collect();
        let mut noise = vec![0.0; chunk.len() * CHANNELS * sp.len()];
        crate::rng::fill_normal(&mut rng, &mut noise);
        let (x, target) = make_batch(data, schedule, chunk, &ts, &noise);
        let tf: Vec<f32> = ts.iter().map(|&t| t as f32).collect();
        let (out, _) = model.forward(&x, &tf, false);
        for (&o, &v) in out.data.iter().zip(&target.data) {
            err += ((o - v) as f64).powi(2);
            zero += (v as f64).powi(2);
            count += 1.0;
        }
    }
    (err / count, zero / count)
}
