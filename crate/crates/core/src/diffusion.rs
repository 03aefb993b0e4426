//! Variance schedule, trailing timestep selection, forward noising, the
//! v-parameterization conversions and the DDIM update.
//!
//! Training timesteps are 0-based: index `t` holds `ᾱ` of step `t + 1`, so the
//! terminal step is `T − 1`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub rescale: bool,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            steps: 1000,
            beta_start: 1e-5,
            beta_end: 1e-2,
            rescale: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub config: ScheduleConfig,
    pub beta: Vec<f64>,
    pub alpha_bar: Vec<f64>,
}

impl Schedule {
    pub fn new(config: ScheduleConfig) -> Result<Self> {
        build_schedule(config.steps, config.beta_start, config.beta_end, config.rescale)
    }

    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    /// `(√ᾱ_t, √(1 − ᾱ_t))`.
    pub fn coefficients(&self, t: usize) -> (f64, f64) {
        let ab = self.alpha_bar[t];
        (ab.sqrt(), (1.0 - ab).sqrt())
    }

    pub fn trailing(&self, n: usize) -> Result<Vec<usize>> {
        trailing_timesteps(self.steps(), n)
    }
}

pub fn build_schedule(steps: usize, beta0: f64, beta_t: f64, rescale: bool) -> Result<Schedule> {
    if steps < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 diffusion steps, got {steps}")));
    }
    if !(beta0 > 0.0 && beta0 <= beta_t && beta_t < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "beta range must satisfy 0 < beta0 <= betaT < 1, got {beta0}..{beta_t}"
        )));
    }
    let last = (steps - 1) as f64;
    let mut beta: Vec<f64> = (0..steps)
        .map(|t| beta0 + t as f64 / last * (beta_t - beta0))
        .collect();
    let mut alpha_bar = Vec::with_capacity(steps);
    let mut prod = 1.0;
    for b in &beta {
        prod *= 1.0 - b;
        alpha_bar.push(prod);
    }
    if rescale {
        let s: Vec<f64> = alpha_bar.iter().map(|a| a.sqrt()).collect();
        let (s1, st) = (s[0], s[steps - 1]);
        let first = alpha_bar[0];
        for (a, si) in alpha_bar.iter_mut().zip(&s) {
            let v = (si - st) * s1 / (s1 - st);
            *a = v * v;
        }
        // keep the endpoints exact
        alpha_bar[0] = first;
        alpha_bar[steps - 1] = 0.0;
        beta[0] = 1.0 - alpha_bar[0];
        for t in 1..steps {
            beta[t] = 1.0 - alpha_bar[t] / alpha_bar[t - 1];
        }
    }
    Ok(Schedule {
        config: ScheduleConfig {
            steps,
            beta_start: beta0,
            beta_end: beta_t,
            rescale,
        },
        beta,
        alpha_bar,
    })
}

/// `round(T − kT/N) − 1` for `k = 0..N` (half rounds up), clamped and deduplicated.
pub fn trailing_timesteps(steps: usize, n: usize) -> Result<Vec<usize>> {
    if n == 0 || n > steps {
        return Err(Error::InvalidArgument(format!("sampling steps must lie in 1..={steps}, got {n}")));
    }
    let mut out: Vec<usize> = Vec::with_capacity(n);
    for k in 0..n {
        // floor(T(N−k)/N + 1/2) in integers
        let r = (2 * steps * (n - k) + n) / (2 * n);
        let t = r.saturating_sub(1).min(steps - 1);
        if out.last() != Some(&t) {
            out.push(t);
        }
    }
    Ok(out)
}

/// `x_t = √ᾱ_t x₀ + √(1 − ᾱ_t) ε`.
pub fn q_sample(x0: &[f64], t: usize, eps: &[f64], schedule: &Schedule) -> Vec<f64> {
    let (a, b) = schedule.coefficients(t);
    x0.iter().zip(eps).map(|(x, e)| a * x + b * e).collect()
}

/// `v = √ᾱ ε − √(1 − ᾱ) x₀`.
pub fn velocity(x0: &[f64], eps: &[f64], t: usize, schedule: &Schedule) -> Vec<f64> {
    let (a, b) = schedule.coefficients(t);
    x0.iter().zip(eps).map(|(x, e)| a * e - b * x).collect()
}

/// `(ε, x̂₀)` from a velocity prediction.
pub fn convert(v: &[f64], x_t: &[f64], t: usize, schedule: &Schedule) -> (Vec<f64>, Vec<f64>) {
    let (a, b) = schedule.coefficients(t);
    let eps = v.iter().zip(x_t).map(|(v, x)| b * x + a * v).collect();
    let x0 = v.iter().zip(x_t).map(|(v, x)| a * x - b * v).collect();
    (eps, x0)
}

/// Coefficients of one reverse step from training index `t` to `t_prev`
/// (`None` at the final step, where `ᾱ_prev := 1`).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DdimCoefficients {
    pub x: f64,
    pub x0: f64,
    pub sigma: f64,
}

/// The general DDIM update
/// `x_prev = √ᾱ_prev x̂₀ + √(1 − ᾱ_prev − σ²) ε̂ + σ z`, `ε̂ = (x − √ᾱ x̂₀)/√(1 − ᾱ)`,
/// with `σ = η √((1 − ᾱ_prev)/(1 − ᾱ) (1 − ᾱ/ᾱ_prev))`, written as coefficients of
/// `x` and `x̂₀`. At `η = 1` these are the posterior-mean coefficients
/// `√α̃ (1 − ᾱ_prev)/(1 − ᾱ)` and `√ᾱ_prev β̃/(1 − ᾱ)`.
pub fn ddim_coefficients(schedule: &Schedule, t: usize, t_prev: Option<usize>, eta: f64) -> DdimCoefficients {
    let ab = schedule.alpha_bar[t];
    let ab_prev = t_prev.map_or(1.0, |p| schedule.alpha_bar[p]);
    if ab_prev >= 1.0 {
        return DdimCoefficients {
            x: 0.0,
            x0: 1.0,
            sigma: 0.0,
        };
    }
    let one_m = 1.0 - ab;
    let beta_tilde = 1.0 - ab / ab_prev;
    let sigma_full = ((1.0 - ab_prev) / one_m * beta_tilde).max(0.0).sqrt();
    if eta == 1.0 {
        return DdimCoefficients {
            x: (ab / ab_prev).sqrt() * (1.0 - ab_prev) / one_m,
            x0: ab_prev.sqrt() * beta_tilde / one_m,
            sigma: sigma_full,
        };
    }
    let sigma = eta * sigma_full;
    let c_eps = (1.0 - ab_prev - sigma * sigma).max(0.0).sqrt();
    let c_x = c_eps / one_m.sqrt();
    DdimCoefficients {
        x: c_x,
        x0: ab_prev.sqrt() - c_x * ab.sqrt(),
        sigma,
    }
}

/// One reverse step; `z` is only read when `σ > 0`.
pub fn ddim_step(
    x: &[f64],
    x0_hat: &[f64],
    t: usize,
    t_prev: Option<usize>,
    eta: f64,
    z: &[f64],
    schedule: &Schedule,
) -> Vec<f64> {
    let c = ddim_coefficients(schedule, t, t_prev, eta);
    if c.sigma > 0.0 {
        x.iter()
            .zip(x0_hat)
            .zip(z)
            .map(|((x, x0), z)| c.x * x + c.x0 * x0 + c.sigma * z)
            .collect()
    } else {
        x.iter().zip(x0_hat).map(|(x, x0)| c.x * x + c.x0 * x0).collect()
    }
}
