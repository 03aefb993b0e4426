//! Two-component Gaussian mixture with spherical covariances, fitted by EM.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::rng::stream_rng;

const INIT_SEED: u64 = 0x676d_6d;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GmmConfig {
    pub restarts: usize,
    pub max_iter: usize,
    /// Convergence threshold on the change of the mean log-likelihood.
    pub tol: f64,
    /// Variance floor used in the E-step only; reported variances are unregularized.
    pub reg: f64,
}

impl Default for GmmConfig {
    fn default() -> Self {
        GmmConfig {
            restarts: 5,
            max_iter: 200,
            tol: 1e-6,
            reg: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GmmFit {
    pub means: [[f64; 3]; 2],
    /// Per-dimension variance of each component.
    pub variances: [f64; 2],
    pub weights: [f64; 2],
    pub log_likelihood: f64,
    pub iterations: usize,
    pub converged: bool,
}

fn dist2(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)
}

/// Seeds for restart `r`: the first restart takes point 0 and the point farthest
/// from it; later ones draw a random first seed and pick the second by D² sampling.
fn seeds(points: &[[f64; 3]], r: usize) -> [[f64; 3]; 2] {
    let mut rng = stream_rng(INIT_SEED, r as u64);
    let first = if r == 0 { 0 } else { rng.random_range(0..points.len()) };
    let c0 = points[first];
    let d2: Vec<f64> = points.iter().map(|p| dist2(p, &c0)).collect();
    let total: f64 = d2.iter().sum();
    let second = if total == 0.0 {
        first
    } else if r == 0 {
        let mut best = 0;
        for (i, &d) in d2.iter().enumerate() {
            if d > d2[best] {
                best = i;
            }
        }
        best
    } else {
        let mut u = rng.random::<f64>() * total;
        let mut pick = d2.len() - 1;
        for (i, &d) in d2.iter().enumerate() {
            if u < d {
                pick = i;
                break;
            }
            u -= d;
        }
        pick
    };
    [c0, points[second]]
}

/// Weighted mean and per-dimension variance. The mean is accumulated relative
/// to the highest-weight point, so identical points give their value exactly.
pub(crate) fn moments(points: &[[f64; 3]], w: &[f64]) -> ([f64; 3], f64, f64) {
    let nk: f64 = w.iter().sum();
    let mut anchor = 0;
    for (i, &wi) in w.iter().enumerate() {
        if wi > w[anchor] {
            anchor = i;
        }
    }
    let a = points[anchor];
    let mut shift = [0.0; 3];
    for (p, &wi) in points.iter().zip(w) {
        for d in 0..3 {
            shift[d] += wi * (p[d] - a[d]);
        }
    }
    let mean = std::array::from_fn(|d| a[d] + shift[d] / nk);
    let var = points.iter().zip(w).map(|(p, &wi)| wi * dist2(p, &mean)).sum::<f64>() / (3.0 * nk);
    (mean, var, nk)
}

fn run(points: &[[f64; 3]], init: [[f64; 3]; 2], cfg: &GmmConfig) -> Option<GmmFit> {
    let n = points.len();
    let nf = n as f64;
    let mut resp = vec![[0.0f64; 2]; n];
    // hard assignment to the nearest seed
    for (r, p) in resp.iter_mut().zip(points) {
        let k = usize::from(dist2(p, &init[1]) < dist2(p, &init[0]));
        r[k] = 1.0;
    }
    let mut fit = GmmFit {
        means: init,
        variances: [0.0; 2],
        weights: [0.5; 2],
        log_likelihood: f64::NEG_INFINITY,
        iterations: 0,
        converged: false,
    };
    let mut w = vec![0.0; n];
    for it in 0..cfg.max_iter {
        // M-step
        for k in 0..2 {
            w.iter_mut().zip(&resp).for_each(|(wi, r)| *wi = r[k]);
            let (mean, var, nk) = moments(points, &w);
            if !(nk > 1e-9 * nf) {
                return None;
            }
            fit.means[k] = mean;
            fit.variances[k] = var;
            fit.weights[k] = nk / nf;
        }
        // E-step
        let mut ll = 0.0;
        let consts: [f64; 2] = std::array::from_fn(|k| {
            let v = fit.variances[k] + cfg.reg;
            fit.weights[k].ln() - 1.5 * (2.0 * std::f64::consts::PI * v).ln()
        });
        for (r, p) in resp.iter_mut().zip(points) {
            let l: [f64; 2] = std::array::from_fn(|k| {
                consts[k] - dist2(p, &fit.means[k]) / (2.0 * (fit.variances[k] + cfg.reg))
            });
            let m = l[0].max(l[1]);
            let s = (l[0] - m).exp() + (l[1] - m).exp();
            r[0] = (l[0] - m).exp() / s;
            r[1] = (l[1] - m).exp() / s;
            ll += m + s.ln();
        }
        ll /= nf;
        fit.iterations = it + 1;
        let delta = ll - fit.log_likelihood;
        fit.log_likelihood = ll;
        if delta.abs() < cfg.tol {
            fit.converged = true;
            break;
        }
    }
    Some(fit)
}

/// Best of `cfg.restarts` EM runs by log-likelihood; `None` if every run lost a
/// component. Components are ordered by decreasing weight.
pub fn fit_gmm2(points: &[[f64; 3]], cfg: &GmmConfig) -> Option<GmmFit> {
    if points.is_empty() {
        return None;
    }
    let mut best: Option<GmmFit> = None;
    for r in 0..cfg.restarts.max(1) {
        let Some(fit) = run(points, seeds(points, r), cfg) else {
            log::debug!("gmm restart {r} collapsed");
            continue;
        };
        if best.as_ref().is_none_or(|b| fit.log_likelihood > b.log_likelihood) {
            best = Some(fit);
        }
    }
    best.map(|mut f| {
        if f.weights[1] > f.weights[0] {
            f.means.swap(0, 1);
            f.variances.swap(0, 1);
            f.weights.swap(0, 1);
        }
        f
    })
}
