//! Target selection, design evaluation by microstructure resampling, the frac and
//! cov metrics, bound checks and report files.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fem::{mixture_bounds, Fem};
use crate::materials::{chunk_index, Catalog, ChunkIndex};
use crate::microstructure::{
    pack_particles, particle_count, rasterize, stochastic_round, Dataset, DesignParams, PackingConfig, ParticleLayout,
};
use crate::rng::stream_rng;

/// Percentile `p` (0..=100) of sorted data, interpolating linearly between order statistics.
pub fn percentile(sorted: &[f64], p: f64) -> f64 {
    assert!(!sorted.is_empty(), "percentile of empty data");
    let pos = (p / 100.0).clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Five evenly spaced targets from the 1st to the 99th percentile of `ks`.
pub fn select_targets(ks: &[f64]) -> Result<[f64; 5]> {
    if ks.is_empty() || ks.iter().any(|k| !k.is_finite()) {
        return Err(Error::InvalidArgument("need finite bulk moduli to select targets".into()));
    }
    if ks.len() < 100 {
        log::warn!("only {} samples; percentiles are unstable", ks.len());
    }
    let mut sorted = ks.to_vec();
    sorted.sort_by(f64::total_cmp);
    let (lo, hi) = (percentile(&sorted, 1.0), percentile(&sorted, 99.0));
    Ok(std::array::from_fn(|i| lo + (hi - lo) * i as f64 / 4.0))
}

/// Bulk modulus of every dataset sample.
pub fn dataset_bulk_moduli(fem: &Fem, data: &Dataset) -> Result<Vec<f64>> {
    (0..data.len()).into_par_iter().map(|i| fem.bulk_modulus_of(&data.grid(i))).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub repeats: usize,
    #[serde(skip, default)]
    pub packing: PackingConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            repeats: 10,
            packing: PackingConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub theta_hat: DesignParams,
    pub k_theta: f64,
    pub k_star: f64,
    pub eps_r: f64,
    pub eps: f64,
    pub k_values: Vec<f64>,
    pub failed_repeats: usize,
    /// Fewer than half of the repeats succeeded.
    pub unreliable: bool,
    pub chunks: [ChunkIndex; 2],
}

impl EvalResult {
    /// Errors against another target with the same `K_θ`.
    pub fn with_target(&self, k_star: f64) -> EvalResult {
        let eps = (self.k_theta - k_star).abs();
        EvalResult {
            k_star,
            eps,
            eps_r: eps / k_star,
            ..self.clone()
        }
    }
}

fn layout_for(theta: &DesignParams, fem: &Fem, rng: &mut rand_chacha::ChaCha8Rng, packing: &PackingConfig) -> Result<ParticleLayout> {
    let dims = fem.mesh().dims;
    if theta.f_p <= 0.0 || theta.r_p <= 0.0 {
        return Ok(ParticleLayout::empty(dims, theta.r_p.max(f64::MIN_POSITIVE)));
    }
    let (real, _) = particle_count(theta.f_p, theta.r_p, dims)?;
    let count = stochastic_round(real, rng)?;
    pack_particles(count, theta.r_p, dims, rng, packing)
}

/// `K_θ` as the mean bulk modulus over `cfg.repeats` freshly packed
/// microstructures; repeat `j` uses random stream `j` of `seed`.
pub fn evaluate_design(fem: &Fem, theta: &DesignParams, k_star: f64, cfg: &EvalConfig, seed: u64) -> Result<EvalResult> {
    if cfg.repeats == 0 {
        return Err(Error::InvalidArgument("evaluation needs at least one repeat".into()));
    }
    if !(k_star > 0.0) {
        return Err(Error::InvalidArgument(format!("target K must be positive, got {k_star}")));
    }
    let side = fem.mesh().side;
    let outcomes: Vec<Result<f64>> = (0..cfg.repeats)
        .into_par_iter()
        .map(|j| {
            let mut rng = stream_rng(seed, j as u64);
            let layout = layout_for(theta, fem, &mut rng, &cfg.packing)?;
            fem.bulk_modulus_of(&rasterize(theta, &layout, side))
        })
        .collect();
    let mut k_values = Vec::new();
    let mut failed = 0;
    for (j, o) in outcomes.into_iter().enumerate() {
        match o {
            Ok(k) => k_values.push(k),
            Err(e) => {
                log::warn!("evaluation repeat {j} failed: {e}");
                failed += 1;
            }
        }
    }
    if k_values.is_empty() {
        return Err(Error::EvaluationFailed(format!("all {} repeats failed", cfg.repeats)));
    }
    let k_theta = k_values.iter().sum::<f64>() / k_values.len() as f64;
    let eps = (k_theta - k_star).abs();
    Ok(EvalResult {
        theta_hat: *theta,
        k_theta,
        k_star,
        eps_r: eps / k_star,
        eps,
        unreliable: 2 * k_values.len() < cfg.repeats,
        k_values,
        failed_repeats: failed,
        chunks: [chunk_index(theta.matrix()), chunk_index(theta.particle())],
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MarginKind {
    /// On `ε_r`.
    Relative,
    /// On `ε` (GPa).
    Absolute,
}

fn error_of(r: &EvalResult, kind: MarginKind) -> f64 {
    match kind {
        MarginKind::Relative => r.eps_r,
        MarginKind::Absolute => r.eps,
    }
}

/// Fraction of results whose error is below `margin`.
pub fn frac_metric(results: &[EvalResult], kind: MarginKind, margin: f64) -> Result<f64> {
    if results.is_empty() {
        return Err(Error::InvalidArgument("frac of an empty result list".into()));
    }
    let hits = results.iter().filter(|r| error_of(r, kind) < margin).count();
    Ok(hits as f64 / results.len() as f64)
}

/// Distinct material chunks (matrix and particle together) among qualifying
/// results, over the catalog's nonempty chunks.
pub fn cov_metric(results: &[EvalResult], kind: MarginKind, margin: f64, catalog: &Catalog) -> f64 {
    let chunks: BTreeSet<ChunkIndex> = results
        .iter()
        .filter(|r| error_of(r, kind) < margin)
        .flat_map(|r| r.chunks)
        .collect();
    let total = catalog.nonempty_chunks();
    if total == 0 {
        0.0
    } else {
        chunks.len() as f64 / total as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginMetric {
    pub kind: MarginKind,
    pub margin: f64,
    pub frac: f64,
    pub cov: f64,
}

pub const RELATIVE_MARGINS: [f64; 2] = [0.01, 0.05];
pub const ABSOLUTE_MARGINS: [f64; 3] = [1.0, 5.0, 10.0];

pub fn metric_report(results: &[EvalResult], catalog: &Catalog) -> Result<Vec<MarginMetric>> {
    let mut out = Vec::new();
    for (kind, margins) in [
        (MarginKind::Relative, &RELATIVE_MARGINS[..]),
        (MarginKind::Absolute, &ABSOLUTE_MARGINS[..]),
    ] {
        for &margin in margins {
            out.push(MarginMetric {
                kind,
                margin,
                frac: frac_metric(results, kind, margin)?,
                cov: cov_metric(results, kind, margin, catalog),
            });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundViolation {
    pub index: usize,
    pub k: f64,
    pub lower: f64,
    pub upper: f64,
    pub relative: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundsReport {
    pub samples: usize,
    pub outside: usize,
    pub fraction_outside: f64,
    pub max_relative_violation: f64,
    pub violations: Vec<BoundViolation>,
}

/// Compares each `(θ, f, K)` with the Reuss/Voigt interval of its phases at
/// particle fraction `f`, using the phase moduli of the FEM boundary mode.
pub fn bounds_check(fem: &Fem, samples: &[(DesignParams, f64, f64)]) -> BoundsReport {
    let boundary = fem.mesh().boundary;
    let mut violations = Vec::new();
    for (index, (theta, f, k)) in samples.iter().enumerate() {
        let km = boundary.phase_modulus(theta.e_m, theta.nu_m);
        let kp = boundary.phase_modulus(theta.e_p, theta.nu_p);
        let (lower, upper) = mixture_bounds(km, kp, *f);
        // a few ulps of slack for homogeneous samples where the bounds coincide
        let tol = 1e-9 * upper.abs();
        let relative = if *k < lower - tol {
            (lower - k) / lower
        } else if *k > upper + tol {
            (k - upper) / upper
        } else {
            continue;
        };
        violations.push(BoundViolation {
            index,
            k: *k,
            lower,
            upper,
            relative,
        });
    }
    let n = samples.len();
    BoundsReport {
        samples: n,
        outside: violations.len(),
        fraction_outside: if n == 0 { 0.0 } else { violations.len() as f64 / n as f64 },
        max_relative_violation: violations.iter().map(|v| v.relative).fold(0.0, f64::max),
        violations,
    }
}

/// One evaluated sample for the CSV report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub seed: u64,
    pub chain: usize,
    pub e_m: f64,
    pub nu_m: f64,
    pub rho_m: f64,
    pub e_p: f64,
    pub nu_p: f64,
    pub rho_p: f64,
    pub r_p: f64,
    pub f_p: f64,
    pub matrix_id: Option<u32>,
    pub particle_id: Option<u32>,
    pub k_s: f64,
    pub k_theta: f64,
    pub k_star: f64,
    pub eps_r: f64,
    pub eps: f64,
    pub v_m: f64,
    pub d_m: f64,
}

impl ReportRow {
    pub fn new(seed: u64, chain: usize, k_s: f64, v_m: f64, d_m: f64, r: &EvalResult) -> Self {
        let t = &r.theta_hat;
        ReportRow {
            seed,
            chain,
            e_m: t.e_m,
            nu_m: t.nu_m,
            rho_m: t.rho_m,
            e_p: t.e_p,
            nu_p: t.nu_p,
            rho_p: t.rho_p,
            r_p: t.r_p,
            f_p: t.f_p,
            matrix_id: t.matrix_id,
            particle_id: t.particle_id,
            k_s,
            k_theta: r.k_theta,
            k_star: r.k_star,
            eps_r: r.eps_r,
            eps: r.eps,
            v_m,
            d_m,
        }
    }
}

pub fn write_csv(path: &Path, rows: &[ReportRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::io(path, e.into()))?;
    for r in rows {
        w.serialize(r).map_err(|e| Error::io(path, e.into()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub k_star: f64,
    pub samples: usize,
    pub mean_eps_r: f64,
    pub mean_k_theta: f64,
    pub metrics: Vec<MarginMetric>,
}

pub fn summarize(results: &[EvalResult], catalog: &Catalog) -> Result<Summary> {
    let n = results.len();
    let metrics = metric_report(results, catalog)?;
    Ok(Summary {
        k_star: results[0].k_star,
        samples: n,
        mean_eps_r: results.iter().map(|r| r.eps_r).sum::<f64>() / n as f64,
        mean_k_theta: results.iter().map(|r| r.k_theta).sum::<f64>() / n as f64,
        metrics,
    })
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let json = serde_json::to_vec_pretty(value).map_err(|e| Error::json(path, e))?;
    fs::write(path, json).map_err(|e| Error::io(path, e))
}

/// Minimal SVG histogram of `values` with `bins` bars.
pub fn histogram_svg(values: &[f64], bins: usize, title: &str) -> String {
    let (w, h, pad) = (480.0, 300.0, 40.0);
    let mut svg = String::new();
    let _ = writeln!(svg, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}">"#);
    let _ = writeln!(svg, r#"<text x="{pad}" y="20" font-size="14">{}</text>"#, xml_escape(title));
    let finite: Vec<f64> = values.iter().copied().filter(|v| v.is_finite()).collect();
    if !finite.is_empty() && bins > 0 {
        let lo = finite.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = finite.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let width = if hi > lo { (hi - lo) / bins as f64 } else { 1.0 };
        let mut counts = vec![0usize; bins];
        for v in &finite {
            let b = (((v - lo) / width) as usize).min(bins - 1);
            counts[b] += 1;
        }
        let max = *counts.iter().max().unwrap_or(&1) as f64;
        let bw = (w - 2.0 * pad) / bins as f64;
        for (i, &c) in counts.iter().enumerate() {
            let bh = (h - 2.0 * pad) * c as f64 / max;
            let _ = writeln!(
                svg,
                r##"<rect x="{:.1}" y="{:.1}" width="{:.1}" height="{:.1}" fill="#4a7ab0"/>"##,
                pad + i as f64 * bw,
                h - pad - bh,
                bw - 1.0,
                bh
            );
        }
        let _ = writeln!(svg, r#"<text x="{pad}" y="{}" font-size="11">{lo:.3}</text>"#, h - 20.0);
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{}" font-size="11" text-anchor="end">{hi:.3}</text>"#,
            w - pad,
            h - 20.0
        );
    }
    svg.push_str("</svg>\n");
    svg
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
