//! Maps a relaxed grid back to design parameters: a two-component mixture picks
//! the materials, thinning plus a distance transform locate the particles, and
//! the fitted means snap to their nearest catalog entries.

mod gmm;
mod morphology;

use std::path::Path;

use serde::{Deserialize, Serialize};

pub use gmm::{fit_gmm2, GmmConfig, GmmFit};
pub use morphology::{distance_transform, thin, Lattice};

use crate::error::{Error, Result};
use crate::grid::{Dims, Grid};
use crate::materials::{Catalog, MaterialRecord};
use crate::microstructure::DesignParams;

/// Fitted means closer than this (normalized units) count as a single material.
pub const SAME_MATERIAL_DISTANCE: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaterialFit {
    pub means: [[f64; 3]; 2],
    pub variances: [f64; 2],
    pub v_m: f64,
    /// Index of the nearest mean for every element.
    #[serde(skip)]
    pub assignment: Vec<u8>,
    pub single_material: bool,
    /// Set when every EM restart lost a component.
    pub collapsed: bool,
}

pub fn fit_material_gmm(grid: &Grid) -> MaterialFit {
    fit_material_gmm_with(grid, &GmmConfig::default())
}

pub fn fit_material_gmm_with(grid: &Grid, cfg: &GmmConfig) -> MaterialFit {
    let points: Vec<[f64; 3]> = grid.elements().collect();
    let (means, variances, collapsed) = match fit_gmm2(&points, cfg) {
        Some(f) => (f.means, f.variances, false),
        None => {
            let (mean, var, _) = gmm::moments(&points, &vec![1.0; points.len()]);
            ([mean, mean], [var, var], true)
        }
    };
    let d2 = |p: &[f64; 3], m: &[f64; 3]| (0..3).map(|d| (p[d] - m[d]).powi(2)).sum::<f64>();
    let assignment = points
        .iter()
        .map(|p| u8::from(d2(p, &means[1]) < d2(p, &means[0])))
        .collect();
    let single_material = collapsed || d2(&means[0], &means[1]).sqrt() < SAME_MATERIAL_DISTANCE;
    MaterialFit {
        means,
        variances,
        v_m: variances[0] + variances[1],
        assignment,
        single_material,
        collapsed,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectConfig {
    /// Skeleton points closer than this to the background (elements) are dropped.
    pub min_distance: f64,
    /// A hypothesis with any skeleton distance above this fraction of the side is rejected.
    pub max_distance_fraction: f64,
    /// Extra reach (elements) of a kept centre when suppressing weaker points.
    pub prune_slack: f64,
}

impl Default for DetectConfig {
    fn default() -> Self {
        DetectConfig {
            min_distance: 2.0,
            max_distance_fraction: 0.45,
            prune_slack: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hypothesis {
    pub label: u8,
    /// Element coordinates of the detected centres.
    pub centers: Vec<[usize; 3]>,
    /// Radii in elements.
    pub radii: Vec<f64>,
    pub radius_variance: f64,
    pub foreground_elements: usize,
    pub rejected: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParticleDetection {
    pub foreground_label: Option<u8>,
    pub centers: Vec<[usize; 3]>,
    pub radii: Vec<f64>,
    /// Aggregated radius as a fraction of the side length.
    pub r_p_hat: Option<f64>,
    pub f_p_hat: f64,
    pub rejected: Option<String>,
    pub hypotheses: Vec<Hypothesis>,
}

/// Radius aggregation over the surviving centres.
pub fn aggregate_radius(radii: &[f64]) -> Option<f64> {
    if radii.is_empty() {
        None
    } else {
        Some(radii.iter().sum::<f64>() / radii.len() as f64)
    }
}

/// Greedy suppression: visiting skeleton points by decreasing distance, each
/// kept point removes every weaker point within its distance plus `slack`. Ties
/// are broken by visiting order, so equal-distance neighbours do not both survive.
///
/// The slack absorbs lattice rounding: the neck between two touching particles
/// lies one radius from each centre, which is the kept point's distance only up
/// to discretization.
pub fn prune_centers(points: &[([usize; 3], f64)], slack: f64) -> Vec<([usize; 3], f64)> {
    let mut order: Vec<usize> = (0..points.len()).collect();
    order.sort_by(|&a, &b| points[b].1.total_cmp(&points[a].1).then(a.cmp(&b)));
    let mut removed = vec![false; points.len()];
    let mut kept = Vec::new();
    for (rank, &i) in order.iter().enumerate() {
        if removed[i] {
            continue;
        }
        let (ci, di) = points[i];
        kept.push(points[i]);
        for &j in &order[rank + 1..] {
            if removed[j] {
                continue;
            }
            let cj = points[j].0;
            let dist = (0..3).map(|k| (ci[k] as f64 - cj[k] as f64).powi(2)).sum::<f64>().sqrt();
            if dist <= di + slack {
                removed[j] = true;
            }
        }
    }
    kept
}

fn evaluate_hypothesis(labels: &[u8], label: u8, lat: &Lattice, side: usize, cfg: &DetectConfig) -> Hypothesis {
    let fg: Vec<bool> = labels.iter().map(|&l| l == label).collect();
    let count = fg.iter().filter(|&&b| b).count();
    let mut h = Hypothesis {
        label,
        centers: Vec::new(),
        radii: Vec::new(),
        radius_variance: f64::INFINITY,
        foreground_elements: count,
        rejected: None,
    };
    let reject = |mut h: Hypothesis, why: String| {
        h.rejected = Some(why);
        h
    };
    if count == 0 {
        return reject(h, "empty foreground".into());
    }
    let (mut on_edge, mut edge) = (0usize, 0usize);
    for i in 0..lat.len() {
        if lat.is_boundary(i) {
            edge += 1;
            on_edge += usize::from(fg[i]);
        }
    }
    if 2 * on_edge > edge {
        return reject(h, format!("foreground covers {on_edge} of {edge} boundary elements"));
    }
    let dist = distance_transform(&fg, lat);
    let skeleton = thin(&fg, lat);
    let limit = cfg.max_distance_fraction * side as f64;
    let mut points = Vec::new();
    for i in 0..lat.len() {
        if !skeleton[i] {
            continue;
        }
        if dist[i] > limit {
            return reject(h, format!("skeleton distance {} exceeds {limit}", dist[i]));
        }
        if dist[i] >= cfg.min_distance {
            points.push((lat.coords(i), dist[i]));
        }
    }
    let kept = prune_centers(&points, cfg.prune_slack);
    if kept.is_empty() {
        return reject(h, "no skeleton point far enough from the background".into());
    }
    h.centers = kept.iter().map(|p| p.0).collect();
    h.radii = kept.iter().map(|p| p.1).collect();
    let mean = aggregate_radius(&h.radii).expect("nonempty");
    h.radius_variance = h.radii.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / h.radii.len() as f64;
    h
}

/// Tries both labels as particle phase and keeps the surviving hypothesis with
/// the lower radius variance.
pub fn detect_particles(labels: &[u8], dims: Dims, side: usize) -> ParticleDetection {
    detect_particles_with(labels, dims, side, &DetectConfig::default())
}

pub fn detect_particles_with(labels: &[u8], dims: Dims, side: usize, cfg: &DetectConfig) -> ParticleDetection {
    let lat = Lattice::new(dims, side);
    let hyps: Vec<Hypothesis> = [0u8, 1].iter().map(|&l| evaluate_hypothesis(labels, l, &lat, side, cfg)).collect();
    let best = hyps
        .iter()
        .filter(|h| h.rejected.is_none())
        .min_by(|a, b| a.radius_variance.total_cmp(&b.radius_variance));
    match best {
        Some(h) => ParticleDetection {
            foreground_label: Some(h.label),
            centers: h.centers.clone(),
            radii: h.radii.clone(),
            r_p_hat: aggregate_radius(&h.radii).map(|r| r / side as f64),
            f_p_hat: h.foreground_elements as f64 / lat.len() as f64,
            rejected: None,
            hypotheses: hyps.clone(),
        },
        None => ParticleDetection {
            foreground_label: None,
            centers: Vec::new(),
            radii: Vec::new(),
            r_p_hat: None,
            f_p_hat: 0.0,
            rejected: Some(
                hyps.iter()
                    .map(|h| format!("label {}: {}", h.label, h.rejected.as_deref().unwrap_or("")))
                    .collect::<Vec<_>>()
                    .join("; "),
            ),
            hypotheses: hyps,
        },
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Backprojection {
    /// Catalog materials with `f_p_hat`; `r_p` is 0 when no particles were found.
    pub theta_hat: DesignParams,
    pub r_p: Option<f64>,
    pub particle_count: usize,
    pub v_m: f64,
    pub d_m: f64,
    pub matrix_distance: f64,
    pub particle_distance: f64,
    pub fit: MaterialFit,
    pub detection: Option<ParticleDetection>,
}

impl Backprojection {
    pub fn detection_failed(&self) -> bool {
        self.detection.as_ref().is_some_and(|d| d.rejected.is_some())
    }
}

pub fn backproject(grid: &Grid, catalog: &Catalog) -> Backprojection {
    let fit = fit_material_gmm(grid);
    let lookup = |k: usize| -> (MaterialRecord, f64) { catalog.nearest_material(fit.means[k]) };
    if fit.single_material {
        let (m0, d0) = lookup(0);
        let (_, d1) = lookup(1);
        return Backprojection {
            theta_hat: DesignParams::from_materials(&m0, &m0, 0.0, 0.0),
            r_p: None,
            particle_count: 0,
            v_m: fit.v_m,
            d_m: d0 + d1,
            matrix_distance: d0,
            particle_distance: d1,
            fit,
            detection: None,
        };
    }
    let det = detect_particles(&fit.assignment, grid.dims(), grid.side());
    let particle_label = match det.foreground_label {
        Some(l) => l as usize,
        // no credible particle phase: call the minority component the particle
        None => 1,
    };
    let (mm, dmm) = lookup(1 - particle_label);
    let (pm, dpm) = lookup(particle_label);
    let r_p = det.r_p_hat;
    Backprojection {
        theta_hat: DesignParams::from_materials(&mm, &pm, r_p.unwrap_or(0.0), det.f_p_hat),
        r_p,
        particle_count: det.centers.len(),
        v_m: fit.v_m,
        d_m: dmm + dpm,
        matrix_distance: dmm,
        particle_distance: dpm,
        fit,
        detection: Some(det),
    }
}

pub fn write_report(path: &Path, items: &[Backprojection]) -> Result<()> {
    let json = serde_json::to_vec_pretty(items).map_err(|e| Error::json(path, e))?;
    std::fs::write(path, json).map_err(|e| Error::io(path, e))
}
