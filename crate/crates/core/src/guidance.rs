//! Loss-guided DDIM sampling: each reverse step predicts `x̂₀`, evaluates the
//! objective with the FEM solver and its adjoint, and nudges the next latent
//! against the pulled-back gradient.

use std::fs;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::denoiser::Denoiser;
use crate::diffusion::{convert, ddim_step, Schedule};
use crate::error::{Error, Result};
use crate::fem::Fem;
use crate::grid::{Dims, Grid, CHANNELS};
use crate::materials::{Catalog, BOUNDS};
use crate::rng::{fill_normal, stream_rng};
use crate::sensitivity::{adjoint_gradient, GradientUnits, ObjectiveSpec};

/// Lift applied to the lower end of the E channel so that FEM never sees E = 0.
pub const LOWER_LIFT: f64 = 1e-6;
/// Largest Poisson ratio handed to the FEM solver.
pub const NU_CAP: f64 = 0.49;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GuidanceMode {
    /// Differentiate through the network.
    FullVjp,
    /// Treat the network as constant: `∂x̂₀/∂x ≈ √ᾱ I`.
    Direct,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GuidanceConfig {
    pub rho_d: f64,
    pub scale_e: f64,
    pub scale_nu: f64,
    pub scale_rho: f64,
    pub steps: usize,
    pub eta: f64,
    pub objective: ObjectiveSpec,
    pub mode: GuidanceMode,
    pub project_materials: bool,
    /// Record the objective at every step even when unguided (costs one FEM solve per step).
    pub track_loss: bool,
}

impl GuidanceConfig {
    pub fn new(objective: ObjectiveSpec) -> Self {
        GuidanceConfig {
            rho_d: 1.0,
            scale_e: 0.5,
            scale_nu: 0.02,
            scale_rho: 1.0,
            steps: 100,
            eta: 1.0,
            objective,
            mode: GuidanceMode::FullVjp,
            project_materials: false,
            track_loss: false,
        }
    }

    pub fn unguided(mut self) -> Self {
        self.rho_d = 0.0;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::InvalidArgument("sampling needs at least one step".into()));
        }
        for (name, v) in [
            ("rho_D", self.rho_d),
            ("scale_E", self.scale_e),
            ("scale_nu", self.scale_nu),
            ("scale_rho", self.scale_rho),
            ("eta", self.eta),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::InvalidArgument(format!("{name} must be finite and non-negative, got {v}")));
            }
        }
        self.objective.validate()
    }

    fn scales(&self) -> [f64; CHANNELS] {
        [self.scale_e, self.scale_nu, self.scale_rho]
    }

    fn needs_gradient(&self) -> bool {
        self.rho_d > 0.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub seed: u64,
    pub chain: usize,
    /// Final clipped sample in normalized units.
    #[serde(skip)]
    pub x0: Option<Grid>,
    /// Objective at `x̂₀` of every sampling step (empty when not tracked).
    pub losses: Vec<f64>,
    /// Bulk modulus of the raw sample.
    pub k_s: f64,
    /// Objective of the raw sample.
    pub objective: f64,
}

impl SampleRecord {
    pub fn grid(&self) -> &Grid {
        self.x0.as_ref().expect("sample grid present")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainFailure {
    pub chain: usize,
    pub message: String,
}

#[derive(Debug, Clone)]
pub struct Batch {
    pub records: Vec<SampleRecord>,
    pub failures: Vec<ChainFailure>,
}

/// Objective value, bulk modulus and the scaled normalized-space gradient at `x̂₀`.
#[derive(Debug, Clone)]
pub struct LossGradient {
    pub objective: f64,
    pub bulk_modulus: f64,
    pub gradient: Grid,
}

/// Copy of `x` with the per-channel bounds the FEM solver needs.
pub fn physical_guard(x: &Grid) -> Grid {
    let mut g = x.clipped(-1.0, 1.0);
    let nu_hi = 2.0 * NU_CAP / BOUNDS[1].1 - 1.0;
    for (i, v) in g.as_mut_slice().iter_mut().enumerate() {
        match i % CHANNELS {
            0 => *v = v.max(-1.0 + LOWER_LIFT),
            1 => *v = v.min(nu_hi),
            _ => {}
        }
    }
    g
}

pub struct Sampler<'a> {
    pub denoiser: &'a dyn Denoiser,
    pub schedule: &'a Schedule,
    pub fem: &'a Fem,
    pub config: GuidanceConfig,
    /// Needed when `project_materials` is set.
    pub catalog: Option<&'a Catalog>,
}

impl<'a> Sampler<'a> {
    pub fn new(denoiser: &'a dyn Denoiser, schedule: &'a Schedule, fem: &'a Fem, config: GuidanceConfig) -> Self {
        Sampler {
            denoiser,
            schedule,
            fem,
            config,
            catalog: None,
        }
    }

    pub fn with_catalog(mut self, catalog: &'a Catalog) -> Self {
        self.catalog = Some(catalog);
        self
    }

    fn dims(&self) -> (Dims, usize) {
        let m = self.fem.mesh();
        (m.dims, m.side)
    }

    /// FEM objective and channel-scaled adjoint gradient at a clipped `x̂₀`.
    ///
    /// Components that would push a bound-saturated channel further out are zeroed,
    /// since the clip absorbs them.
    pub fn loss_gradient_at_xhat(&self, x0_hat: &Grid) -> Result<LossGradient> {
        let guarded = physical_guard(x0_hat);
        let res = adjoint_gradient(self.fem, &guarded, &self.config.objective, GradientUnits::Normalized)?;
        let scales = self.config.scales();
        let nu_hi = 2.0 * NU_CAP / BOUNDS[1].1 - 1.0;
        let mut gradient = res.gradient;
        for (i, (g, &x)) in gradient.as_mut_slice().iter_mut().zip(x0_hat.as_slice()).enumerate() {
            let c = i % CHANNELS;
            let hi = if c == 1 { nu_hi } else { 1.0 };
            *g *= scales[c];
            // descent moves along -g
            if (x >= hi && *g < 0.0) || (x <= -1.0 && *g > 0.0) {
                *g = 0.0;
            }
        }
        Ok(LossGradient {
            objective: res.objective,
            bulk_modulus: res.bulk_modulus,
            gradient,
        })
    }

    fn project(&self, x: &Grid) -> Result<Grid> {
        let catalog = self
            .catalog
            .ok_or_else(|| Error::InvalidArgument("material projection needs a catalog".into()))?;
        let mut out = x.clone();
        for e in 0..x.n_elements() {
            let (m, _) = catalog.nearest_material(x.element(e));
            out.set_element(e, m.normalized());
        }
        Ok(out)
    }

    /// One chain: random stream `chain` of `seed`.
    pub fn sample(&self, seed: u64, chain: usize) -> Result<SampleRecord> {
        let mut rng = stream_rng(seed, chain as u64);
        self.sample_with_rng(&mut rng, seed, chain)
    }

    pub fn sample_with_rng(&self, rng: &mut ChaCha8Rng, seed: u64, chain: usize) -> Result<SampleRecord> {
        self.config.validate()?;
        let cfg = &self.config;
        let (dims, side) = self.dims();
        let n = dims.shape(side).iter().product::<usize>() * CHANNELS;
        let timesteps = self.schedule.trailing(cfg.steps)?;
        let mut latent = vec![0.0; n];
        fill_normal(rng, &mut latent);
        let mut x = Grid::from_vec(dims, side, latent)?;
        let mut z = vec![0.0; n];
        let mut losses = Vec::new();
        let guided = cfg.needs_gradient();
        let step_err = |step: usize| move |e: Error| Error::GuidanceStep { step, source: Box::new(e) };

        for (i, &t) in timesteps.iter().enumerate() {
            let t_prev = timesteps.get(i + 1).copied();
            let full = guided && cfg.mode == GuidanceMode::FullVjp;
            let lin = if full {
                Some(self.denoiser.linearize(&x, t).map_err(step_err(i))?)
            } else {
                None
            };
            let v = match &lin {
                Some(l) => l.output().clone(),
                None => self.denoiser.predict_v(&x, t).map_err(step_err(i))?,
            };
            let (_, x0) = convert(v.as_slice(), x.as_slice(), t, self.schedule);
            let x0_hat = Grid::from_vec(dims, side, x0)?.clipped(-1.0, 1.0);

            let mut guidance = None;
            if guided {
                let lg = self.loss_gradient_at_xhat(&x0_hat).map_err(step_err(i))?;
                losses.push(lg.objective);
                let (a, b) = self.schedule.coefficients(t);
                // x̂₀ = √ᾱ x − √(1−ᾱ) v(x)
                let g = match &lin {
                    Some(l) => {
                        let jv = l.vjp(&lg.gradient).map_err(step_err(i))?;
                        lg.gradient.map_with(&jv, |g, j| a * g - b * j)
                    }
                    None => lg.gradient.map(|g| a * g),
                };
                guidance = Some(g);
            } else if cfg.track_loss {
                let guarded = physical_guard(&x0_hat);
                let k = self.fem.bulk_modulus_of(&guarded).map_err(step_err(i))?;
                losses.push(crate::sensitivity::objective(&cfg.objective, k, &guarded));
            }

            let target = if cfg.project_materials {
                self.project(&x0_hat)?
            } else {
                x0_hat
            };
            if cfg.eta > 0.0 {
                fill_normal(rng, &mut z);
            }
            let mut next = ddim_step(x.as_slice(), target.as_slice(), t, t_prev, cfg.eta, &z, self.schedule);
            if let Some(g) = guidance {
                for (xn, gv) in next.iter_mut().zip(g.as_slice()) {
                    *xn -= cfg.rho_d * gv;
                }
            }
            if next.iter().any(|v| !v.is_finite()) {
                return Err(step_err(i)(Error::NonFinite(format!("latent after step {i} (t = {t})"))));
            }
            x = Grid::from_vec(dims, side, next)?;
        }

        let x0 = x.clipped(-1.0, 1.0);
        let guarded = physical_guard(&x0);
        let final_step = timesteps.len();
        let k_s = self.fem.bulk_modulus_of(&guarded).map_err(step_err(final_step))?;
        let objective = crate::sensitivity::objective(&cfg.objective, k_s, &guarded);
        Ok(SampleRecord {
            seed,
            chain,
            x0: Some(x0),
            losses,
            k_s,
            objective,
        })
    }

    /// `n` independent chains in parallel. Failed chains are reported, not fatal,
    /// unless every chain fails.
    pub fn run_batch(&self, n: usize, seed: u64) -> Result<Batch> {
        if n == 0 {
            return Err(Error::InvalidArgument("batch needs at least one sample".into()));
        }
        self.config.validate()?;
        let results: Vec<Result<SampleRecord>> = (0..n).into_par_iter().map(|c| self.sample(seed, c)).collect();
        let mut records = Vec::new();
        let mut failures = Vec::new();
        for (chain, r) in results.into_iter().enumerate() {
            match r {
                Ok(rec) => records.push(rec),
                Err(e) => {
                    log::warn!("chain {chain} failed: {e}");
                    failures.push(ChainFailure {
                        chain,
                        message: e.to_string(),
                    });
                }
            }
        }
        if records.is_empty() {
            return Err(Error::AllChainsFailed(n));
        }
        Ok(Batch { records, failures })
    }
}

const SAMPLES_JSON: &str = "samples.json";
const SAMPLES_BLOB: &str = "grids.f32";

#[derive(Debug, Serialize, Deserialize)]
struct SampleFile {
    dims: Dims,
    side: usize,
    channels: usize,
    records: Vec<SampleRecord>,
    failures: Vec<ChainFailure>,
}

/// Writes `samples.json` (records without grids) and `grids.f32` (the grids as
/// little-endian f32, channel-minor, in record order).
pub fn write_samples(dir: &Path, batch: &Batch) -> Result<()> {
    let first = batch
        .records
        .first()
        .ok_or_else(|| Error::InvalidArgument("no samples to write".into()))?
        .grid();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let meta = SampleFile {
        dims: first.dims(),
        side: first.side(),
        channels: CHANNELS,
        records: batch.records.clone(),
        failures: batch.failures.clone(),
    };
    let jpath = dir.join(SAMPLES_JSON);
    let json = serde_json::to_vec_pretty(&meta).map_err(|e| Error::json(&jpath, e))?;
    fs::write(&jpath, json).map_err(|e| Error::io(&jpath, e))?;
    let mut bytes = Vec::new();
    for r in &batch.records {
        for v in r.grid().as_slice() {
            bytes.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    let bpath = dir.join(SAMPLES_BLOB);
    fs::write(&bpath, bytes).map_err(|e| Error::io(&bpath, e))
}

pub fn load_samples(dir: &Path) -> Result<Batch> {
    let jpath = dir.join(SAMPLES_JSON);
    let text = fs::read(&jpath).map_err(|e| Error::io(&jpath, e))?;
    let mut meta: SampleFile = serde_json::from_slice(&text).map_err(|e| Error::json(&jpath, e))?;
    let bpath = dir.join(SAMPLES_BLOB);
    let bytes = fs::read(&bpath).map_err(|e| Error::io(&bpath, e))?;
    let per = meta.dims.shape(meta.side).iter().product::<usize>() * CHANNELS;
    if meta.channels != CHANNELS || bytes.len() != 4 * per * meta.records.len() {
        return Err(Error::MalformedFile {
            path: bpath,
            line: 0,
            message: format!("expected {} samples of {per} values", meta.records.len()),
        });
    }
    for (r, chunk) in meta.records.iter_mut().zip(bytes.chunks_exact(4 * per)) {
        let data = chunk
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
            .collect();
        r.x0 = Some(Grid::from_vec(meta.dims, meta.side, data)?);
    }
    Ok(Batch {
        records: meta.records,
        failures: meta.failures,
    })
}
