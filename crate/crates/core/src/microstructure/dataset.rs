//! Training datasets of rasterized microstructures.
//!
//! On disk a dataset is a directory holding `manifest.json` (shape, seed and
//! per-sample design parameters and layouts) and `grids.f32`, the concatenated
//! grids as little-endian f32, channel-minor and row-major.

use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Dims, Grid, CHANNELS};
use crate::materials::Catalog;
use crate::rng::stream_rng;

use super::{
    pack_particles, particle_count, rasterize, rasterize_mask, sample_design_params, DesignParams,
    PackingConfig, ParticleLayout,
};

pub const DATASET_FORMAT: &str = "matdiff-dataset-v1";
const MANIFEST: &str = "manifest.json";
const BLOB: &str = "grids.f32";
/// Fresh design draws tried when a sampled design cannot be packed.
const MAX_DESIGN_ATTEMPTS: usize = 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleEntry {
    pub index: usize,
    pub theta: DesignParams,
    pub particle_count_real: f64,
    pub particle_count: usize,
    /// Particle elements over all elements.
    pub realized_fraction: f64,
    pub centers: Vec<[f64; 3]>,
    /// Design draws consumed (more than one when packing was infeasible).
    pub attempts: usize,
}

impl SampleEntry {
    pub fn layout(&self, dims: Dims) -> ParticleLayout {
        ParticleLayout {
            dims,
            radius: self.theta.r_p,
            centers: self.centers.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format: String,
    pub dims: Dims,
    pub shape: [usize; 3],
    pub side: usize,
    pub channels: usize,
    pub count: usize,
    pub seed: u64,
    pub samples: Vec<SampleEntry>,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    data: Vec<f32>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.manifest.count
    }

    pub fn is_empty(&self) -> bool {
        self.manifest.count == 0
    }

    pub fn dims(&self) -> Dims {
        self.manifest.dims
    }

    pub fn side(&self) -> usize {
        self.manifest.side
    }

    fn grid_len(&self) -> usize {
        self.manifest.shape.iter().product::<usize>() * CHANNELS
    }

    pub fn grid_f32(&self, i: usize) -> &[f32] {
        let n = self.grid_len();
        &self.data[i * n..(i + 1) * n]
    }

    pub fn grid(&self, i: usize) -> Grid {
        let data = self.grid_f32(i).iter().map(|&v| v as f64).collect();
        Grid::from_vec(self.dims(), self.side(), data).expect("dataset grid length")
    }

    pub fn from_parts(manifest: DatasetManifest, data: Vec<f32>) -> Result<Self> {
        let ds = Dataset { manifest, data };
        if ds.data.len() != ds.grid_len() * ds.manifest.count || ds.manifest.samples.len() != ds.manifest.count {
            return Err(Error::InvalidArgument("dataset blob does not match manifest".into()));
        }
        Ok(ds)
    }

    /// Keep the first `n` samples.
    pub fn truncate(&mut self, n: usize) {
        if n < self.len() {
            let len = self.grid_len();
            self.data.truncate(n * len);
            self.manifest.samples.truncate(n);
            self.manifest.count = n;
        }
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mpath = dir.join(MANIFEST);
        let json = serde_json::to_vec_pretty(&self.manifest).map_err(|e| Error::json(&mpath, e))?;
        fs::write(&mpath, json).map_err(|e| Error::io(&mpath, e))?;
        let bpath = dir.join(BLOB);
        let mut bytes = Vec::with_capacity(self.data.len() * 4);
        for v in &self.data {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        fs::write(&bpath, bytes).map_err(|e| Error::io(&bpath, e))
    }
}

fn generate_sample(catalog: &Catalog, dims: Dims, side: usize, seed: u64, index: usize) -> Result<(SampleEntry, Grid)> {
    let mut rng = stream_rng(seed, index as u64);
    let packing = PackingConfig::default();
    let mut last_err = None;
    for attempt in 1..=MAX_DESIGN_ATTEMPTS {
        let theta = sample_design_params(catalog, dims, &mut rng);
        let (real, count) = particle_count(theta.f_p, theta.r_p, dims)?;
        match pack_particles(count, theta.r_p, dims, &mut rng, &packing) {
            Ok(layout) => {
                let mask = rasterize_mask(&layout, side);
                let realized = mask.iter().filter(|&&b| b).count() as f64 / mask.len() as f64;
                let grid = rasterize(&theta, &layout, side);
                let entry = SampleEntry {
                    index,
                    theta,
                    particle_count_real: real,
                    particle_count: count,
                    realized_fraction: realized,
                    centers: layout.centers,
                    attempts: attempt,
                };
                return Ok((entry, grid));
            }
            Err(e @ Error::PackingInfeasible { .. }) => {
                log::warn!("sample {index}: {e}; redrawing design");
                last_err = Some(e);
            }
            Err(e) => return Err(e),
        }
    }
    Err(last_err.expect("at least one attempt"))
}

/// Build `n_samples` independent microstructures; sample `i` uses random stream `i`
/// of `seed`, so results do not depend on the worker count.
pub fn generate_dataset(catalog: &Catalog, n_samples: usize, dims: Dims, side: usize, seed: u64) -> Result<Dataset> {
    if side == 0 {
        return Err(Error::InvalidArgument("grid side must be positive".into()));
    }
    let results: Vec<Result<(SampleEntry, Grid)>> = (0..n_samples)
        .into_par_iter()
        .map(|i| generate_sample(catalog, dims, side, seed, i))
        .collect();
    let mut samples = Vec::with_capacity(n_samples);
    let mut data = Vec::with_capacity(n_samples * dims.shape(side).iter().product::<usize>() * CHANNELS);
    for r in results {
        let (entry, grid) = r?;
        samples.push(entry);
        data.extend(grid.as_slice().iter().map(|&v| v as f32));
    }
    let manifest = DatasetManifest {
        format: DATASET_FORMAT.into(),
        dims,
        shape: dims.shape(side),
        side,
        channels: CHANNELS,
        count: n_samples,
        seed,
        samples,
    };
    Dataset::from_parts(manifest, data)
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let mpath = dir.join(MANIFEST);
    let text = fs::read(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let manifest: DatasetManifest = serde_json::from_slice(&text).map_err(|e| Error::json(&mpath, e))?;
    if manifest.format != DATASET_FORMAT {
        return Err(Error::MalformedFile {
            path: mpath,
            line: 0,
            message: format!("unknown dataset format {}", manifest.format),
        });
    }
    let bpath = dir.join(BLOB);
    let bytes = fs::read(&bpath).map_err(|e| Error::io(&bpath, e))?;
    if bytes.len() % 4 != 0 {
        return Err(Error::MalformedFile {
            path: bpath,
            line: 0,
            message: "blob length is not a multiple of 4".into(),
        });
    }
    let data = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    Dataset::from_parts(manifest, data)
}

/// Re-checks every sample: layout invariants, grid equals its rasterization,
/// at most two distinct material vectors.
pub fn validate_dataset(ds: &Dataset) -> Result<()> {
    for s in &ds.manifest.samples {
        let layout = s.layout(ds.dims());
        layout.check().map_err(|m| Error::InvalidArgument(format!("sample {}: {m}", s.index)))?;
        if layout.centers.len() != s.particle_count {
            return Err(Error::InvalidArgument(format!("sample {}: particle count mismatch", s.index)));
        }
        let expect = rasterize(&s.theta, &layout, ds.side());
        let got = ds.grid(s.index);
        let exact = expect.map(|v| v as f32 as f64);
        if exact != got {
            return Err(Error::InvalidArgument(format!("sample {}: grid differs from rasterization", s.index)));
        }
        if got.distinct_elements() > 2 {
            return Err(Error::InvalidArgument(format!("sample {}: more than two materials", s.index)));
        }
    }
    Ok(())
}
