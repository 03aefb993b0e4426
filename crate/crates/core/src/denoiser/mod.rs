//! Convolutional U-Net that predicts the velocity `v` from a noisy grid and its
//! timestep, with reverse-mode products for guidance, training and weight files.

mod attention;
mod io;
mod model;
mod ops;
mod params;
mod train;

use serde::{Deserialize, Serialize};

pub use io::{config_fingerprint, load_weights, save_weights, weights_checksum};
pub use model::{ForwardCache, Model};
pub use ops::{Spatial, Tensor};
pub use params::TensorInfo;
pub use train::{lr_at, train, validation_mse, AdamW, TrainConfig, TrainReport};

use crate::diffusion::Schedule;
use crate::error::{Error, Result};
use crate::grid::{Dims, Grid, CHANNELS};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    pub dims: Dims,
    pub in_channels: usize,
    pub stem_channels: usize,
    pub block_channels: Vec<usize>,
    pub layers_per_block: usize,
    pub mid_channels: usize,
    pub groups: usize,
    pub norm_eps: f64,
    /// Number of random Fourier frequencies (the embedding has twice as many features).
    pub fourier_features: usize,
    /// Standard deviation of the Fourier frequencies, applied to the raw timestep.
    pub fourier_scale: f64,
    pub time_embed_dim: usize,
    pub attention: bool,
    pub attention_heads: usize,
}

impl DenoiserConfig {
    pub fn for_dims(dims: Dims) -> Self {
        DenoiserConfig {
            dims,
            in_channels: CHANNELS,
            stem_channels: 8,
            block_channels: vec![32, 64],
            layers_per_block: 2,
            mid_channels: 128,
            groups: 8,
            norm_eps: 1e-5,
            fourier_features: 8,
            fourier_scale: 2e-3,
            time_embed_dim: 32,
            attention: false,
            attention_heads: 16,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(format!("denoiser config: {m}")));
        if self.block_channels.is_empty() || self.layers_per_block == 0 {
            return bad("need at least one level with one residual unit".into());
        }
        if self.groups == 0 {
            return bad("groups must be positive".into());
        }
        let mut widths = vec![self.stem_channels, self.mid_channels];
        widths.extend(&self.block_channels);
        // up-path inputs are concatenations of these widths; all multiples suffice
        for &c in &widths {
            if c == 0 || c % self.groups != 0 {
                return bad(format!("channel count {c} is not divisible by {} groups", self.groups));
            }
        }
        if self.attention && (self.attention_heads == 0 || self.mid_channels % self.attention_heads != 0) {
            return bad(format!(
                "{} channels cannot be split into {} heads",
                self.mid_channels, self.attention_heads
            ));
        }
        if self.in_channels == 0 || self.fourier_features == 0 || self.time_embed_dim == 0 {
            return bad("zero-sized input or embedding".into());
        }
        Ok(())
    }

    /// Grid sides must be divisible by this.
    pub fn side_multiple(&self) -> usize {
        1 << self.block_channels.len()
    }
}

/// Network input layout for grids of `side`.
pub fn spatial_for(dims: Dims, side: usize) -> Spatial {
    match dims {
        Dims::Two => Spatial { d: 1, h: side, w: side },
        Dims::Three => Spatial {
            d: side,
            h: side,
            w: side,
        },
    }
}

/// Packs grids (channel-minor f64) into a `[C][B][S]` tensor.
pub fn grids_to_tensor(grids: &[&Grid]) -> Tensor {
    let g0 = grids[0];
    let sp = spatial_for(g0.dims(), g0.side());
    let mut t = Tensor::zeros(CHANNELS, grids.len(), sp);
    for (b, g) in grids.iter().enumerate() {
        for c in 0..CHANNELS {
            let dst = t.plane_mut(c, b);
            for (s, d) in dst.iter_mut().enumerate() {
                *d = g.as_slice()[s * CHANNELS + c] as f32;
            }
        }
    }
    t
}

pub fn tensor_to_grid(t: &Tensor, b: usize, dims: Dims, side: usize) -> Grid {
    let s = t.sp.len();
    let mut data = vec![0.0; s * CHANNELS];
    for c in 0..CHANNELS {
        for (i, &v) in t.plane(c, b).iter().enumerate() {
            data[i * CHANNELS + c] = v as f64;
        }
    }
    Grid::from_vec(dims, side, data).expect("tensor matches grid layout")
}

/// A forward evaluation that can be pulled back.
pub trait Linearization {
    fn output(&self) -> &Grid;
    /// `Jᵀ c` for the Jacobian of the output with respect to the input.
    fn vjp(&self, cotangent: &Grid) -> Result<Grid>;
}

/// Anything that predicts `v` for a noisy grid.
pub trait Denoiser: Send + Sync {
    fn predict_v(&self, x: &Grid, t: usize) -> Result<Grid>;

    fn linearize<'a>(&'a self, x: &Grid, t: usize) -> Result<Box<dyn Linearization + 'a>>;

    fn vjp(&self, x: &Grid, t: usize, cotangent: &Grid) -> Result<Grid> {
        self.linearize(x, t)?.vjp(cotangent)
    }
}

fn check_input(model: &Model, x: &Grid) -> Result<()> {
    if x.dims() != model.config.dims {
        return Err(Error::InvalidArgument(format!(
            "grid is {:?} but the model is {:?}",
            x.dims(),
            model.config.dims
        )));
    }
    if x.side() % model.config.side_multiple() != 0 {
        return Err(Error::InvalidArgument(format!(
            "grid side {} is not a multiple of {}",
            x.side(),
            model.config.side_multiple()
        )));
    }
    if !x.is_finite() {
        return Err(Error::NonFinite("denoiser input".into()));
    }
    Ok(())
}

struct ModelLinearization<'a> {
    model: &'a Model,
    cache: ForwardCache,
    out: Grid,
}

impl Linearization for ModelLinearization<'_> {
    fn output(&self) -> &Grid {
        &self.out
    }

    fn vjp(&self, cotangent: &Grid) -> Result<Grid> {
        if !cotangent.same_layout(&self.out) {
            return Err(Error::InvalidArgument("cotangent shape differs from output".into()));
        }
        let dy = grids_to_tensor(&[cotangent]);
        let dx = self.model.backward(&self.cache, &dy, None, true).expect("input gradient");
        Ok(tensor_to_grid(&dx, 0, self.out.dims(), self.out.side()))
    }
}

impl Denoiser for Model {
    fn predict_v(&self, x: &Grid, t: usize) -> Result<Grid> {
        check_input(self, x)?;
        let (y, _) = self.forward(&grids_to_tensor(&[x]), &[t as f32], false);
        let out = tensor_to_grid(&y, 0, x.dims(), x.side());
        if !out.is_finite() {
            return Err(Error::NonFinite("denoiser output".into()));
        }
        Ok(out)
    }

    fn linearize<'a>(&'a self, x: &Grid, t: usize) -> Result<Box<dyn Linearization + 'a>> {
        check_input(self, x)?;
        let (y, cache) = self.forward(&grids_to_tensor(&[x]), &[t as f32], true);
        let out = tensor_to_grid(&y, 0, x.dims(), x.side());
        if !out.is_finite() {
            return Err(Error::NonFinite("denoiser output".into()));
        }
        Ok(Box::new(ModelLinearization {
            model: self,
            cache: cache.expect("cache kept"),
            out,
        }))
    }
}

/// Returns the exact `v` that makes `x̂₀` equal a fixed clean sample:
/// `v = (√ᾱ x − x₀)/√(1 − ᾱ)`.
#[derive(Debug, Clone)]
pub struct OracleDenoiser {
    pub x0: Grid,
    pub schedule: Schedule,
}

impl OracleDenoiser {
    fn coefficients(&self, t: usize) -> (f64, f64) {
        let (a, b) = self.schedule.coefficients(t);
        // ᾱ = 1 has no v-representation; keep the map finite
        (a, b.max(f64::MIN_POSITIVE))
    }
}

struct AffineLinearization {
    out: Grid,
    scale: f64,
}

impl Linearization for AffineLinearization {
    fn output(&self) -> &Grid {
        &self.out
    }

    fn vjp(&self, cotangent: &Grid) -> Result<Grid> {
        Ok(cotangent.map(|c| c * self.scale))
    }
}

impl Denoiser for OracleDenoiser {
    fn predict_v(&self, x: &Grid, t: usize) -> Result<Grid> {
        if !x.same_layout(&self.x0) {
            return Err(Error::InvalidArgument("grid layout differs from the oracle sample".into()));
        }
        let (a, b) = self.coefficients(t);
        Ok(x.map_with(&self.x0, |x, x0| (a * x - x0) / b))
    }

    fn linearize<'a>(&'a self, x: &Grid, t: usize) -> Result<Box<dyn Linearization + 'a>> {
        let out = self.predict_v(x, t)?;
        let (a, b) = self.coefficients(t);
        Ok(Box::new(AffineLinearization { out, scale: a / b }))
    }
}
