//! Design parameters, particle packing, rasterization and training-set generation.

mod dataset;
mod packing;
mod raster;

pub use dataset::{
    generate_dataset, load_dataset, validate_dataset, Dataset, DatasetManifest, SampleEntry,
    DATASET_FORMAT,
};
pub use packing::{pack_particles, ParticleLayout, PackingConfig};
pub use raster::{rasterize, rasterize_mask};

use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Dims;
use crate::materials::{Catalog, MaterialRecord};

/// The original design space: matrix/particle materials plus particle radius and
/// volume fraction. Radius is a fraction of the unit domain side.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DesignParams {
    pub e_m: f64,
    pub e_p: f64,
    pub nu_m: f64,
    pub nu_p: f64,
    pub rho_m: f64,
    pub rho_p: f64,
    pub r_p: f64,
    pub f_p: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub matrix_id: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub particle_id: Option<u32>,
}

impl DesignParams {
    pub fn from_materials(matrix: &MaterialRecord, particle: &MaterialRecord, r_p: f64, f_p: f64) -> Self {
        DesignParams {
            e_m: matrix.e,
            e_p: particle.e,
            nu_m: matrix.nu,
            nu_p: particle.nu,
            rho_m: matrix.rho,
            rho_p: particle.rho,
            r_p,
            f_p,
            matrix_id: Some(matrix.id),
            particle_id: Some(particle.id),
        }
    }

    pub fn matrix(&self) -> [f64; 3] {
        [self.e_m, self.nu_m, self.rho_m]
    }

    pub fn particle(&self) -> [f64; 3] {
        [self.e_p, self.nu_p, self.rho_p]
    }

    /// Mixture density `(1 - f_p) rho_m + f_p rho_p`.
    pub fn density(&self) -> f64 {
        (1.0 - self.f_p) * self.rho_m + self.f_p * self.rho_p
    }
}

/// Sampling ranges for volume fraction and particle diameter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ParamRanges {
    pub volume_fraction: (f64, f64),
    pub diameter: (f64, f64),
}

impl ParamRanges {
    pub fn for_dims(dims: Dims) -> Self {
        match dims {
            Dims::Two => ParamRanges {
                volume_fraction: (0.05, 0.5),
                diameter: (0.15, 0.4),
            },
            Dims::Three => ParamRanges {
                volume_fraction: (0.05, 0.45),
                diameter: (0.15, 0.35),
            },
        }
    }
}

pub fn sample_design_params<R: Rng + ?Sized>(catalog: &Catalog, dims: Dims, rng: &mut R) -> DesignParams {
    let ranges = ParamRanges::for_dims(dims);
    let matrix = catalog.sample_material(rng);
    let particle = catalog.sample_material(rng);
    let f_p = rng.random_range(ranges.volume_fraction.0..=ranges.volume_fraction.1);
    let diameter = rng.random_range(ranges.diameter.0..=ranges.diameter.1);
    DesignParams::from_materials(&matrix, &particle, 0.5 * diameter, f_p)
}

/// Volume (3D) or area (2D) of one particle in the unit domain.
pub fn ball_measure(r_p: f64, dims: Dims) -> f64 {
    match dims {
        Dims::Two => PI * r_p * r_p,
        Dims::Three => 4.0 / 3.0 * PI * r_p.powi(3),
    }
}

/// Real-valued particle count `f_p / |ball|` and its round-half-to-even integer.
pub fn particle_count(f_p: f64, r_p: f64, dims: Dims) -> Result<(f64, usize)> {
    if r_p <= 0.0 || !r_p.is_finite() {
        return Err(Error::InvalidArgument(format!("particle radius must be positive, got {r_p}")));
    }
    if f_p < 0.0 || !f_p.is_finite() {
        return Err(Error::InvalidArgument(format!("volume fraction must be nonnegative, got {f_p}")));
    }
    let real = f_p / ball_measure(r_p, dims);
    Ok((real, real.round_ties_even() as usize))
}

/// Unbiased integer rounding: `floor(c) + Bernoulli(frac(c))`.
pub fn stochastic_round<R: Rng + ?Sized>(count: f64, rng: &mut R) -> Result<usize> {
    if count < 0.0 || !count.is_finite() {
        return Err(Error::InvalidArgument(format!("count must be finite and nonnegative, got {count}")));
    }
    let base = count.floor();
    let frac = count - base;
    let up = frac > 0.0 && rng.random::<f64>() < frac;
    Ok(base as usize + usize::from(up))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::materials::generate_synthetic_catalog;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn sampled_ranges_hold() {
        let cat = generate_synthetic_catalog(1, 200).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..500 {
            let t = sample_design_params(&cat, Dims::Two, &mut rng);
            assert!((0.15..=0.4).contains(&(2.0 * t.r_p)));
            assert!((0.05..=0.5).contains(&t.f_p));
            let t = sample_design_params(&cat, Dims::Three, &mut rng);
            assert!((0.15..=0.35).contains(&(2.0 * t.r_p)));
            assert!((0.05..=0.45).contains(&t.f_p));
        }
    }

    #[test]
    fn sampling_deterministic() {
        let cat = generate_synthetic_catalog(1, 200).unwrap();
        let a = sample_design_params(&cat, Dims::Two, &mut ChaCha8Rng::seed_from_u64(9));
        let b = sample_design_params(&cat, Dims::Two, &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(a, b);
    }

    #[test]
    fn particle_count_examples() {
        let (real, n) = particle_count(0.05, 0.075, Dims::Two).unwrap();
        assert!((real - 2.8294).abs() < 1e-3);
        assert_eq!(n, 3);
        let (real, n) = particle_count(0.10, 0.10, Dims::Three).unwrap();
        assert!((real - 23.873).abs() < 1e-3);
        assert_eq!(n, 24);
        assert_eq!(particle_count(0.0, 0.1, Dims::Two).unwrap(), (0.0, 0));
        assert!(particle_count(0.1, 0.0, Dims::Two).is_err());
    }

    #[test]
    fn round_half_even() {
        // 2.5 particles exactly: pick r with pi r^2 = 0.1 / 2.5
        let r = (0.04 / PI).sqrt();
        let (real, n) = particle_count(0.1, r, Dims::Two).unwrap();
        assert!((real - 2.5).abs() < 1e-12);
        assert!(n == 2 || n == 3);
    }

    #[test]
    fn stochastic_round_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            assert_eq!(stochastic_round(5.0, &mut rng).unwrap(), 5);
            let v = stochastic_round(3.2, &mut rng).unwrap();
            assert!(v == 3 || v == 4);
        }
        assert!(stochastic_round(-0.5, &mut rng).is_err());
    }

    #[test]
    fn stochastic_round_unbiased() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let draws = 10_000;
        let mut fours = 0usize;
        let mut sum = 0usize;
        for _ in 0..draws {
            let v = stochastic_round(3.2, &mut rng).unwrap();
            sum += v;
            fours += usize::from(v == 4);
        }
        let mean = sum as f64 / draws as f64;
        assert!((mean - 3.2).abs() <= 0.02, "mean {mean}");
        let p = fours as f64 / draws as f64;
        assert!((p - 0.2).abs() <= 0.02, "P(4) = {p}");
    }
}
