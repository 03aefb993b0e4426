//! Non-overlapping placement of equal circles/spheres inside the unit domain.
//!
//! Random initial centres are relaxed by accumulating, for every penetrating pair,
//! 1.5 times the separating displacement (plus a small jitter) and applying all
//! displacements at once. A restart from fresh positions happens after
//! `max_updates` unsuccessful updates.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Dims;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParticleLayout {
    pub dims: Dims,
    pub radius: f64,
    /// Centres in the unit domain; the third coordinate is unused (0) for 2D.
    pub centers: Vec<[f64; 3]>,
}

impl ParticleLayout {
    pub fn empty(dims: Dims, radius: f64) -> Self {
        ParticleLayout {
            dims,
            radius,
            centers: Vec::new(),
        }
    }

    /// Checks pairwise separation `>= 2r` and boundary clearance `>= r`.
    pub fn check(&self) -> std::result::Result<(), String> {
        let d = self.dims.count();
        let r = self.radius;
        for (i, c) in self.centers.iter().enumerate() {
            for (k, &x) in c.iter().enumerate().take(d) {
                if x < r || x > 1.0 - r {
                    return Err(format!("particle {i} crosses the boundary on axis {k} (x={x})"));
                }
            }
        }
        for i in 0..self.centers.len() {
            for j in i + 1..self.centers.len() {
                let dist = distance(&self.centers[i], &self.centers[j], d);
                if dist < 2.0 * r {
                    return Err(format!("particles {i} and {j} overlap (distance {dist}, 2r {})", 2.0 * r));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PackingConfig {
    pub max_updates: usize,
    pub max_restarts: usize,
    /// Jitter half-width as a fraction of the radius.
    pub jitter: f64,
    pub push_factor: f64,
}

impl Default for PackingConfig {
    fn default() -> Self {
        PackingConfig {
            max_updates: 10_000,
            max_restarts: 50,
            jitter: 0.01,
            push_factor: 1.5,
        }
    }
}

fn distance(a: &[f64; 3], b: &[f64; 3], d: usize) -> f64 {
    (0..d).map(|k| (a[k] - b[k]).powi(2)).sum::<f64>().sqrt()
}

pub fn pack_particles<R: Rng + ?Sized>(
    count: usize,
    radius: f64,
    dims: Dims,
    rng: &mut R,
    config: &PackingConfig,
) -> Result<ParticleLayout> {
    if !(radius > 0.0 && radius < 0.5) {
        return Err(Error::InvalidArgument(format!("radius must lie in (0, 0.5), got {radius}")));
    }
    if count == 0 {
        return Ok(ParticleLayout::empty(dims, radius));
    }
    let d = dims.count();
    let (lo, hi) = (radius, 1.0 - radius);
    let min_sep = 2.0 * radius;

    for _ in 0..config.max_restarts.max(1) {
        let mut centers: Vec<[f64; 3]> = (0..count)
            .map(|_| {
                let mut c = [0.0; 3];
                for x in c.iter_mut().take(d) {
                    *x = rng.random_range(lo..=hi);
                }
                c
            })
            .collect();
        let mut deltas = vec![[0.0f64; 3]; count];
        let mut touched = vec![false; count];

        for _ in 0..config.max_updates {
            deltas.iter_mut().for_each(|v| *v = [0.0; 3]);
            touched.iter_mut().for_each(|t| *t = false);
            let mut any = false;
            for i in 0..count {
                for j in i + 1..count {
                    let mut diff = [0.0; 3];
                    for k in 0..d {
                        diff[k] = centers[i][k] - centers[j][k];
                    }
                    let dist = diff[..d].iter().map(|v| v * v).sum::<f64>().sqrt();
                    if dist >= min_sep {
                        continue;
                    }
                    any = true;
                    if dist < 1e-12 {
                        // coincident centres: pick a random direction
                        for v in diff.iter_mut().take(d) {
                            *v = rng.random_range(-1.0..1.0);
                        }
                        let n = diff[..d].iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
                        diff.iter_mut().for_each(|v| *v /= n);
                    } else {
                        diff.iter_mut().for_each(|v| *v /= dist);
                    }
                    let push = config.push_factor * 0.5 * (min_sep - dist);
                    for k in 0..d {
                        deltas[i][k] += push * diff[k];
                        deltas[j][k] -= push * diff[k];
                    }
                    touched[i] = true;
                    touched[j] = true;
                }
            }
            if !any {
                let layout = ParticleLayout {
                    dims,
                    radius,
                    centers,
                };
                debug_assert!(layout.check().is_ok());
                return Ok(layout);
            }
            let amp = config.jitter * radius;
            for i in 0..count {
                for k in 0..d {
                    let jit = if touched[i] && amp > 0.0 {
                        rng.random_range(-amp..=amp)
                    } else {
                        0.0
                    };
                    centers[i][k] = (centers[i][k] + deltas[i][k] + jit).clamp(lo, hi);
                }
            }
        }
    }
    Err(Error::PackingInfeasible {
        count,
        radius,
        restarts: config.max_restarts,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn empty_layout() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let l = pack_particles(0, 0.1, Dims::Two, &mut rng, &PackingConfig::default()).unwrap();
        assert!(l.centers.is_empty());
    }

    #[test]
    fn single_particle_respects_boundary() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let l = pack_particles(1, 0.1, Dims::Three, &mut rng, &PackingConfig::default()).unwrap();
            assert!(l.centers[0].iter().all(|&x| (0.1..=0.9).contains(&x)));
        }
    }

    #[test]
    fn three_small_circles_separate() {
        for seed in 0..100 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let l = pack_particles(3, 0.075, Dims::Two, &mut rng, &PackingConfig::default()).unwrap();
            for i in 0..3 {
                for j in i + 1..3 {
                    assert!(distance(&l.centers[i], &l.centers[j], 2) >= 0.15);
                }
            }
        }
    }

    #[test]
    fn dense_packings_converge() {
        // upper ends of the sampling ranges
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cfg = PackingConfig::default();
        let l = pack_particles(28, 0.075, Dims::Two, &mut rng, &cfg).unwrap();
        l.check().unwrap();
        let l = pack_particles(4, 0.2, Dims::Two, &mut rng, &cfg).unwrap();
        l.check().unwrap();
        let l = pack_particles(61, 0.12, Dims::Three, &mut rng, &cfg).unwrap();
        l.check().unwrap();
    }

    #[test]
    fn infeasible_reports_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cfg = PackingConfig {
            max_updates: 200,
            max_restarts: 2,
            ..PackingConfig::default()
        };
        let err = pack_particles(10, 0.3, Dims::Two, &mut rng, &cfg).unwrap_err();
        assert!(matches!(err, Error::PackingInfeasible { .. }));
    }
}
