//! Element grids of normalized material vectors.
//!
//! A grid stores three channels (normalized E, nu, rho) per element, channel-minor
//! and row-major over the spatial axes with the last axis fastest. Planar grids
//! have shape `[n0, n1, 1]`; the singleton third axis is the one-element-thick
//! direction used by the FEM slab.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CHANNELS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Dims {
    #[serde(rename = "2d")]
    Two,
    #[serde(rename = "3d")]
    Three,
}

impl Dims {
    pub fn from_count(d: usize) -> Result<Self> {
        match d {
            2 => Ok(Dims::Two),
            3 => Ok(Dims::Three),
            _ => Err(Error::InvalidArgument(format!("dims must be 2 or 3, got {d}"))),
        }
    }

    pub fn count(self) -> usize {
        match self {
            Dims::Two => 2,
            Dims::Three => 3,
        }
    }

    /// Cubic/square element shape with `side` elements per active axis.
    pub fn shape(self, side: usize) -> [usize; 3] {
        match self {
            Dims::Two => [side, side, 1],
            Dims::Three => [side, side, side],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    dims: Dims,
    shape: [usize; 3],
    data: Vec<f64>,
}

impl Grid {
    pub fn filled(dims: Dims, side: usize, value: [f64; CHANNELS]) -> Self {
        let shape = dims.shape(side);
        let n = shape.iter().product::<usize>();
        let mut data = Vec::with_capacity(n * CHANNELS);
        for _ in 0..n {
            data.extend_from_slice(&value);
        }
        Grid { dims, shape, data }
    }

    pub fn zeros(dims: Dims, side: usize) -> Self {
        Self::filled(dims, side, [0.0; CHANNELS])
    }

    pub fn from_vec(dims: Dims, side: usize, data: Vec<f64>) -> Result<Self> {
        let shape = dims.shape(side);
        let n = shape.iter().product::<usize>();
        if data.len() != n * CHANNELS {
            return Err(Error::InvalidArgument(format!(
                "grid data length {} does not match shape {:?} x {CHANNELS}",
                data.len(),
                shape
            )));
        }
        Ok(Grid { dims, shape, data })
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    /// Elements along each active axis.
    pub fn side(&self) -> usize {
        self.shape[0]
    }

    pub fn n_elements(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn element(&self, e: usize) -> [f64; CHANNELS] {
        let s = &self.data[e * CHANNELS..(e + 1) * CHANNELS];
        [s[0], s[1], s[2]]
    }

    pub fn set_element(&mut self, e: usize, value: [f64; CHANNELS]) {
        self.data[e * CHANNELS..(e + 1) * CHANNELS].copy_from_slice(&value);
    }

    pub fn elements(&self) -> impl Iterator<Item = [f64; CHANNELS]> + '_ {
        self.data.chunks_exact(CHANNELS).map(|s| [s[0], s[1], s[2]])
    }

    pub fn element_index(&self, i: [usize; 3]) -> usize {
        (i[0] * self.shape[1] + i[1]) * self.shape[2] + i[2]
    }

    pub fn element_coords(&self, e: usize) -> [usize; 3] {
        let i2 = e % self.shape[2];
        let r = e / self.shape[2];
        [r / self.shape[1], r % self.shape[1], i2]
    }

    /// Center of element `e` in the unit domain (in-plane axes only are meaningful for 2D).
    pub fn element_center(&self, e: usize) -> [f64; 3] {
        let c = self.element_coords(e);
        let h = 1.0 / self.side() as f64;
        [
            (c[0] as f64 + 0.5) * h,
            (c[1] as f64 + 0.5) * h,
            (c[2] as f64 + 0.5) * h,
        ]
    }

    pub fn same_layout(&self, other: &Grid) -> bool {
        self.dims == other.dims && self.shape == other.shape
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn clip(&mut self, lo: f64, hi: f64) {
        for v in &mut self.data {
            *v = v.clamp(lo, hi);
        }
    }

    pub fn clipped(&self, lo: f64, hi: f64) -> Grid {
        let mut g = self.clone();
        g.clip(lo, hi);
        g
    }

    pub fn max_abs_diff(&self, other: &Grid) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn map_with(&self, other: &Grid, f: impl Fn(f64, f64) -> f64) -> Grid {
        debug_assert!(self.same_layout(other));
        Grid {
            dims: self.dims,
            shape: self.shape,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Grid {
        Grid {
            dims: self.dims,
            shape: self.shape,
            data: self.data.iter().map(|&a| f(a)).collect(),
        }
    }

    pub fn dot(&self, other: &Grid) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    /// Number of distinct element vectors (exact comparison).
    pub fn distinct_elements(&self) -> usize {
        let mut seen: Vec<[u64; CHANNELS]> = self
            .elements()
            .map(|v| [v[0].to_bits(), v[1].to_bits(), v[2].to_bits()])
            .collect();
        seen.sort_unstable();
        seen.dedup();
        seen.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn coords_roundtrip() {
        for dims in [Dims::Two, Dims::Three] {
            let g = Grid::zeros(dims, 5);
            for e in 0..g.n_elements() {
                assert_eq!(g.element_index(g.element_coords(e)), e);
            }
        }
    }

    #[test]
    fn planar_shape_has_unit_depth() {
        let g = Grid::zeros(Dims::Two, 4);
        assert_eq!(g.shape(), [4, 4, 1]);
        assert_eq!(g.as_slice().len(), 48);
    }

    #[test]
    fn from_vec_checks_length() {
        assert!(Grid::from_vec(Dims::Two, 2, vec![0.0; 11]).is_err());
    }
}
