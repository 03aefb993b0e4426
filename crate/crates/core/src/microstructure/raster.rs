use crate::grid::{Dims, Grid};
use crate::materials::normalize;

use super::{DesignParams, ParticleLayout};

/// Per-element particle membership: an element belongs to a particle iff its
/// centre lies strictly inside one of the balls.
pub fn rasterize_mask(layout: &ParticleLayout, side: usize) -> Vec<bool> {
    let dims = layout.dims;
    let shape = dims.shape(side);
    let n = shape.iter().product::<usize>();
    let mut mask = vec![false; n];
    let h = 1.0 / side as f64;
    let r = layout.radius;
    let r2 = r * r;
    let active = dims.count();
    for c in &layout.centers {
        let mut lo = [0usize; 3];
        let mut hi = [1usize; 3];
        for k in 0..active {
            lo[k] = ((c[k] - r) / h - 0.5).floor().max(0.0) as usize;
            hi[k] = (((c[k] + r) / h - 0.5).ceil() as usize + 1).min(shape[k]);
        }
        for i0 in lo[0]..hi[0] {
            let d0 = (i0 as f64 + 0.5) * h - c[0];
            for i1 in lo[1]..hi[1] {
                let d1 = (i1 as f64 + 0.5) * h - c[1];
                for i2 in lo[2]..hi[2] {
                    let d2 = if active == 3 {
                        (i2 as f64 + 0.5) * h - c[2]
                    } else {
                        0.0
                    };
                    if d0 * d0 + d1 * d1 + d2 * d2 < r2 {
                        mask[(i0 * shape[1] + i1) * shape[2] + i2] = true;
                    }
                }
            }
        }
    }
    mask
}

/// Element grid for `theta` with particles at `layout`.
pub fn rasterize(theta: &DesignParams, layout: &ParticleLayout, side: usize) -> Grid {
    let dims: Dims = layout.dims;
    let matrix = normalize(theta.matrix()).value;
    let particle = normalize(theta.particle()).value;
    let mask = rasterize_mask(layout, side);
    let mut grid = Grid::filled(dims, side, matrix);
    for (e, &inside) in mask.iter().enumerate() {
        if inside {
            grid.set_element(e, particle);
        }
    }
    grid
}
