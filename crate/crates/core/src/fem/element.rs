//! Trilinear hexahedron on a cube of side `h`.
//!
//! The isotropic element matrix is linear in the Lamé parameters, so it is stored
//! as the pair `(K_λ, K_μ)` with `Ke = λ K_λ + μ K_μ`.

use crate::error::{Error, Result};

pub const NODES: usize = 8;
pub const EDOF: usize = 24;

/// Local node `a` sits at offsets `(a & 1, (a >> 1) & 1, (a >> 2) & 1)` along axes 0, 1, 2.
#[inline]
pub fn node_offset(a: usize) -> [usize; 3] {
    [a & 1, (a >> 1) & 1, (a >> 2) & 1]
}

/// Lamé parameters `(λ, μ)` of an isotropic material.
pub fn lame(e: f64, nu: f64) -> Result<(f64, f64)> {
    check_material(e, nu)?;
    let lam = e * nu / ((1.0 + nu) * (1.0 - 2.0 * nu));
    let mu = e / (2.0 * (1.0 + nu));
    Ok((lam, mu))
}

/// Derivatives `(∂λ/∂E, ∂μ/∂E, ∂λ/∂ν, ∂μ/∂ν)`.
pub fn lame_derivatives(e: f64, nu: f64) -> [f64; 4] {
    let g = (1.0 + nu) * (1.0 - 2.0 * nu);
    [
        nu / g,
        1.0 / (2.0 * (1.0 + nu)),
        e * (1.0 + 2.0 * nu * nu) / (g * g),
        -e / (2.0 * (1.0 + nu) * (1.0 + nu)),
    ]
}

pub(crate) fn check_material(e: f64, nu: f64) -> Result<()> {
    if !(e.is_finite() && nu.is_finite()) {
        return Err(Error::InvalidArgument(format!("non-finite material (E={e}, nu={nu})")));
    }
    if e <= 0.0 {
        return Err(Error::InvalidArgument(format!("Young's modulus must be positive, got {e}")));
    }
    if nu >= 0.5 || nu <= -1.0 {
        return Err(Error::InvalidArgument(format!(
            "Poisson's ratio must lie in (-1, 0.5), got {nu}"
        )));
    }
    Ok(())
}

/// Precomputed element quantities for a cube of side `h`.
#[derive(Debug, Clone)]
pub struct ElementBasis {
    pub h: f64,
    /// Row-major 24×24.
    pub k_lambda: Vec<f64>,
    pub k_mu: Vec<f64>,
    /// Strain averaged over the Gauss points, Voigt rows `xx, yy, zz, yz, xz, xy`
    /// (engineering shear), 6×24 row-major.
    pub strain_avg: Vec<f64>,
}

fn shape_gradients(xi: [f64; 3], h: f64) -> [[f64; 3]; NODES] {
    let mut g = [[0.0; 3]; NODES];
    for (a, ga) in g.iter_mut().enumerate() {
        let s = node_offset(a).map(|o| if o == 1 { 1.0 } else { -1.0 });
        let f = [1.0 + s[0] * xi[0], 1.0 + s[1] * xi[1], 1.0 + s[2] * xi[2]];
        // dN/dx = (2/h) dN/dξ, dN/dξ_k = s_k/8 Π_{j≠k} f_j
        let scale = 2.0 / h / 8.0;
        ga[0] = scale * s[0] * f[1] * f[2];
        ga[1] = scale * s[1] * f[0] * f[2];
        ga[2] = scale * s[2] * f[0] * f[1];
    }
    g
}

/// Strain-displacement matrix (6×24) at a reference point.
fn b_matrix(xi: [f64; 3], h: f64) -> [[f64; EDOF]; 6] {
    let g = shape_gradients(xi, h);
    let mut b = [[0.0; EDOF]; 6];
    for a in 0..NODES {
        let [dx, dy, dz] = g[a];
        let c = 3 * a;
        b[0][c] = dx;
        b[1][c + 1] = dy;
        b[2][c + 2] = dz;
        b[3][c + 1] = dz;
        b[3][c + 2] = dy;
        b[4][c] = dz;
        b[4][c + 2] = dx;
        b[5][c] = dy;
        b[5][c + 1] = dx;
    }
    b
}

fn gauss_points() -> impl Iterator<Item = [f64; 3]> {
    let g = 1.0 / 3f64.sqrt();
    (0..8).map(move |p| node_offset(p).map(|o| if o == 1 { g } else { -g }))
}

impl ElementBasis {
    pub fn new(h: f64) -> Self {
        let det = (h / 2.0).powi(3);
        let mut k_lambda = vec![0.0; EDOF * EDOF];
        let mut k_mu = vec![0.0; EDOF * EDOF];
        let mut strain_avg = vec![0.0; 6 * EDOF];
        for xi in gauss_points() {
            let b = b_matrix(xi, h);
            for i in 0..EDOF {
                // volumetric part: (tr B)_i (tr B)_j
                let tri = b[0][i] + b[1][i] + b[2][i];
                for j in 0..EDOF {
                    let trj = b[0][j] + b[1][j] + b[2][j];
                    k_lambda[i * EDOF + j] += det * tri * trj;
                    let mut s = 0.0;
                    for r in 0..3 {
                        s += 2.0 * b[r][i] * b[r][j];
                    }
                    for r in 3..6 {
                        s += b[r][i] * b[r][j];
                    }
                    k_mu[i * EDOF + j] += det * s;
                }
            }
            for r in 0..6 {
                for j in 0..EDOF {
                    strain_avg[r * EDOF + j] += b[r][j] / 8.0;
                }
            }
        }
        ElementBasis {
            h,
            k_lambda,
            k_mu,
            strain_avg,
        }
    }

    /// Trace row of the averaged strain: `tr ε̄ = d · u_e`.
    pub fn divergence_row(&self) -> [f64; EDOF] {
        let mut d = [0.0; EDOF];
        for (j, v) in d.iter_mut().enumerate() {
            *v = self.strain_avg[j] + self.strain_avg[EDOF + j] + self.strain_avg[2 * EDOF + j];
        }
        d
    }

    pub fn stiffness_lame(&self, lam: f64, mu: f64) -> Vec<f64> {
        self.k_lambda
            .iter()
            .zip(&self.k_mu)
            .map(|(a, b)| lam * a + mu * b)
            .collect()
    }
}

/// Element stiffness (24×24, row-major) of a cube of side `h`.
pub fn element_stiffness(e: f64, nu: f64, h: f64) -> Result<Vec<f64>> {
    let (lam, mu) = lame(e, nu)?;
    Ok(ElementBasis::new(h).stiffness_lame(lam, mu))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn symmetric_and_linear_in_e() {
        let k1 = element_stiffness(120.0, 0.3, 0.25).unwrap();
        let k2 = element_stiffness(240.0, 0.3, 0.25).unwrap();
        for i in 0..EDOF {
            for j in 0..EDOF {
                assert!((k1[i * EDOF + j] - k1[j * EDOF + i]).abs() <= 1e-12 * k1[i * EDOF + i].abs());
                assert_eq!(k2[i * EDOF + j], 2.0 * k1[i * EDOF + j]);
            }
        }
    }

    #[test]
    fn rigid_translation_has_zero_energy() {
        let k = element_stiffness(50.0, 0.2, 1.0).unwrap();
        for c in 0..3 {
            let mut u = [0.0; EDOF];
            for a in 0..NODES {
                u[3 * a + c] = 1.0;
            }
            for i in 0..EDOF {
                let f: f64 = (0..EDOF).map(|j| k[i * EDOF + j] * u[j]).sum();
                assert!(f.abs() < 1e-10);
            }
        }
    }

    #[test]
    fn averaged_strain_of_linear_field_is_exact() {
        let basis = ElementBasis::new(0.5);
        let eps = [[1.0, 0.2, 0.0], [0.2, -0.5, 0.3], [0.0, 0.3, 2.0]];
        let mut u = [0.0; EDOF];
        for a in 0..NODES {
            let q = node_offset(a).map(|o| o as f64 * 0.5);
            for r in 0..3 {
                u[3 * a + r] = (0..3).map(|c| eps[r][c] * q[c]).sum();
            }
        }
        let got: Vec<f64> = (0..6)
            .map(|r| (0..EDOF).map(|j| basis.strain_avg[r * EDOF + j] * u[j]).sum())
            .collect();
        let want = [1.0, -0.5, 2.0, 0.6, 0.0, 0.4];
        for r in 0..6 {
            assert!((got[r] - want[r]).abs() < 1e-12, "{r}: {} vs {}", got[r], want[r]);
        }
    }

    #[test]
    fn rejects_incompressible() {
        assert!(element_stiffness(10.0, 0.5, 1.0).is_err());
        assert!(element_stiffness(0.0, 0.3, 1.0).is_err());
    }
}
