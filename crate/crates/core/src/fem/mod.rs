//! Linear-elasticity homogenization on the element grid.
//!
//! Each grid element is a trilinear hexahedron with the isotropic material given
//! by its (denormalized) E and ν channels. A linear displacement `u = ε q` is
//! prescribed on the boundary, the reduced system is solved for the remaining
//! DOFs and the bulk modulus is read off the volume-averaged stress.

mod element;
mod mesh;
mod solver;

use serde::{Deserialize, Serialize};

pub use element::{element_stiffness, lame, lame_derivatives, node_offset, ElementBasis, EDOF, NODES};
pub use mesh::{Boundary, Mesh};
pub use solver::{
    conjugate_gradient, BandCholesky, CgConfig, CsrMatrix, PreparedSolver, SolveStats, SolverKind,
    AUTO_DIRECT_FLOPS,
};

use crate::error::{Error, Result};
use crate::grid::{Dims, Grid};
use crate::materials::denormalize_channel;
use crate::microstructure::DesignParams;

pub type Tensor = [[f64; 3]; 3];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FemConfig {
    /// Magnitude ε₀ of the prescribed hydrostatic strain.
    pub strain_magnitude: f64,
    pub solver: SolverKind,
    pub cg: CgConfig,
    /// Overrides the default boundary mode for the grid dimensionality.
    pub boundary: Option<Boundary>,
}

impl Default for FemConfig {
    fn default() -> Self {
        FemConfig {
            strain_magnitude: 1e-3,
            solver: SolverKind::Auto,
            cg: CgConfig::default(),
            boundary: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FemSolution {
    /// Nodal displacements, prescribed values included.
    pub u: Vec<f64>,
    pub avg_stress: Tensor,
    pub bulk_modulus: f64,
    pub applied_strain: Tensor,
    pub stats: SolveStats,
}

/// Assembled reduced system `A u_f = b` for one grid.
#[derive(Debug, Clone)]
pub struct FemSystem<'m> {
    pub mesh: &'m Mesh,
    pub matrix: CsrMatrix,
    pub rhs: Vec<f64>,
    pub strain: Tensor,
    /// Per element `(E, ν)` in physical units.
    pub materials: Vec<(f64, f64)>,
    /// Per element `(λ, μ)`.
    pub lame: Vec<(f64, f64)>,
    /// Full DOF vector with boundary values on prescribed DOFs.
    pub boundary_values: Vec<f64>,
}

impl FemSystem<'_> {
    pub fn prepare(&self, kind: SolverKind, cg: CgConfig) -> Result<PreparedSolver<'_>> {
        PreparedSolver::new(&self.matrix, kind, cg, self.mesh.boundary != Boundary::Surface)
    }

    /// Reinstates prescribed values around a free-DOF solution.
    pub fn full_displacement(&self, u_free: &[f64]) -> Vec<f64> {
        let mut u = self.boundary_values.clone();
        for (f, &d) in self.mesh.free_dofs().iter().enumerate() {
            u[d] = u_free[f];
        }
        u
    }

    pub fn free_part(&self, u: &[f64]) -> Vec<f64> {
        self.mesh.free_dofs().iter().map(|&d| u[d]).collect()
    }

    /// ‖A u_f − b‖ / ‖b‖ (absolute residual when b = 0).
    pub fn relative_residual(&self, u_free: &[f64]) -> f64 {
        let mut r = vec![0.0; self.matrix.n];
        self.matrix.matvec(u_free, &mut r);
        let num: f64 = r.iter().zip(&self.rhs).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let den: f64 = self.rhs.iter().map(|v| v * v).sum::<f64>().sqrt();
        if den > 0.0 {
            num / den
        } else {
            num
        }
    }
}

/// Mesh plus solver settings for one grid size; reusable across grids.
#[derive(Debug, Clone)]
pub struct Fem {
    mesh: Mesh,
    config: FemConfig,
}

impl Fem {
    pub fn new(dims: Dims, side: usize, config: FemConfig) -> Result<Self> {
        if !(config.strain_magnitude.is_finite() && config.strain_magnitude != 0.0) {
            return Err(Error::InvalidArgument("strain magnitude must be finite and nonzero".into()));
        }
        let boundary = config.boundary.unwrap_or(Boundary::default_for(dims));
        Ok(Fem {
            mesh: Mesh::new(dims, side, boundary)?,
            config,
        })
    }

    pub fn mesh(&self) -> &Mesh {
        &self.mesh
    }

    pub fn config(&self) -> &FemConfig {
        &self.config
    }

    /// `ε₀ I` over the active dimensions.
    pub fn hydrostatic_strain(&self) -> Tensor {
        let mut eps = [[0.0; 3]; 3];
        for (k, row) in eps.iter_mut().enumerate().take(self.mesh.dims.count()) {
            row[k] = self.config.strain_magnitude;
        }
        eps
    }

    /// Physical `(E, ν)` of every element, validated.
    pub fn element_materials(&self, grid: &Grid) -> Result<Vec<(f64, f64)>> {
        self.mesh.check_grid(grid)?;
        grid.elements()
            .enumerate()
            .map(|(e, x)| {
                let (em, nu) = (denormalize_channel(0, x[0]), denormalize_channel(1, x[1]));
                element::check_material(em, nu).map_err(|err| Error::DegenerateMaterial {
                    element: e,
                    reason: err.to_string(),
                })?;
                Ok((em, nu))
            })
            .collect()
    }

    pub fn assemble(&self, grid: &Grid, strain: &Tensor) -> Result<FemSystem<'_>> {
        let materials = self.element_materials(grid)?;
        self.assemble_materials(materials, strain)
    }

    pub fn assemble_materials(&self, materials: Vec<(f64, f64)>, strain: &Tensor) -> Result<FemSystem<'_>> {
        let mesh = &self.mesh;
        if materials.len() != mesh.n_elements() {
            return Err(Error::InvalidArgument("material count does not match mesh".into()));
        }
        let lame_params: Vec<(f64, f64)> = materials
            .iter()
            .map(|&(e, nu)| lame(e, nu))
            .collect::<Result<_>>()?;
        let mut matrix = mesh.empty_matrix();
        let mut rhs = vec![0.0; mesh.n_free()];
        let ubc = mesh.boundary_values(strain);
        let (kl, km) = (&mesh.basis.k_lambda, &mesh.basis.k_mu);
        for (e, &(lam, mu)) in lame_params.iter().enumerate() {
            let map = mesh.scatter(e);
            let dofs = mesh.element_dofs(e);
            for i in 0..EDOF {
                let fi = mesh.free_index(dofs[i]);
                for j in 0..EDOF {
                    let k = i * EDOF + j;
                    let pos = map[k];
                    if pos != mesh::UNSET {
                        matrix.values[pos as usize] += lam * kl[k] + mu * km[k];
                    } else if let Some(fi) = fi {
                        // prescribed column: move to the right-hand side
                        let uj = ubc[dofs[j]];
                        if uj != 0.0 {
                            rhs[fi] -= (lam * kl[k] + mu * km[k]) * uj;
                        }
                    }
                }
            }
        }
        Ok(FemSystem {
            mesh,
            matrix,
            rhs,
            strain: *strain,
            materials,
            lame: lame_params,
            boundary_values: ubc,
        })
    }

    pub fn solve_system(&self, system: &FemSystem) -> Result<(Vec<f64>, SolveStats)> {
        let solver = system.prepare(self.config.solver, self.config.cg)?;
        let (uf, stats) = solver.solve(&system.rhs)?;
        Ok((system.full_displacement(&uf), stats))
    }

    /// Solution under the default hydrostatic strain.
    pub fn solve(&self, grid: &Grid) -> Result<FemSolution> {
        self.solve_with_strain(grid, &self.hydrostatic_strain())
    }

    pub fn solve_with_strain(&self, grid: &Grid, strain: &Tensor) -> Result<FemSolution> {
        let system = self.assemble(grid, strain)?;
        let (u, stats) = self.solve_system(&system)?;
        let avg_stress = self.average_stress(&system.lame, &u);
        let bulk_modulus = self.bulk_modulus_from_stress(&avg_stress, strain)?;
        Ok(FemSolution {
            u,
            avg_stress,
            bulk_modulus,
            applied_strain: *strain,
            stats,
        })
    }

    /// Homogenized bulk modulus of `grid`.
    pub fn bulk_modulus_of(&self, grid: &Grid) -> Result<f64> {
        Ok(self.solve(grid)?.bulk_modulus)
    }

    /// Volume average of the element stresses at the Gauss points.
    pub fn average_stress(&self, lame_params: &[(f64, f64)], u: &[f64]) -> Tensor {
        let basis = &self.mesh.basis;
        let mut acc = [0.0f64; 6];
        for (e, &(lam, mu)) in lame_params.iter().enumerate() {
            let dofs = self.mesh.element_dofs(e);
            let mut eps = [0.0; 6];
            for (r, v) in eps.iter_mut().enumerate() {
                let row = &basis.strain_avg[r * EDOF..(r + 1) * EDOF];
                *v = row.iter().zip(&dofs).map(|(b, &d)| b * u[d]).sum();
            }
            let tr = eps[0] + eps[1] + eps[2];
            for r in 0..3 {
                acc[r] += lam * tr + 2.0 * mu * eps[r];
            }
            for r in 3..6 {
                acc[r] += mu * eps[r];
            }
        }
        let n = lame_params.len() as f64;
        let s = acc.map(|v| v / n);
        [[s[0], s[5], s[4]], [s[5], s[1], s[3]], [s[4], s[3], s[2]]]
    }

    /// Denominator `c · tr ε` of the bulk-modulus formula.
    pub fn bulk_denominator(&self, strain: &Tensor) -> Result<f64> {
        let tr = strain[0][0] + strain[1][1] + strain[2][2];
        if tr == 0.0 || !tr.is_finite() {
            return Err(Error::UndefinedBulkModulus);
        }
        Ok(self.mesh.boundary.trace_factor(self.mesh.dims) * tr)
    }

    pub fn bulk_modulus_from_stress(&self, avg_stress: &Tensor, strain: &Tensor) -> Result<f64> {
        let den = self.bulk_denominator(strain)?;
        Ok((avg_stress[0][0] + avg_stress[1][1] + avg_stress[2][2]) / den)
    }

    /// Bulk modulus of `grid` for a given displacement field.
    pub fn bulk_modulus(&self, grid: &Grid, u: &[f64], strain: &Tensor) -> Result<f64> {
        let den = self.bulk_denominator(strain)?;
        let lame_params: Vec<(f64, f64)> = self
            .element_materials(grid)?
            .into_iter()
            .map(|(e, nu)| lame(e, nu))
            .collect::<Result<_>>()?;
        let s = self.average_stress(&lame_params, u);
        Ok((s[0][0] + s[1][1] + s[2][2]) / den)
    }
}

/// Isotropic bulk modulus `E / (3(1 − 2ν))`.
pub fn isotropic_bulk_modulus(e: f64, nu: f64) -> Result<f64> {
    if nu >= 0.5 {
        return Err(Error::InvalidArgument(format!("bulk modulus undefined for nu = {nu}")));
    }
    Ok(e / (3.0 * (1.0 - 2.0 * nu)))
}

/// Reuss (lower) and Voigt (upper) bounds on the bulk modulus of a two-phase mix.
pub fn voigt_reuss_bounds(theta: &DesignParams) -> Result<(f64, f64)> {
    let km = isotropic_bulk_modulus(theta.e_m, theta.nu_m)?;
    let kp = isotropic_bulk_modulus(theta.e_p, theta.nu_p)?;
    Ok(mixture_bounds(km, kp, theta.f_p))
}

/// `(Reuss, Voigt)` for phase moduli `km`, `kp` and particle fraction `f`.
pub fn mixture_bounds(km: f64, kp: f64, f: f64) -> (f64, f64) {
    let upper = (1.0 - f) * km + f * kp;
    let lower = 1.0 / ((1.0 - f) / km + f / kp);
    (lower.min(upper), upper.max(lower))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::materials::normalize;

    fn uniform(dims: Dims, side: usize, e: f64, nu: f64) -> Grid {
        Grid::filled(dims, side, normalize([e, nu, 1.0]).value)
    }

    #[test]
    fn dof_count_of_tiny_mesh() {
        let fem = Fem::new(Dims::Three, 2, FemConfig::default()).unwrap();
        // 3×3×3 nodes, only the centre is interior
        assert_eq!(fem.mesh().n_free(), 3);
        let fem = Fem::new(Dims::Two, 2, FemConfig::default()).unwrap();
        // two interior in-plane nodes (both layers) plus 17 free thickness DOFs
        assert_eq!(fem.mesh().n_free(), 2 * 2 + 17);
    }

    #[test]
    fn zero_strain_gives_zero_rhs() {
        let fem = Fem::new(Dims::Three, 3, FemConfig::default()).unwrap();
        let g = uniform(Dims::Three, 3, 100.0, 0.3);
        let sys = fem.assemble(&g, &[[0.0; 3]; 3]).unwrap();
        assert!(sys.rhs.iter().all(|&v| v == 0.0));
        assert!(matches!(
            fem.solve_with_strain(&g, &[[0.0; 3]; 3]),
            Err(Error::UndefinedBulkModulus)
        ));
    }

    #[test]
    fn homogeneous_3d_is_exact() {
        let fem = Fem::new(Dims::Three, 4, FemConfig::default()).unwrap();
        let g = uniform(Dims::Three, 4, 100.0, 0.25);
        let sol = fem.solve(&g).unwrap();
        assert!((sol.bulk_modulus - 200.0 / 3.0).abs() / (200.0 / 3.0) < 1e-9);
        for n in 0..fem.mesh().n_nodes() {
            let q = fem.mesh().node_position(n);
            for c in 0..3 {
                assert!((sol.u[3 * n + c] - 1e-3 * q[c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn homogeneous_plane_stress() {
        let fem = Fem::new(Dims::Two, 6, FemConfig::default()).unwrap();
        let g = uniform(Dims::Two, 6, 300.0, 0.2);
        let sol = fem.solve(&g).unwrap();
        let want = 300.0 / (2.0 * 0.8);
        assert!((sol.bulk_modulus - want).abs() / want < 1e-9, "{}", sol.bulk_modulus);
        assert!(sol.avg_stress[2][2].abs() < 1e-9);
    }

    #[test]
    fn homogeneous_plane_strain() {
        let cfg = FemConfig {
            boundary: Some(Boundary::PlaneStrain),
            ..FemConfig::default()
        };
        let fem = Fem::new(Dims::Two, 6, cfg).unwrap();
        let sol = fem.solve(&uniform(Dims::Two, 6, 300.0, 0.2)).unwrap();
        assert!((sol.bulk_modulus - 166.666_666_666_666_66).abs() < 1e-7);
    }

    #[test]
    fn bounds_examples() {
        let (lo, hi) = mixture_bounds(10.0, 100.0, 0.3);
        assert!((hi - 37.0).abs() < 1e-12);
        assert!((lo - 1.0 / 0.073).abs() < 1e-12);
        let (lo, hi) = mixture_bounds(10.0, 100.0, 0.0);
        assert_eq!((lo, hi), (10.0, 10.0));
    }
}
