//! Objectives on the homogenized bulk modulus and their adjoint gradients with
//! respect to the per-element material channels.
//!
//! With `R(u_f, x) = A(x) u_f − b(x)` the reduced residual, the total derivative
//! is `dJ/dx = ∂J/∂x − pᵀ ∂R/∂x` where `A p = ∂J/∂u_f`. Because `A` and `b` come
//! from the same element matrices, `∂R/∂x_e` is `(∂K_e/∂x_e) u_e` restricted to
//! free rows, with `u_e` holding the prescribed values on boundary DOFs.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fem::{lame_derivatives, Fem, SolveStats, Tensor, EDOF};
use crate::grid::{Grid, CHANNELS};
use crate::materials::{denormalize_channel, denormalize_slope};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ObjectiveKind {
    /// `(K − K*)²`
    J1,
    /// `(K − K*)² + λ · mean density`
    J2,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveSpec {
    pub kind: ObjectiveKind,
    /// Target bulk modulus (GPa).
    pub k_star: f64,
    /// Density weight, used by J2 only.
    #[serde(default)]
    pub lambda: f64,
}

impl ObjectiveSpec {
    pub fn j1(k_star: f64) -> Self {
        ObjectiveSpec {
            kind: ObjectiveKind::J1,
            k_star,
            lambda: 0.0,
        }
    }

    pub fn j2(k_star: f64, lambda: f64) -> Self {
        ObjectiveSpec {
            kind: ObjectiveKind::J2,
            k_star,
            lambda,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.k_star > 0.0 && self.k_star.is_finite()) {
            return Err(Error::InvalidArgument(format!("target K must be positive, got {}", self.k_star)));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::InvalidArgument(format!("lambda must be non-negative, got {}", self.lambda)));
        }
        Ok(())
    }

    fn density_weight(&self) -> f64 {
        match self.kind {
            ObjectiveKind::J1 => 0.0,
            ObjectiveKind::J2 => self.lambda,
        }
    }
}

/// Mean physical density over the elements.
pub fn mean_density(grid: &Grid) -> f64 {
    let n = grid.n_elements() as f64;
    grid.elements().map(|x| denormalize_channel(2, x[2])).sum::<f64>() / n
}

pub fn objective(spec: &ObjectiveSpec, k: f64, grid: &Grid) -> f64 {
    let misfit = (k - spec.k_star).powi(2);
    match spec.kind {
        ObjectiveKind::J1 => misfit,
        ObjectiveKind::J2 => misfit + spec.lambda * mean_density(grid),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum GradientUnits {
    /// Per unit of E (GPa), ν and ρ (g/cm³).
    Physical,
    /// Per unit of the normalized channel values.
    Normalized,
}

#[derive(Debug, Clone)]
pub struct AdjointResult {
    pub objective: f64,
    pub bulk_modulus: f64,
    /// Same layout as the input grid; channel `c` holds `dJ/dx_c` per element.
    pub gradient: Grid,
    pub units: GradientUnits,
    pub forward: SolveStats,
    pub adjoint: SolveStats,
}

/// Objective value and gradient of `grid` under the hydrostatic strain of `fem`.
pub fn adjoint_gradient(fem: &Fem, grid: &Grid, spec: &ObjectiveSpec, units: GradientUnits) -> Result<AdjointResult> {
    adjoint_gradient_with_strain(fem, grid, spec, &fem.hydrostatic_strain(), units)
}

pub fn adjoint_gradient_with_strain(
    fem: &Fem,
    grid: &Grid,
    spec: &ObjectiveSpec,
    strain: &Tensor,
    units: GradientUnits,
) -> Result<AdjointResult> {
    spec.validate()?;
    let system = fem.assemble(grid, strain)?;
    let mesh = system.mesh;
    let cfg = fem.config();
    let solver = system.prepare(cfg.solver, cfg.cg)?;
    let (uf, forward) = solver.solve(&system.rhs)?;
    let u = system.full_displacement(&uf);

    let n_el = mesh.n_elements();
    let scale = 1.0 / (n_el as f64 * fem.bulk_denominator(strain)?);
    let d = mesh.basis.divergence_row();
    // K = scale Σ_e κ3_e (d · u_e), κ3 = 3λ + 2μ = E / (1 − 2ν)
    let div: Vec<f64> = (0..n_el)
        .map(|e| d.iter().zip(&mesh.element_dofs(e)).map(|(a, &i)| a * u[i]).sum())
        .collect();
    // same evaluation as the forward path, so K* = K gives an exact zero
    let k = fem.bulk_modulus_from_stress(&fem.average_stress(&system.lame, &u), strain)?;
    let j = objective(spec, k, grid);
    let dj_dk = 2.0 * (k - spec.k_star);

    let mut gradient = Grid::zeros(grid.dims(), grid.side());
    let rho_grad = spec.density_weight() / n_el as f64;
    let mut adjoint = SolveStats::default();

    if dj_dk != 0.0 {
        let mut rhs = vec![0.0; mesh.n_free()];
        for e in 0..n_el {
            let (lam, mu) = system.lame[e];
            let c = dj_dk * scale * (3.0 * lam + 2.0 * mu);
            for (i, &dof) in mesh.element_dofs(e).iter().enumerate() {
                if let Some(f) = mesh.free_index(dof) {
                    rhs[f] += c * d[i];
                }
            }
        }
        let (pf, stats) = solver.solve(&rhs)?;
        adjoint = stats;
        let mut p = vec![0.0; mesh.n_dof()];
        for (f, &dof) in mesh.free_dofs().iter().enumerate() {
            p[dof] = pf[f];
        }
        let (kl, km) = (&mesh.basis.k_lambda, &mesh.basis.k_mu);
        let out = gradient.as_mut_slice();
        for e in 0..n_el {
            let dofs = mesh.element_dofs(e);
            let pe: [f64; EDOF] = std::array::from_fn(|i| p[dofs[i]]);
            let ue: [f64; EDOF] = std::array::from_fn(|i| u[dofs[i]]);
            let (mut vl, mut vm) = (0.0, 0.0);
            for i in 0..EDOF {
                if pe[i] == 0.0 {
                    continue;
                }
                let row = i * EDOF;
                let (mut sl, mut sm) = (0.0, 0.0);
                for jj in 0..EDOF {
                    sl += kl[row + jj] * ue[jj];
                    sm += km[row + jj] * ue[jj];
                }
                vl += pe[i] * sl;
                vm += pe[i] * sm;
            }
            let (em, nu) = system.materials[e];
            let [dl_de, dm_de, dl_dn, dm_dn] = lame_derivatives(em, nu);
            let g = 1.0 - 2.0 * nu;
            // explicit dependence of K on the element's κ3
            let explicit = dj_dk * scale * div[e];
            out[e * CHANNELS] = explicit / g - (dl_de * vl + dm_de * vm);
            out[e * CHANNELS + 1] = explicit * 2.0 * em / (g * g) - (dl_dn * vl + dm_dn * vm);
        }
    }
    if rho_grad != 0.0 {
        for e in 0..n_el {
            gradient.as_mut_slice()[e * CHANNELS + 2] = rho_grad;
        }
    }
    if units == GradientUnits::Normalized {
        let slopes: [f64; CHANNELS] = std::array::from_fn(denormalize_slope);
        for (i, v) in gradient.as_mut_slice().iter_mut().enumerate() {
            *v *= slopes[i % CHANNELS];
        }
    }
    if !gradient.is_finite() {
        return Err(Error::NonFinite("adjoint gradient".into()));
    }
    Ok(AdjointResult {
        objective: j,
        bulk_modulus: k,
        gradient,
        units,
        forward,
        adjoint,
    })
}

/// Central finite-difference gradient over channels E and ν (and ρ for J2), stepping
/// `step` in normalized units. Returned in `units`.
pub fn finite_difference_gradient(
    fem: &Fem,
    grid: &Grid,
    spec: &ObjectiveSpec,
    step: f64,
    units: GradientUnits,
) -> Result<Grid> {
    let eval = |g: &Grid| -> Result<f64> { Ok(objective(spec, fem.bulk_modulus_of(g)?, g)) };
    let mut out = Grid::zeros(grid.dims(), grid.side());
    let mut probe = grid.clone();
    for i in 0..grid.as_slice().len() {
        let x = grid.as_slice()[i];
        probe.as_mut_slice()[i] = x + step;
        let jp = eval(&probe)?;
        probe.as_mut_slice()[i] = x - step;
        let jm = eval(&probe)?;
        probe.as_mut_slice()[i] = x;
        let mut g = (jp - jm) / (2.0 * step);
        if units == GradientUnits::Physical {
            g /= denormalize_slope(i % CHANNELS);
        }
        out.as_mut_slice()[i] = g;
    }
    Ok(out)
}

/// Outcome of comparing adjoint and finite-difference gradients component-wise.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GradCheck {
    pub components: usize,
    pub failures: usize,
    pub max_relative_error: f64,
    pub max_absolute_error_small: f64,
}

impl GradCheck {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }
}

/// Relative error `≤ rel_tol` per component; components with adjoint magnitude
/// below `small` must instead agree to `abs_tol`.
pub fn compare_gradients(adjoint: &Grid, fd: &Grid, rel_tol: f64, small: f64, abs_tol: f64) -> GradCheck {
    let mut check = GradCheck {
        components: 0,
        failures: 0,
        max_relative_error: 0.0,
        max_absolute_error_small: 0.0,
    };
    for (&a, &f) in adjoint.as_slice().iter().zip(fd.as_slice()) {
        check.components += 1;
        let diff = (a - f).abs();
        if a.abs() < small {
            check.max_absolute_error_small = check.max_absolute_error_small.max(diff);
            if diff > abs_tol {
                check.failures += 1;
            }
        } else {
            let rel = diff / a.abs();
            check.max_relative_error = check.max_relative_error.max(rel);
            if rel > rel_tol {
                check.failures += 1;
            }
        }
    }
    check
}
