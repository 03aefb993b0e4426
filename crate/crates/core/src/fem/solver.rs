//! Sparse symmetric storage and the two linear solvers: Jacobi-preconditioned
//! conjugate gradients and a banded Cholesky factorization.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Square sparse matrix in compressed-row form; both triangles are stored.
#[derive(Debug, Clone)]
pub struct CsrMatrix {
    pub n: usize,
    pub row_ptr: Vec<usize>,
    pub col: Vec<u32>,
    pub values: Vec<f64>,
}

impl CsrMatrix {
    pub fn nnz(&self) -> usize {
        self.col.len()
    }

    pub fn matvec(&self, x: &[f64], y: &mut [f64]) {
        for (i, yi) in y.iter_mut().enumerate().take(self.n) {
            let mut s = 0.0;
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                s += self.values[k] * x[self.col[k] as usize];
            }
            *yi = s;
        }
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.n)
            .map(|i| {
                (self.row_ptr[i]..self.row_ptr[i + 1])
                    .find(|&k| self.col[k] as usize == i)
                    .map_or(0.0, |k| self.values[k])
            })
            .collect()
    }

    /// Largest `i - j` over stored entries.
    pub fn bandwidth(&self) -> usize {
        let mut b = 0;
        for i in 0..self.n {
            if self.row_ptr[i] < self.row_ptr[i + 1] {
                let j = self.col[self.row_ptr[i]] as usize;
                b = b.max(i.saturating_sub(j));
            }
        }
        b
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let cols = &self.col[self.row_ptr[i]..self.row_ptr[i + 1]];
        match cols.binary_search(&(j as u32)) {
            Ok(k) => self.values[self.row_ptr[i] + k],
            Err(_) => 0.0,
        }
    }

    /// Coordinate-format dump (`%%MatrixMarket matrix coordinate real symmetric`,
    /// lower triangle, 1-based).
    pub fn write_matrix_market(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        let lower: Vec<(usize, usize, f64)> = (0..self.n)
            .flat_map(|i| {
                (self.row_ptr[i]..self.row_ptr[i + 1])
                    .filter(move |&k| self.col[k] as usize <= i)
                    .map(move |k| (i, self.col[k] as usize, self.values[k]))
            })
            .collect();
        let mut write = || -> std::io::Result<()> {
            writeln!(w, "%%MatrixMarket matrix coordinate real symmetric")?;
            writeln!(w, "{} {} {}", self.n, self.n, lower.len())?;
            for (i, j, v) in &lower {
                writeln!(w, "{} {} {:e}", i + 1, j + 1, v)?;
            }
            w.flush()
        };
        write().map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum SolverKind {
    /// Conjugate gradients with a Jacobi preconditioner.
    Cg,
    /// Banded Cholesky factorization.
    Direct,
    /// Direct for one-element-thick slabs (where CG converges slowly), CG otherwise.
    #[default]
    Auto,
}

/// Factorization cost (multiply-adds) above which `Auto` always uses CG.
pub const AUTO_DIRECT_FLOPS: f64 = 2e10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CgConfig {
    pub tol: f64,
    /// Iteration cap as a multiple of the system size.
    pub max_iter_factor: usize,
}

impl Default for CgConfig {
    fn default() -> Self {
        CgConfig {
            tol: 1e-10,
            max_iter_factor: 20,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct SolveStats {
    pub iterations: usize,
    pub residual: f64,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Solves `A x = b` to relative residual `cfg.tol`, starting from zero.
pub fn conjugate_gradient(a: &CsrMatrix, b: &[f64], cfg: &CgConfig) -> Result<(Vec<f64>, SolveStats)> {
    let n = a.n;
    let mut x = vec![0.0; n];
    let bnorm = dot(b, b).sqrt();
    if bnorm == 0.0 {
        return Ok((x, SolveStats::default()));
    }
    if !bnorm.is_finite() {
        return Err(Error::NonFinite("right-hand side".into()));
    }
    let inv_diag: Vec<f64> = a
        .diagonal()
        .into_iter()
        .map(|d| if d > 0.0 { 1.0 / d } else { 1.0 })
        .collect();
    let mut r = b.to_vec();
    let mut z: Vec<f64> = r.iter().zip(&inv_diag).map(|(r, d)| r * d).collect();
    let mut p = z.clone();
    let mut ap = vec![0.0; n];
    let mut rz = dot(&r, &z);
    let max_iter = (cfg.max_iter_factor * n).max(1);
    let mut history = Vec::new();
    let mut rel = 1.0;
    for it in 1..=max_iter {
        a.matvec(&p, &mut ap);
        let pap = dot(&p, &ap);
        if !(pap > 0.0) {
            return Err(Error::NotPositiveDefinite { row: it, pivot: pap });
        }
        let alpha = rz / pap;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        rel = dot(&r, &r).sqrt() / bnorm;
        history.push(rel);
        if rel <= cfg.tol {
            return Ok((
                x,
                SolveStats {
                    iterations: it,
                    residual: rel,
                },
            ));
        }
        if !rel.is_finite() {
            break;
        }
        for i in 0..n {
            z[i] = r[i] * inv_diag[i];
        }
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
    }
    Err(Error::SolverDiverged {
        iterations: history.len(),
        residual: rel,
        history,
    })
}

/// Lower-triangular band factor `L` with `A = L Lᵀ`.
#[derive(Debug, Clone)]
pub struct BandCholesky {
    n: usize,
    bw: usize,
    /// Row `i` holds `L[i][i-bw..=i]`, `bw + 1` entries, left-padded for the first rows.
    band: Vec<f64>,
}

impl BandCholesky {
    pub fn flops_estimate(a: &CsrMatrix) -> f64 {
        let b = a.bandwidth() as f64;
        a.n as f64 * b * b
    }

    pub fn factor(a: &CsrMatrix) -> Result<Self> {
        let n = a.n;
        let bw = a.bandwidth();
        let w = bw + 1;
        let mut band = vec![0.0; n * w];
        for i in 0..n {
            for k in a.row_ptr[i]..a.row_ptr[i + 1] {
                let j = a.col[k] as usize;
                if j <= i {
                    band[i * w + (j + bw - i)] = a.values[k];
                }
            }
        }
        for i in 0..n {
            let i0 = i.saturating_sub(bw);
            for j in i0..=i {
                // L[i][j] = (A[i][j] - Σ_k L[i][k] L[j][k]) / L[j][j]
                let j0 = j.saturating_sub(bw).max(i0);
                let mut s = band[i * w + (j + bw - i)];
                let ri = i * w + bw - i;
                let rj = j * w + bw - j;
                for k in j0..j {
                    s -= band[ri + k] * band[rj + k];
                }
                if j == i {
                    if !(s > 0.0) {
                        return Err(Error::NotPositiveDefinite { row: i, pivot: s });
                    }
                    band[i * w + bw] = s.sqrt();
                } else {
                    band[i * w + (j + bw - i)] = s / band[j * w + bw];
                }
            }
        }
        Ok(BandCholesky { n, bw, band })
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let (n, bw, w) = (self.n, self.bw, self.bw + 1);
        let mut y = b.to_vec();
        for i in 0..n {
            let ri = i * w + bw - i;
            let mut s = y[i];
            for k in i.saturating_sub(bw)..i {
                s -= self.band[ri + k] * y[k];
            }
            y[i] = s / self.band[i * w + bw];
        }
        for i in (0..n).rev() {
            y[i] /= self.band[i * w + bw];
            let yi = y[i];
            let ri = i * w + bw - i;
            for k in i.saturating_sub(bw)..i {
                y[k] -= self.band[ri + k] * yi;
            }
        }
        y
    }
}

/// A matrix prepared for repeated solves (the adjoint reuses the forward factor).
#[derive(Debug)]
pub enum PreparedSolver<'a> {
    Cg { matrix: &'a CsrMatrix, config: CgConfig },
    Direct(BandCholesky),
}

impl<'a> PreparedSolver<'a> {
    /// `slab` selects the direct path under [`SolverKind::Auto`].
    pub fn new(matrix: &'a CsrMatrix, kind: SolverKind, config: CgConfig, slab: bool) -> Result<Self> {
        let direct = match kind {
            SolverKind::Cg => false,
            SolverKind::Direct => true,
            SolverKind::Auto => slab && BandCholesky::flops_estimate(matrix) <= AUTO_DIRECT_FLOPS,
        };
        if direct {
            Ok(PreparedSolver::Direct(BandCholesky::factor(matrix)?))
        } else {
            Ok(PreparedSolver::Cg { matrix, config })
        }
    }

    pub fn solve(&self, b: &[f64]) -> Result<(Vec<f64>, SolveStats)> {
        match self {
            PreparedSolver::Cg { matrix, config } => conjugate_gradient(matrix, b, config),
            PreparedSolver::Direct(f) => {
                let x = f.solve(b);
                if x.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite("direct solve".into()));
                }
                Ok((x, SolveStats::default()))
            }
        }
    }
}
