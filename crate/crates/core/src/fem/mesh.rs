//! Structured hexahedral mesh, Dirichlet DOF classification and the sparsity
//! pattern of the reduced (free-DOF) stiffness matrix.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Dims, Grid};

use super::element::{node_offset, ElementBasis, EDOF, NODES};
use super::solver::CsrMatrix;

const NONE: u32 = u32::MAX;

/// Which displacement components are prescribed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Boundary {
    /// Every component of every surface node.
    Surface,
    /// One-element-thick slab: in-plane components on the perimeter, plus the
    /// thickness component of the origin node to remove the rigid translation.
    PlaneStress,
    /// Slab with in-plane components on the perimeter and every thickness component.
    PlaneStrain,
}

impl Boundary {
    pub fn default_for(dims: Dims) -> Self {
        match dims {
            Dims::Two => Boundary::PlaneStress,
            Dims::Three => Boundary::Surface,
        }
    }

    /// Divisor applied to `tr ε` when forming the bulk modulus.
    pub fn trace_factor(self, dims: Dims) -> f64 {
        match (self, dims) {
            (Boundary::PlaneStress, _) => 2.0,
            _ => 3.0,
        }
    }

    /// Analytic bulk modulus of a homogeneous isotropic phase under this boundary mode.
    pub fn phase_modulus(self, e: f64, nu: f64) -> f64 {
        match self {
            Boundary::PlaneStress => e / (2.0 * (1.0 - nu)),
            _ => e / (3.0 * (1.0 - 2.0 * nu)),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Mesh {
    pub dims: Dims,
    pub side: usize,
    pub shape: [usize; 3],
    pub node_shape: [usize; 3],
    pub h: f64,
    pub boundary: Boundary,
    pub basis: ElementBasis,
    n_dof: usize,
    /// DOF -> free index, or `NONE` when prescribed.
    free_index: Vec<u32>,
    free_dofs: Vec<usize>,
    row_ptr: Vec<usize>,
    col: Vec<u32>,
    /// Per element, 24×24 positions into the CSR values (`NONE` off the free block).
    scatter: Vec<u32>,
}

impl Mesh {
    pub fn new(dims: Dims, side: usize, boundary: Boundary) -> Result<Self> {
        if side == 0 {
            return Err(Error::InvalidArgument("grid side must be positive".into()));
        }
        if dims == Dims::Three && boundary != Boundary::Surface {
            return Err(Error::InvalidArgument(format!("{boundary:?} applies to 2D slabs only")));
        }
        let shape = dims.shape(side);
        let node_shape = shape.map(|s| s + 1);
        let n_nodes = node_shape.iter().product::<usize>();
        let n_dof = 3 * n_nodes;
        let h = 1.0 / side as f64;

        let mut prescribed = vec![false; n_dof];
        for n in 0..n_nodes {
            let c = node_coords(node_shape, n);
            let on = |k: usize| c[k] == 0 || c[k] == shape[k];
            match boundary {
                Boundary::Surface => {
                    if (0..3).any(on) {
                        prescribed[3 * n..3 * n + 3].iter_mut().for_each(|p| *p = true);
                    }
                }
                Boundary::PlaneStress | Boundary::PlaneStrain => {
                    if on(0) || on(1) {
                        prescribed[3 * n] = true;
                        prescribed[3 * n + 1] = true;
                    }
                    if boundary == Boundary::PlaneStrain || n == 0 {
                        prescribed[3 * n + 2] = true;
                    }
                }
            }
        }
        let mut free_index = vec![NONE; n_dof];
        let mut free_dofs = Vec::new();
        for (d, &p) in prescribed.iter().enumerate() {
            if !p {
                free_index[d] = free_dofs.len() as u32;
                free_dofs.push(d);
            }
        }

        // nodes sharing an element are exactly the 27-neighbourhood
        let mut row_ptr = Vec::with_capacity(free_dofs.len() + 1);
        row_ptr.push(0);
        let mut col = Vec::new();
        for &d in &free_dofs {
            let c = node_coords(node_shape, d / 3);
            for a in c[0].saturating_sub(1)..=(c[0] + 1).min(shape[0]) {
                for b in c[1].saturating_sub(1)..=(c[1] + 1).min(shape[1]) {
                    for z in c[2].saturating_sub(1)..=(c[2] + 1).min(shape[2]) {
                        let m = (a * node_shape[1] + b) * node_shape[2] + z;
                        for comp in 0..3 {
                            let f = free_index[3 * m + comp];
                            if f != NONE {
                                col.push(f);
                            }
                        }
                    }
                }
            }
            row_ptr.push(col.len());
        }

        let n_el = shape.iter().product::<usize>();
        let mut scatter = vec![NONE; n_el * EDOF * EDOF];
        let mut mesh = Mesh {
            dims,
            side,
            shape,
            node_shape,
            h,
            boundary,
            basis: ElementBasis::new(h),
            n_dof,
            free_index,
            free_dofs,
            row_ptr,
            col,
            scatter: Vec::new(),
        };
        for e in 0..n_el {
            let dofs = mesh.element_dofs(e);
            let map = &mut scatter[e * EDOF * EDOF..(e + 1) * EDOF * EDOF];
            for i in 0..EDOF {
                let fi = mesh.free_index[dofs[i]];
                if fi == NONE {
                    continue;
                }
                let row = &mesh.col[mesh.row_ptr[fi as usize]..mesh.row_ptr[fi as usize + 1]];
                for j in 0..EDOF {
                    let fj = mesh.free_index[dofs[j]];
                    if fj != NONE {
                        let k = row.binary_search(&fj).expect("pattern covers element couplings");
                        map[i * EDOF + j] = (mesh.row_ptr[fi as usize] + k) as u32;
                    }
                }
            }
        }
        mesh.scatter = scatter;
        Ok(mesh)
    }

    pub fn n_elements(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn n_nodes(&self) -> usize {
        self.node_shape.iter().product()
    }

    pub fn n_dof(&self) -> usize {
        self.n_dof
    }

    pub fn n_free(&self) -> usize {
        self.free_dofs.len()
    }

    pub fn free_dofs(&self) -> &[usize] {
        &self.free_dofs
    }

    pub fn free_index(&self, dof: usize) -> Option<usize> {
        let f = self.free_index[dof];
        (f != NONE).then_some(f as usize)
    }

    pub fn is_prescribed(&self, dof: usize) -> bool {
        self.free_index[dof] == NONE
    }

    pub fn node_position(&self, n: usize) -> [f64; 3] {
        node_coords(self.node_shape, n).map(|c| c as f64 * self.h)
    }

    pub fn element_nodes(&self, e: usize) -> [usize; NODES] {
        let [_, s1, s2] = self.shape;
        let c = [e / (s1 * s2), (e / s2) % s1, e % s2];
        let [_, n1, n2] = self.node_shape;
        let mut out = [0; NODES];
        for (a, o) in out.iter_mut().enumerate() {
            let d = node_offset(a);
            *o = ((c[0] + d[0]) * n1 + c[1] + d[1]) * n2 + c[2] + d[2];
        }
        out
    }

    pub fn element_dofs(&self, e: usize) -> [usize; EDOF] {
        let nodes = self.element_nodes(e);
        let mut out = [0; EDOF];
        for a in 0..NODES {
            for c in 0..3 {
                out[3 * a + c] = 3 * nodes[a] + c;
            }
        }
        out
    }

    /// Full displacement vector holding `ε q` on prescribed DOFs and zero elsewhere.
    pub fn boundary_values(&self, strain: &[[f64; 3]; 3]) -> Vec<f64> {
        let mut u = vec![0.0; self.n_dof];
        for n in 0..self.n_nodes() {
            let q = self.node_position(n);
            for c in 0..3 {
                if self.is_prescribed(3 * n + c) {
                    u[3 * n + c] = (0..3).map(|k| strain[c][k] * q[k]).sum();
                }
            }
        }
        u
    }

    pub(crate) fn scatter(&self, e: usize) -> &[u32] {
        &self.scatter[e * EDOF * EDOF..(e + 1) * EDOF * EDOF]
    }

    pub(crate) fn empty_matrix(&self) -> CsrMatrix {
        CsrMatrix {
            n: self.n_free(),
            row_ptr: self.row_ptr.clone(),
            col: self.col.clone(),
            values: vec![0.0; self.col.len()],
        }
    }

    pub fn check_grid(&self, grid: &Grid) -> Result<()> {
        if grid.dims() != self.dims || grid.shape() != self.shape {
            return Err(Error::InvalidArgument(format!(
                "grid shape {:?} does not match mesh {:?}",
                grid.shape(),
                self.shape
            )));
        }
        Ok(())
    }
}

fn node_coords(node_shape: [usize; 3], n: usize) -> [usize; 3] {
    let [_, n1, n2] = node_shape;
    [n / (n1 * n2), (n / n2) % n1, n % n2]
}

pub(crate) const UNSET: u32 = NONE;
