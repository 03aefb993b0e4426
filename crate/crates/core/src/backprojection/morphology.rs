//! Binary-image tools on element grids: exact Euclidean distance transform and
//! topology-preserving thinning (8/4 connectivity in 2D, 26/6 in 3D).

use crate::grid::Dims;

/// Lattice on which a mask lives; inactive axes have extent 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Lattice {
    pub shape: [usize; 3],
    pub active: usize,
}

impl Lattice {
    pub fn new(dims: Dims, side: usize) -> Self {
        Lattice {
            shape: dims.shape(side),
            active: dims.count(),
        }
    }

    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn index(&self, c: [usize; 3]) -> usize {
        (c[0] * self.shape[1] + c[1]) * self.shape[2] + c[2]
    }

    pub fn coords(&self, i: usize) -> [usize; 3] {
        let i2 = i % self.shape[2];
        let r = i / self.shape[2];
        [r / self.shape[1], r % self.shape[1], i2]
    }

    fn offset(&self, c: [usize; 3], d: [i64; 3]) -> Option<usize> {
        let mut out = [0usize; 3];
        for k in 0..3 {
            let v = c[k] as i64 + d[k];
            if v < 0 || v >= self.shape[k] as i64 {
                return None;
            }
            out[k] = v as usize;
        }
        Some(self.index(out))
    }

    /// Elements touching the domain boundary along an active axis.
    pub fn is_boundary(&self, i: usize) -> bool {
        let c = self.coords(i);
        (0..self.active).any(|k| c[k] == 0 || c[k] + 1 == self.shape[k])
    }

    /// Full neighbourhood offsets (8 in 2D, 26 in 3D).
    fn neighbourhood(&self) -> Vec<[i64; 3]> {
        let r = |k: usize| if k < self.active { -1..=1 } else { 0..=0 };
        let mut out = Vec::new();
        for a in r(0) {
            for b in r(1) {
                for c in r(2) {
                    if (a, b, c) != (0, 0, 0) {
                        out.push([a, b, c]);
                    }
                }
            }
        }
        out
    }
}

/// Squared 1D distance transform (lower envelope of parabolas); infinite
/// samples never become sites.
fn edt_1d(f: &[f64], out: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let mut k = 0usize;
    for q in 0..f.len() {
        if !f[q].is_finite() {
            continue;
        }
        if k == 0 {
            v[0] = q;
            z[0] = f64::NEG_INFINITY;
            z[1] = f64::INFINITY;
            k = 1;
            continue;
        }
        let mut s;
        loop {
            let p = v[k - 1];
            s = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q - p) as f64);
            if s <= z[k - 1] {
                k -= 1;
            } else {
                break;
            }
        }
        v[k] = q;
        z[k] = s;
        z[k + 1] = f64::INFINITY;
        k += 1;
    }
    if k == 0 {
        out.iter_mut().for_each(|o| *o = f64::INFINITY);
        return;
    }
    let mut j = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[j + 1] < q as f64 {
            j += 1;
        }
        let p = v[j];
        *o = (q as f64 - p as f64).powi(2) + f[p];
    }
}

/// Euclidean distance (in elements) from every foreground element to the nearest
/// background element centre; zero on background, infinite when there is none.
pub fn distance_transform(fg: &[bool], lat: &Lattice) -> Vec<f64> {
    let mut d: Vec<f64> = fg.iter().map(|&f| if f { f64::INFINITY } else { 0.0 }).collect();
    let max_n = *lat.shape.iter().max().unwrap_or(&1);
    let (mut line, mut out) = (vec![0.0; max_n], vec![0.0; max_n]);
    let (mut v, mut z) = (vec![0usize; max_n], vec![0.0; max_n + 1]);
    for axis in 0..lat.active {
        let n = lat.shape[axis];
        let mut others = Vec::new();
        for i in 0..lat.len() {
            if lat.coords(i)[axis] == 0 {
                others.push(lat.coords(i));
            }
        }
        for base in others {
            let idx = |q: usize| {
                let mut c = base;
                c[axis] = q;
                lat.index(c)
            };
            for q in 0..n {
                line[q] = d[idx(q)];
            }
            edt_1d(&line[..n], &mut out[..n], &mut v[..n], &mut z[..n + 1]);
            for q in 0..n {
                d[idx(q)] = out[q];
            }
        }
    }
    d.iter_mut().for_each(|x| *x = x.sqrt());
    d
}

/// Local 3×3(×3) configuration around a point, outside counted as background.
struct Neighbourhood {
    cells: [bool; 27],
}

fn cell(o: [i64; 3]) -> usize {
    ((o[0] + 1) * 9 + (o[1] + 1) * 3 + (o[2] + 1)) as usize
}

fn cell_offset(c: usize) -> [i64; 3] {
    [(c / 9) as i64 - 1, ((c / 3) % 3) as i64 - 1, (c % 3) as i64 - 1]
}

impl Neighbourhood {
    fn gather(fg: &[bool], lat: &Lattice, c: [usize; 3], offs: &[[i64; 3]]) -> Self {
        let mut cells = [false; 27];
        for &o in offs {
            if let Some(j) = lat.offset(c, o) {
                cells[cell(o)] = fg[j];
            }
        }
        Neighbourhood { cells }
    }

    /// Connected components of `members` under `adjacent`; returns per-member labels.
    fn components(members: &[usize], adjacent: impl Fn(usize, usize) -> bool) -> Vec<usize> {
        let mut label = vec![usize::MAX; members.len()];
        let mut next = 0;
        for s in 0..members.len() {
            if label[s] != usize::MAX {
                continue;
            }
            label[s] = next;
            let mut stack = vec![s];
            while let Some(a) = stack.pop() {
                for b in 0..members.len() {
                    if label[b] == usize::MAX && adjacent(members[a], members[b]) {
                        label[b] = next;
                        stack.push(b);
                    }
                }
            }
            next += 1;
        }
        label
    }

    /// Removing the centre changes neither the foreground nor the background topology.
    fn is_simple(&self, offs: &[[i64; 3]]) -> bool {
        let cheb = |a: usize, b: usize| {
            let (x, y) = (cell_offset(a), cell_offset(b));
            (0..3).all(|k| (x[k] - y[k]).abs() <= 1)
        };
        let face = |a: usize, b: usize| {
            let (x, y) = (cell_offset(a), cell_offset(b));
            (0..3).map(|k| (x[k] - y[k]).abs()).sum::<i64>() == 1
        };
        let fg: Vec<usize> = offs.iter().map(|&o| cell(o)).filter(|&c| self.cells[c]).collect();
        if fg.is_empty() {
            return false;
        }
        let labels = Self::components(&fg, cheb);
        if labels.iter().any(|&l| l != 0) {
            return false;
        }
        // background restricted to the 18- (3D) or 8- (2D) neighbourhood
        let bg: Vec<usize> = offs
            .iter()
            .filter(|o| o.iter().map(|v| v.abs()).sum::<i64>() <= 2)
            .map(|&o| cell(o))
            .filter(|&c| !self.cells[c])
            .collect();
        let labels = Self::components(&bg, face);
        let mut touching: Vec<usize> = bg
            .iter()
            .zip(&labels)
            .filter(|(&c, _)| cell_offset(c).iter().map(|v| v.abs()).sum::<i64>() == 1)
            .map(|(_, &l)| l)
            .collect();
        touching.sort_unstable();
        touching.dedup();
        touching.len() == 1
    }
}

/// Sequential directional thinning to a curve skeleton. End points (one foreground
/// neighbour) and isolated points are kept; every removed point is simple, so the
/// number of components and holes is preserved.
pub fn thin(fg: &[bool], lat: &Lattice) -> Vec<bool> {
    let mut img = fg.to_vec();
    let offs = lat.neighbourhood();
    let mut dirs = Vec::new();
    for k in 0..lat.active {
        for s in [-1i64, 1] {
            let mut d = [0i64; 3];
            d[k] = s;
            dirs.push(d);
        }
    }
    loop {
        let mut changed = false;
        for &dir in &dirs {
            let border: Vec<usize> = (0..img.len())
                .filter(|&i| img[i] && lat.offset(lat.coords(i), dir).is_none_or(|j| !img[j]))
                .collect();
            for i in border {
                let c = lat.coords(i);
                let nb = Neighbourhood::gather(&img, lat, c, &offs);
                let count = offs.iter().filter(|&&o| nb.cells[cell(o)]).count();
                if count <= 1 {
                    continue;
                }
                if nb.is_simple(&offs) {
                    img[i] = false;
                    changed = true;
                }
            }
        }
        if !changed {
            return img;
        }
    }
}
