//! f32 tensor kernels with hand-written backward passes.
//!
//! Activations are stored channel-major as `[C][B][S]`, with `S` the flattened
//! spatial extent `D·H·W`; a 2D problem has `D = 1`. Convolutions run as GEMMs
//! over im2col tiles, so the batch simply widens the right-hand matrix.

use std::ops::Range;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Spatial {
    pub d: usize,
    pub h: usize,
    pub w: usize,
}

impl Spatial {
    pub fn len(&self) -> usize {
        self.d * self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    pub fn is_3d(&self) -> bool {
        self.d > 1
    }

    /// Halved along every pooled axis (depth only in 3D).
    pub fn pooled(&self, three_d: bool) -> Spatial {
        Spatial {
            d: if three_d { self.d / 2 } else { self.d },
            h: self.h / 2,
            w: self.w / 2,
        }
    }

    pub fn upsampled(&self, three_d: bool) -> Spatial {
        Spatial {
            d: if three_d { self.d * 2 } else { self.d },
            h: self.h * 2,
            w: self.w * 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub c: usize,
    pub b: usize,
    pub sp: Spatial,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn zeros(c: usize, b: usize, sp: Spatial) -> Self {
        Tensor {
            c,
            b,
            sp,
            data: vec![0.0; c * b * sp.len()],
        }
    }

    /// Columns of the `[C] × [B·S]` matrix view.
    pub fn cols(&self) -> usize {
        self.b * self.sp.len()
    }

    /// Slice of channel `c`, sample `b`.
    pub fn plane(&self, c: usize, b: usize) -> &[f32] {
        let s = self.sp.len();
        let o = (c * self.b + b) * s;
        &self.data[o..o + s]
    }

    pub fn plane_mut(&mut self, c: usize, b: usize) -> &mut [f32] {
        let s = self.sp.len();
        let o = (c * self.b + b) * s;
        &mut self.data[o..o + s]
    }

    /// Channel concatenation; trivially an append in channel-major layout.
    pub fn concat(&self, other: &Tensor) -> Tensor {
        debug_assert!(self.b == other.b && self.sp == other.sp);
        let mut data = Vec::with_capacity(self.data.len() + other.data.len());
        data.extend_from_slice(&self.data);
        data.extend_from_slice(&other.data);
        Tensor {
            c: self.c + other.c,
            b: self.b,
            sp: self.sp,
            data,
        }
    }

    /// Splits a concatenation gradient back into its two parts.
    pub fn split(self, c_first: usize) -> (Tensor, Tensor) {
        let n = c_first * self.b * self.sp.len();
        let mut data = self.data;
        let rest = data.split_off(n);
        (
            Tensor {
                c: c_first,
                b: self.b,
                sp: self.sp,
                data,
            },
            Tensor {
                c: self.c - c_first,
                b: self.b,
                sp: self.sp,
                data: rest,
            },
        )
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// `C = A·B + beta·C` with explicit row/column strides.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    (rsa, csa): (usize, usize),
    b: &[f32],
    (rsb, csb): (usize, usize),
    beta: f32,
    c: &mut [f32],
    (rsc, csc): (usize, usize),
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(k == 0 || (a.len() > (m - 1) * rsa + (k - 1) * csa && b.len() > (k - 1) * rsb + (n - 1) * csb));
    assert!(c.len() > (m - 1) * rsc + (n - 1) * csc);
    // SAFETY: the asserts above bound every element the kernel touches.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

#[inline]
pub fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

#[inline]
pub fn silu(x: f32) -> f32 {
    x * sigmoid(x)
}

#[inline]
pub fn silu_grad(x: f32) -> f32 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

pub fn silu_tensor(x: &Tensor) -> Tensor {
    Tensor {
        c: x.c,
        b: x.b,
        sp: x.sp,
        data: x.data.iter().map(|&v| silu(v)).collect(),
    }
}

/// Convolution with "same" zero padding; the kernel is `kd × k × k` with `k` odd.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvShape {
    pub cin: usize,
    pub cout: usize,
    pub kd: usize,
    pub k: usize,
}

impl ConvShape {
    pub fn taps(&self) -> usize {
        self.kd * self.k * self.k
    }

    pub fn fan_in(&self) -> usize {
        self.cin * self.taps()
    }

    #[cfg(test)]
    pub fn weight_len(&self) -> usize {
        self.cout * self.fan_in()
    }

    fn pointwise(&self) -> bool {
        self.taps() == 1
    }
}

/// Upper bound on im2col tile entries (f32).
const COL_BUDGET: usize = 1 << 22;

fn planes_per_tile(shape: &ConvShape, sp: Spatial) -> usize {
    (COL_BUDGET / (shape.fan_in() * sp.plane()).max(1)).max(1)
}

/// Fills `col` (`fan_in × cols`, row-major) for planes `p0..p1` of `x`,
/// where plane `p` is `(b, z) = (p / D, p % D)`.
fn im2col(x: &Tensor, shape: &ConvShape, planes: Range<usize>, col: &mut [f32]) {
    let sp = x.sp;
    let (h, w, plane) = (sp.h, sp.w, sp.plane());
    let cols = planes.len() * plane;
    let (kd, k) = (shape.kd, shape.k);
    let (pd, pk) = ((kd / 2) as isize, (k / 2) as isize);
    for ci in 0..shape.cin {
        for dz in 0..kd {
            for dy in 0..k {
                for dx in 0..k {
                    let row = ((ci * kd + dz) * k + dy) * k + dx;
                    let out = &mut col[row * cols..(row + 1) * cols];
                    let oz = dz as isize - pd;
                    let oy = dy as isize - pk;
                    let ox = dx as isize - pk;
                    for (pi, p) in planes.clone().enumerate() {
                        let (b, z) = (p / sp.d, p % sp.d);
                        let dst = &mut out[pi * plane..(pi + 1) * plane];
                        let zz = z as isize + oz;
                        if zz < 0 || zz >= sp.d as isize {
                            dst.fill(0.0);
                            continue;
                        }
                        let src = &x.plane(ci, b)[zz as usize * plane..(zz as usize + 1) * plane];
                        for y in 0..h {
                            let row_dst = &mut dst[y * w..(y + 1) * w];
                            let yy = y as isize + oy;
                            if yy < 0 || yy >= h as isize {
                                row_dst.fill(0.0);
                                continue;
                            }
                            let row_src = &src[yy as usize * w..(yy as usize + 1) * w];
                            shifted_copy(row_dst, row_src, ox);
                        }
                    }
                }
            }
        }
    }
}

/// `dst[x] = src[x + off]`, zero outside.
#[inline]
fn shifted_copy(dst: &mut [f32], src: &[f32], off: isize) {
    let w = dst.len();
    let a = off.unsigned_abs().min(w);
    if off >= 0 {
        dst[..w - a].copy_from_slice(&src[a..]);
        dst[w - a..].fill(0.0);
    } else {
        dst[a..].copy_from_slice(&src[..w - a]);
        dst[..a].fill(0.0);
    }
}

/// `dst[x + off] += src[x]` for in-range targets (adjoint of [`shifted_copy`]).
#[inline]
fn shifted_add(dst: &mut [f32], src: &[f32], off: isize) {
    let w = dst.len();
    let a = off.unsigned_abs().min(w);
    if off >= 0 {
        for (d, s) in dst[a..].iter_mut().zip(&src[..w - a]) {
            *d += s;
        }
    } else {
        for (d, s) in dst[..w - a].iter_mut().zip(&src[a..]) {
            *d += s;
        }
    }
}

/// Adjoint of [`im2col`]: accumulates `col` into `dx`.
fn col2im(dx: &mut Tensor, shape: &ConvShape, planes: Range<usize>, col: &[f32]) {
    let sp = dx.sp;
    let (h, w, plane) = (sp.h, sp.w, sp.plane());
    let cols = planes.len() * plane;
    let (kd, k) = (shape.kd, shape.k);
    let (pd, pk) = ((kd / 2) as isize, (k / 2) as isize);
    for ci in 0..shape.cin {
        for dz in 0..kd {
            for dy in 0..k {
                for dxk in 0..k {
                    let row = ((ci * kd + dz) * k + dy) * k + dxk;
                    let src_row = &col[row * cols..(row + 1) * cols];
                    let oz = dz as isize - pd;
                    let oy = dy as isize - pk;
                    let ox = dxk as isize - pk;
                    for (pi, p) in planes.clone().enumerate() {
                        let (b, z) = (p / sp.d, p % sp.d);
                        let zz = z as isize + oz;
                        if zz < 0 || zz >= sp.d as isize {
                            continue;
                        }
                        let src = &src_row[pi * plane..(pi + 1) * plane];
                        let dst = &mut dx.plane_mut(ci, b)[zz as usize * plane..(zz as usize + 1) * plane];
                        for y in 0..h {
                            let yy = y as isize + oy;
                            if yy < 0 || yy >= h as isize {
                                continue;
                            }
                            // output x reads input x + ox, so input x' = x + ox receives src[x]
                            shifted_add(
                                &mut dst[yy as usize * w..(yy as usize + 1) * w],
                                &src[y * w..(y + 1) * w],
                                ox,
                            );
                        }
                    }
                }
            }
        }
    }
}

/// `y = conv(x; w) + bias`, weights `[cout][cin][kd][k][k]`.
pub fn conv_forward(shape: &ConvShape, weight: &[f32], bias: &[f32], x: &Tensor) -> Tensor {
    debug_assert_eq!(x.c, shape.cin);
    let n = x.cols();
    let mut y = Tensor::zeros(shape.cout, x.b, x.sp);
    let fan = shape.fan_in();
    if shape.pointwise() {
        gemm(shape.cout, fan, n, weight, (fan, 1), &x.data, (n, 1), 0.0, &mut y.data, (n, 1));
    } else {
        let planes = x.b * x.sp.d;
        let per = planes_per_tile(shape, x.sp);
        let plane = x.sp.plane();
        let mut col = vec![0.0f32; fan * per.min(planes) * plane];
        let mut p0 = 0;
        while p0 < planes {
            let p1 = (p0 + per).min(planes);
            let cols = (p1 - p0) * plane;
            let col = &mut col[..fan * cols];
            im2col(x, shape, p0..p1, col);
            // output planes p0..p1 are contiguous within every channel row
            gemm(
                shape.cout,
                fan,
                cols,
                weight,
                (fan, 1),
                col,
                (cols, 1),
                0.0,
                &mut y.data[p0 * plane..],
                (n, 1),
            );
            p0 = p1;
        }
    }
    for (co, &bv) in bias.iter().enumerate() {
        for v in &mut y.data[co * n..(co + 1) * n] {
            *v += bv;
        }
    }
    y
}

/// Accumulates parameter gradients (when `grads` is given) and returns `dx`
/// (when `need_dx`).
pub fn conv_backward(
    shape: &ConvShape,
    weight: &[f32],
    x: &Tensor,
    dy: &Tensor,
    grads: Option<(&mut [f32], &mut [f32])>,
    need_dx: bool,
) -> Option<Tensor> {
    let n = x.cols();
    let fan = shape.fan_in();
    let mut dx = need_dx.then(|| Tensor::zeros(shape.cin, x.b, x.sp));
    let mut grads = grads;
    if let Some((_, gb)) = grads.as_mut() {
        for (co, g) in gb.iter_mut().enumerate() {
            *g += dy.data[co * n..(co + 1) * n].iter().map(|&v| v as f64).sum::<f64>() as f32;
        }
    }
    if shape.pointwise() {
        if let Some((gw, _)) = grads.as_mut() {
            gemm(shape.cout, n, fan, &dy.data, (n, 1), &x.data, (1, n), 1.0, gw, (fan, 1));
        }
        if let Some(dx) = dx.as_mut() {
            gemm(fan, shape.cout, n, weight, (1, fan), &dy.data, (n, 1), 0.0, &mut dx.data, (n, 1));
        }
        return dx;
    }
    let planes = x.b * x.sp.d;
    let per = planes_per_tile(shape, x.sp);
    let plane = x.sp.plane();
    let cap = fan * per.min(planes) * plane;
    let mut col = vec![0.0f32; if grads.is_some() { cap } else { 0 }];
    let mut dcol = vec![0.0f32; if need_dx { cap } else { 0 }];
    let mut p0 = 0;
    while p0 < planes {
        let p1 = (p0 + per).min(planes);
        let cols = (p1 - p0) * plane;
        let dyt = &dy.data[p0 * plane..];
        if let Some((gw, _)) = grads.as_mut() {
            let col = &mut col[..fan * cols];
            im2col(x, shape, p0..p1, col);
            gemm(shape.cout, cols, fan, dyt, (n, 1), col, (1, cols), 1.0, gw, (fan, 1));
        }
        if let Some(dx) = dx.as_mut() {
            let dcol = &mut dcol[..fan * cols];
            gemm(fan, shape.cout, cols, weight, (1, fan), dyt, (n, 1), 0.0, dcol, (cols, 1));
            col2im(dx, shape, p0..p1, dcol);
        }
        p0 = p1;
    }
    dx
}

/// Per-(sample, group) mean and reciprocal standard deviation.
#[derive(Debug, Clone)]
pub struct GroupStats {
    pub mean: Vec<f32>,
    pub rstd: Vec<f32>,
}

pub fn group_norm_forward(x: &Tensor, groups: usize, eps: f32, gamma: &[f32], beta: &[f32]) -> (Tensor, GroupStats) {
    let cg = x.c / groups;
    let s = x.sp.len();
    let count = (cg * s) as f64;
    let mut y = Tensor::zeros(x.c, x.b, x.sp);
    let mut stats = GroupStats {
        mean: vec![0.0; x.b * groups],
        rstd: vec![0.0; x.b * groups],
    };
    for b in 0..x.b {
        for g in 0..groups {
            let (mut sum, mut sq) = (0.0f64, 0.0f64);
            for c in g * cg..(g + 1) * cg {
                for &v in x.plane(c, b) {
                    sum += v as f64;
                }
            }
            let mean = sum / count;
            for c in g * cg..(g + 1) * cg {
                for &v in x.plane(c, b) {
                    let d = v as f64 - mean;
                    sq += d * d;
                }
            }
            let rstd = 1.0 / (sq / count + eps as f64).sqrt();
            let (mean, rstd) = (mean as f32, rstd as f32);
            stats.mean[b * groups + g] = mean;
            stats.rstd[b * groups + g] = rstd;
            for c in g * cg..(g + 1) * cg {
                let (ga, be) = (gamma[c] * rstd, beta[c]);
                let src = x.plane(c, b);
                let dst = &mut y.data[(c * x.b + b) * s..(c * x.b + b + 1) * s];
                for (d, &v) in dst.iter_mut().zip(src) {
                    *d = (v - mean) * ga + be;
                }
            }
        }
    }
    (y, stats)
}

pub fn group_norm_backward(
    x: &Tensor,
    dy: &Tensor,
    groups: usize,
    stats: &GroupStats,
    gamma: &[f32],
    grads: Option<(&mut [f32], &mut [f32])>,
) -> Tensor {
    let cg = x.c / groups;
    let s = x.sp.len();
    let count = (cg * s) as f64;
    let mut dx = Tensor::zeros(x.c, x.b, x.sp);
    let mut grads = grads;
    for b in 0..x.b {
        for g in 0..groups {
            let (mean, rstd) = (stats.mean[b * groups + g], stats.rstd[b * groups + g]);
            let (mut sum_d, mut sum_dx) = (0.0f64, 0.0f64);
            for c in g * cg..(g + 1) * cg {
                let (mut dgam, mut dbet) = (0.0f64, 0.0f64);
                for (&v, &d) in x.plane(c, b).iter().zip(dy.plane(c, b)) {
                    let xh = ((v - mean) * rstd) as f64;
                    let dd = d as f64;
                    dgam += dd * xh;
                    dbet += dd;
                    let dxh = dd * gamma[c] as f64;
                    sum_d += dxh;
                    sum_dx += dxh * xh;
                }
                if let Some((gg, gb)) = grads.as_mut() {
                    gg[c] += dgam as f32;
                    gb[c] += dbet as f32;
                }
            }
            let (m1, m2) = ((sum_d / count) as f32, (sum_dx / count) as f32);
            for c in g * cg..(g + 1) * cg {
                let gc = gamma[c];
                let xs = x.plane(c, b);
                let ds = dy.plane(c, b);
                let dst = &mut dx.data[(c * x.b + b) * s..(c * x.b + b + 1) * s];
                for ((o, &v), &d) in dst.iter_mut().zip(xs).zip(ds) {
                    let xh = (v - mean) * rstd;
                    *o = rstd * (d * gc - m1 - xh * m2);
                }
            }
        }
    }
    dx
}

/// Average pooling with window 2 along every pooled axis.
pub fn avg_pool(x: &Tensor) -> Tensor {
    let three = x.sp.is_3d();
    let osp = x.sp.pooled(three);
    let mut y = Tensor::zeros(x.c, x.b, osp);
    let fz = if three { 2 } else { 1 };
    let scale = 1.0 / (fz * 4) as f32;
    for c in 0..x.c {
        for b in 0..x.b {
            let src = x.plane(c, b);
            let dst = y.plane_mut(c, b);
            for z in 0..osp.d {
                for yy in 0..osp.h {
                    for xx in 0..osp.w {
                        let mut s = 0.0;
                        for dz in 0..fz {
                            for dy in 0..2 {
                                let row = ((z * fz + dz) * x.sp.h + 2 * yy + dy) * x.sp.w + 2 * xx;
                                s += src[row] + src[row + 1];
                            }
                        }
                        dst[(z * osp.h + yy) * osp.w + xx] = s * scale;
                    }
                }
            }
        }
    }
    y
}

pub fn avg_pool_backward(dy: &Tensor, in_sp: Spatial) -> Tensor {
    let three = in_sp.is_3d();
    let fz = if three { 2 } else { 1 };
    let scale = 1.0 / (fz * 4) as f32;
    let mut dx = Tensor::zeros(dy.c, dy.b, in_sp);
    let osp = dy.sp;
    for c in 0..dy.c {
        for b in 0..dy.b {
            let src = dy.plane(c, b).to_vec();
            let dst = dx.plane_mut(c, b);
            for z in 0..osp.d {
                for yy in 0..osp.h {
                    for xx in 0..osp.w {
                        let g = src[(z * osp.h + yy) * osp.w + xx] * scale;
                        for dz in 0..fz {
                            for dyy in 0..2 {
                                let row = ((z * fz + dz) * in_sp.h + 2 * yy + dyy) * in_sp.w + 2 * xx;
                                dst[row] = g;
                                dst[row + 1] = g;
                            }
                        }
                    }
                }
            }
        }
    }
    dx
}

/// Nearest-neighbour ×2 upsampling (depth too when `three_d`).
pub fn upsample(x: &Tensor, three_d: bool) -> Tensor {
    let osp = x.sp.upsampled(three_d);
    let mut y = Tensor::zeros(x.c, x.b, osp);
    let fz = if three_d { 2 } else { 1 };
    for c in 0..x.c {
        for b in 0..x.b {
            let src = x.plane(c, b);
            let dst = y.plane_mut(c, b);
            for z in 0..osp.d {
                for yy in 0..osp.h {
                    let srow = ((z / fz) * x.sp.h + yy / 2) * x.sp.w;
                    let drow = (z * osp.h + yy) * osp.w;
                    for xx in 0..osp.w {
                        dst[drow + xx] = src[srow + xx / 2];
                    }
                }
            }
        }
    }
    y
}

pub fn upsample_backward(dy: &Tensor, in_sp: Spatial, three_d: bool) -> Tensor {
    let mut dx = Tensor::zeros(dy.c, dy.b, in_sp);
    let fz = if three_d { 2 } else { 1 };
    let osp = dy.sp;
    for c in 0..dy.c {
        for b in 0..dy.b {
            let src = dy.plane(c, b).to_vec();
            let dst = dx.plane_mut(c, b);
            for z in 0..osp.d {
                for yy in 0..osp.h {
                    let drow = ((z / fz) * in_sp.h + yy / 2) * in_sp.w;
                    let srow = (z * osp.h + yy) * osp.w;
                    for xx in 0..osp.w {
                        dst[drow + xx / 2] += src[srow + xx];
                    }
                }
            }
        }
    }
    dx
}

/// Dense layer on row vectors: `x` is `[rows][din]`, weights `[dout][din]`.
pub fn linear_forward(weight: &[f32], bias: &[f32], x: &[f32], rows: usize, din: usize, dout: usize) -> Vec<f32> {
    let mut y = vec![0.0; rows * dout];
    gemm(rows, din, dout, x, (din, 1), weight, (1, din), 0.0, &mut y, (dout, 1));
    for r in 0..rows {
        for (o, b) in y[r * dout..(r + 1) * dout].iter_mut().zip(bias) {
            *o += b;
        }
    }
    y
}

/// Returns `dx`; accumulates weight/bias gradients when given.
#[allow(clippy::too_many_arguments)]
pub fn linear_backward(
    weight: &[f32],
    x: &[f32],
    dy: &[f32],
    rows: usize,
    din: usize,
    dout: usize,
    grads: Option<(&mut [f32], &mut [f32])>,
) -> Vec<f32> {
    if let Some((gw, gb)) = grads {
        gemm(dout, rows, din, dy, (1, dout), x, (din, 1), 1.0, gw, (din, 1));
        for r in 0..rows {
            for (g, d) in gb.iter_mut().zip(&dy[r * dout..(r + 1) * dout]) {
                *g += d;
            }
        }
    }
    let mut dx = vec![0.0; rows * din];
    gemm(rows, dout, din, dy, (dout, 1), weight, (din, 1), 0.0, &mut dx, (din, 1));
    dx
}
