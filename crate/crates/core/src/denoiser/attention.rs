//! Multi-head self-attention over the spatial positions of one sample, with a
//! fixed sinusoidal encoding of the 3D position added to the normalized input.

use super::ops::{gemm, group_norm_backward, group_norm_forward, GroupStats, Tensor};
use super::params::{AttnP, Params};

pub struct AttnCache {
    x: Tensor,
    xn: Tensor,
    stats: GroupStats,
    /// Per sample `[3C][S]`.
    qkv: Vec<Vec<f32>>,
    /// Per sample and head `[S][S]` softmax weights.
    probs: Vec<Vec<Vec<f32>>>,
    /// Per sample `[C][S]` head outputs.
    heads_out: Vec<Vec<f32>>,
}

/// `[C][S]` sinusoidal encoding: channel blocks of width `2⌊C/6⌋` per axis (z, y, x),
/// remaining channels zero.
pub fn position_encoding(c: usize, d: usize, h: usize, w: usize) -> Vec<f32> {
    let s = d * h * w;
    let m = 2 * (c / 6);
    let mut pe = vec![0.0f32; c * s];
    if m == 0 {
        return pe;
    }
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let idx = (z * w * h) + y * w + x;
                for (axis, pos) in [z, y, x].into_iter().enumerate() {
                    for i in 0..m / 2 {
                        let freq = 1.0 / 10000f64.powf(2.0 * i as f64 / m as f64);
                        let a = pos as f64 * freq;
                        pe[(axis * m + 2 * i) * s + idx] = a.sin() as f32;
                        pe[(axis * m + 2 * i + 1) * s + idx] = a.cos() as f32;
                    }
                }
            }
        }
    }
    pe
}

fn heads_dim(p: &AttnP) -> usize {
    p.c / p.heads
}

pub fn attention_forward(p: &AttnP, params: &Params, groups: usize, eps: f32, x: Tensor, keep: bool) -> (Tensor, Option<AttnCache>) {
    let (c, s, nb) = (p.c, x.sp.len(), x.b);
    let (mut xn, stats) = group_norm_forward(&x, groups, eps, params.get(p.gn.g), params.get(p.gn.b));
    let pe = position_encoding(c, x.sp.d, x.sp.h, x.sp.w);
    for ch in 0..c {
        for b in 0..nb {
            for (v, e) in xn.plane_mut(ch, b).iter_mut().zip(&pe[ch * s..(ch + 1) * s]) {
                *v += e;
            }
        }
    }
    let dh = heads_dim(p);
    let scale = 1.0 / (dh as f32).sqrt();
    let n = x.cols();
    let mut y = x.clone();
    let mut all_qkv = Vec::new();
    let mut all_probs = Vec::new();
    let mut all_out = Vec::new();
    for b in 0..nb {
        let mut qkv = vec![0.0f32; 3 * c * s];
        gemm(3 * c, c, s, params.get(p.qkv.w), (c, 1), &xn.data[b * s..], (n, 1), 0.0, &mut qkv, (s, 1));
        let bias = params.get(p.qkv.b);
        for (r, bv) in bias.iter().enumerate() {
            qkv[r * s..(r + 1) * s].iter_mut().for_each(|v| *v += bv);
        }
        let mut out = vec![0.0f32; c * s];
        let mut probs = Vec::with_capacity(p.heads);
        for hd in 0..p.heads {
            let q = &qkv[hd * dh * s..];
            let k = &qkv[(c + hd * dh) * s..];
            let v = &qkv[(2 * c + hd * dh) * s..];
            let mut sc = vec![0.0f32; s * s];
            gemm(s, dh, s, q, (1, s), k, (s, 1), 0.0, &mut sc, (s, 1));
            for row in sc.chunks_mut(s) {
                let mx = row.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v * scale));
                let mut sum = 0.0;
                for v in row.iter_mut() {
                    *v = (*v * scale - mx).exp();
                    sum += *v;
                }
                row.iter_mut().for_each(|v| *v /= sum);
            }
            gemm(dh, s, s, v, (s, 1), &sc, (1, s), 0.0, &mut out[hd * dh * s..], (s, 1));
            probs.push(sc);
        }
        // projection and residual: y_b += Wo out + bo
        let mut proj = vec![0.0f32; c * s];
        gemm(c, c, s, params.get(p.out.w), (c, 1), &out, (s, 1), 0.0, &mut proj, (s, 1));
        let bo = params.get(p.out.b);
        for ch in 0..c {
            for (yv, pv) in y.plane_mut(ch, b).iter_mut().zip(&proj[ch * s..(ch + 1) * s]) {
                *yv += pv + bo[ch];
            }
        }
        if keep {
            all_qkv.push(qkv);
            all_probs.push(probs);
            all_out.push(out);
        }
    }
    let cache = keep.then(|| AttnCache {
        x,
        xn,
        stats,
        qkv: all_qkv,
        probs: all_probs,
        heads_out: all_out,
    });
    (y, cache)
}

pub fn attention_backward(
    p: &AttnP,
    params: &Params,
    groups: usize,
    cache: &AttnCache,
    dy: &Tensor,
    grads: &mut Option<&mut [f32]>,
) -> Tensor {
    let (c, s, nb) = (p.c, dy.sp.len(), dy.b);
    let n = dy.cols();
    let dh = heads_dim(p);
    let scale = 1.0 / (dh as f32).sqrt();
    let mut dxn = Tensor::zeros(c, nb, dy.sp);
    for b in 0..nb {
        let dyb = &dy.data[b * s..];
        let out = &cache.heads_out[b];
        if let Some(g) = grads.as_deref_mut() {
            let (gw, gb) = Params::pair_mut(g, p.out.w, p.out.b);
            gemm(c, s, c, dyb, (n, 1), out, (1, s), 1.0, gw, (c, 1));
            for ch in 0..c {
                gb[ch] += dyb[ch * n..ch * n + s].iter().sum::<f32>();
            }
        }
        let mut dout = vec![0.0f32; c * s];
        gemm(c, c, s, params.get(p.out.w), (1, c), dyb, (n, 1), 0.0, &mut dout, (s, 1));
        let qkv = &cache.qkv[b];
        let mut dqkv = vec![0.0f32; 3 * c * s];
        for hd in 0..p.heads {
            let probs = &cache.probs[b][hd];
            let q = &qkv[hd * dh * s..];
            let k = &qkv[(c + hd * dh) * s..];
            let v = &qkv[(2 * c + hd * dh) * s..];
            let dob = &dout[hd * dh * s..];
            // dV[d][j] = Σ_i dO[d][i] P[i][j]
            gemm(dh, s, s, dob, (s, 1), probs, (s, 1), 0.0, &mut dqkv[(2 * c + hd * dh) * s..], (s, 1));
            // dP[i][j] = Σ_d dO[d][i] V[d][j]
            let mut dp = vec![0.0f32; s * s];
            gemm(s, dh, s, dob, (1, s), v, (s, 1), 0.0, &mut dp, (s, 1));
            for (prow, drow) in probs.chunks(s).zip(dp.chunks_mut(s)) {
                let dot: f32 = prow.iter().zip(drow.iter()).map(|(a, b)| a * b).sum();
                for (d, &pv) in drow.iter_mut().zip(prow) {
                    *d = pv * (*d - dot) * scale;
                }
            }
            // dQ[d][i] = Σ_j dS[i][j] K[d][j];  dK[d][j] = Σ_i dS[i][j] Q[d][i]
            gemm(dh, s, s, k, (s, 1), &dp, (1, s), 0.0, &mut dqkv[hd * dh * s..], (s, 1));
            gemm(dh, s, s, q, (s, 1), &dp, (s, 1), 0.0, &mut dqkv[(c + hd * dh) * s..], (s, 1));
        }
        let xnb = &cache.xn.data[b * s..];
        if let Some(g) = grads.as_deref_mut() {
            let (gw, gb) = Params::pair_mut(g, p.qkv.w, p.qkv.b);
            gemm(3 * c, s, c, &dqkv, (s, 1), xnb, (1, n), 1.0, gw, (c, 1));
            for r in 0..3 * c {
                gb[r] += dqkv[r * s..(r + 1) * s].iter().sum::<f32>();
            }
        }
        gemm(c, 3 * c, s, params.get(p.qkv.w), (1, c), &dqkv, (s, 1), 0.0, &mut dxn.data[b * s..], (n, 1));
    }
    let gn_grads = grads.as_deref_mut().map(|g| Params::pair_mut(g, p.gn.g, p.gn.b));
    let mut dx = group_norm_backward(&cache.x, &dxn, groups, &cache.stats, params.get(p.gn.g), gn_grads);
    dx.add_assign(dy);
    dx
}
