//! Forward and reverse passes of the U-Net.

use std::f32::consts::PI;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::attention::{attention_backward, attention_forward, AttnCache};
use super::ops::*;
use super::params::{build, Arch, Params, ResP, TensorInfo};
use super::DenoiserConfig;
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct Model {
    pub config: DenoiserConfig,
    pub(crate) arch: Arch,
    pub params: Vec<f32>,
    pub tensors: Vec<TensorInfo>,
}

pub struct ResCache {
    x: Tensor,
    h2: Tensor,
    st1: GroupStats,
    st2: GroupStats,
}

pub struct ForwardCache {
    input: Tensor,
    fourier: Vec<f32>,
    e1: Vec<f32>,
    temb: Vec<f32>,
    emb: Vec<f32>,
    down: Vec<Vec<ResCache>>,
    mid: Vec<ResCache>,
    attn: Vec<AttnCache>,
    up: Vec<Vec<ResCache>>,
    /// Channel count of the running tensor at each up-path concatenation.
    up_split: Vec<Vec<usize>>,
    level_sp: Vec<Spatial>,
    out_in: Tensor,
    out_stats: GroupStats,
}

impl Model {
    pub fn init(config: DenoiserConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (arch, params, tensors) = build(&config, &mut rng);
        Ok(Model {
            config,
            arch,
            params,
            tensors,
        })
    }

    /// Rebuilds the layout for `config` and installs `params`.
    pub fn from_params(config: DenoiserConfig, params: Vec<f32>) -> Result<Self> {
        let mut m = Model::init(config, 0)?;
        if params.len() != m.params.len() {
            return Err(Error::IncompatibleWeights(format!(
                "expected {} parameters, found {}",
                m.params.len(),
                params.len()
            )));
        }
        m.params = params;
        Ok(m)
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    /// Mask of parameters updated by the optimizer.
    pub fn trainable_mask(&self) -> Vec<bool> {
        let mut mask = vec![false; self.params.len()];
        for t in &self.tensors {
            let len: usize = t.shape.iter().product();
            mask[t.offset..t.offset + len].iter_mut().for_each(|m| *m = t.trainable);
        }
        mask
    }

    fn three_d(&self) -> bool {
        self.config.dims.count() == 3
    }

    fn eps(&self) -> f32 {
        self.config.norm_eps as f32
    }

    fn time_embedding(&self, t: &[f32]) -> (Vec<f32>, Vec<f32>, Vec<f32>, Vec<f32>) {
        let p = Params(&self.params);
        let tp = &self.arch.time;
        let w = p.get(tp.freqs);
        let nf = w.len();
        let rows = t.len();
        let mut fourier = vec![0.0f32; rows * 2 * nf];
        for (r, &tv) in t.iter().enumerate() {
            for (i, &wi) in w.iter().enumerate() {
                // phase in f64: t·w can be large
                let a = (2.0 * PI as f64 * wi as f64 * tv as f64) as f32;
                fourier[r * 2 * nf + i] = a.sin();
                fourier[r * 2 * nf + nf + i] = a.cos();
            }
        }
        let l1 = tp.lin1;
        let e1 = linear_forward(p.get(l1.w), p.get(l1.b), &fourier, rows, l1.din, l1.dout);
        let a1: Vec<f32> = e1.iter().map(|&v| silu(v)).collect();
        let l2 = tp.lin2;
        let temb = linear_forward(p.get(l2.w), p.get(l2.b), &a1, rows, l2.din, l2.dout);
        let emb = temb.iter().map(|&v| silu(v)).collect();
        (fourier, e1, temb, emb)
    }

    fn res_forward(&self, r: &ResP, x: Tensor, emb: &[f32], keep: bool) -> (Tensor, Option<ResCache>) {
        let p = Params(&self.params);
        let g = self.config.groups;
        let (h1, st1) = group_norm_forward(&x, g, self.eps(), p.get(r.gn1.g), p.get(r.gn1.b));
        let a1 = silu_tensor(&h1);
        drop(h1);
        let mut h2 = conv_forward(&r.conv1.shape, p.get(r.conv1.w), p.get(r.conv1.b), &a1);
        drop(a1);
        let proj = linear_forward(p.get(r.temb.w), p.get(r.temb.b), emb, x.b, r.temb.din, r.temb.dout);
        for c in 0..r.cout {
            for b in 0..x.b {
                let add = proj[b * r.cout + c];
                h2.plane_mut(c, b).iter_mut().for_each(|v| *v += add);
            }
        }
        let (h3, st2) = group_norm_forward(&h2, g, self.eps(), p.get(r.gn2.g), p.get(r.gn2.b));
        let a3 = silu_tensor(&h3);
        drop(h3);
        let mut y = conv_forward(&r.conv2.shape, p.get(r.conv2.w), p.get(r.conv2.b), &a3);
        match &r.skip {
            Some(s) => y.add_assign(&conv_forward(&s.shape, p.get(s.w), p.get(s.b), &x)),
            None => y.add_assign(&x),
        }
        let cache = keep.then(|| ResCache { x, h2, st1, st2 });
        (y, cache)
    }

    fn res_backward(
        &self,
        r: &ResP,
        c: &ResCache,
        dy: &Tensor,
        emb: &[f32],
        grads: &mut Option<&mut [f32]>,
        demb: &mut [f32],
    ) -> Tensor {
        let p = Params(&self.params);
        let g = self.config.groups;
        let eps = self.eps();
        let (h3, _) = group_norm_forward(&c.h2, g, eps, p.get(r.gn2.g), p.get(r.gn2.b));
        let a3 = silu_tensor(&h3);
        let da3 = conv_backward(
            &r.conv2.shape,
            p.get(r.conv2.w),
            &a3,
            dy,
            grads.as_deref_mut().map(|gr| Params::pair_mut(gr, r.conv2.w, r.conv2.b)),
            true,
        )
        .expect("dx requested");
        drop(a3);
        let mut dh3 = da3;
        for (d, &h) in dh3.data.iter_mut().zip(&h3.data) {
            *d *= silu_grad(h);
        }
        drop(h3);
        let dh2 = group_norm_backward(
            &c.h2,
            &dh3,
            g,
            &c.st2,
            p.get(r.gn2.g),
            grads.as_deref_mut().map(|gr| Params::pair_mut(gr, r.gn2.g, r.gn2.b)),
        );
        drop(dh3);
        let nb = dy.b;
        let mut dproj = vec![0.0f32; nb * r.cout];
        for ch in 0..r.cout {
            for b in 0..nb {
                dproj[b * r.cout + ch] = dh2.plane(ch, b).iter().map(|&v| v as f64).sum::<f64>() as f32;
            }
        }
        let de = linear_backward(
            p.get(r.temb.w),
            emb,
            &dproj,
            nb,
            r.temb.din,
            r.temb.dout,
            grads.as_deref_mut().map(|gr| Params::pair_mut(gr, r.temb.w, r.temb.b)),
        );
        for (a, b) in demb.iter_mut().zip(&de) {
            *a += b;
        }
        let (h1, _) = group_norm_forward(&c.x, g, eps, p.get(r.gn1.g), p.get(r.gn1.b));
        let a1 = silu_tensor(&h1);
        let mut dh1 = conv_backward(
            &r.conv1.shape,
            p.get(r.conv1.w),
            &a1,
            &dh2,
            grads.as_deref_mut().map(|gr| Params::pair_mut(gr, r.conv1.w, r.conv1.b)),
            true,
        )
        .expect("dx requested");
        drop(a1);
        for (d, &h) in dh1.data.iter_mut().zip(&h1.data) {
            *d *= silu_grad(h);
        }
        drop(h1);
        let mut dx = group_norm_backward(
            &c.x,
            &dh1,
            g,
            &c.st1,
            p.get(r.gn1.g),
            grads.as_deref_mut().map(|gr| Params::pair_mut(gr, r.gn1.g, r.gn1.b)),
        );
        match &r.skip {
            Some(s) => {
                let ds = conv_backward(
                    &s.shape,
                    p.get(s.w),
                    &c.x,
                    dy,
                    grads.as_deref_mut().map(|gr| Params::pair_mut(gr, s.w, s.b)),
                    true,
                )
                .expect("dx requested");
                dx.add_assign(&ds);
            }
            None => dx.add_assign(dy),
        }
        dx
    }

    /// Batched forward pass; `x` is `[3][B][S]` and `t` holds one timestep per sample.
    pub fn forward(&self, x: &Tensor, t: &[f32], keep: bool) -> (Tensor, Option<ForwardCache>) {
        assert_eq!(t.len(), x.b);
        let p = Params(&self.params);
        let a = &self.arch;
        let three = self.three_d();
        let (fourier, e1, temb, emb) = self.time_embedding(t);
        let h0 = conv_forward(&a.stem.shape, p.get(a.stem.w), p.get(a.stem.b), x);
        let mut skips = vec![h0.clone()];
        let mut h = h0;
        let mut down_c = Vec::new();
        let mut level_sp = Vec::new();
        for units in &a.down {
            level_sp.push(h.sp);
            let mut caches = Vec::new();
            for r in units {
                let (y, c) = self.res_forward(r, h, &emb, keep);
                skips.push(y.clone());
                h = y;
                caches.extend(c);
            }
            h = avg_pool(&h);
            down_c.push(caches);
        }
        let mut mid_c = Vec::new();
        let mut attn_c = Vec::new();
        for (i, r) in a.mid.iter().enumerate() {
            let (y, c) = self.res_forward(r, h, &emb, keep);
            h = y;
            mid_c.extend(c);
            if let Some(at) = a.attn.get(i) {
                let (y, c) = attention_forward(at, &p, self.config.groups, self.eps(), h, keep);
                h = y;
                attn_c.extend(c);
            }
        }
        let levels = a.down.len();
        let mut up_c: Vec<Vec<ResCache>> = (0..levels).map(|_| Vec::new()).collect();
        let mut up_split: Vec<Vec<usize>> = (0..levels).map(|_| Vec::new()).collect();
        for lvl in (0..levels).rev() {
            h = upsample(&h, three);
            for r in &a.up[lvl] {
                let s = skips.pop().expect("skip");
                up_split[lvl].push(h.c);
                let (y, c) = self.res_forward(r, h.concat(&s), &emb, keep);
                h = y;
                up_c[lvl].extend(c);
            }
        }
        let (hn, out_stats) = group_norm_forward(&h, self.config.groups, self.eps(), p.get(a.out_gn.g), p.get(a.out_gn.b));
        let out = conv_forward(&a.out_conv.shape, p.get(a.out_conv.w), p.get(a.out_conv.b), &silu_tensor(&hn));
        let cache = keep.then(|| ForwardCache {
            input: x.clone(),
            fourier,
            e1,
            temb,
            emb,
            down: down_c,
            mid: mid_c,
            attn: attn_c,
            up: up_c,
            up_split,
            level_sp,
            out_in: h,
            out_stats,
        });
        (out, cache)
    }

    /// Reverse pass from output cotangent `dy`. Parameter gradients are accumulated
    /// into `grads` when given; returns the input gradient when `need_dx`.
    pub fn backward(&self, cache: &ForwardCache, dy: &Tensor, grads: Option<&mut [f32]>, need_dx: bool) -> Option<Tensor> {
        let mut grads = grads;
        let p = Params(&self.params);
        let a = &self.arch;
        let three = self.three_d();
        let g = self.config.groups;
        let nb = dy.b;
        let emb_dim = self.config.time_embed_dim;
        let mut demb = vec![0.0f32; nb * emb_dim];

        // output head
        let (hn, _) = group_norm_forward(&cache.out_in, g, self.eps(), p.get(a.out_gn.g), p.get(a.out_gn.b));
        let an = silu_tensor(&hn);
        let mut dh = conv_backward(
            &a.out_conv.shape,
            p.get(a.out_conv.w),
            &an,
            dy,
            grads.as_deref_mut().map(|gr| Params::pair_mut(gr, a.out_conv.w, a.out_conv.b)),
            true,
        )
        .expect("dx requested");
        for (d, &h) in dh.data.iter_mut().zip(&hn.data) {
            *d *= silu_grad(h);
        }
        let mut dh = group_norm_backward(
            &cache.out_in,
            &dh,
            g,
            &cache.out_stats,
            p.get(a.out_gn.g),
            grads.as_deref_mut().map(|gr| Params::pair_mut(gr, a.out_gn.g, a.out_gn.b)),
        );

        // expanding path, collecting skip gradients (in pop order)
        let levels = a.down.len();
        let mut dskips: Vec<Tensor> = Vec::new();
        for lvl in 0..levels {
            for (j, r) in a.up[lvl].iter().enumerate().rev() {
                let dcat = self.res_backward(r, &cache.up[lvl][j], &dh, &cache.emb, &mut grads, &mut demb);
                let (dprev, dskip) = dcat.split(cache.up_split[lvl][j]);
                dskips.push(dskip);
                dh = dprev;
            }
            let in_sp = if lvl + 1 < levels { cache.level_sp[lvl + 1] } else { dh.sp.pooled(three) };
            dh = upsample_backward(&dh, in_sp, three);
        }
        // dskips now holds h0, s0a, s0b, s1a, ... in creation order
        let mut dskips = dskips.into_iter();
        let dh0_skip = dskips.next().expect("stem skip");
        let mut rest: Vec<Tensor> = dskips.collect();

        // bottleneck
        for i in (0..a.mid.len()).rev() {
            if let Some(at) = a.attn.get(i) {
                dh = attention_backward(at, &p, g, &cache.attn[i], &dh, &mut grads);
            }
            dh = self.res_backward(&a.mid[i], &cache.mid[i], &dh, &cache.emb, &mut grads, &mut demb);
        }

        // contracting path
        for lvl in (0..levels).rev() {
            dh = avg_pool_backward(&dh, cache.level_sp[lvl]);
            for (j, r) in a.down[lvl].iter().enumerate().rev() {
                dh.add_assign(&rest.pop().expect("skip grad"));
                dh = self.res_backward(r, &cache.down[lvl][j], &dh, &cache.emb, &mut grads, &mut demb);
            }
        }
        dh.add_assign(&dh0_skip);
        let dx = conv_backward(
            &a.stem.shape,
            p.get(a.stem.w),
            &cache.input,
            &dh,
            grads.as_deref_mut().map(|gr| Params::pair_mut(gr, a.stem.w, a.stem.b)),
            need_dx,
        );

        // time embedding MLP
        if let Some(gr) = grads.as_deref_mut() {
            let tp = &a.time;
            let mut dtemb = demb;
            for (d, &v) in dtemb.iter_mut().zip(&cache.temb) {
                *d *= silu_grad(v);
            }
            let a1: Vec<f32> = cache.e1.iter().map(|&v| silu(v)).collect();
            let mut de1 = linear_backward(
                p.get(tp.lin2.w),
                &a1,
                &dtemb,
                nb,
                tp.lin2.din,
                tp.lin2.dout,
                Some(Params::pair_mut(gr, tp.lin2.w, tp.lin2.b)),
            );
            for (d, &v) in de1.iter_mut().zip(&cache.e1) {
                *d *= silu_grad(v);
            }
            linear_backward(
                p.get(tp.lin1.w),
                &cache.fourier,
                &de1,
                nb,
                tp.lin1.din,
                tp.lin1.dout,
                Some(Params::pair_mut(gr, tp.lin1.w, tp.lin1.b)),
            );
        }
        dx
    }
}
