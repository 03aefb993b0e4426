//! Flat parameter storage and the fixed U-Net layout built on top of it.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::ops::ConvShape;
use super::DenoiserConfig;

/// A contiguous range of the flat parameter vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct P {
    pub off: usize,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorInfo {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub trainable: bool,
}

#[derive(Debug, Clone, Copy)]
pub struct ConvP {
    pub shape: ConvShape,
    pub w: P,
    pub b: P,
}

#[derive(Debug, Clone, Copy)]
pub struct GnP {
    pub g: P,
    pub b: P,
}

#[derive(Debug, Clone, Copy)]
pub struct LinP {
    pub din: usize,
    pub dout: usize,
    pub w: P,
    pub b: P,
}

#[derive(Debug, Clone)]
pub struct ResP {
    pub cout: usize,
    pub gn1: GnP,
    pub conv1: ConvP,
    pub temb: LinP,
    pub gn2: GnP,
    pub conv2: ConvP,
    pub skip: Option<ConvP>,
}

#[derive(Debug, Clone)]
pub struct AttnP {
    pub c: usize,
    pub heads: usize,
    pub gn: GnP,
    pub qkv: LinP,
    pub out: LinP,
}

#[derive(Debug, Clone)]
pub struct TimeP {
    /// Fixed random frequencies of the Fourier features (not trained).
    pub freqs: P,
    pub lin1: LinP,
    pub lin2: LinP,
}

#[derive(Debug, Clone)]
pub struct Arch {
    pub stem: ConvP,
    pub time: TimeP,
    /// Per resolution level, the residual units of the contracting path.
    pub down: Vec<Vec<ResP>>,
    pub mid: Vec<ResP>,
    /// Attention after each of the first `mid.len() - 1` mid units (empty when disabled).
    pub attn: Vec<AttnP>,
    /// Per level, the residual units of the expanding path (executed deepest level first).
    pub up: Vec<Vec<ResP>>,
    pub out_gn: GnP,
    pub out_conv: ConvP,
}

/// Read-only view with typed accessors.
pub struct Params<'a>(pub &'a [f32]);

impl<'a> Params<'a> {
    pub fn get(&self, p: P) -> &'a [f32] {
        &self.0[p.off..p.off + p.len]
    }

    /// Mutable weight and bias slices; the bias is allocated right after the weight.
    pub fn pair_mut(g: &mut [f32], w: P, b: P) -> (&mut [f32], &mut [f32]) {
        debug_assert_eq!(b.off, w.off + w.len);
        let (head, tail) = g[w.off..].split_at_mut(w.len);
        (head, &mut tail[..b.len])
    }
}

enum Init {
    /// Uniform in ±1/√fan_in.
    Uniform(usize),
    Const(f32),
    Normal(f32),
}

struct Builder<'r, R: Rng> {
    rng: &'r mut R,
    data: Vec<f32>,
    infos: Vec<TensorInfo>,
}

impl<R: Rng> Builder<'_, R> {
    fn add(&mut self, name: String, shape: Vec<usize>, init: Init, trainable: bool) -> P {
        let len: usize = shape.iter().product();
        let off = self.data.len();
        for _ in 0..len {
            let v = match init {
                Init::Uniform(fan) => {
                    let bound = 1.0 / (fan as f32).sqrt();
                    self.rng.random_range(-bound..bound)
                }
                Init::Const(c) => c,
                Init::Normal(s) => {
                    let z: f64 = StandardNormal.sample(self.rng);
                    z as f32 * s
                }
            };
            self.data.push(v);
        }
        self.infos.push(TensorInfo {
            name,
            shape,
            offset: off,
            trainable,
        });
        P { off, len }
    }

    fn conv(&mut self, name: &str, shape: ConvShape) -> ConvP {
        let fan = shape.fan_in();
        let mut dims = vec![shape.cout, shape.cin];
        if shape.kd > 1 {
            dims.push(shape.kd);
        }
        dims.extend([shape.k, shape.k]);
        let w = self.add(format!("{name}.weight"), dims, Init::Uniform(fan), true);
        let b = self.add(format!("{name}.bias"), vec![shape.cout], Init::Uniform(fan), true);
        ConvP { shape, w, b }
    }

    fn norm(&mut self, name: &str, c: usize) -> GnP {
        let g = self.add(format!("{name}.weight"), vec![c], Init::Const(1.0), true);
        let b = self.add(format!("{name}.bias"), vec![c], Init::Const(0.0), true);
        GnP { g, b }
    }

    fn linear(&mut self, name: &str, din: usize, dout: usize) -> LinP {
        let w = self.add(format!("{name}.weight"), vec![dout, din], Init::Uniform(din), true);
        let b = self.add(format!("{name}.bias"), vec![dout], Init::Uniform(din), true);
        LinP { din, dout, w, b }
    }

    fn res(&mut self, name: &str, cin: usize, cout: usize, kd: usize, emb: usize) -> ResP {
        let k3 = |cin, cout| ConvShape { cin, cout, kd, k: 3 };
        ResP {
            cout,
            gn1: self.norm(&format!("{name}.norm1"), cin),
            conv1: self.conv(&format!("{name}.conv1"), k3(cin, cout)),
            temb: self.linear(&format!("{name}.time_emb_proj"), emb, cout),
            gn2: self.norm(&format!("{name}.norm2"), cout),
            conv2: self.conv(&format!("{name}.conv2"), k3(cout, cout)),
            skip: (cin != cout).then(|| {
                self.conv(
                    &format!("{name}.conv_shortcut"),
                    ConvShape {
                        cin,
                        cout,
                        kd: 1,
                        k: 1,
                    },
                )
            }),
        }
    }
}

/// Builds the layout; parameter values are drawn from `rng` in a fixed order.
pub fn build<R: Rng>(cfg: &DenoiserConfig, rng: &mut R) -> (Arch, Vec<f32>, Vec<TensorInfo>) {
    let mut b = Builder {
        rng,
        data: Vec::new(),
        infos: Vec::new(),
    };
    let kd = if cfg.dims.count() == 3 { 3 } else { 1 };
    let emb = cfg.time_embed_dim;
    let point = |cin, cout| ConvShape { cin, cout, kd: 1, k: 1 };
    let stem = b.conv("conv_in", point(cfg.in_channels, cfg.stem_channels));
    let freqs = b.add(
        "time_proj.W".into(),
        vec![cfg.fourier_features],
        Init::Normal(cfg.fourier_scale as f32),
        false,
    );
    let lin1 = b.linear("time_embedding.linear_1", 2 * cfg.fourier_features, emb);
    let lin2 = b.linear("time_embedding.linear_2", emb, emb);

    let levels = cfg.block_channels.len();
    let mut down = Vec::with_capacity(levels);
    let mut skip_channels = vec![cfg.stem_channels];
    let mut c = cfg.stem_channels;
    for (lvl, &co) in cfg.block_channels.iter().enumerate() {
        let mut units = Vec::new();
        for j in 0..cfg.layers_per_block {
            units.push(b.res(&format!("down_blocks.{lvl}.resnets.{j}"), c, co, kd, emb));
            c = co;
            skip_channels.push(c);
        }
        down.push(units);
    }
    let mid_c = cfg.mid_channels;
    let deepest = *cfg.block_channels.last().expect("at least one level");
    let mid = vec![
        b.res("mid_block.resnets.0", deepest, mid_c, kd, emb),
        b.res("mid_block.resnets.1", mid_c, mid_c, kd, emb),
        b.res("mid_block.resnets.2", mid_c, deepest, kd, emb),
    ];
    let mut attn = Vec::new();
    if cfg.attention {
        for i in 0..2 {
            let name = format!("mid_block.attentions.{i}");
            attn.push(AttnP {
                c: mid_c,
                heads: cfg.attention_heads,
                gn: b.norm(&format!("{name}.group_norm"), mid_c),
                qkv: b.linear(&format!("{name}.to_qkv"), mid_c, 3 * mid_c),
                out: b.linear(&format!("{name}.to_out"), mid_c, mid_c),
            });
        }
    }
    let mut up: Vec<Vec<ResP>> = (0..levels).map(|_| Vec::new()).collect();
    c = deepest;
    for lvl in (0..levels).rev() {
        let co = cfg.block_channels[lvl];
        // the shallowest level also consumes the stem output
        let n_units = cfg.layers_per_block + usize::from(lvl == 0);
        for j in 0..n_units {
            let s = skip_channels.pop().expect("skip available");
            let out = if lvl == 0 && j == n_units - 1 { cfg.stem_channels } else { co };
            up[lvl].push(b.res(&format!("up_blocks.{}.resnets.{j}", levels - 1 - lvl), c + s, out, kd, emb));
            c = out;
        }
    }
    let out_gn = b.norm("conv_norm_out", c);
    let out_conv = b.conv("conv_out", point(c, cfg.in_channels));
    let arch = Arch {
        stem,
        time: TimeP { freqs, lin1, lin2 },
        down,
        mid,
        attn,
        up,
        out_gn,
        out_conv,
    };
    (arch, b.data, b.infos)
}
