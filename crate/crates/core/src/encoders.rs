//! Latent, timestep and token encoders feeding the joint context.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{silu_backward, silu_vec, Conv2d, ConvGeom, GroupNorm, GroupNormCache, LayerNorm, LayerNormCache, Linear};
use crate::numerics::{kernels, Array};
use crate::params::ParamLayout;

/// Channel / spatial extents of a latent.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatentShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl LatentShape {
    pub fn len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl Default for LatentShape {
    fn default() -> Self {
        LatentShape {
            channels: 4,
            height: 8,
            width: 8,
        }
    }
}

/// Conv → GroupNorm → SiLU → conv → squeeze-excitation gate, plus a strided
/// 1×1 projection on the skip path.
#[derive(Clone, Debug)]
pub struct ResidualSeBlock {
    conv1: Conv2d,
    norm: GroupNorm,
    conv2: Conv2d,
    squeeze: Linear,
    excite: Linear,
    skip: Conv2d,
    pub out_channels: usize,
    pub out_spatial: usize,
}

#[derive(Clone, Debug, Default)]
pub struct SeBlockCache {
    cols1: Vec<f64>,
    gn: GroupNormCache,
    h1: Vec<f64>,
    cols2: Vec<f64>,
    a2: Vec<f64>,
    pooled: Vec<f64>,
    sq_pre: Vec<f64>,
    sq_act: Vec<f64>,
    gate: Vec<f64>,
    cols_skip: Vec<f64>,
}

impl ResidualSeBlock {
    pub fn new(layout: &mut ParamLayout, name: &str, cin: usize, h: usize, w: usize, cout: usize, groups: usize) -> Self {
        let g1 = ConvGeom { cin, h, w, k: 3, stride: 2, pad: 1 };
        let conv1 = Conv2d::new(layout, &format!("{name}.conv1"), g1, cout);
        let (oh, ow) = (g1.out_h(), g1.out_w());
        let norm = GroupNorm::new(layout, &format!("{name}.norm"), cout, groups.min(cout));
        let g2 = ConvGeom { cin: cout, h: oh, w: ow, k: 3, stride: 1, pad: 1 };
        let conv2 = Conv2d::new(layout, &format!("{name}.conv2"), g2, cout);
        let squeeze = Linear::new(layout, &format!("{name}.se_squeeze"), cout, (cout / 4).max(1), true);
        let excite = Linear::new(layout, &format!("{name}.se_excite"), (cout / 4).max(1), cout, true);
        let gs = ConvGeom { cin, h, w, k: 1, stride: 2, pad: 0 };
        let skip = Conv2d::new(layout, &format!("{name}.skip"), gs, cout);
        debug_assert_eq!((gs.out_h(), gs.out_w()), (oh, ow));
        ResidualSeBlock {
            conv1,
            norm,
            conv2,
            squeeze,
            excite,
            skip,
            out_channels: cout,
            out_spatial: oh * ow,
        }
    }

    /// `x` is `cin × nb × h × w`; the output is `cout × nb × out_spatial`.
    pub fn forward(&self, p: &[f64], x: &[f64], nb: usize) -> (Vec<f64>, SeBlockCache) {
        let c = self.out_channels;
        let s = self.out_spatial;
        let (a1, cols1) = self.conv1.forward(p, x, nb);
        let (h1, gn) = self.norm.forward(p, &a1, nb);
        let act = silu_vec(&h1);
        let (a2, cols2) = self.conv2.forward(p, &act, nb);
        // Per-sample rows for the squeeze-excitation MLP.
        let mut pooled = vec![0.0; nb * c];
        for ch in 0..c {
            for b in 0..nb {
                let r = (ch * nb + b) * s;
                pooled[b * c + ch] = a2[r..r + s].iter().sum::<f64>() / s as f64;
            }
        }
        let sq_pre = self.squeeze.forward(p, &pooled, nb);
        let sq_act = silu_vec(&sq_pre);
        let gate: Vec<f64> = self.excite.forward(p, &sq_act, nb).into_iter().map(kernels::sigmoid).collect();
        let (mut out, cols_skip) = self.skip.forward(p, x, nb);
        for ch in 0..c {
            for b in 0..nb {
                let r = (ch * nb + b) * s;
                let e = gate[b * c + ch];
                for j in r..r + s {
                    out[j] += a2[j] * e;
                }
            }
        }
        let cache = SeBlockCache {
            cols1,
            gn,
            h1,
            cols2,
            a2,
            pooled,
            sq_pre,
            sq_act,
            gate,
            cols_skip,
        };
        (out, cache)
    }

    pub fn backward(&self, p: &[f64], g: &mut [f64], cache: &SeBlockCache, dout: &[f64], nb: usize, dx: Option<&mut [f64]>) {
        let c = self.out_channels;
        let s = self.out_spatial;
        let mut dx = dx;
        self.skip.backward(p, g, &cache.cols_skip, dout, nb, dx.as_deref_mut());

        let mut da2 = vec![0.0; c * nb * s];
        let mut dgate_pre = vec![0.0; nb * c];
        for ch in 0..c {
            for b in 0..nb {
                let r = (ch * nb + b) * s;
                let e = cache.gate[b * c + ch];
                let mut dgate = 0.0;
                for i in r..r + s {
                    da2[i] = dout[i] * e;
                    dgate += dout[i] * cache.a2[i];
                }
                dgate_pre[b * c + ch] = dgate * e * (1.0 - e);
            }
        }
        let mut dsq_act = vec![0.0; cache.sq_act.len()];
        self.excite.backward(p, g, &cache.sq_act, nb, &dgate_pre, Some(&mut dsq_act));
        let mut dsq_pre = vec![0.0; dsq_act.len()];
        silu_backward(&cache.sq_pre, &dsq_act, &mut dsq_pre);
        let mut dpooled = vec![0.0; nb * c];
        self.squeeze.backward(p, g, &cache.pooled, nb, &dsq_pre, Some(&mut dpooled));
        for ch in 0..c {
            for b in 0..nb {
                let r = (ch * nb + b) * s;
                let add = dpooled[b * c + ch] / s as f64;
                for v in &mut da2[r..r + s] {
                    *v += add;
                }
            }
        }

        let n = c * nb * s;
        let mut dact = vec![0.0; n];
        self.conv2.backward(p, g, &cache.cols2, &da2, nb, Some(&mut dact));
        let mut dh1 = vec![0.0; n];
        silu_backward(&cache.h1, &dact, &mut dh1);
        let mut da1 = vec![0.0; n];
        self.norm.backward(p, g, &cache.gn, &dh1, nb, &mut da1);
        self.conv1.backward(p, g, &cache.cols1, &da1, nb, dx);
    }
}

/// Cascade of residual SE blocks, global average pooling, then a linear map
/// to the latent feature width.
#[derive(Clone, Debug)]
pub struct LatentEncoder {
    blocks: Vec<ResidualSeBlock>,
    proj: Linear,
    pub shape: LatentShape,
    pub out_dim: usize,
}

#[derive(Clone, Debug, Default)]
pub struct LatentCache {
    nb: usize,
    input_lens: Vec<usize>,
    blocks: Vec<SeBlockCache>,
    pooled: Vec<f64>,
}

impl LatentEncoder {
    pub fn new(layout: &mut ParamLayout, shape: LatentShape, widths: &[usize], groups: usize, out_dim: usize) -> Self {
        let (mut cin, mut h, mut w) = (shape.channels, shape.height, shape.width);
        let mut blocks = Vec::with_capacity(widths.len());
        for (i, &cout) in widths.iter().enumerate() {
            let b = ResidualSeBlock::new(layout, &format!("latent.block{i}"), cin, h, w, cout, groups);
            h = h.div_ceil(2);
            w = w.div_ceil(2);
            cin = cout;
            blocks.push(b);
        }
        let proj = Linear::new(layout, "latent.proj", cin, out_dim, true);
        LatentEncoder {
            blocks,
            proj,
            shape,
            out_dim,
        }
    }

    /// Pooled features before the final projection.
    pub fn pooled(&self, p: &[f64], z: &[f64]) -> Vec<f64> {
        self.forward(p, z).1.pooled
    }

    /// Encodes one `C × H × W` latent.
    pub fn forward(&self, p: &[f64], z: &[f64]) -> (Vec<f64>, LatentCache) {
        self.forward_batch(p, z, 1)
    }

    /// Encodes `nb` sample-major latents at once; returns `nb × out_dim`.
    pub fn forward_batch(&self, p: &[f64], z: &[f64], nb: usize) -> (Vec<f64>, LatentCache) {
        let n = self.shape.len();
        assert_eq!(z.len(), n * nb, "latent size");
        let hw = self.shape.height * self.shape.width;
        // Sample-major to channel-major.
        let mut x = vec![0.0; z.len()];
        for b in 0..nb {
            for c in 0..self.shape.channels {
                let src = &z[b * n + c * hw..b * n + (c + 1) * hw];
                x[(c * nb + b) * hw..(c * nb + b + 1) * hw].copy_from_slice(src);
            }
        }
        let mut cache = LatentCache {
            nb,
            ..Default::default()
        };
        for b in &self.blocks {
            let (y, c) = b.forward(p, &x, nb);
            cache.input_lens.push(x.len());
            cache.blocks.push(c);
            x = y;
        }
        let last = self.blocks.last().map(|b| b.out_spatial).unwrap_or(hw);
        let ch = x.len() / (nb * last);
        cache.pooled = vec![0.0; nb * ch];
        for c in 0..ch {
            for b in 0..nb {
                let r = (c * nb + b) * last;
                cache.pooled[b * ch + c] = x[r..r + last].iter().sum::<f64>() / last as f64;
            }
        }
        let f = self.proj.forward(p, &cache.pooled, nb);
        (f, cache)
    }

    /// `df` is `nb × out_dim`, matching the forward batch.
    pub fn backward(&self, p: &[f64], g: &mut [f64], cache: &LatentCache, df: &[f64]) {
        let nb = cache.nb;
        let mut dpooled = vec![0.0; cache.pooled.len()];
        self.proj.backward(p, g, &cache.pooled, nb, df, Some(&mut dpooled));
        let last = self.blocks.last().expect("at least one block");
        let s = last.out_spatial;
        let ch = last.out_channels;
        let mut dx = vec![0.0; ch * nb * s];
        for c in 0..ch {
            for b in 0..nb {
                let r = (c * nb + b) * s;
                dx[r..r + s].fill(dpooled[b * ch + c] / s as f64);
            }
        }
        for (i, b) in self.blocks.iter().enumerate().rev() {
            if i == 0 {
                b.backward(p, g, &cache.blocks[i], &dx, nb, None);
            } else {
                let mut din = vec![0.0; cache.input_lens[i]];
                b.backward(p, g, &cache.blocks[i], &dx, nb, Some(&mut din));
                dx = din;
            }
        }
    }

    /// Batch form over a `B × C × H × W` array.
    pub fn encode(&self, p: &[f64], z: &Array) -> Result<Array> {
        let s = self.shape;
        if z.ndim() != 4 || z.shape()[1..] != [s.channels, s.height, s.width] {
            return Err(Error::dim(format!(
                "latent batch has shape {:?}, expected [B, {}, {}, {}]",
                z.shape(),
                s.channels,
                s.height,
                s.width
            )));
        }
        let b = z.shape()[0];
        let out = self.forward_batch(p, z.data(), b).0;
        Array::new(vec![b, self.out_dim], out)
    }
}

/// Sinusoidal step embedding → SiLU → LayerNorm.
#[derive(Clone, Debug)]
pub struct TimestepEncoder {
    norm: LayerNorm,
    pub dim: usize,
    pub max_step: usize,
}

pub type TimestepCache = LayerNormCache;

pub const SINUSOID_BASE: f64 = 10_000.0;

impl TimestepEncoder {
    pub fn new(layout: &mut ParamLayout, dim: usize, max_step: usize) -> Self {
        TimestepEncoder {
            norm: LayerNorm::new(layout, "timestep.norm", dim),
            dim,
            max_step,
        }
    }

    /// The raw sinusoid, before activation and normalization.
    pub fn sinusoid(&self, t: usize) -> Vec<f64> {
        let mut s = vec![0.0; self.dim];
        kernels::sinusoid(t as f64, self.dim, SINUSOID_BASE, &mut s);
        s
    }

    pub fn forward(&self, p: &[f64], t: usize) -> Result<(Vec<f64>, TimestepCache)> {
        if t > self.max_step {
            return Err(Error::Domain(format!("timestep {t} outside [0, {}]", self.max_step)));
        }
        let act = silu_vec(&self.sinusoid(t));
        Ok(self.norm.forward(p, &act))
    }

    pub fn backward(&self, p: &[f64], g: &mut [f64], cache: &TimestepCache, df: &[f64]) {
        let mut sink = vec![0.0; self.dim];
        self.norm.backward(p, g, cache, df, &mut sink);
    }

    /// Batch form: one row per step.
    pub fn encode(&self, p: &[f64], steps: &[usize]) -> Result<Array> {
        let mut out = Vec::with_capacity(steps.len() * self.dim);
        for &t in steps {
            out.extend(self.forward(p, t)?.0);
        }
        Array::new(vec![steps.len(), self.dim], out)
    }
}

/// Zeroes whole token vectors with probability `rate` during training.
/// Returns the kept-token flags alongside the output. No rescaling is applied.
pub fn token_dropout(tokens: &[f64], d: usize, rate: f64, training: bool, rng: &mut impl Rng) -> (Vec<f64>, Vec<bool>) {
    assert!((0.0..1.0).contains(&rate), "dropout rate must lie in [0, 1)");
    let l = tokens.len() / d;
    if !training || rate == 0.0 {
        return (tokens.to_vec(), vec![true; l]);
    }
    let mut out = tokens.to_vec();
    let mut keep = vec![true; l];
    for (i, k) in keep.iter_mut().enumerate() {
        if rng.gen::<f64>() < rate {
            *k = false;
            out[i * d..(i + 1) * d].fill(0.0);
        }
    }
    (out, keep)
}

/// Concatenates `[f_z; f_t]` row-wise.
pub fn joint_context(f_z: &Array, f_t: &Array, z_dim: usize, t_dim: usize) -> Result<Array> {
    if f_z.ndim() != 2 || f_t.ndim() != 2 || f_z.shape()[1] != z_dim || f_t.shape()[1] != t_dim || f_z.shape()[0] != f_t.shape()[0] {
        return Err(Error::dim(format!(
            "joint context needs [B, {z_dim}] and [B, {t_dim}], got {:?} and {:?}",
            f_z.shape(),
            f_t.shape()
        )));
    }
    let b = f_z.shape()[0];
    let mut out = Vec::with_capacity(b * (z_dim + t_dim));
    for i in 0..b {
        out.extend_from_slice(&f_z.data()[i * z_dim..(i + 1) * z_dim]);
        out.extend_from_slice(&f_t.data()[i * t_dim..(i + 1) * t_dim]);
    }
    Array::new(vec![b, z_dim + t_dim], out)
}
