//! Parameterized building blocks with hand-written backward passes.
//!
//! Forward functions read weights from the flat parameter vector `p`;
//! backward functions accumulate into a gradient vector of the same layout
//! and *add* input gradients into the caller's buffer, so branches that share
//! an input can simply backpropagate in turn.

use crate::numerics::kernels::{self, gemm, Op};
use crate::numerics::NORM_VAR_EPS;
use crate::params::{Init, ParamLayout, Slot};

/// `y = x Wᵀ + b` on row batches, `W` stored `[out × in]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: Slot,
    pub b: Option<Slot>,
    pub inp: usize,
    pub out: usize,
}

impl Linear {
    pub fn new(layout: &mut ParamLayout, name: &str, inp: usize, out: usize, bias: bool) -> Self {
        let w = layout.add(format!("{name}.weight"), &[out, inp], Init::FanIn(inp));
        let b = bias.then(|| layout.add(format!("{name}.bias"), &[out], Init::Zeros));
        Linear { w, b, inp, out }
    }

    /// Same as [`Linear::new`] but with a zero weight matrix.
    pub fn zeros(layout: &mut ParamLayout, name: &str, inp: usize, out: usize) -> Self {
        let w = layout.add(format!("{name}.weight"), &[out, inp], Init::Zeros);
        Linear { w, b: None, inp, out }
    }

    /// `x` is `n × inp`; returns `n × out`.
    pub fn forward(&self, p: &[f64], x: &[f64], n: usize) -> Vec<f64> {
        let mut y = vec![0.0; n * self.out];
        self.forward_into(p, x, n, &mut y, 0.0);
        y
    }

    /// `y = beta·y + x Wᵀ + b`.
    pub fn forward_into(&self, p: &[f64], x: &[f64], n: usize, y: &mut [f64], beta: f64) {
        debug_assert_eq!(x.len(), n * self.inp);
        gemm(n, self.inp, self.out, x, Op::N, self.w.of(p), Op::T, beta, y);
        if let Some(b) = self.b {
            let b = b.of(p);
            for row in y.chunks_exact_mut(self.out) {
                kernels::axpy(1.0, b, row);
            }
        }
    }

    pub fn backward(&self, p: &[f64], g: &mut [f64], x: &[f64], n: usize, dy: &[f64], dx: Option<&mut [f64]>) {
        gemm(self.out, n, self.inp, dy, Op::T, x, Op::N, 1.0, self.w.of_mut(g));
        if let Some(b) = self.b {
            let gb = b.of_mut(g);
            for row in dy.chunks_exact(self.out) {
                kernels::axpy(1.0, row, gb);
            }
        }
        if let Some(dx) = dx {
            gemm(n, self.out, self.inp, dy, Op::N, self.w.of(p), Op::N, 1.0, dx);
        }
    }
}

/// Row-wise layer normalization with learnable gain and bias.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: Slot,
    pub bias: Slot,
    pub dim: usize,
}

#[derive(Clone, Debug, Default)]
pub struct LayerNormCache {
    xhat: Vec<f64>,
    inv: Vec<f64>,
}

impl LayerNorm {
    pub fn new(layout: &mut ParamLayout, name: &str, dim: usize) -> Self {
        let gain = layout.add(format!("{name}.gain"), &[dim], Init::Constant(1.0));
        let bias = layout.add(format!("{name}.bias"), &[dim], Init::Zeros);
        LayerNorm { gain, bias, dim }
    }

    pub fn forward(&self, p: &[f64], x: &[f64]) -> (Vec<f64>, LayerNormCache) {
        let d = self.dim;
        let (g, b) = (self.gain.of(p), self.bias.of(p));
        let rows = x.len() / d;
        let mut y = vec![0.0; x.len()];
        let mut cache = LayerNormCache {
            xhat: vec![0.0; x.len()],
            inv: vec![0.0; rows],
        };
        for r in 0..rows {
            let xr = &x[r * d..(r + 1) * d];
            let mean = xr.iter().sum::<f64>() / d as f64;
            let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + NORM_VAR_EPS).sqrt();
            cache.inv[r] = inv;
            for j in 0..d {
                let h = (xr[j] - mean) * inv;
                cache.xhat[r * d + j] = h;
                y[r * d + j] = h * g[j] + b[j];
            }
        }
        (y, cache)
    }

    pub fn backward(&self, p: &[f64], grads: &mut [f64], cache: &LayerNormCache, dy: &[f64], dx: &mut [f64]) {
        let d = self.dim;
        let g = self.gain.of(p);
        let mut dxhat = vec![0.0; d];
        for (r, &inv) in cache.inv.iter().enumerate() {
            let xh = &cache.xhat[r * d..(r + 1) * d];
            let dyr = &dy[r * d..(r + 1) * d];
            {
                let gg = self.gain.of_mut(grads);
                for j in 0..d {
                    gg[j] += dyr[j] * xh[j];
                }
            }
            {
                let gb = self.bias.of_mut(grads);
                kernels::axpy(1.0, dyr, gb);
            }
            for j in 0..d {
                dxhat[j] = dyr[j] * g[j];
            }
            let m1 = dxhat.iter().sum::<f64>() / d as f64;
            let m2 = kernels::dot(&dxhat, xh) / d as f64;
            for j in 0..d {
                dx[r * d + j] += inv * (dxhat[j] - m1 - xh[j] * m2);
            }
        }
    }
}

/// Spatial extent bookkeeping for a square-kernel convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.pad - self.k) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.pad - self.k) / self.stride + 1
    }

    fn rows(&self) -> usize {
        self.cin * self.k * self.k
    }

    fn cols(&self) -> usize {
        self.out_h() * self.out_w()
    }

    /// Unfolds `x` (`cin × nb × h × w`) into `[cin·k·k × nb·out_h·out_w]`.
    fn im2col(&self, x: &[f64], nb: usize) -> Vec<f64> {
        let (oh, ow) = (self.out_h(), self.out_w());
        let ncol = oh * ow;
        let hw = self.h * self.w;
        let width = nb * ncol;
        let mut cols = vec![0.0; self.rows() * width];
        for c in 0..self.cin {
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = (c * self.k + ky) * self.k + kx;
                    for b in 0..nb {
                        let src = &x[(c * nb + b) * hw..(c * nb + b + 1) * hw];
                        let dst = &mut cols[row * width + b * ncol..row * width + (b + 1) * ncol];
                        for oy in 0..oh {
                            let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                            if iy < 0 || iy >= self.h as isize {
                                continue;
                            }
                            for ox in 0..ow {
                                let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                                if ix < 0 || ix >= self.w as isize {
                                    continue;
                                }
                                dst[oy * ow + ox] = src[iy as usize * self.w + ix as usize];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    /// Adjoint of [`ConvGeom::im2col`], accumulated into `dx`.
    fn col2im(&self, dcols: &[f64], nb: usize, dx: &mut [f64]) {
        let (oh, ow) = (self.out_h(), self.out_w());
        let ncol = oh * ow;
        let hw = self.h * self.w;
        let width = nb * ncol;
        for c in 0..self.cin {
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = (c * self.k + ky) * self.k + kx;
                    for b in 0..nb {
                        let src = &dcols[row * width + b * ncol..row * width + (b + 1) * ncol];
                        let dst = &mut dx[(c * nb + b) * hw..(c * nb + b + 1) * hw];
                        for oy in 0..oh {
                            let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                            if iy < 0 || iy >= self.h as isize {
                                continue;
                            }
                            for ox in 0..ow {
                                let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                                if ix < 0 || ix >= self.w as isize {
                                    continue;
                                }
                                dst[iy as usize * self.w + ix as usize] += src[oy * ow + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// 2-D convolution lowered to one gemm. Activations are stored channel-major
/// across the batch: `C × nb × H × W`, which for `nb = 1` is the usual layout.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub w: Slot,
    pub b: Slot,
    pub geom: ConvGeom,
    pub cout: usize,
}

impl Conv2d {
    pub fn new(layout: &mut ParamLayout, name: &str, geom: ConvGeom, cout: usize) -> Self {
        let fan = geom.rows();
        let w = layout.add(format!("{name}.weight"), &[cout, geom.cin, geom.k, geom.k], Init::FanIn(fan));
        let b = layout.add(format!("{name}.bias"), &[cout], Init::Zeros);
        Conv2d { w, b, geom, cout }
    }

    pub fn out_len(&self) -> usize {
        self.cout * self.geom.cols()
    }

    /// Returns the output and the unfolded input needed by backward.
    pub fn forward(&self, p: &[f64], x: &[f64], nb: usize) -> (Vec<f64>, Vec<f64>) {
        let cols = self.geom.im2col(x, nb);
        let width = nb * self.geom.cols();
        let mut y = vec![0.0; self.cout * width];
        let b = self.b.of(p);
        for (o, row) in y.chunks_exact_mut(width).enumerate() {
            row.fill(b[o]);
        }
        gemm(self.cout, self.geom.rows(), width, self.w.of(p), Op::N, &cols, Op::N, 1.0, &mut y);
        (y, cols)
    }

    pub fn backward(&self, p: &[f64], g: &mut [f64], cols: &[f64], dy: &[f64], nb: usize, dx: Option<&mut [f64]>) {
        let width = nb * self.geom.cols();
        let rows = self.geom.rows();
        gemm(self.cout, width, rows, dy, Op::N, cols, Op::T, 1.0, self.w.of_mut(g));
        let gb = self.b.of_mut(g);
        for (o, row) in dy.chunks_exact(width).enumerate() {
            gb[o] += row.iter().sum::<f64>();
        }
        if let Some(dx) = dx {
            let mut dcols = vec![0.0; rows * width];
            gemm(rows, self.cout, width, self.w.of(p), Op::T, dy, Op::N, 0.0, &mut dcols);
            self.geom.col2im(&dcols, nb, dx);
        }
    }
}

/// Group normalization with per-channel affine over `C × nb × S`
/// activations; statistics are per sample and group.
#[derive(Clone, Debug)]
pub struct GroupNorm {
    pub gain: Slot,
    pub bias: Slot,
    pub channels: usize,
    pub groups: usize,
}

#[derive(Clone, Debug, Default)]
pub struct GroupNormCache {
    xhat: Vec<f64>,
    inv: Vec<f64>,
}

impl GroupNorm {
    pub fn new(layout: &mut ParamLayout, name: &str, channels: usize, groups: usize) -> Self {
        assert!(groups > 0 && channels % groups == 0, "channels must split evenly into groups");
        let gain = layout.add(format!("{name}.gain"), &[channels], Init::Constant(1.0));
        let bias = layout.add(format!("{name}.bias"), &[channels], Init::Zeros);
        GroupNorm {
            gain,
            bias,
            channels,
            groups,
        }
    }

    /// Chunk range of channel `c`, sample `b`.
    fn chunk(&self, c: usize, b: usize, nb: usize, s: usize) -> std::ops::Range<usize> {
        (c * nb + b) * s..(c * nb + b + 1) * s
    }

    pub fn forward(&self, p: &[f64], x: &[f64], nb: usize) -> (Vec<f64>, GroupNormCache) {
        let s = x.len() / (self.channels * nb);
        let cpg = self.channels / self.groups;
        let per = (cpg * s) as f64;
        let (g, bias) = (self.gain.of(p), self.bias.of(p));
        let mut y = vec![0.0; x.len()];
        let mut cache = GroupNormCache {
            xhat: vec![0.0; x.len()],
            inv: vec![0.0; self.groups * nb],
        };
        for b in 0..nb {
            for gi in 0..self.groups {
                let chans = gi * cpg..(gi + 1) * cpg;
                let mean = chans.clone().map(|c| x[self.chunk(c, b, nb, s)].iter().sum::<f64>()).sum::<f64>() / per;
                let var = chans
                    .clone()
                    .map(|c| x[self.chunk(c, b, nb, s)].iter().map(|v| (v - mean) * (v - mean)).sum::<f64>())
                    .sum::<f64>()
                    / per;
                let inv = 1.0 / (var + NORM_VAR_EPS).sqrt();
                cache.inv[b * self.groups + gi] = inv;
                for c in chans {
                    for i in self.chunk(c, b, nb, s) {
                        let h = (x[i] - mean) * inv;
                        cache.xhat[i] = h;
                        y[i] = h * g[c] + bias[c];
                    }
                }
            }
        }
        (y, cache)
    }

    pub fn backward(&self, p: &[f64], grads: &mut [f64], cache: &GroupNormCache, dy: &[f64], nb: usize, dx: &mut [f64]) {
        let s = dy.len() / (self.channels * nb);
        let cpg = self.channels / self.groups;
        let per = (cpg * s) as f64;
        let g = self.gain.of(p);
        for c in 0..self.channels {
            let r = c * nb * s..(c + 1) * nb * s;
            let dg: f64 = dy[r.clone()].iter().zip(&cache.xhat[r.clone()]).map(|(a, b)| a * b).sum();
            let db: f64 = dy[r].iter().sum();
            self.gain.of_mut(grads)[c] += dg;
            self.bias.of_mut(grads)[c] += db;
        }
        for b in 0..nb {
            for gi in 0..self.groups {
                let chans = gi * cpg..(gi + 1) * cpg;
                let (mut m1, mut m2) = (0.0, 0.0);
                for c in chans.clone() {
                    for i in self.chunk(c, b, nb, s) {
                        let d = dy[i] * g[c];
                        m1 += d;
                        m2 += d * cache.xhat[i];
                    }
                }
                m1 /= per;
                m2 /= per;
                let inv = cache.inv[b * self.groups + gi];
                for c in chans {
                    for i in self.chunk(c, b, nb, s) {
                        dx[i] += inv * (dy[i] * g[c] - m1 - cache.xhat[i] * m2);
                    }
                }
            }
        }
    }
}

pub fn silu_vec(x: &[f64]) -> Vec<f64> {
    x.iter().map(|&v| kernels::silu(v)).collect()
}

/// `dx += dy ⊙ silu'(x)`
pub fn silu_backward(x: &[f64], dy: &[f64], dx: &mut [f64]) {
    for ((d, &xi), &gi) in dx.iter_mut().zip(x).zip(dy) {
        *d += gi * kernels::silu_grad(xi);
    }
}

#[cfg(test)]
pub(crate) mod testing {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use crate::numerics::{grad_check, GradCheckOptions};
    use crate::params::ParamLayout;

    pub fn randn(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    /// Fills every parameter (including zero-initialized ones) with noise so
    /// that no gradient path is trivially dead.
    pub fn random_params(layout: &ParamLayout, seed: u64) -> Vec<f64> {
        randn(layout.len(), seed).into_iter().map(|v| 0.5 * v).collect()
    }

    /// Checks the parameter gradient of `loss` (which must also return the
    /// analytic gradient) and returns the max relative error.
    pub fn check_params(
        params: &[f64],
        loss: impl Fn(&[f64]) -> (f64, Vec<f64>),
    ) -> f64 {
        let (_, g) = loss(params);
        grad_check(|w| loss(w).0, &g, params, &GradCheckOptions::default())
            .unwrap()
            .max_rel_err
    }

    /// Same, for the gradient with respect to an input vector.
    pub fn check_input(x: &[f64], loss: impl Fn(&[f64]) -> (f64, Vec<f64>)) -> f64 {
        let (_, g) = loss(x);
        grad_check(|w| loss(w).0, &g, x, &GradCheckOptions::default())
            .unwrap()
            .max_rel_err
    }
}
