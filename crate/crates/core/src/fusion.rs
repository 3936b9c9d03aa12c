//! Multi-head cross-attention with the joint context as a single global query.

use crate::error::{Error, Result};
use crate::layers::{LayerNorm, LayerNormCache, Linear};
use crate::numerics::kernels;
use crate::params::ParamLayout;

#[derive(Clone, Debug)]
pub struct CrossAttention {
    wq: Linear,
    wk: Linear,
    wv: Linear,
    wo: Linear,
    norm: LayerNorm,
    pub d: usize,
    pub heads: usize,
}

/// Fused output for one sample.
#[derive(Clone, Debug, Default)]
pub struct Fused {
    pub f_attn: Vec<f64>,
    /// `heads × L`, each row sums to 1.
    pub weights: Vec<f64>,
}

#[derive(Clone, Debug, Default)]
pub struct FusionCache {
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    o: Vec<f64>,
    norm: LayerNormCache,
}

impl CrossAttention {
    pub fn new(layout: &mut ParamLayout, joint_dim: usize, d: usize, heads: usize) -> Self {
        assert!(heads > 0 && d % heads == 0, "model width must split evenly across heads");
        CrossAttention {
            wq: Linear::new(layout, "fusion.q", joint_dim, d, false),
            wk: Linear::new(layout, "fusion.k", d, d, false),
            wv: Linear::new(layout, "fusion.v", d, d, false),
            wo: Linear::new(layout, "fusion.o", d, d, false),
            norm: LayerNorm::new(layout, "fusion.norm", d),
            d,
            heads,
        }
    }

    fn head_dim(&self) -> usize {
        self.d / self.heads
    }

    /// `tokens` is `L × D`.
    pub fn forward(&self, p: &[f64], f_joint: &[f64], tokens: &[f64]) -> Result<(Fused, FusionCache)> {
        let d = self.d;
        let l = tokens.len() / d;
        if l == 0 || tokens.len() % d != 0 {
            return Err(Error::Domain(format!("cross-attention needs at least one {d}-wide token")));
        }
        let dh = self.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let q = self.wq.forward(p, f_joint, 1);
        let k = self.wk.forward(p, tokens, l);
        let v = self.wv.forward(p, tokens, l);
        let mut weights = vec![0.0; self.heads * l];
        let mut o = vec![0.0; d];
        for h in 0..self.heads {
            let qh = &q[h * dh..(h + 1) * dh];
            let row = &mut weights[h * l..(h + 1) * l];
            for (j, s) in row.iter_mut().enumerate() {
                *s = kernels::dot(qh, &k[j * d + h * dh..j * d + (h + 1) * dh]) * scale;
            }
            kernels::softmax_inplace(row);
            let oh = &mut o[h * dh..(h + 1) * dh];
            for (j, &a) in row.iter().enumerate() {
                kernels::axpy(a, &v[j * d + h * dh..j * d + (h + 1) * dh], oh);
            }
        }
        let hidden = self.wo.forward(p, &o, 1);
        let (f_attn, norm) = self.norm.forward(p, &hidden);
        Ok((Fused { f_attn, weights }, FusionCache { q, k, v, o, norm }))
    }

    /// Accumulates parameter gradients and `df_joint`; `dtokens` is optional
    /// since tokens are usually data.
    #[allow(clippy::too_many_arguments)]
    pub fn backward(
        &self,
        p: &[f64],
        g: &mut [f64],
        f_joint: &[f64],
        tokens: &[f64],
        fused: &Fused,
        cache: &FusionCache,
        df_attn: &[f64],
        df_joint: Option<&mut [f64]>,
        dtokens: Option<&mut [f64]>,
    ) {
        let d = self.d;
        let l = tokens.len() / d;
        let dh = self.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let mut dhidden = vec![0.0; d];
        self.norm.backward(p, g, &cache.norm, df_attn, &mut dhidden);
        let mut do_ = vec![0.0; d];
        self.wo.backward(p, g, &cache.o, 1, &dhidden, Some(&mut do_));

        let mut dq = vec![0.0; d];
        let mut dk = vec![0.0; l * d];
        let mut dv = vec![0.0; l * d];
        let mut da = vec![0.0; l];
        let mut ds = vec![0.0; l];
        for h in 0..self.heads {
            let hs = h * dh..(h + 1) * dh;
            let a = &fused.weights[h * l..(h + 1) * l];
            let doh = &do_[hs.clone()];
            for j in 0..l {
                let off = j * d + h * dh;
                kernels::axpy(a[j], doh, &mut dv[off..off + dh]);
                da[j] = kernels::dot(doh, &cache.v[off..off + dh]);
            }
            kernels::softmax_backward(a, &da, &mut ds);
            let qh = &cache.q[hs.clone()];
            for j in 0..l {
                let off = j * d + h * dh;
                let sj = ds[j] * scale;
                kernels::axpy(sj, &cache.k[off..off + dh], &mut dq[hs.clone()]);
                kernels::axpy(sj, qh, &mut dk[off..off + dh]);
            }
        }
        match df_joint {
            Some(dj) => self.wq.backward(p, g, f_joint, 1, &dq, Some(dj)),
            None => self.wq.backward(p, g, f_joint, 1, &dq, None),
        }
        match dtokens {
            Some(dt) => {
                self.wk.backward(p, g, tokens, l, &dk, Some(&mut *dt));
                self.wv.backward(p, g, tokens, l, &dv, Some(dt));
            }
            None => {
                self.wk.backward(p, g, tokens, l, &dk, None);
                self.wv.backward(p, g, tokens, l, &dv, None);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::testing::*;

    fn setup(heads: usize) -> (ParamLayout, CrossAttention) {
        let mut l = ParamLayout::new();
        let ca = CrossAttention::new(&mut l, 10, 8, heads);
        (l, ca)
    }

    #[test]
    fn single_token_gets_all_weight() {
        let (l, ca) = setup(4);
        let p = random_params(&l, 1);
        let tok = randn(8, 2);
        let (f, _) = ca.forward(&p, &randn(10, 3), &tok).unwrap();
        assert_eq!(f.weights, vec![1.0; 4]);
        assert_eq!(f.f_attn.len(), 8);
        assert!(matches!(ca.forward(&p, &randn(10, 3), &[]), Err(Error::Domain(_))));
    }

    #[test]
    fn identical_tokens_get_uniform_weights() {
        let (l, ca) = setup(2);
        let p = random_params(&l, 1);
        let t = randn(8, 2);
        let tokens: Vec<f64> = t.iter().cycle().take(8 * 5).copied().collect();
        let (f, _) = ca.forward(&p, &randn(10, 3), &tokens).unwrap();
        for w in f.weights {
            assert!((w - 0.2).abs() < 1e-15);
        }
    }

    #[test]
    fn rows_sum_to_one_and_permutation_equivariance() {
        let (l, ca) = setup(4);
        let p = random_params(&l, 4);
        let j = randn(10, 5);
        let tokens = randn(6 * 8, 6);
        let (f, _) = ca.forward(&p, &j, &tokens).unwrap();
        for row in f.weights.chunks(6) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-10);
        }
        let perm = [3, 0, 5, 1, 4, 2];
        let permuted: Vec<f64> = perm.iter().flat_map(|&i| tokens[i * 8..(i + 1) * 8].to_vec()).collect();
        let (fp, _) = ca.forward(&p, &j, &permuted).unwrap();
        for h in 0..4 {
            for (new, &old) in perm.iter().enumerate() {
                assert!((fp.weights[h * 6 + new] - f.weights[h * 6 + old]).abs() < 1e-14);
            }
        }
        for (a, b) in fp.f_attn.iter().zip(&f.f_attn) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn gradients() {
        let (l, ca) = setup(2);
        let p = random_params(&l, 7);
        let j = randn(10, 8);
        let tokens = randn(5 * 8, 9);
        let w = randn(8, 10);
        let run = |p: &[f64], j: &[f64], t: &[f64]| {
            let (f, c) = ca.forward(p, j, t).unwrap();
            let mut g = vec![0.0; p.len()];
            let mut dj = vec![0.0; j.len()];
            let mut dt = vec![0.0; t.len()];
            ca.backward(p, &mut g, j, t, &f, &c, &w, Some(&mut dj), Some(&mut dt));
            (kernels::dot(&f.f_attn, &w), g, dj, dt)
        };
        let e = check_params(&p, |pp| { let r = run(pp, &j, &tokens); (r.0, r.1) });
        assert!(e < 1e-5, "{e}");
        let e = check_input(&j, |jj| { let r = run(&p, jj, &tokens); (r.0, r.2) });
        assert!(e < 1e-5, "{e}");
        let e = check_input(&tokens, |tt| { let r = run(&p, &j, tt); (r.0, r.3) });
        assert!(e < 1e-5, "{e}");
    }
}
