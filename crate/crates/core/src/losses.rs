//! Training objective: classification, shift regression, direction alignment,
//! mask BCE, redirected-embedding error, and an L2 penalty on Δ.
//!
//! Per-sample contributions are divided by batch-wide normalizers
//! ([`BatchNorms`]), so gradients of disjoint sub-batches add up to the
//! full-batch gradient exactly.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::heads::GuidanceOutput;
use crate::model::{Ablations, OutputGrads};
use crate::numerics::{kernels, NORM_EPS};
use crate::redirection::{redirect, redirect_backward};

/// Probability clamp used by the mask BCE.
pub const BCE_CLAMP: f64 = 1e-7;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_cls: f64,
    pub lambda_mse: f64,
    pub lambda_cos: f64,
    pub lambda_mask: f64,
    pub lambda_alpha: f64,
    pub smoothing_eps: f64,
    pub conf_penalty_w: f64,
    pub l2_delta_w: f64,
    /// Restrict the shift regression to pseudo-masked tokens.
    pub mask_mode: bool,
    /// Average the direction loss per masked token instead of per flattened sample.
    pub per_token_cos: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_cls: 1.0,
            lambda_mse: 0.5,
            lambda_cos: 0.1,
            lambda_mask: 0.1,
            lambda_alpha: 1.0,
            smoothing_eps: 0.05,
            conf_penalty_w: 0.01,
            l2_delta_w: 1e-4,
            mask_mode: false,
            per_token_cos: false,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.lambda_cls,
            self.lambda_mse,
            self.lambda_cos,
            self.lambda_mask,
            self.lambda_alpha,
            self.conf_penalty_w,
            self.l2_delta_w,
        ];
        if all.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::Config("loss weights must be finite and non-negative".into()));
        }
        if !(0.0..0.5).contains(&self.smoothing_eps) {
            return Err(Error::Config(format!("smoothing_eps {} outside [0, 0.5)", self.smoothing_eps)));
        }
        Ok(())
    }

    /// Weights after applying the loss-side ablation flags.
    pub fn effective(&self, a: &Ablations) -> LossWeights {
        let mut w = self.clone();
        if a.no_mse {
            w.lambda_mse = 0.0;
        }
        if a.no_cos {
            w.lambda_cos = 0.0;
        }
        if a.no_mask {
            w.lambda_mask = 0.0;
        }
        if a.no_conf {
            w.conf_penalty_w = 0.0;
        }
        if a.no_smoothing {
            w.smoothing_eps = 0.0;
        }
        if a.no_reg {
            w.l2_delta_w = 0.0;
        }
        w
    }
}

/// One value per loss term.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub cls: f64,
    pub mse: f64,
    pub cos: f64,
    pub mask: f64,
    pub alpha: f64,
    pub reg: f64,
}

impl LossTerms {
    pub fn sum(&self) -> f64 {
        self.cls + self.mse + self.cos + self.mask + self.alpha + self.reg
    }

    pub fn add(&mut self, o: &LossTerms) {
        self.cls += o.cls;
        self.mse += o.mse;
        self.cos += o.cos;
        self.mask += o.mask;
        self.alpha += o.alpha;
        self.reg += o.reg;
    }

    /// Multiplies each raw term by its weight.
    pub fn weighted(&self, w: &LossWeights) -> LossTerms {
        LossTerms {
            cls: w.lambda_cls * self.cls,
            mse: w.lambda_mse * self.mse,
            cos: w.lambda_cos * self.cos,
            mask: w.lambda_mask * self.mask,
            alpha: w.lambda_alpha * self.alpha,
            reg: w.l2_delta_w * self.reg,
        }
    }

    pub fn all_finite(&self) -> bool {
        [self.cls, self.mse, self.cos, self.mask, self.alpha, self.reg]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// Supervision for one sample.
#[derive(Clone, Copy, Debug)]
pub struct SampleTarget<'a> {
    pub label: u8,
    /// The prompt the model saw (`emb_unsafe` for unsafe items).
    pub p_emb: &'a [f64],
    pub emb_safe: &'a [f64],
    pub emb_unsafe: &'a [f64],
    pub m_star: &'a [f64],
}

/// Batch-wide counts that turn per-sample sums into batch means.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct BatchNorms {
    pub items: usize,
    pub unsafe_items: usize,
    /// Σ L over unsafe items.
    pub unsafe_tokens: usize,
    /// Σ m* over unsafe items.
    pub masked_tokens: usize,
    pub d: usize,
}

impl BatchNorms {
    pub fn from_targets<'a>(targets: impl IntoIterator<Item = SampleTarget<'a>>, d: usize) -> Self {
        let mut n = BatchNorms { d, ..Default::default() };
        for t in targets {
            n.items += 1;
            if t.label == 1 {
                n.unsafe_items += 1;
                n.unsafe_tokens += t.m_star.len();
                n.masked_tokens += t.m_star.iter().filter(|&&m| m == 1.0).count();
            }
        }
        n
    }
}

fn log_softmax2(z: [f64; 2]) -> [f64; 2] {
    let m = z[0].max(z[1]);
    let lse = m + ((z[0] - m).exp() + (z[1] - m).exp()).ln();
    [z[0] - lse, z[1] - lse]
}

/// Smoothed cross entropy minus `conf_w` times prediction entropy, and its
/// gradient with respect to the logits.
pub fn cls_term(logits: [f64; 2], label: u8, smoothing: f64, conf_w: f64) -> (f64, [f64; 2]) {
    let lp = log_softmax2(logits);
    let p = [lp[0].exp(), lp[1].exp()];
    let mut y = [smoothing / 2.0; 2];
    y[label as usize] += 1.0 - smoothing;
    let ce = -(y[0] * lp[0] + y[1] * lp[1]);
    let h = -(p[0] * lp[0] + p[1] * lp[1]);
    let mut g = [p[0] - y[0], p[1] - y[1]];
    if conf_w != 0.0 {
        for i in 0..2 {
            g[i] += conf_w * p[i] * (lp[i] + h);
        }
    }
    (ce - conf_w * h, g)
}

/// Mean classification loss over a batch.
pub fn loss_cls(logits: &[[f64; 2]], labels: &[u8], w: &LossWeights) -> Result<f64> {
    if logits.len() != labels.len() || labels.iter().any(|&l| l > 1) {
        return Err(Error::dim("logits and binary labels must pair up"));
    }
    if logits.is_empty() {
        return Ok(0.0);
    }
    let s: f64 = logits
        .iter()
        .zip(labels)
        .map(|(z, &y)| cls_term(*z, y, w.smoothing_eps, w.conf_penalty_w).0)
        .sum();
    Ok(s / logits.len() as f64)
}

fn shift(emb_safe: &[f64], emb_unsafe: &[f64]) -> Vec<f64> {
    emb_safe.iter().zip(emb_unsafe).map(|(s, u)| s - u).collect()
}

/// Mean squared error between Δ and `safe − unsafe`, optionally restricted to
/// tokens whose `mask` entry is 1. An empty restriction yields 0.
pub fn loss_mse(delta: &[f64], emb_safe: &[f64], emb_unsafe: &[f64], mask: Option<&[f64]>, d: usize) -> f64 {
    let target = shift(emb_safe, emb_unsafe);
    let mut sum = 0.0;
    let mut n = 0usize;
    for (i, (dr, tr)) in delta.chunks_exact(d).zip(target.chunks_exact(d)).enumerate() {
        if mask.is_some_and(|m| m[i] != 1.0) {
            continue;
        }
        sum += dr.iter().zip(tr).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        n += d;
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// `1 − cos(flatten Δ, flatten shift)` for one sample.
pub fn loss_cos(delta: &[f64], emb_safe: &[f64], emb_unsafe: &[f64]) -> f64 {
    1.0 - kernels::cosine(delta, &shift(emb_safe, emb_unsafe), NORM_EPS)
}

/// Mean binary cross entropy with probabilities clamped to `[1e-7, 1 − 1e-7]`.
pub fn loss_mask(pred: &[f64], target: &[f64]) -> f64 {
    if pred.is_empty() {
        return 0.0;
    }
    pred.iter().zip(target).map(|(&m, &t)| bce(m, t).0).sum::<f64>() / pred.len() as f64
}

fn bce(m: f64, t: f64) -> (f64, f64) {
    let c = m.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
    let v = -(t * c.ln() + (1.0 - t) * (1.0 - c).ln());
    let g = if m == c { -t / c + (1.0 - t) / (1.0 - c) } else { 0.0 };
    (v, g)
}

/// Mean squared distance between the redirected and the safe embedding.
pub fn loss_alpha(p_hat: &[f64], emb_safe: &[f64]) -> f64 {
    if p_hat.is_empty() {
        return 0.0;
    }
    p_hat.iter().zip(emb_safe).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / p_hat.len() as f64
}

/// Raw (unweighted) and weighted per-term values plus the total.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub raw: LossTerms,
    pub weighted: LossTerms,
    pub total: f64,
}

impl LossBreakdown {
    pub fn add(&mut self, o: &LossBreakdown) {
        self.raw.add(&o.raw);
        self.weighted.add(&o.weighted);
        self.total += o.total;
    }
}

/// One sample's share of the batch objective and the gradient of that share
/// with respect to the head outputs. `w` must already be the effective weights.
pub fn sample_loss(out: &GuidanceOutput, tgt: &SampleTarget, w: &LossWeights, norms: &BatchNorms) -> (LossBreakdown, OutputGrads) {
    let d = norms.d;
    let l = out.mask.len();
    let mut raw = LossTerms::default();
    let mut g = OutputGrads::zeros(l, d);

    if w.lambda_cls > 0.0 && norms.items > 0 {
        let inv = 1.0 / norms.items as f64;
        let (v, dz) = cls_term(out.logits, tgt.label, w.smoothing_eps, w.conf_penalty_w);
        raw.cls = v * inv;
        g.logits = [w.lambda_cls * dz[0] * inv, w.lambda_cls * dz[1] * inv];
    }

    if tgt.label == 1 {
        let target = shift(tgt.emb_safe, tgt.emb_unsafe);
        if w.lambda_mse > 0.0 {
            let denom = if w.mask_mode { norms.masked_tokens } else { norms.unsafe_tokens } * d;
            if denom > 0 {
                let inv = 1.0 / denom as f64;
                for i in 0..l {
                    if w.mask_mode && tgt.m_star[i] != 1.0 {
                        continue;
                    }
                    for j in i * d..(i + 1) * d {
                        let e = out.delta[j] - target[j];
                        raw.mse += e * e * inv;
                        g.delta[j] += w.lambda_mse * 2.0 * e * inv;
                    }
                }
            }
        }
        if w.lambda_cos > 0.0 {
            if w.per_token_cos {
                let masked: Vec<usize> = (0..l).filter(|&i| tgt.m_star[i] == 1.0).collect();
                if norms.masked_tokens > 0 {
                    let inv = 1.0 / norms.masked_tokens as f64;
                    for i in masked {
                        let r = i * d..(i + 1) * d;
                        raw.cos += (1.0 - kernels::cosine(&out.delta[r.clone()], &target[r.clone()], NORM_EPS)) * inv;
                        kernels::cosine_grad_a(&out.delta[r.clone()], &target[r.clone()], NORM_EPS, -w.lambda_cos * inv, &mut g.delta[r]);
                    }
                }
            } else if norms.unsafe_items > 0 {
                let inv = 1.0 / norms.unsafe_items as f64;
                raw.cos = (1.0 - kernels::cosine(&out.delta, &target, NORM_EPS)) * inv;
                kernels::cosine_grad_a(&out.delta, &target, NORM_EPS, -w.lambda_cos * inv, &mut g.delta);
            }
        }
        if w.lambda_mask > 0.0 && norms.unsafe_tokens > 0 {
            let inv = 1.0 / norms.unsafe_tokens as f64;
            for i in 0..l {
                let (v, dm) = bce(out.mask[i], tgt.m_star[i]);
                raw.mask += v * inv;
                g.mask[i] += w.lambda_mask * dm * inv;
            }
        }
        if w.lambda_alpha > 0.0 && norms.unsafe_tokens > 0 {
            let inv = 1.0 / (norms.unsafe_tokens * d) as f64;
            let r = redirect(tgt.p_emb, &out.delta, &out.mask, &out.alpha, 1.0, None, d).expect("shapes checked by the model");
            let mut dp = vec![0.0; l * d];
            for j in 0..l * d {
                let e = r.p_hat[j] - tgt.emb_safe[j];
                raw.alpha += e * e * inv;
                dp[j] = w.lambda_alpha * 2.0 * e * inv;
            }
            let (dd, dm, da) = redirect_backward(&out.delta, &out.mask, &out.alpha, 1.0, &r.per_token_norms, &dp, d);
            kernels::axpy(1.0, &dd, &mut g.delta);
            kernels::axpy(1.0, &dm, &mut g.mask);
            kernels::axpy(1.0, &da, &mut g.alpha);
        }
        if w.l2_delta_w > 0.0 && norms.unsafe_tokens > 0 {
            let inv = 1.0 / (norms.unsafe_tokens * d) as f64;
            for j in 0..l * d {
                raw.reg += out.delta[j] * out.delta[j] * inv;
                g.delta[j] += w.l2_delta_w * 2.0 * out.delta[j] * inv;
            }
        }
    }
    let weighted = raw.weighted(w);
    let total = weighted.sum();
    (LossBreakdown { raw, weighted, total }, g)
}

/// Full-batch objective (no gradients), summing [`sample_loss`] contributions.
pub fn total_loss(outputs: &[GuidanceOutput], targets: &[SampleTarget], w: &LossWeights, d: usize) -> Result<LossBreakdown> {
    if outputs.len() != targets.len() {
        return Err(Error::dim(format!("{} outputs for {} targets", outputs.len(), targets.len())));
    }
    let norms = BatchNorms::from_targets(targets.iter().copied(), d);
    let mut acc = LossBreakdown::default();
    for (o, t) in outputs.iter().zip(targets) {
        acc.add(&sample_loss(o, t, w, &norms).0);
    }
    Ok(acc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::testing::randn;
    use proptest::prelude::*;

    const D: usize = 3;

    #[test]
    fn smoothed_targets_and_uniform_logits() {
        let (v, _) = cls_term([0.0, 0.0], 1, 0.0, 0.0);
        assert!((v - 2f64.ln()).abs() < 1e-15);
        // Gradient at the target distribution vanishes only at p = y_smooth.
        let z = [0.025f64.ln(), 0.975f64.ln()];
        let (_, g) = cls_term(z, 1, 0.05, 0.0);
        assert!(g[0].abs() < 1e-15 && g[1].abs() < 1e-15);
    }

    #[test]
    fn confidence_penalty_is_smallest_at_uniform() {
        let pen = |z: [f64; 2]| cls_term(z, 0, 0.0, 1.0).0 - cls_term(z, 0, 0.0, 0.0).0;
        let uniform = pen([0.0, 0.0]);
        for z in [[1.0, 0.0], [-2.0, 0.5], [0.0, 4.0]] {
            assert!(pen(z) > uniform);
        }
    }

    #[test]
    fn cls_gradient_matches_difference() {
        for label in [0u8, 1] {
            let z = [0.7, -0.4];
            let (_, g) = cls_term(z, label, 0.05, 0.3);
            for i in 0..2 {
                let (mut a, mut b) = (z, z);
                a[i] += 1e-6;
                b[i] -= 1e-6;
                let fd = (cls_term(a, label, 0.05, 0.3).0 - cls_term(b, label, 0.05, 0.3).0) / 2e-6;
                assert!((fd - g[i]).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn mse_examples_and_loop_oracle() {
        let s = randn(4 * D, 1);
        let u = randn(4 * D, 2);
        let sh: Vec<f64> = s.iter().zip(&u).map(|(a, b)| a - b).collect();
        assert_eq!(loss_mse(&sh, &s, &u, None, D), 0.0);
        let plus: Vec<f64> = sh.iter().map(|v| v + 1.0).collect();
        assert!((loss_mse(&plus, &s, &u, None, D) - 1.0).abs() < 1e-12);
        let delta = randn(4 * D, 3);
        let mut naive = 0.0;
        for l in 0..4 {
            for k in 0..D {
                let i = l * D + k;
                naive += (delta[i] - (s[i] - u[i])).powi(2);
            }
        }
        assert!((loss_mse(&delta, &s, &u, None, D) - naive / 12.0).abs() <= 1e-12);
        assert_eq!(loss_mse(&delta, &s, &u, Some(&[0.0; 4]), D), 0.0);
    }

    #[test]
    fn cos_examples() {
        let s = randn(2 * D, 1);
        let u = randn(2 * D, 2);
        let sh: Vec<f64> = s.iter().zip(&u).map(|(a, b)| a - b).collect();
        let scaled: Vec<f64> = sh.iter().map(|v| 2.5 * v).collect();
        let neg: Vec<f64> = sh.iter().map(|v| -v).collect();
        assert!(loss_cos(&scaled, &s, &u).abs() < 1e-12);
        assert!((loss_cos(&neg, &s, &u) - 2.0).abs() < 1e-12);
        let orth = [1.0, 0.0];
        assert!((loss_cos(&orth, &[0.0, 1.0], &[0.0, 0.0]) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn mask_bce_examples_and_loop_oracle() {
        let t = [1.0, 0.0, 1.0];
        assert!(loss_mask(&t, &t) <= 1e-6);
        assert!((loss_mask(&[0.5; 3], &t) - 2f64.ln()).abs() < 1e-15);
        let p: [f64; 4] = [0.2, 0.7, 0.9, 0.05];
        let tt = [1.0, 0.0, 1.0, 0.0];
        let mut naive = 0.0;
        for i in 0..4 {
            naive -= tt[i] * p[i].ln() + (1.0 - tt[i]) * (1.0 - p[i]).ln();
        }
        assert!((loss_mask(&p, &tt) - naive / 4.0).abs() <= 1e-12);
    }

    #[test]
    fn alpha_examples() {
        let s = randn(2 * D, 1);
        assert_eq!(loss_alpha(&s, &s), 0.0);
        let p: Vec<f64> = s.iter().map(|v| v + 2.0).collect();
        assert!((loss_alpha(&p, &s) - 4.0).abs() < 1e-12);
    }

    fn crafted() -> (GuidanceOutput, Vec<f64>, Vec<f64>, Vec<f64>) {
        // One unsafe token whose terms can be read off by hand.
        let safe = vec![1.0, 0.0, 0.0];
        let unsafe_ = vec![0.0, 1.0, 0.0];
        let m_star = vec![1.0];
        let out = GuidanceOutput {
            logits: [0.3, -0.2],
            delta: vec![0.5, -0.1, 0.2],
            mask: vec![0.6],
            alpha: vec![0.4],
        };
        (out, safe, unsafe_, m_star)
    }

    #[test]
    fn breakdown_sums_and_zero_weights() {
        let (out, s, u, m) = crafted();
        let t = SampleTarget { label: 1, p_emb: &u, emb_safe: &s, emb_unsafe: &u, m_star: &m };
        let w = LossWeights::default();
        let b = total_loss(std::slice::from_ref(&out), &[t], &w, D).unwrap();
        assert!((b.weighted.sum() - b.total).abs() <= 1e-12);
        assert!(b.raw.cls > 0.0 && b.raw.mse > 0.0 && b.raw.cos > 0.0 && b.raw.mask > 0.0 && b.raw.alpha > 0.0);
        let zero = LossWeights {
            lambda_cls: 0.0,
            lambda_mse: 0.0,
            lambda_cos: 0.0,
            lambda_mask: 0.0,
            lambda_alpha: 0.0,
            l2_delta_w: 0.0,
            ..w
        };
        assert_eq!(total_loss(&[out], &[t], &zero, D).unwrap().total, 0.0);
    }

    #[test]
    fn unit_terms_weigh_to_default_total() {
        let raw = LossTerms { cls: 1.0, mse: 1.0, cos: 1.0, mask: 1.0, alpha: 1.0, reg: 0.0 };
        let w = LossWeights::default();
        assert!((raw.weighted(&w).sum() - 2.7).abs() < 1e-12);
    }

    #[test]
    fn safe_items_only_feed_classification() {
        let (out, s, _, _) = crafted();
        let t = SampleTarget { label: 0, p_emb: &s, emb_safe: &s, emb_unsafe: &s, m_star: &[0.0] };
        let b = total_loss(&[out], &[t], &LossWeights::default(), D).unwrap();
        assert_eq!(b.raw.mse + b.raw.cos + b.raw.mask + b.raw.alpha + b.raw.reg, 0.0);
        assert!(b.raw.cls > 0.0);
    }

    #[test]
    fn sample_gradient_matches_difference() {
        let s = randn(3 * D, 4);
        let u = randn(3 * D, 5);
        let m = vec![1.0, 0.0, 1.0];
        let t = SampleTarget { label: 1, p_emb: &u, emb_safe: &s, emb_unsafe: &u, m_star: &m };
        let norms = BatchNorms { items: 3, unsafe_items: 2, unsafe_tokens: 5, masked_tokens: 3, d: D };
        let unpack = |x: &[f64]| GuidanceOutput {
            logits: [x[0], x[1]],
            delta: x[2..11].to_vec(),
            mask: x[11..14].to_vec(),
            alpha: x[14..17].to_vec(),
        };
        let mut x = randn(11, 6);
        x.extend([0.3, 0.7, 0.45, 0.2, 0.8, 0.6]);
        for per_token_cos in [false, true] {
            for mask_mode in [false, true] {
                let w = LossWeights { per_token_cos, mask_mode, l2_delta_w: 0.3, ..Default::default() };
                let (_, g) = sample_loss(&unpack(&x), &t, &w, &norms);
                let ga: Vec<f64> = g.logits.iter().chain(&g.delta).chain(&g.mask).chain(&g.alpha).copied().collect();
                let r = crate::numerics::grad_check(|x| sample_loss(&unpack(x), &t, &w, &norms).0.total, &ga, &x, &Default::default()).unwrap();
                assert!(r.max_rel_err < 1e-6, "{r:?}");
            }
        }
    }

    #[test]
    fn ablations_zero_their_terms() {
        let w = LossWeights::default();
        let a = Ablations { no_mse: true, no_cos: true, no_mask: true, no_conf: true, no_smoothing: true, no_reg: true, ..Default::default() };
        let e = w.effective(&a);
        assert_eq!((e.lambda_mse, e.lambda_cos, e.lambda_mask, e.conf_penalty_w, e.smoothing_eps, e.l2_delta_w), (0.0, 0.0, 0.0, 0.0, 0.0, 0.0));
        assert_eq!((e.lambda_cls, e.lambda_alpha), (1.0, 1.0));
        assert!(LossWeights { smoothing_eps: 0.5, ..w.clone() }.validate().is_err());
        assert!(LossWeights { lambda_cos: -1.0, ..w }.validate().is_err());
    }

    proptest! {
        #[test]
        fn losses_non_negative(seed in 0u64..1000, label in 0u8..2) {
            let z = randn(2, seed);
            let (v, _) = cls_term([z[0] * 5.0, z[1] * 5.0], label, 0.05, 0.01);
            prop_assert!(v >= 0.0);
            let p: Vec<f64> = randn(4, seed + 1).iter().map(|v| 0.5 + 0.49 * v).collect();
            let t: Vec<f64> = randn(4, seed + 2).iter().map(|v| if *v > 0.0 { 1.0 } else { 0.0 }).collect();
            prop_assert!(loss_mask(&p, &t) >= 0.0);
            let d = randn(6, seed + 3);
            prop_assert!(loss_mse(&d, &randn(6, seed + 4), &randn(6, seed + 5), None, D) >= 0.0);
            prop_assert!(loss_cos(&d, &randn(6, seed + 4), &randn(6, seed + 5)) >= 0.0);
        }
    }
}
