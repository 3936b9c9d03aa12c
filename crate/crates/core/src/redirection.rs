//! Token-level redirection arithmetic, pseudo-mask labeling and the fixed
//! baseline redirectors.

use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{kernels, NORM_EPS};

/// Default cosine-distance threshold for pseudo-mask labels.
pub const DEFAULT_TAU: f64 = 0.2;

#[derive(Clone, Debug, PartialEq)]
pub struct RedirectionResult {
    /// `L × D`
    pub p_hat: Vec<f64>,
    /// `L × D`, with `p_hat = p_emb + applied_shift`.
    pub applied_shift: Vec<f64>,
    /// Length `L`; the norms the shift was scaled by.
    pub per_token_norms: Vec<f64>,
}

fn check_shapes(p: &[f64], delta: &[f64], mask: &[f64], alpha: &[f64], d: usize) -> Result<usize> {
    if d == 0 || p.len() % d != 0 || delta.len() != p.len() {
        return Err(Error::dim(format!(
            "prompt ({}) and shift ({}) must be equal stacks of {d}-wide tokens",
            p.len(),
            delta.len()
        )));
    }
    let l = p.len() / d;
    if mask.len() != l || alpha.len() != l {
        return Err(Error::dim(format!(
            "mask ({}) and alpha ({}) must have one entry per token ({l})",
            mask.len(),
            alpha.len()
        )));
    }
    Ok(l)
}

/// Per-token Euclidean norms of an `L × D` stack.
pub fn token_norms(x: &[f64], d: usize) -> Vec<f64> {
    x.chunks_exact(d).map(kernels::norm2).collect()
}

/// `p̂ = p + s · α · (Δ⊙m)/(‖Δ⊙m‖ + ε) · n`, per token, where `n` is
/// `ref_norm` if given and otherwise `‖p‖`.
pub fn redirect(
    p_emb: &[f64],
    delta: &[f64],
    mask: &[f64],
    alpha: &[f64],
    alpha_scale: f64,
    ref_norm: Option<&[f64]>,
    d: usize,
) -> Result<RedirectionResult> {
    let l = check_shapes(p_emb, delta, mask, alpha, d)?;
    if !(alpha_scale >= 0.0) {
        return Err(Error::Domain(format!("alpha_scale must be non-negative, got {alpha_scale}")));
    }
    let norms = match ref_norm {
        Some(n) if n.len() != l => {
            return Err(Error::dim(format!("reference norms have {} entries for {l} tokens", n.len())))
        }
        Some(n) => n.to_vec(),
        None => token_norms(p_emb, d),
    };
    let mut shift = vec![0.0; l * d];
    let mut filtered = vec![0.0; d];
    for i in 0..l {
        let r = i * d..(i + 1) * d;
        for (f, &v) in filtered.iter_mut().zip(&delta[r.clone()]) {
            *f = v * mask[i];
        }
        let denom = kernels::norm2(&filtered) + NORM_EPS;
        let coef = alpha_scale * alpha[i] * norms[i];
        for (s, &f) in shift[r].iter_mut().zip(&filtered) {
            *s = coef * (f / denom);
        }
    }
    let p_hat = p_emb.iter().zip(&shift).map(|(a, b)| a + b).collect();
    Ok(RedirectionResult {
        p_hat,
        applied_shift: shift,
        per_token_norms: norms,
    })
}

/// Gradients of a scalar objective with respect to `(Δ, m, α)` given its
/// gradient `dp_hat` with respect to the redirected embedding.
#[allow(clippy::too_many_arguments)]
pub fn redirect_backward(
    delta: &[f64],
    mask: &[f64],
    alpha: &[f64],
    alpha_scale: f64,
    norms: &[f64],
    dp_hat: &[f64],
    d: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let l = mask.len();
    let mut ddelta = vec![0.0; l * d];
    let mut dmask = vec![0.0; l];
    let mut dalpha = vec![0.0; l];
    let mut filtered = vec![0.0; d];
    let mut dfilt = vec![0.0; d];
    for i in 0..l {
        let r = i * d..(i + 1) * d;
        for (f, &v) in filtered.iter_mut().zip(&delta[r.clone()]) {
            *f = v * mask[i];
        }
        let rn = kernels::norm2(&filtered);
        let denom = rn + NORM_EPS;
        let g = &dp_hat[r.clone()];
        // α gradient: s · n · (Δ̃ · g)
        dalpha[i] = alpha_scale * norms[i] * kernels::dot(&filtered, g) / denom;
        let c = alpha_scale * alpha[i] * norms[i];
        let fg = kernels::dot(&filtered, g);
        let corr = if rn > 0.0 { c * fg / (rn * denom * denom) } else { 0.0 };
        for j in 0..d {
            dfilt[j] = c * g[j] / denom - corr * filtered[j];
        }
        dmask[i] = kernels::dot(&delta[r.clone()], &dfilt);
        for (dd, &df) in ddelta[r].iter_mut().zip(&dfilt) {
            *dd = mask[i] * df;
        }
    }
    (ddelta, dmask, dalpha)
}

/// `m*[l] = 1` iff `1 − cos(safe[l], unsafe[l]) > tau`. A zero-norm token has
/// cosine 0 and is therefore flagged.
pub fn build_pseudo_mask(emb_safe: &[f64], emb_unsafe: &[f64], d: usize, tau: f64) -> Result<Vec<f64>> {
    if d == 0 || emb_safe.len() != emb_unsafe.len() || emb_safe.len() % d != 0 {
        return Err(Error::dim(format!(
            "paired embeddings must be equal stacks of {d}-wide tokens, got {} and {}",
            emb_safe.len(),
            emb_unsafe.len()
        )));
    }
    Ok(emb_safe
        .chunks_exact(d)
        .zip(emb_unsafe.chunks_exact(d))
        .map(|(s, u)| if 1.0 - kernels::cosine(s, u, NORM_EPS) > tau { 1.0 } else { 0.0 })
        .collect())
}

/// Fixed-rule redirectors used as baselines.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// `p + prototype`
    DirectAdd,
    /// `p + (safe − unsafe)`
    PairDiff,
    /// `p + α·(safe − unsafe)`
    PairDiffScaled,
    /// `p + α·(safe − unsafe)` on pseudo-masked tokens only.
    PairDiffMasked,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [Strategy::DirectAdd, Strategy::PairDiff, Strategy::PairDiffScaled, Strategy::PairDiffMasked];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::DirectAdd => "direct_add",
            Strategy::PairDiff => "pair_diff",
            Strategy::PairDiffScaled => "pair_diff_scaled",
            Strategy::PairDiffMasked => "pair_diff_masked",
        }
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown redirection strategy {s:?}")))
    }
}

/// Alpha values for which the fixed baselines are tabulated.
pub const BASELINE_ALPHAS: [f64; 4] = [1.0, 1.5, 2.0, 3.0];

/// Applies a baseline strategy. `prototype` is the `D`-wide safe prototype used
/// by [`Strategy::DirectAdd`].
#[allow(clippy::too_many_arguments)]
pub fn baseline_redirect(
    strategy: Strategy,
    p_emb: &[f64],
    emb_safe: &[f64],
    emb_unsafe: &[f64],
    prototype: &[f64],
    alpha_fixed: f64,
    tau: f64,
    d: usize,
) -> Result<Vec<f64>> {
    if p_emb.len() != emb_safe.len() || p_emb.len() != emb_unsafe.len() || d == 0 || p_emb.len() % d != 0 {
        return Err(Error::dim("baseline inputs must share an L × D shape"));
    }
    let diff = |i: usize| emb_safe[i] - emb_unsafe[i];
    Ok(match strategy {
        Strategy::DirectAdd => {
            if prototype.len() != d {
                return Err(Error::dim(format!("prototype has width {}, expected {d}", prototype.len())));
            }
            p_emb.iter().enumerate().map(|(i, &v)| v + prototype[i % d]).collect()
        }
        Strategy::PairDiff => p_emb.iter().enumerate().map(|(i, &v)| v + diff(i)).collect(),
        Strategy::PairDiffScaled => p_emb.iter().enumerate().map(|(i, &v)| v + alpha_fixed * diff(i)).collect(),
        Strategy::PairDiffMasked => {
            let m = build_pseudo_mask(emb_safe, emb_unsafe, d, tau)?;
            p_emb
                .iter()
                .enumerate()
                .map(|(i, &v)| if m[i / d] == 1.0 { v + alpha_fixed * diff(i) } else { v })
                .collect()
        }
    })
}
