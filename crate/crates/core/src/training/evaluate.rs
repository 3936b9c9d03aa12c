use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, F1Counts};
use crate::error::Result;
use crate::heads::decide;
use crate::model::{Redirector, SampleInput};
use crate::numerics::{kernels, NORM_EPS};

/// Held-out quality of a detector/redirector.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub cls_accuracy: f64,
    /// Predicted mask (threshold 0.5) against m* on unsafe items.
    pub mask_f1: f64,
    /// Mean cosine between Δ and `safe − unsafe` over pseudo-masked tokens.
    pub delta_cosine: f64,
    /// Mean α over pseudo-masked tokens.
    pub alpha_mean: f64,
    pub items: usize,
}

pub fn evaluate(r: &dyn Redirector, data: &Dataset, indices: &[usize]) -> Result<EvalMetrics> {
    let d = data.config.d_model;
    let mut hits = 0;
    let mut f1 = F1Counts::default();
    let (mut cos_sum, mut alpha_sum, mut masked) = (0.0, 0.0, 0usize);
    let mut target = vec![0.0; d];
    for chunk in indices.chunks(128) {
        let items: Vec<_> = chunk.iter().map(|&i| data.item(i)).collect();
        let xs: Vec<SampleInput> = items
            .iter()
            .map(|it| SampleInput {
                z_t: &it.z_t,
                t: it.t,
                tokens: it.p_emb,
            })
            .collect();
        let outs = r.guide_batch(&xs)?;
        for (o, it) in outs.iter().zip(&items) {
            hits += usize::from(decide(o.logits, r.tie_unsafe()) == it.label);
            if it.label != 1 {
                continue;
            }
            f1.add(&o.mask, it.m_star);
            for (l, &m) in it.m_star.iter().enumerate() {
                if m != 1.0 {
                    continue;
                }
                let tok = l * d..(l + 1) * d;
                for (t, (s, u)) in target.iter_mut().zip(it.emb_safe[tok.clone()].iter().zip(&it.emb_unsafe[tok.clone()])) {
                    *t = s - u;
                }
                cos_sum += kernels::cosine(&o.delta[tok], &target, NORM_EPS);
                alpha_sum += o.alpha[l];
                masked += 1;
            }
        }
    }
    let per = |s: f64| if masked == 0 { 0.0 } else { s / masked as f64 };
    Ok(EvalMetrics {
        cls_accuracy: hits as f64 / indices.len().max(1) as f64,
        mask_f1: f1.f1(),
        delta_cosine: per(cos_sum),
        alpha_mean: per(alpha_sum),
        items: indices.len(),
    })
}
