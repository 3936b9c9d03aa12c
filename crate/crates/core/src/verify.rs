//! Finite-difference verification of the full network, reported per module.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::model::{Ablations, Model, ModelConfig, OutputGrads, SampleInput};
use crate::numerics::{grad_check, kernels, GradCheckOptions};
use crate::params::Init;
use crate::training::MODULES;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckSettings {
    pub eps: f64,
    /// Prompt length of the probe samples.
    pub tokens: usize,
    /// Coordinates probed per tensor; smaller tensors are probed fully.
    pub per_tensor: usize,
    pub seed: u64,
}

impl Default for GradCheckSettings {
    fn default() -> Self {
        GradCheckSettings {
            eps: 1e-5,
            tokens: 8,
            per_tensor: 24,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockReport {
    pub block: String,
    pub max_rel_err: f64,
    pub checked: usize,
    /// Tensor holding the worst coordinate.
    pub worst_tensor: Option<String>,
}

/// Checks the parameter gradient of a random linear read-out of every head
/// over a two-sample batch. Zero- and constant-initialized tensors are
/// perturbed first so that no path is trivially dead.
pub fn check_model_gradients(config: &ModelConfig, s: &GradCheckSettings) -> Result<Vec<BlockReport>> {
    let model = Model::new(config.clone(), Ablations::default())?;
    let mut rng = ChaCha8Rng::seed_from_u64(s.seed);
    let mut p = model.init_params(&mut rng);
    for e in model.layout().entries() {
        if matches!(e.init, Init::Zeros | Init::Constant(_)) {
            for v in e.slot().of_mut(&mut p) {
                *v += rng.gen_range(-0.1..0.1);
            }
        }
    }
    let d = config.d_model;
    let zl = config.latent.len();
    let mut noise = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect() };
    let z = noise(2 * zl);
    let tok = noise(2 * s.tokens * d);
    let xs = [
        SampleInput { z_t: &z[..zl], t: 1, tokens: &tok[..s.tokens * d] },
        SampleInput { z_t: &z[zl..], t: config.max_step, tokens: &tok[s.tokens * d..] },
    ];
    let ws: Vec<OutputGrads> = (0..2)
        .map(|_| OutputGrads {
            logits: [noise(1)[0], noise(1)[0]],
            delta: noise(s.tokens * d),
            mask: noise(s.tokens),
            alpha: noise(s.tokens),
        })
        .collect();
    let objective = |p: &[f64]| -> f64 {
        let (outs, _) = model.forward_batch::<ChaCha8Rng>(p, &xs, None).expect("probe inputs fit the model");
        outs.iter()
            .zip(&ws)
            .map(|(o, w)| {
                w.logits[0] * o.logits[0]
                    + w.logits[1] * o.logits[1]
                    + kernels::dot(&w.delta, &o.delta)
                    + kernels::dot(&w.mask, &o.mask)
                    + kernels::dot(&w.alpha, &o.alpha)
            })
            .sum()
    };
    let (_, cache) = model.forward_batch::<ChaCha8Rng>(&p, &xs, None)?;
    let mut g = vec![0.0; p.len()];
    model.backward_batch(&p, &mut g, &cache, &ws);

    let mut reports = Vec::with_capacity(MODULES.len());
    for module in MODULES {
        let mut block = BlockReport { block: module.to_string(), max_rel_err: 0.0, checked: 0, worst_tensor: None };
        for e in model.layout().entries().iter().filter(|e| e.name.split('.').next() == Some(module)) {
            let n = e.len();
            let picks: Vec<usize> = if n <= s.per_tensor {
                (0..n).collect()
            } else {
                index::sample(&mut rng, n, s.per_tensor).into_vec()
            };
            let coords = picks.into_iter().map(|i| e.offset + i).collect();
            let r = grad_check(objective, &g, &p, &GradCheckOptions { eps: s.eps, coords: Some(coords) })?;
            block.checked += r.checked;
            if r.max_rel_err > block.max_rel_err || block.worst_tensor.is_none() {
                block.max_rel_err = block.max_rel_err.max(r.max_rel_err);
                block.worst_tensor = Some(e.name.clone());
            }
        }
        reports.push(block);
    }
    Ok(reports)
}
