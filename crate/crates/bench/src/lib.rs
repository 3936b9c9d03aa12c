//! Shared fixtures for the criterion benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use promptredir::model::OutputGrads;
use promptredir::{Ablations, Model, ModelConfig, SampleInput};

/// Inputs for one batch, owned so that borrowed [`SampleInput`]s can be cut from it.
pub struct Batch {
    pub latents: Vec<Vec<f64>>,
    pub tokens: Vec<Vec<f64>>,
    pub steps: Vec<usize>,
}

impl Batch {
    pub fn random(config: &ModelConfig, size: usize, tokens: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut v = |n: usize| (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<f64>>();
        let latents = (0..size).map(|_| v(config.latent.len())).collect();
        let tokens = (0..size).map(|_| v(tokens * config.d_model)).collect();
        let steps = (0..size).map(|i| 1 + i % config.max_step).collect();
        Batch { latents, tokens, steps }
    }

    pub fn inputs(&self) -> Vec<SampleInput<'_>> {
        self.latents
            .iter()
            .zip(&self.tokens)
            .zip(&self.steps)
            .map(|((z, tok), &t)| SampleInput { z_t: z, t, tokens: tok })
            .collect()
    }

    /// Unit upstream gradients matching every output.
    pub fn unit_grads(&self, d: usize) -> Vec<OutputGrads> {
        self.tokens
            .iter()
            .map(|tok| {
                let l = tok.len() / d;
                OutputGrads { logits: [1.0, -1.0], delta: vec![1.0; l * d], mask: vec![1.0; l], alpha: vec![1.0; l] }
            })
            .collect()
    }
}

/// A freshly initialized model at `config`.
pub fn model(config: &ModelConfig, seed: u64) -> (Model, Vec<f64>) {
    let m = Model::new(config.clone(), Ablations::default()).expect("valid model config");
    let p = m.init_params(&mut ChaCha8Rng::seed_from_u64(seed));
    (m, p)
}

/// Random `tokens × d` embedding.
pub fn embedding(tokens: usize, d: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..tokens * d).map(|_| rng.gen_range(-1.0..1.0)).collect()
}
