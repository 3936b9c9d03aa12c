//! The full guidance network: encoders, fusion and the four heads, with a
//! per-sample forward/backward pair over the flat parameter vector.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoders::{token_dropout, LatentCache, LatentEncoder, LatentShape, TimestepCache, TimestepEncoder};
use crate::error::{Error, Result};
use crate::fusion::{CrossAttention, Fused, FusionCache};
use crate::heads::{AlphaCache, AlphaHead, Classifier, ClassifierCache, DeltaCache, DeltaGenerator, GuidanceOutput, MaskCache, MaskHead};
use crate::params::ParamLayout;

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Token embedding width D.
    pub d_model: usize,
    pub latent: LatentShape,
    pub block_widths: Vec<usize>,
    pub norm_groups: usize,
    pub latent_dim: usize,
    pub time_dim: usize,
    /// Largest valid timestep index T.
    pub max_step: usize,
    pub heads: usize,
    pub classifier_hidden: usize,
    /// Common per-token width inside the delta generator; `None` means 2·D.
    pub delta_width: Option<usize>,
    pub lora_rank: usize,
    pub mask_hidden: usize,
    pub alpha_hidden: usize,
    pub pos_dim: usize,
    pub mask_position: bool,
    pub token_dropout: f64,
    /// Resolve tied logits as unsafe.
    pub tie_unsafe: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 64,
            latent: LatentShape::default(),
            block_widths: vec![32, 64, 128],
            norm_groups: 8,
            latent_dim: 512,
            time_dim: 64,
            max_step: 50,
            heads: 4,
            classifier_hidden: 256,
            delta_width: None,
            lora_rank: 8,
            mask_hidden: 64,
            alpha_hidden: 64,
            pos_dim: 32,
            mask_position: true,
            token_dropout: 0.1,
            tie_unsafe: false,
        }
    }
}

impl ModelConfig {
    pub fn joint_dim(&self) -> usize {
        self.latent_dim + self.time_dim
    }

    pub fn delta_width(&self) -> usize {
        self.delta_width.unwrap_or(2 * self.d_model)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.d_model == 0 || self.heads == 0 || self.d_model % self.heads != 0 {
            return bad(format!("d_model {} must be a positive multiple of heads {}", self.d_model, self.heads));
        }
        if self.block_widths.is_empty() {
            return bad("at least one latent block is required".into());
        }
        if let Some(w) = self.block_widths.iter().find(|&&w| self.norm_groups == 0 || w % self.norm_groups.min(w) != 0) {
            return bad(format!("block width {w} does not split into {} groups", self.norm_groups));
        }
        if self.time_dim % 2 != 0 || self.pos_dim % 2 != 0 || self.time_dim == 0 || self.pos_dim == 0 {
            return bad("time_dim and pos_dim must be positive and even".into());
        }
        if self.latent.is_empty() || self.latent_dim == 0 || self.lora_rank == 0 {
            return bad("latent shape, latent_dim and lora_rank must be positive".into());
        }
        if !(0.0..1.0).contains(&self.token_dropout) {
            return bad(format!("token_dropout {} outside [0, 1)", self.token_dropout));
        }
        Ok(())
    }
}

/// Switches that remove one modality, head or loss term.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Ablations {
    pub no_mask: bool,
    pub no_alpha: bool,
    pub no_latent: bool,
    pub no_timestep: bool,
    pub no_prompt: bool,
    pub no_mse: bool,
    pub no_cos: bool,
    pub no_conf: bool,
    pub no_smoothing: bool,
    pub no_reg: bool,
}

impl Ablations {
    pub const NAMES: [&'static str; 10] = [
        "no_mask",
        "no_alpha",
        "no_latent",
        "no_timestep",
        "no_prompt",
        "no_mse",
        "no_cos",
        "no_conf",
        "no_smoothing",
        "no_reg",
    ];

    /// Turns on the flag called `name`.
    pub fn enable(&mut self, name: &str) -> Result<()> {
        let flag = match name.replace('-', "_").as_str() {
            "no_mask" => &mut self.no_mask,
            "no_alpha" => &mut self.no_alpha,
            "no_latent" => &mut self.no_latent,
            "no_timestep" => &mut self.no_timestep,
            "no_prompt" => &mut self.no_prompt,
            "no_mse" => &mut self.no_mse,
            "no_cos" => &mut self.no_cos,
            "no_conf" => &mut self.no_conf,
            "no_smoothing" => &mut self.no_smoothing,
            "no_reg" => &mut self.no_reg,
            other => {
                return Err(Error::Config(format!(
                    "unknown ablation {other:?}; expected one of {}",
                    Self::NAMES.join(", ")
                )))
            }
        };
        *flag = true;
        Ok(())
    }

    /// Prompt tokens only: the latent and step features are zeroed.
    pub fn text_only() -> Self {
        Ablations {
            no_latent: true,
            no_timestep: true,
            ..Self::default()
        }
    }

    /// Latent only: the prompt path into fusion and the step feature are zeroed.
    pub fn latent_only() -> Self {
        Ablations {
            no_prompt: true,
            no_timestep: true,
            ..Self::default()
        }
    }
}

/// Inputs for one sample.
#[derive(Clone, Copy, Debug)]
pub struct SampleInput<'a> {
    /// `C × H × W`
    pub z_t: &'a [f64],
    pub t: usize,
    /// `L × D` prompt embedding.
    pub tokens: &'a [f64],
}

/// Upstream gradients with respect to every head output.
#[derive(Clone, Debug, Default)]
pub struct OutputGrads {
    pub logits: [f64; 2],
    pub delta: Vec<f64>,
    pub mask: Vec<f64>,
    pub alpha: Vec<f64>,
}

impl OutputGrads {
    pub fn zeros(l: usize, d: usize) -> Self {
        OutputGrads {
            logits: [0.0; 2],
            delta: vec![0.0; l * d],
            mask: vec![0.0; l],
            alpha: vec![0.0; l],
        }
    }
}

/// Everything the backward pass needs from a forward pass.
#[derive(Clone, Debug, Default)]
pub struct ForwardCache {
    latent: Option<LatentCache>,
    timestep: Option<TimestepCache>,
    f_joint: Vec<f64>,
    fusion_tokens: Vec<f64>,
    delta_tokens: Vec<f64>,
    fused: Fused,
    fusion: FusionCache,
    classifier: ClassifierCache,
    delta: DeltaCache,
    mask: Option<MaskCache>,
    alpha: Option<AlphaCache>,
}

impl ForwardCache {
    pub fn f_joint(&self) -> &[f64] {
        &self.f_joint
    }

    pub fn fused(&self) -> &Fused {
        &self.fused
    }
}

/// Caches for a batched forward pass: one shared latent-encoder cache plus
/// the per-sample remainder.
#[derive(Clone, Debug, Default)]
pub struct BatchCache {
    latent: Option<LatentCache>,
    items: Vec<ForwardCache>,
}

impl BatchCache {
    pub fn items(&self) -> &[ForwardCache] {
        &self.items
    }
}

/// The guidance network. Weights live outside, in a flat vector laid out by
/// [`Model::layout`].
#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub ablations: Ablations,
    layout: ParamLayout,
    latent: LatentEncoder,
    timestep: TimestepEncoder,
    fusion: CrossAttention,
    classifier: Classifier,
    delta: DeltaGenerator,
    mask: MaskHead,
    alpha: AlphaHead,
}

impl Model {
    pub fn new(config: ModelConfig, ablations: Ablations) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let mut layout = ParamLayout::new();
        let latent = LatentEncoder::new(&mut layout, c.latent, &c.block_widths, c.norm_groups, c.latent_dim);
        let timestep = TimestepEncoder::new(&mut layout, c.time_dim, c.max_step);
        let fusion = CrossAttention::new(&mut layout, c.joint_dim(), c.d_model, c.heads);
        let classifier = Classifier::new(&mut layout, c.d_model, c.classifier_hidden);
        let delta = DeltaGenerator::new(&mut layout, c.joint_dim(), c.d_model, c.delta_width(), c.lora_rank);
        let mask = MaskHead::new(&mut layout, c.d_model, c.mask_hidden, c.pos_dim, c.mask_position);
        let alpha = AlphaHead::new(&mut layout, c.d_model, c.alpha_hidden, c.pos_dim);
        Ok(Model {
            config,
            ablations,
            layout,
            latent,
            timestep,
            fusion,
            classifier,
            delta,
            mask,
            alpha,
        })
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn num_params(&self) -> usize {
        self.layout.len()
    }

    pub fn init_params(&self, rng: &mut impl Rng) -> Vec<f64> {
        self.layout.initialize(rng)
    }

    pub fn alpha_gate_bias(&self) -> crate::params::Slot {
        self.alpha.gate_bias()
    }

    fn check_input(&self, p: &[f64], x: &SampleInput) -> Result<usize> {
        let d = self.config.d_model;
        if p.len() != self.layout.len() {
            return Err(Error::dim(format!("expected {} parameters, got {}", self.layout.len(), p.len())));
        }
        if x.z_t.len() != self.config.latent.len() {
            return Err(Error::dim(format!(
                "latent has {} values, model expects {}",
                x.z_t.len(),
                self.config.latent.len()
            )));
        }
        if x.tokens.is_empty() || x.tokens.len() % d != 0 {
            return Err(Error::dim(format!(
                "prompt embedding of {} values is not a non-empty stack of {d}-wide tokens",
                x.tokens.len()
            )));
        }
        if x.t > self.config.max_step {
            return Err(Error::Domain(format!("timestep {} outside [0, {}]", x.t, self.config.max_step)));
        }
        Ok(x.tokens.len() / d)
    }

    /// Joint context; `fz` supplies a precomputed latent feature.
    fn context(&self, p: &[f64], x: &SampleInput, fz: Option<&[f64]>) -> Result<(Vec<f64>, Option<LatentCache>, Option<TimestepCache>)> {
        let c = &self.config;
        let mut f_joint = vec![0.0; c.joint_dim()];
        let mut lc = None;
        let mut tc = None;
        if !self.ablations.no_latent {
            match fz {
                Some(fz) => f_joint[..c.latent_dim].copy_from_slice(fz),
                None => {
                    let (fz, cache) = self.latent.forward(p, x.z_t);
                    f_joint[..c.latent_dim].copy_from_slice(&fz);
                    lc = Some(cache);
                }
            }
        }
        if !self.ablations.no_timestep {
            let (ft, cache) = self.timestep.forward(p, x.t)?;
            f_joint[c.latent_dim..].copy_from_slice(&ft);
            tc = Some(cache);
        }
        Ok((f_joint, lc, tc))
    }

    fn prompt_path(&self, tokens: &[f64]) -> Vec<f64> {
        if self.ablations.no_prompt {
            vec![0.0; tokens.len()]
        } else {
            tokens.to_vec()
        }
    }

    /// Classifier logits only, in evaluation mode.
    pub fn classify(&self, p: &[f64], x: &SampleInput) -> Result<[f64; 2]> {
        self.check_input(p, x)?;
        self.classify_with(p, x, None)
    }

    fn classify_with(&self, p: &[f64], x: &SampleInput, fz: Option<&[f64]>) -> Result<[f64; 2]> {
        let (f_joint, _, _) = self.context(p, x, fz)?;
        let fusion_tokens = self.prompt_path(x.tokens);
        let (fused, _) = self.fusion.forward(p, &f_joint, &fusion_tokens)?;
        Ok(self.classifier.forward(p, &fused.f_attn).0)
    }

    /// Latent features for a batch in one pass, or `None` under `no_latent`.
    fn batch_latents(&self, p: &[f64], xs: &[SampleInput]) -> Result<Option<(Vec<f64>, LatentCache)>> {
        for x in xs {
            self.check_input(p, x)?;
        }
        if self.ablations.no_latent || xs.is_empty() {
            return Ok(None);
        }
        let mut z = Vec::with_capacity(xs.len() * self.config.latent.len());
        for x in xs {
            z.extend_from_slice(x.z_t);
        }
        Ok(Some(self.latent.forward_batch(p, &z, xs.len())))
    }

    /// Classifier logits for a batch, sharing one latent-encoder pass.
    pub fn classify_batch(&self, p: &[f64], xs: &[SampleInput]) -> Result<Vec<[f64; 2]>> {
        let lat = self.batch_latents(p, xs)?;
        let k = self.config.latent_dim;
        xs.iter()
            .enumerate()
            .map(|(i, x)| self.classify_with(p, x, lat.as_ref().map(|(f, _)| &f[i * k..(i + 1) * k])))
            .collect()
    }

    /// Batched form of [`Model::forward`]. Dropout draws follow sample order.
    pub fn forward_batch<R: Rng>(&self, p: &[f64], xs: &[SampleInput], mut dropout_rng: Option<&mut R>) -> Result<(Vec<GuidanceOutput>, BatchCache)> {
        let lat = self.batch_latents(p, xs)?;
        let k = self.config.latent_dim;
        let mut outs = Vec::with_capacity(xs.len());
        let mut items = Vec::with_capacity(xs.len());
        for (i, x) in xs.iter().enumerate() {
            let fz = lat.as_ref().map(|(f, _)| &f[i * k..(i + 1) * k]);
            let (o, c) = self.forward_with(p, x, fz, dropout_rng.as_deref_mut())?;
            outs.push(o);
            items.push(c);
        }
        Ok((
            outs,
            BatchCache {
                latent: lat.map(|(_, c)| c),
                items,
            },
        ))
    }

    /// Accumulates the gradient of a whole batch.
    pub fn backward_batch(&self, p: &[f64], g: &mut [f64], cache: &BatchCache, dys: &[OutputGrads]) {
        assert_eq!(cache.items.len(), dys.len(), "one output gradient per sample");
        let k = self.config.latent_dim;
        let mut dfz = vec![0.0; dys.len() * k];
        for (i, (c, dy)) in cache.items.iter().zip(dys).enumerate() {
            let df_joint = self.backward_heads(p, g, c, dy);
            dfz[i * k..(i + 1) * k].copy_from_slice(&df_joint[..k]);
        }
        if let Some(lc) = &cache.latent {
            self.latent.backward(p, g, lc, &dfz);
        }
    }

    /// Full forward pass. Token dropout is applied to the fusion input when
    /// `dropout_rng` is given (training mode).
    pub fn forward<R: Rng>(&self, p: &[f64], x: &SampleInput, dropout_rng: Option<&mut R>) -> Result<(GuidanceOutput, ForwardCache)> {
        self.check_input(p, x)?;
        self.forward_with(p, x, None, dropout_rng)
    }

    fn forward_with<R: Rng>(&self, p: &[f64], x: &SampleInput, fz: Option<&[f64]>, dropout_rng: Option<&mut R>) -> Result<(GuidanceOutput, ForwardCache)> {
        let d = self.config.d_model;
        let l = x.tokens.len() / d;
        let (f_joint, latent, timestep) = self.context(p, x, fz)?;
        let prompt = self.prompt_path(x.tokens);
        let fusion_tokens = match dropout_rng {
            Some(rng) => token_dropout(&prompt, d, self.config.token_dropout, true, rng).0,
            None => prompt.clone(),
        };
        let (fused, fusion) = self.fusion.forward(p, &f_joint, &fusion_tokens)?;
        let (logits, classifier) = self.classifier.forward(p, &fused.f_attn);
        let (delta, delta_cache) = self.delta.forward(p, &f_joint, &fused.f_attn, &prompt);
        let (mask, mask_cache) = if self.ablations.no_mask {
            (vec![1.0; l], None)
        } else {
            let (m, c) = self.mask.forward(p, x.tokens);
            (m, Some(c))
        };
        let (alpha, alpha_cache) = if self.ablations.no_alpha {
            (vec![1.0; l], None)
        } else {
            let (a, c) = self.alpha.forward(p, x.tokens);
            (a, Some(c))
        };
        let out = GuidanceOutput {
            logits,
            delta,
            mask,
            alpha,
        };
        let cache = ForwardCache {
            latent,
            timestep,
            f_joint,
            fusion_tokens,
            delta_tokens: prompt,
            fused,
            fusion,
            classifier,
            delta: delta_cache,
            mask: mask_cache,
            alpha: alpha_cache,
        };
        Ok((out, cache))
    }

    /// Evaluation-mode forward without caches.
    pub fn guidance(&self, p: &[f64], x: &SampleInput) -> Result<GuidanceOutput> {
        Ok(self.forward::<rand::rngs::ThreadRng>(p, x, None)?.0)
    }

    /// Accumulates the parameter gradient for upstream output gradients `dy` into `g`.
    pub fn backward(&self, p: &[f64], g: &mut [f64], cache: &ForwardCache, dy: &OutputGrads) {
        let df_joint = self.backward_heads(p, g, cache, dy);
        if let Some(lc) = &cache.latent {
            self.latent.backward(p, g, lc, &df_joint[..self.config.latent_dim]);
        }
    }

    /// Everything but the latent encoder; returns the joint-context gradient.
    fn backward_heads(&self, p: &[f64], g: &mut [f64], cache: &ForwardCache, dy: &OutputGrads) -> Vec<f64> {
        let c = &self.config;
        let d = c.d_model;
        let mut df_attn = vec![0.0; d];
        let mut df_joint = vec![0.0; c.joint_dim()];
        self.classifier.backward(p, g, &cache.fused.f_attn, &cache.classifier, dy.logits, &mut df_attn);
        self.delta.backward(
            p,
            g,
            &cache.f_joint,
            &cache.fused.f_attn,
            &cache.delta_tokens,
            &cache.delta,
            &dy.delta,
            Some(&mut df_joint),
            &mut df_attn,
        );
        if let Some(mc) = &cache.mask {
            self.mask.backward(p, g, mc, &dy.mask);
        }
        if let Some(ac) = &cache.alpha {
            self.alpha.backward(p, g, ac, &dy.alpha);
        }
        self.fusion.backward(
            p,
            g,
            &cache.f_joint,
            &cache.fusion_tokens,
            &cache.fused,
            &cache.fusion,
            &df_attn,
            Some(&mut df_joint),
            None,
        );
        if let Some(tc) = &cache.timestep {
            self.timestep.backward(p, g, tc, &df_joint[c.latent_dim..]);
        }
        df_joint
    }
}

/// Anything that maps sample inputs to guidance outputs: a trained model,
/// or a stub standing in for one.
pub trait Redirector {
    fn guide_batch(&self, xs: &[SampleInput]) -> Result<Vec<GuidanceOutput>>;

    fn guide(&self, x: &SampleInput) -> Result<GuidanceOutput> {
        Ok(self.guide_batch(std::slice::from_ref(x))?.pop().expect("one output per input"))
    }

    /// Logits only; implementations may skip the redirection heads.
    fn classify_batch(&self, xs: &[SampleInput]) -> Result<Vec<[f64; 2]>> {
        Ok(self.guide_batch(xs)?.into_iter().map(|o| o.logits).collect())
    }

    /// Whether tied logits count as unsafe.
    fn tie_unsafe(&self) -> bool {
        false
    }
}

/// A model together with its parameters, evaluated without dropout.
#[derive(Clone, Debug)]
pub struct TrainedModel {
    pub model: Model,
    pub params: Vec<f64>,
}

impl Redirector for TrainedModel {
    fn guide_batch(&self, xs: &[SampleInput]) -> Result<Vec<GuidanceOutput>> {
        Ok(self.model.forward_batch::<rand::rngs::ThreadRng>(&self.params, xs, None)?.0)
    }

    fn classify_batch(&self, xs: &[SampleInput]) -> Result<Vec<[f64; 2]>> {
        self.model.classify_batch(&self.params, xs)
    }

    fn tie_unsafe(&self) -> bool {
        self.model.config.tie_unsafe
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::testing::randn;
    use crate::numerics::kernels;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn tiny_config() -> ModelConfig {
        ModelConfig {
            d_model: 8,
            latent: LatentShape { channels: 2, height: 4, width: 4 },
            block_widths: vec![4, 8],
            norm_groups: 2,
            latent_dim: 12,
            time_dim: 6,
            max_step: 50,
            heads: 2,
            classifier_hidden: 10,
            delta_width: None,
            lora_rank: 2,
            mask_hidden: 6,
            alpha_hidden: 6,
            pos_dim: 4,
            mask_position: true,
            token_dropout: 0.1,
            tie_unsafe: false,
        }
    }

    #[test]
    fn default_layout_order_follows_modules() {
        let m = Model::new(ModelConfig::default(), Ablations::default()).unwrap();
        let prefixes: Vec<&str> = m
            .layout()
            .entries()
            .iter()
            .map(|e| e.name.split('.').next().unwrap())
            .collect();
        let mut dedup = prefixes.clone();
        dedup.dedup();
        assert_eq!(dedup, ["latent", "timestep", "fusion", "classifier", "delta", "mask", "alpha"]);
    }

    #[test]
    fn invalid_config_rejected() {
        let c = ModelConfig { heads: 3, ..ModelConfig::default() };
        assert!(matches!(Model::new(c, Ablations::default()), Err(Error::Config(_))));
        let mut a = Ablations::default();
        assert!(a.enable("no-mask").is_ok() && a.no_mask);
        assert!(a.enable("no_everything").is_err());
    }

    #[test]
    fn full_backward_matches_finite_differences() {
        let m = Model::new(tiny_config(), Ablations::default()).unwrap();
        let p: Vec<f64> = randn(m.num_params(), 1).iter().map(|v| 0.5 * v).collect();
        let z = randn(32, 2);
        let tok = randn(3 * 8, 3);
        let x = SampleInput { z_t: &z, t: 7, tokens: &tok };
        let w = OutputGrads {
            logits: [0.4, -0.9],
            delta: randn(24, 4),
            mask: randn(3, 5),
            alpha: randn(3, 6),
        };
        let f = |p: &[f64]| {
            let (o, _) = m.forward::<ChaCha8Rng>(p, &x, None).unwrap();
            w.logits[0] * o.logits[0]
                + w.logits[1] * o.logits[1]
                + kernels::dot(&w.delta, &o.delta)
                + kernels::dot(&w.mask, &o.mask)
                + kernels::dot(&w.alpha, &o.alpha)
        };
        let (_, cache) = m.forward::<ChaCha8Rng>(&p, &x, None).unwrap();
        let mut g = vec![0.0; p.len()];
        m.backward(&p, &mut g, &cache, &w);
        let r = crate::numerics::grad_check(f, &g, &p, &Default::default()).unwrap();
        assert!(r.max_rel_err < 1e-4, "{r:?}");
    }

    #[test]
    fn dropout_only_in_training() {
        let m = Model::new(tiny_config(), Ablations::default()).unwrap();
        let p = m.init_params(&mut ChaCha8Rng::seed_from_u64(0));
        let z = randn(32, 2);
        let tok = randn(5 * 8, 3);
        let x = SampleInput { z_t: &z, t: 3, tokens: &tok };
        let a = m.guidance(&p, &x).unwrap();
        let b = m.guidance(&p, &x).unwrap();
        assert_eq!(a, b);
        assert_eq!(m.classify(&p, &x).unwrap(), a.logits);
    }

    #[test]
    fn batch_pass_matches_per_sample_passes() {
        let m = Model::new(tiny_config(), Ablations::default()).unwrap();
        let p: Vec<f64> = randn(m.num_params(), 11).iter().map(|v| 0.5 * v).collect();
        let zs = randn(3 * 32, 12);
        let toks = [randn(2 * 8, 13), randn(4 * 8, 14), randn(8, 15)];
        let xs: Vec<SampleInput> = (0..3)
            .map(|i| SampleInput { z_t: &zs[i * 32..(i + 1) * 32], t: 5 + i, tokens: &toks[i] })
            .collect();
        let dys: Vec<OutputGrads> = xs
            .iter()
            .enumerate()
            .map(|(i, x)| {
                let l = x.tokens.len() / 8;
                OutputGrads { logits: [0.3, -0.2 * i as f64], delta: randn(l * 8, 20 + i as u64), mask: randn(l, 30), alpha: randn(l, 40) }
            })
            .collect();
        let (outs, bc) = m.forward_batch::<ChaCha8Rng>(&p, &xs, None).unwrap();
        let mut gb = vec![0.0; p.len()];
        m.backward_batch(&p, &mut gb, &bc, &dys);
        let mut gs = vec![0.0; p.len()];
        for (i, x) in xs.iter().enumerate() {
            let (o, c) = m.forward::<ChaCha8Rng>(&p, x, None).unwrap();
            for (a, b) in o.delta.iter().zip(&outs[i].delta) {
                assert!((a - b).abs() < 1e-12);
            }
            assert!((o.logits[0] - outs[i].logits[0]).abs() < 1e-12);
            m.backward(&p, &mut gs, &c, &dys[i]);
        }
        for (a, b) in gs.iter().zip(&gb) {
            assert!((a - b).abs() < 1e-9);
        }
        let logits = m.classify_batch(&p, &xs).unwrap();
        assert!((logits[2][1] - outs[2].logits[1]).abs() < 1e-12);
    }
}
