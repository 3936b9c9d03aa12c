//! The inference hook: per-step detection, single-shot redirection from the
//! frozen base embedding, cooldown scheduling and a mock denoising loop.

mod safety;

use serde::{Deserialize, Serialize};

pub use safety::{baseline_report, planted_cosines, evaluate_safety, simulate_prompts, BaselineRow, ReferenceDetector, SafetyMetrics, Timing};

use crate::dataset::{Dataset, MockSchedule};
use crate::error::{Error, Result};
use crate::model::{Redirector, SampleInput};
use crate::redirection::{redirect, token_norms};

/// Deployment knobs of the hook.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferenceConfig {
    /// Denoising steps T; `None` uses the world's schedule length.
    pub steps: Option<usize>,
    /// Cooldown length K.
    pub cooldown: usize,
    pub alpha_scale: f64,
    pub seed: u64,
    /// Binarize the predicted mask at 0.5 before redirecting.
    pub hard_mask: bool,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        InferenceConfig {
            steps: None,
            cooldown: 5,
            alpha_scale: 1.0,
            seed: 0,
            hard_mask: false,
        }
    }
}

impl InferenceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == Some(0) {
            return Err(Error::Config("steps must be positive".into()));
        }
        if !(self.alpha_scale >= 0.0) || !self.alpha_scale.is_finite() {
            return Err(Error::Config(format!("alpha_scale must be finite and non-negative, got {}", self.alpha_scale)));
        }
        Ok(())
    }
}

/// What happened at one denoising step.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepRecord {
    /// 1-based position in the loop.
    pub step: usize,
    pub t: usize,
    /// `None` while the cooldown suppresses detection.
    pub detected: Option<bool>,
    pub intervened: bool,
}

/// Per-generation hook state.
#[derive(Clone, Debug)]
pub struct GuidanceSession {
    base: Vec<f64>,
    ref_norms: Vec<f64>,
    current: Vec<f64>,
    d: usize,
    cnt: usize,
    k: usize,
    alpha_scale: f64,
    hard_mask: bool,
    log: Vec<StepRecord>,
}

impl GuidanceSession {
    pub fn new(base: &[f64], d: usize, k: usize, alpha_scale: f64) -> Result<Self> {
        if d == 0 || base.is_empty() || base.len() % d != 0 {
            return Err(Error::Session(format!("prompt of {} values is not a stack of {d}-wide tokens", base.len())));
        }
        if !(alpha_scale >= 0.0) {
            return Err(Error::Session(format!("alpha_scale must be non-negative, got {alpha_scale}")));
        }
        Ok(GuidanceSession {
            base: base.to_vec(),
            ref_norms: token_norms(base, d),
            current: base.to_vec(),
            d,
            cnt: 0,
            k,
            alpha_scale,
            hard_mask: false,
            log: Vec::new(),
        })
    }

    pub fn with_hard_mask(mut self, hard: bool) -> Self {
        self.hard_mask = hard;
        self
    }

    pub fn base(&self) -> &[f64] {
        &self.base
    }

    pub fn ref_norms(&self) -> &[f64] {
        &self.ref_norms
    }

    pub fn current(&self) -> &[f64] {
        &self.current
    }

    pub fn cooldown(&self) -> usize {
        self.cnt
    }

    pub fn log(&self) -> &[StepRecord] {
        &self.log
    }

    pub fn interventions(&self) -> Vec<usize> {
        self.log.iter().filter(|r| r.intervened).map(|r| r.step).collect()
    }

    /// Advances the hook by one denoising step and returns the embedding to
    /// condition on.
    pub fn step(&mut self, z_t: &[f64], t: usize, r: &dyn Redirector) -> Result<&[f64]> {
        let step = self.log.len() + 1;
        if self.cnt > 0 {
            self.cnt -= 1;
            self.log.push(StepRecord { step, t, detected: None, intervened: false });
            return Ok(&self.current);
        }
        let x = SampleInput { z_t, t, tokens: &self.current };
        let out = r.guide(&x).map_err(|e| Error::Session(format!("step {step} (t = {t}): redirector rejected its input: {e}")))?;
        let detected = out.is_unsafe(r.tie_unsafe());
        if detected {
            let mask: Vec<f64> = if self.hard_mask {
                out.mask.iter().map(|&m| if m >= 0.5 { 1.0 } else { 0.0 }).collect()
            } else {
                out.mask
            };
            let shifted = redirect(&self.base, &out.delta, &mask, &out.alpha, self.alpha_scale, Some(&self.ref_norms), self.d)
                .map_err(|e| Error::Session(format!("step {step} (t = {t}): redirector output does not fit the prompt: {e}")))?;
            self.current = shifted.p_hat;
            self.cnt = self.k;
        }
        self.log.push(StepRecord { step, t, detected: Some(detected), intervened: detected });
        Ok(&self.current)
    }
}

/// Intervention steps (1-based) that the cooldown rules produce when the
/// detector would answer `decisions[i]` at step `i + 1`.
pub fn cooldown_oracle(decisions: &[bool], k: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut blocked_until = 0;
    for (i, &d) in decisions.iter().enumerate() {
        let step = i + 1;
        if step > blocked_until && d {
            out.push(step);
            blocked_until = step + k;
        }
    }
    out
}

/// Which stored prompt to generate from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptSpec {
    pub pair: usize,
    pub label: u8,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    #[serde(flatten)]
    pub record: StepRecord,
    /// The latent the step started from.
    pub latent: Vec<f64>,
    /// The embedding the denoiser was conditioned on.
    pub embedding: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationTrace {
    pub prompt: PromptSpec,
    pub steps_total: usize,
    pub cooldown: usize,
    pub alpha_scale: f64,
    pub seed: u64,
    pub hooked: bool,
    pub base_embedding: Vec<f64>,
    pub steps: Vec<TraceStep>,
    pub interventions: Vec<usize>,
    pub final_embedding: Vec<f64>,
    /// `z_0`, the mock analog of the decoded image.
    pub final_latent: Vec<f64>,
    /// Concept presence the denoiser saw at the last step.
    pub final_presence: f64,
}

impl GenerationTrace {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("trace serializes")
    }
}

/// Runs the mock denoiser from seeded noise, conditioning each step on the
/// session's embedding. `redirector = None` disables the hook.
pub fn run_generation(prompt: PromptSpec, world: &Dataset, redirector: Option<&dyn Redirector>, cfg: &InferenceConfig) -> Result<GenerationTrace> {
    cfg.validate()?;
    let pair = world
        .pairs
        .get(prompt.pair)
        .ok_or_else(|| Error::Session(format!("prompt pair {} not in a world of {}", prompt.pair, world.pairs.len())))?;
    if prompt.label > 1 {
        return Err(Error::Session(format!("label {} is neither safe (0) nor unsafe (1)", prompt.label)));
    }
    let base = pair.embedding(prompt.label);
    let steps = cfg.steps.unwrap_or(world.config.steps);
    let schedule = MockSchedule::cosine(steps);
    let (bg, eta) = world.generation_noise(cfg.seed);
    let mut session = GuidanceSession::new(base, world.config.d_model, cfg.cooldown, cfg.alpha_scale)?.with_hard_mask(cfg.hard_mask);

    let mut z = eta;
    let mut trace = Vec::with_capacity(steps);
    let mut presence = 0.0;
    for (i, t) in (1..=steps).rev().enumerate() {
        let (record, emb) = match redirector {
            Some(r) => {
                let emb = session.step(&z, t, r)?.to_vec();
                (*session.log().last().expect("step logged"), emb)
            }
            None => (
                StepRecord { step: i + 1, t, detected: None, intervened: false },
                base.to_vec(),
            ),
        };
        presence = world.concept_presence(&emb);
        let z0_hat = world.clean_latent(presence, &bg);
        let next = schedule.ddim_step(&z, &z0_hat, t);
        trace.push(TraceStep { record, latent: std::mem::replace(&mut z, next), embedding: emb });
    }
    Ok(GenerationTrace {
        prompt,
        steps_total: steps,
        cooldown: cfg.cooldown,
        alpha_scale: cfg.alpha_scale,
        seed: cfg.seed,
        hooked: redirector.is_some(),
        base_embedding: base.to_vec(),
        interventions: session.interventions(),
        final_embedding: trace.last().map(|s| s.embedding.clone()).unwrap_or_else(|| base.to_vec()),
        steps: trace,
        final_latent: z,
        final_presence: presence,
    })
}

/// Stand-in redirectors with scripted behavior.
pub mod stubs {
    use crate::error::Result;
    use crate::heads::GuidanceOutput;
    use crate::model::{Redirector, SampleInput};

    fn output(unsafe_: bool, l: usize, d: usize, shift: f64) -> GuidanceOutput {
        GuidanceOutput {
            logits: if unsafe_ { [0.0, 1.0] } else { [1.0, 0.0] },
            delta: (0..l * d).map(|i| if i % d == 0 { shift } else { 0.0 }).collect(),
            mask: vec![1.0; l],
            alpha: vec![0.5; l],
        }
    }

    /// Answers from a per-`t` script; the shift is a fixed unit step along the
    /// first coordinate.
    pub struct Scripted {
        pub d: usize,
        /// `unsafe_at_t[t − 1]`
        pub unsafe_at_t: Vec<bool>,
    }

    impl Scripted {
        pub fn constant(d: usize, steps: usize, unsafe_: bool) -> Self {
            Scripted { d, unsafe_at_t: vec![unsafe_; steps] }
        }
    }

    impl Redirector for Scripted {
        fn guide_batch(&self, xs: &[SampleInput]) -> Result<Vec<GuidanceOutput>> {
            Ok(xs
                .iter()
                .map(|x| output(self.unsafe_at_t[x.t - 1], x.tokens.len() / self.d, self.d, 1.0))
                .collect())
        }
    }
}
