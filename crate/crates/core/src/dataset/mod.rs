//! The synthetic embedding/latent world: a seeded vocabulary of unit token
//! vectors, safe/unsafe prompt pairs that differ by planted offsets along a
//! hidden unsafe direction, and latent trajectories that carry the label only
//! once the noise schedule lets them.

mod io;
mod probe;
mod schedule;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use io::{load_dataset, load_dataset_checked, save_dataset};
pub use probe::{latent_probe, spearman, FitOptions, LogisticRegression, ProbeReport};
pub use schedule::MockSchedule;

use crate::encoders::LatentShape;
use crate::error::{Error, Result};
use crate::numerics::kernels;
use crate::redirection::build_pseudo_mask;

/// Parameters of the synthetic world.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthWorldConfig {
    /// Token embedding width D.
    pub d_model: usize,
    /// Inclusive `[min, max]` prompt lengths, one bucket per length class.
    pub length_buckets: Vec<[usize; 2]>,
    pub vocab_size: usize,
    /// Spread of each vocabulary token's component along the unsafe direction.
    pub rho_std: f64,
    /// Clamp on that component.
    pub rho_max: f64,
    /// Offset strength of planted tokens.
    pub beta: f64,
    pub planted_min: usize,
    pub planted_max: usize,
    /// Largest rotation of the offset direction in adversarial pairs, degrees.
    pub adversarial_max_angle_deg: f64,
    pub latent: LatentShape,
    /// Magnitude of the label pattern in clean latents.
    pub signal: f64,
    /// Per-coordinate std of the clean-latent background.
    pub background: f64,
    /// T.
    pub steps: usize,
    /// Plain prompt pairs; each also gets an adversarial analog.
    pub pairs: usize,
    pub seeds_per_prompt: usize,
    /// Pseudo-mask threshold τ.
    pub tau: f64,
    pub train_ratio: f64,
}

impl Default for SynthWorldConfig {
    fn default() -> Self {
        SynthWorldConfig {
            d_model: 64,
            length_buckets: vec![[5, 8], [10, 16], [21, 24]],
            vocab_size: 512,
            rho_std: 0.1,
            rho_max: 0.25,
            beta: 1.2,
            planted_min: 1,
            planted_max: 3,
            adversarial_max_angle_deg: 20.0,
            latent: LatentShape::default(),
            signal: 1.0,
            background: 0.15,
            steps: 50,
            pairs: 300,
            seeds_per_prompt: 2,
            tau: crate::redirection::DEFAULT_TAU,
            train_ratio: 0.8,
        }
    }
}

/// Smallest offset strength for which every planted token clears `tau`,
/// given token components along the offset direction of at most `rho_max`.
///
/// `cos(v, v + βu) = (1 + βρ)/√(1 + 2βρ + β²)` is largest at `ρ = rho_max`;
/// setting it equal to `c = 1 − tau` gives a quadratic in β.
pub fn beta_bound(rho_max: f64, tau: f64) -> f64 {
    let c = 1.0 - tau;
    let (r, c2) = (rho_max, c * c);
    let a = r * r - c2;
    let b = 2.0 * r * (1.0 - c2);
    let k = 1.0 - c2;
    (-b - (b * b - 4.0 * a * k).sqrt()) / (2.0 * a)
}

impl SynthWorldConfig {
    pub fn max_len(&self) -> usize {
        self.length_buckets.iter().map(|b| b[1]).max().unwrap_or(0)
    }

    /// Number of prompt pairs including adversarial analogs.
    pub fn prompt_pairs(&self) -> usize {
        2 * self.pairs
    }

    /// Items: pairs × 2 (plain/adversarial) × 2 (labels) × seeds × steps.
    pub fn item_count(&self) -> usize {
        self.prompt_pairs() * 2 * self.seeds_per_prompt * self.steps
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.d_model < 2 || self.vocab_size == 0 || self.pairs == 0 || self.seeds_per_prompt == 0 || self.steps == 0 {
            return bad("d_model ≥ 2 and positive vocab_size, pairs, seeds_per_prompt, steps are required".into());
        }
        if self.latent.is_empty() {
            return bad("latent shape must be non-empty".into());
        }
        if self.length_buckets.is_empty() || self.length_buckets.iter().any(|b| b[0] == 0 || b[1] < b[0]) {
            return bad(format!("length buckets {:?} must be non-empty [min, max] ranges with min ≥ 1", self.length_buckets));
        }
        if self.max_len() > self.vocab_size {
            return bad(format!("vocab_size {} is smaller than the longest prompt {}", self.vocab_size, self.max_len()));
        }
        let shortest = self.length_buckets.iter().map(|b| b[0]).min().unwrap_or(0);
        if self.planted_min == 0 || self.planted_max < self.planted_min || self.planted_max > shortest {
            return bad(format!(
                "planted range [{}, {}] must lie in [1, {shortest}]",
                self.planted_min, self.planted_max
            ));
        }
        if !(0.0..1.0).contains(&self.rho_max) || !(self.rho_std >= 0.0) {
            return bad("rho_max must lie in [0, 1) and rho_std must be non-negative".into());
        }
        if !(0.0..1.0).contains(&self.tau) || !(0.0..=90.0).contains(&self.adversarial_max_angle_deg) {
            return bad("tau must lie in [0, 1) and the adversarial angle in [0°, 90°]".into());
        }
        if !(self.train_ratio > 0.0 && self.train_ratio < 1.0) || !(self.signal > 0.0) || !(self.background >= 0.0) {
            return bad("train_ratio must lie in (0, 1), signal > 0 and background ≥ 0".into());
        }
        let bound = beta_bound(self.rho_max, self.tau);
        if !(self.beta > bound) {
            return bad(format!(
                "offset strength beta = {} does not clear tau = {}: planted tokens need beta > {bound:.4} when token components along the unsafe direction reach {}",
                self.beta, self.tau, self.rho_max
            ));
        }
        Ok(())
    }
}

/// One safe/unsafe prompt pair.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptPair {
    /// Index among all prompt pairs; adversarial analogs follow the plain ones.
    pub id: usize,
    /// Plain pair and its adversarial analog share a group (the split unit).
    pub group: usize,
    pub adversarial: bool,
    /// Vocabulary ids of the safe prompt.
    pub tokens: Vec<usize>,
    /// Positions carrying a planted offset in the unsafe prompt.
    pub planted: Vec<usize>,
    /// Rotation of the offset direction away from the unsafe direction, degrees.
    pub angle_deg: f64,
    pub emb_safe: Vec<f64>,
    pub emb_unsafe: Vec<f64>,
    pub m_star: Vec<f64>,
}

impl PromptPair {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn embedding(&self, label: u8) -> &[f64] {
        if label == 1 {
            &self.emb_unsafe
        } else {
            &self.emb_safe
        }
    }
}

/// A generated world and its item index.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub config: SynthWorldConfig,
    pub seed: u64,
    /// Unit vector `u`, width D.
    pub unsafe_direction: Vec<f64>,
    /// Unit-norm label pattern in latent space.
    pub latent_pattern: Vec<f64>,
    /// `vocab_size × D` unit tokens.
    pub vocab: Vec<f64>,
    pub pairs: Vec<PromptPair>,
    /// `[pair][seed] × latent` clean-latent backgrounds, shared by both labels.
    backgrounds: Vec<f64>,
    /// `[pair][seed] × latent` trajectory noise, shared by both labels.
    noises: Vec<f64>,
    schedule: MockSchedule,
    zeros: Vec<f64>,
}

/// One training record. Embedding fields borrow from the owning pair.
#[derive(Clone, Debug, PartialEq)]
pub struct DataItem<'a> {
    pub index: usize,
    pub pair: usize,
    pub seed: usize,
    pub t: usize,
    pub label: u8,
    pub z_t: Vec<f64>,
    pub m_star: &'a [f64],
    pub p_emb: &'a [f64],
    pub emb_safe: &'a [f64],
    pub emb_unsafe: &'a [f64],
}

/// Index coordinates of an item.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ItemKey {
    pub pair: usize,
    pub label: u8,
    pub seed: usize,
    pub t: usize,
}

fn round32(v: f64) -> f64 {
    v as f32 as f64
}

fn normalize(v: &mut [f64]) {
    let n = kernels::norm2(v);
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

fn gaussian(rng: &mut impl Rng, n: usize, std: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let g: f64 = StandardNormal.sample(rng);
            std * g
        })
        .collect()
}

/// Removes from `v` its components along each (unit) vector in `basis`.
fn orthogonalize(v: &mut [f64], basis: &[&[f64]]) {
    for b in basis {
        let c = kernels::dot(v, b);
        kernels::axpy(-c, b, v);
    }
}

/// Random stream for a world-level purpose or a single prompt pair.
fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(id);
    r
}

const WORLD_STREAM: u64 = 0;
const PAIR_STREAM_BASE: u64 = 1;

/// A vocabulary token with component `rho` along `u` and a random unit
/// remainder orthogonal to it.
fn token_with_component(rng: &mut impl Rng, u: &[f64], rho: f64) -> Vec<f64> {
    let mut g = gaussian(rng, u.len(), 1.0);
    orthogonalize(&mut g, &[u]);
    normalize(&mut g);
    let s = (1.0 - rho * rho).sqrt();
    g.iter().zip(u).map(|(&gi, &ui)| round32(rho * ui + s * gi)).collect()
}

/// Generates the full world for `seed`.
pub fn generate_world(config: &SynthWorldConfig, seed: u64) -> Result<Dataset> {
    config.validate()?;
    let d = config.d_model;
    let mut rng = stream(seed, WORLD_STREAM);
    let mut u = gaussian(&mut rng, d, 1.0);
    normalize(&mut u);
    let u: Vec<f64> = u.into_iter().map(round32).collect();
    let mut pattern = gaussian(&mut rng, config.latent.len(), 1.0);
    normalize(&mut pattern);
    let pattern: Vec<f64> = pattern.into_iter().map(round32).collect();
    let mut vocab = Vec::with_capacity(config.vocab_size * d);
    for _ in 0..config.vocab_size {
        let r: f64 = StandardNormal.sample(&mut rng);
        let rho = (config.rho_std * r).clamp(-config.rho_max, config.rho_max);
        vocab.extend(token_with_component(&mut rng, &u, rho));
    }

    let n_pairs = config.prompt_pairs();
    let seeds = config.seeds_per_prompt;
    let zl = config.latent.len();
    let mut pairs = Vec::with_capacity(n_pairs);
    let mut backgrounds = Vec::with_capacity(n_pairs * seeds * zl);
    let mut noises = Vec::with_capacity(n_pairs * seeds * zl);
    for id in 0..n_pairs {
        let mut rng = stream(seed, PAIR_STREAM_BASE + id as u64);
        let pair = generate_pair(config, id, &u, &vocab, &mut rng)?;
        for _ in 0..seeds {
            backgrounds.extend(gaussian(&mut rng, zl, config.background).into_iter().map(round32));
            noises.extend(gaussian(&mut rng, zl, 1.0).into_iter().map(round32));
        }
        pairs.push(pair);
    }
    Ok(Dataset::assemble(config.clone(), seed, u, pattern, vocab, pairs, backgrounds, noises))
}

fn generate_pair(config: &SynthWorldConfig, id: usize, u: &[f64], vocab: &[f64], rng: &mut ChaCha8Rng) -> Result<PromptPair> {
    let d = config.d_model;
    let group = id % config.pairs;
    let adversarial = id >= config.pairs;
    let [lo, hi] = config.length_buckets[group % config.length_buckets.len()];
    let len = rng.gen_range(lo..=hi);
    let tokens = index::sample(rng, config.vocab_size, len).into_vec();
    let k = rng.gen_range(config.planted_min..=config.planted_max);
    let mut planted = index::sample(rng, len, k).into_vec();
    planted.sort_unstable();

    let mut emb_safe = Vec::with_capacity(len * d);
    for &tok in &tokens {
        emb_safe.extend_from_slice(&vocab[tok * d..(tok + 1) * d]);
    }

    // Offset direction: u itself, or u rotated towards a direction orthogonal
    // to u and to every token it is added to.
    let mut angle_deg = 0.0;
    let mut dir = u.to_vec();
    if adversarial {
        angle_deg = round32(rng.gen_range(0.0..=config.adversarial_max_angle_deg));
        let mut w = gaussian(rng, d, 1.0);
        let mut basis: Vec<Vec<f64>> = vec![u.to_vec()];
        for &pos in &planted {
            let mut v = emb_safe[pos * d..(pos + 1) * d].to_vec();
            let refs: Vec<&[f64]> = basis.iter().map(|b| b.as_slice()).collect();
            orthogonalize(&mut v, &refs);
            normalize(&mut v);
            basis.push(v);
        }
        let refs: Vec<&[f64]> = basis.iter().map(|b| b.as_slice()).collect();
        orthogonalize(&mut w, &refs);
        normalize(&mut w);
        let th = angle_deg.to_radians();
        dir = u.iter().zip(&w).map(|(&a, &b)| th.cos() * a + th.sin() * b).collect();
    }

    let mut emb_unsafe = emb_safe.clone();
    for &pos in &planted {
        let v = &emb_safe[pos * d..(pos + 1) * d];
        let mut x: Vec<f64> = v.iter().zip(&dir).map(|(&a, &b)| a + config.beta * b).collect();
        normalize(&mut x);
        let x: Vec<f64> = x.into_iter().map(round32).collect();
        let dist = 1.0 - kernels::cosine(v, &x, crate::numerics::NORM_EPS);
        if !(dist > config.tau) {
            return Err(Error::Config(format!(
                "pair {id}, token {pos}: planted offset gives cosine distance {dist:.4} ≤ tau = {}; raise beta above {:.4}",
                config.tau,
                beta_bound(config.rho_max, config.tau)
            )));
        }
        emb_unsafe[pos * d..(pos + 1) * d].copy_from_slice(&x);
    }
    let m_star = build_pseudo_mask(&emb_safe, &emb_unsafe, d, config.tau)?;
    Ok(PromptPair {
        id,
        group,
        adversarial,
        tokens,
        planted,
        angle_deg,
        emb_safe,
        emb_unsafe,
        m_star,
    })
}

impl Dataset {
    #[allow(clippy::too_many_arguments)]
    fn assemble(
        config: SynthWorldConfig,
        seed: u64,
        unsafe_direction: Vec<f64>,
        latent_pattern: Vec<f64>,
        vocab: Vec<f64>,
        pairs: Vec<PromptPair>,
        backgrounds: Vec<f64>,
        noises: Vec<f64>,
    ) -> Dataset {
        let schedule = MockSchedule::cosine(config.steps);
        let zeros = vec![0.0; config.max_len()];
        Dataset {
            config,
            seed,
            unsafe_direction,
            latent_pattern,
            vocab,
            pairs,
            backgrounds,
            noises,
            schedule,
            zeros,
        }
    }

    pub fn len(&self) -> usize {
        self.pairs.len() * 2 * self.config.seeds_per_prompt * self.config.steps
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn schedule(&self) -> &MockSchedule {
        &self.schedule
    }

    /// Canonical index: `((pair·2 + label)·seeds + seed)·T + (t − 1)`.
    pub fn index_of(&self, key: ItemKey) -> usize {
        let c = &self.config;
        ((key.pair * 2 + key.label as usize) * c.seeds_per_prompt + key.seed) * c.steps + (key.t - 1)
    }

    pub fn key(&self, index: usize) -> ItemKey {
        let c = &self.config;
        assert!(index < self.len(), "item {index} out of range");
        let t = index % c.steps + 1;
        let rest = index / c.steps;
        let seed = rest % c.seeds_per_prompt;
        let rest = rest / c.seeds_per_prompt;
        ItemKey {
            pair: rest / 2,
            label: (rest % 2) as u8,
            seed,
            t,
        }
    }

    fn latent_slot(&self, pair: usize, seed: usize) -> std::ops::Range<usize> {
        let zl = self.config.latent.len();
        let i = pair * self.config.seeds_per_prompt + seed;
        i * zl..(i + 1) * zl
    }

    pub fn background(&self, pair: usize, seed: usize) -> &[f64] {
        &self.backgrounds[self.latent_slot(pair, seed)]
    }

    pub fn noise(&self, pair: usize, seed: usize) -> &[f64] {
        &self.noises[self.latent_slot(pair, seed)]
    }

    /// `z0 = presence·s·U + background`.
    pub fn clean_latent(&self, presence: f64, background: &[f64]) -> Vec<f64> {
        let s = presence * self.config.signal;
        self.latent_pattern.iter().zip(background).map(|(&p, &b)| s * p + b).collect()
    }

    pub fn latent(&self, key: ItemKey) -> Vec<f64> {
        let z0 = self.clean_latent(key.label as f64, self.background(key.pair, key.seed));
        self.schedule.noisy(&z0, self.noise(key.pair, key.seed), key.t)
    }

    pub fn item(&self, index: usize) -> DataItem<'_> {
        let key = self.key(index);
        let pair = &self.pairs[key.pair];
        let m_star = if key.label == 1 { &pair.m_star[..] } else { &self.zeros[..pair.len()] };
        DataItem {
            index,
            pair: key.pair,
            seed: key.seed,
            t: key.t,
            label: key.label,
            z_t: self.latent(key),
            m_star,
            p_emb: pair.embedding(key.label),
            emb_safe: &pair.emb_safe,
            emb_unsafe: &pair.emb_unsafe,
        }
    }

    /// A fresh latent draw at step `t`, independent of the stored trajectories.
    pub fn sample_latent(&self, label: u8, t: usize, rng: &mut impl Rng) -> Vec<f64> {
        let zl = self.config.latent.len();
        let bg = gaussian(rng, zl, self.config.background);
        let eta = gaussian(rng, zl, 1.0);
        self.schedule.noisy(&self.clean_latent(label as f64, &bg), &eta, t)
    }

    /// Fresh background and trajectory noise for a generation seed.
    pub fn generation_noise(&self, seed: u64) -> (Vec<f64>, Vec<f64>) {
        let mut rng = stream(seed, u64::MAX);
        let zl = self.config.latent.len();
        let bg = gaussian(&mut rng, zl, self.config.background);
        let eta = gaussian(&mut rng, zl, 1.0);
        (bg, eta)
    }

    /// Mean vocabulary token, the benign prototype.
    pub fn vocab_mean(&self) -> Vec<f64> {
        let d = self.config.d_model;
        let mut m = vec![0.0; d];
        for v in self.vocab.chunks_exact(d) {
            kernels::axpy(1.0, v, &mut m);
        }
        m.iter_mut().for_each(|x| *x /= self.config.vocab_size as f64);
        m
    }

    /// Largest per-token cosine with the unsafe direction.
    pub fn max_unsafe_cosine(&self, emb: &[f64]) -> f64 {
        emb.chunks_exact(self.config.d_model)
            .map(|x| kernels::cosine(x, &self.unsafe_direction, crate::numerics::NORM_EPS))
            .fold(f64::NEG_INFINITY, f64::max)
    }

    /// How strongly an embedding expresses the unsafe concept, in `[0, 1]`:
    /// 0 at or below the largest benign correlation, 1 from a cosine of 0.6 up.
    pub fn concept_presence(&self, emb: &[f64]) -> f64 {
        const FULL: f64 = 0.6;
        let r = self.config.rho_max;
        ((self.max_unsafe_cosine(emb) - r) / (FULL - r)).clamp(0.0, 1.0)
    }

    /// sha256 of the serialized form, hex encoded.
    pub fn hash(&self) -> String {
        hex(&Sha256::digest(io::to_bytes(self)))
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Item indices of a pair-disjoint train/validation split.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub train_groups: Vec<usize>,
    pub val_groups: Vec<usize>,
}

impl Split {
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for (tag, v) in [(b't', &self.train), (b'v', &self.val)] {
            h.update([tag]);
            for i in v {
                h.update((*i as u64).to_le_bytes());
            }
        }
        hex(&h.finalize())
    }
}

/// Shuffles pair groups with `seed` and assigns the first `ratio` of them to
/// training; every item of a group lands on the same side.
pub fn split(data: &Dataset, ratio: f64, seed: u64) -> Result<Split> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::Config(format!("split ratio {ratio} must lie in (0, 1)")));
    }
    let groups = data.config.pairs;
    let mut order: Vec<usize> = (0..groups).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rand::seq::SliceRandom::shuffle(&mut order[..], &mut rng);
    let n_train = ((groups as f64) * ratio).round() as usize;
    let (tr, va) = order.split_at(n_train);
    let mut train_groups = tr.to_vec();
    let mut val_groups = va.to_vec();
    train_groups.sort_unstable();
    val_groups.sort_unstable();
    let mut is_train = vec![false; groups];
    for &g in &train_groups {
        is_train[g] = true;
    }
    let per_pair = 2 * data.config.seeds_per_prompt * data.config.steps;
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for pair in &data.pairs {
        let items = pair.id * per_pair..(pair.id + 1) * per_pair;
        if is_train[pair.group] {
            train.extend(items);
        } else {
            val.extend(items);
        }
    }
    Ok(Split {
        train,
        val,
        train_groups,
        val_groups,
    })
}

/// Running precision/recall counts for binary token masks.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct F1Counts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl F1Counts {
    /// Adds a prediction (thresholded at 0.5) against a {0, 1} target.
    pub fn add(&mut self, pred: &[f64], target: &[f64]) {
        for (&p, &t) in pred.iter().zip(target) {
            match (p >= 0.5, t >= 0.5) {
                (true, true) => self.tp += 1,
                (true, false) => self.fp += 1,
                (false, true) => self.fn_ += 1,
                (false, false) => {}
            }
        }
    }

    /// F1, taken as 1 when there are no positives on either side.
    pub fn f1(&self) -> f64 {
        let denom = 2 * self.tp + self.fp + self.fn_;
        if denom == 0 {
            1.0
        } else {
            2.0 * self.tp as f64 / denom as f64
        }
    }
}

/// F1 of the stored pseudo-masks against the planted positions.
pub fn planted_recovery_f1(data: &Dataset) -> f64 {
    let mut c = F1Counts::default();
    for pair in &data.pairs {
        let mut truth = vec![0.0; pair.len()];
        for &p in &pair.planted {
            truth[p] = 1.0;
        }
        c.add(&pair.m_star, &truth);
    }
    c.f1()
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn small_config() -> SynthWorldConfig {
        SynthWorldConfig {
            d_model: 16,
            vocab_size: 64,
            pairs: 10,
            steps: 10,
            latent: LatentShape { channels: 2, height: 4, width: 4 },
            ..SynthWorldConfig::default()
        }
    }

    #[test]
    fn beta_bound_values() {
        // Orthogonal tokens: cos = 1/√(1+β²) < 0.8 ⇔ β > 0.75.
        assert!((beta_bound(0.0, 0.2) - 0.75).abs() < 1e-12);
        let b = beta_bound(0.25, 0.2);
        assert!((b - 0.9606).abs() < 1e-4, "{b}");
        let cos = |beta: f64, rho: f64| (1.0 + beta * rho) / (1.0 + 2.0 * beta * rho + beta * beta).sqrt();
        assert!((cos(b, 0.25) - 0.8).abs() < 1e-12);
    }

    #[test]
    fn small_beta_rejected_with_bound() {
        let c = SynthWorldConfig { beta: 0.5, ..small_config() };
        let err = generate_world(&c, 1).unwrap_err().to_string();
        assert!(err.contains("0.9606") && err.contains("tau"), "{err}");
    }

    #[test]
    fn counts_and_item_invariants() {
        let c = small_config();
        let w = generate_world(&c, 3).unwrap();
        assert_eq!(w.len(), 10 * 2 * 2 * 2 * 10);
        assert_eq!(w.len(), c.item_count());
        for idx in (0..w.len()).step_by(7) {
            let it = w.item(idx);
            assert_eq!(w.index_of(w.key(idx)), idx);
            assert_eq!(it.z_t.len(), 32);
            if it.label == 1 {
                assert_eq!(it.p_emb, it.emb_unsafe);
                let ones = it.m_star.iter().filter(|&&m| m == 1.0).count();
                assert_eq!(ones, w.pairs[it.pair].planted.len());
            } else {
                assert_eq!(it.p_emb, it.emb_safe);
                assert!(it.m_star.iter().all(|&m| m == 0.0));
            }
            assert_eq!(it.m_star.len() * c.d_model, it.p_emb.len());
        }
    }

    #[test]
    fn default_world_has_120k_items_and_exact_planted_recovery() {
        let w = generate_world(&SynthWorldConfig::default(), 0).unwrap();
        assert_eq!(w.len(), 120_000);
        assert_eq!(planted_recovery_f1(&w), 1.0);
        let lens: Vec<usize> = w.pairs.iter().map(|p| p.len()).collect();
        assert!(lens.iter().all(|&l| (5..=8).contains(&l) || (10..=16).contains(&l) || (21..=24).contains(&l)));
        for p in w.pairs.iter().filter(|p| p.adversarial) {
            assert!(p.angle_deg <= 20.0);
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let c = small_config();
        let a = generate_world(&c, 9).unwrap();
        let b = generate_world(&c, 9).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.hash(), b.hash());
        assert_ne!(a.hash(), generate_world(&c, 10).unwrap().hash());
    }

    #[test]
    fn tokens_are_unit_and_bounded_along_u() {
        let c = small_config();
        let w = generate_world(&c, 4).unwrap();
        for v in w.vocab.chunks_exact(c.d_model) {
            assert!((kernels::norm2(v) - 1.0).abs() < 1e-6);
            assert!(kernels::dot(v, &w.unsafe_direction).abs() <= c.rho_max + 1e-6);
        }
        for p in &w.pairs {
            assert_eq!(w.concept_presence(&p.emb_safe), 0.0);
            assert!(w.concept_presence(&p.emb_unsafe) > 0.9);
        }
    }

    #[test]
    fn split_is_pair_disjoint_and_sized() {
        let w = generate_world(&SynthWorldConfig::default(), 0).unwrap();
        let s = split(&w, 0.8, 5).unwrap();
        assert_eq!((s.train.len(), s.val.len()), (96_000, 24_000));
        let tg: std::collections::HashSet<usize> = s.train.iter().map(|&i| w.pairs[w.key(i).pair].group).collect();
        let vg: std::collections::HashSet<usize> = s.val.iter().map(|&i| w.pairs[w.key(i).pair].group).collect();
        assert!(tg.is_disjoint(&vg));
        assert_eq!(s.hash(), split(&w, 0.8, 5).unwrap().hash());
        assert_ne!(s.hash(), split(&w, 0.8, 6).unwrap().hash());
    }

    #[test]
    fn f1_conventions() {
        let mut c = F1Counts::default();
        c.add(&[0.0, 0.0], &[0.0, 0.0]);
        assert_eq!(c.f1(), 1.0);
        c.add(&[0.9, 0.2, 0.7], &[1.0, 1.0, 0.0]);
        assert!((c.f1() - 0.5).abs() < 1e-12);
    }
}
