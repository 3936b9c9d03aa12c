//! Joint optimization of the detector and redirector heads.

mod adamw;
mod checkpoint;
mod evaluate;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use adamw::AdamW;
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_VERSION};
pub use evaluate::{evaluate, EvalMetrics};

use crate::dataset::{hex, Dataset, Split};
use crate::error::{Error, Result};
use crate::losses::{sample_loss, BatchNorms, LossBreakdown, LossWeights, SampleTarget};
use crate::model::{Ablations, BatchCache, Model, ModelConfig, OutputGrads, SampleInput, TrainedModel};

/// Optimizer, schedule and ablation settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    pub seed: u64,
    /// Stop after this many epochs without a strict accuracy improvement.
    pub patience: Option<usize>,
    /// Train on a fresh random subset of this many items each epoch.
    pub samples_per_epoch: Option<usize>,
    /// Score validation accuracy on a fixed random subset of this size.
    pub val_samples: Option<usize>,
    pub ablations: Ablations,
    /// Supplied alongside the config rather than inside it.
    #[serde(skip)]
    pub loss: LossWeights,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 32,
            lr: 1e-4,
            weight_decay: 1e-2,
            betas: (0.9, 0.999),
            eps: 1e-8,
            seed: 0,
            patience: Some(5),
            samples_per_epoch: None,
            val_samples: None,
            ablations: Ablations::default(),
            loss: LossWeights::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be positive".into());
        }
        if !(self.lr >= 0.0) || !(self.weight_decay >= 0.0) || !(self.eps > 0.0) {
            return bad("lr and weight_decay must be non-negative, eps positive".into());
        }
        if !(0.0..1.0).contains(&self.betas.0) || !(0.0..1.0).contains(&self.betas.1) {
            return bad(format!("moment coefficients {:?} must lie in [0, 1)", self.betas));
        }
        if self.samples_per_epoch == Some(0) || self.val_samples == Some(0) || self.patience == Some(0) {
            return bad("samples_per_epoch, val_samples and patience must be positive when set".into());
        }
        self.loss.validate()
    }
}

/// Parameter module names in registration order.
pub const MODULES: [&str; 7] = ["latent", "timestep", "fusion", "classifier", "delta", "mask", "alpha"];

/// One optimizer step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub epoch: usize,
    pub step: usize,
    pub loss: LossBreakdown,
    /// L2 norm of the gradient restricted to each of [`MODULES`].
    pub grad_norms: [f64; 7],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: LossBreakdown,
    pub val_accuracy: f64,
    pub saved: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub steps: Vec<StepLog>,
    pub epochs: Vec<EpochLog>,
    pub stopped_early: bool,
}

impl TrainLog {
    /// sha256 over the per-step total losses.
    pub fn loss_curve_hash(&self) -> String {
        let mut h = Sha256::new();
        for s in &self.steps {
            h.update(s.loss.total.to_le_bytes());
        }
        hex(&h.finalize())
    }

    /// Validation accuracies of the epochs that saved a checkpoint.
    pub fn saved_accuracies(&self) -> Vec<f64> {
        self.epochs.iter().filter(|e| e.saved).map(|e| e.val_accuracy).collect()
    }
}

pub struct TrainOutcome {
    /// The checkpoint from the best validation epoch.
    pub best: Checkpoint,
    pub log: TrainLog,
}

/// Inputs and targets for one item, both borrowing from the dataset.
fn targets<'a>(items: &'a [crate::dataset::DataItem<'a>]) -> (Vec<SampleInput<'a>>, Vec<SampleTarget<'a>>) {
    items
        .iter()
        .map(|it| {
            (
                SampleInput {
                    z_t: &it.z_t,
                    t: it.t,
                    tokens: it.p_emb,
                },
                SampleTarget {
                    label: it.label,
                    p_emb: it.p_emb,
                    emb_safe: it.emb_safe,
                    emb_unsafe: it.emb_unsafe,
                    m_star: it.m_star,
                },
            )
        })
        .unzip()
}

/// Loss of a batch and the output gradients of each sample; `norms` fixes the
/// batch the means are taken over, so sub-batches can be accumulated.
fn batch_losses(outs: &[crate::GuidanceOutput], tgts: &[SampleTarget], w: &LossWeights, norms: &BatchNorms) -> (LossBreakdown, Vec<OutputGrads>) {
    let mut acc = LossBreakdown::default();
    let mut grads = Vec::with_capacity(outs.len());
    for (o, t) in outs.iter().zip(tgts) {
        let (lb, g) = sample_loss(o, t, w, norms);
        acc.add(&lb);
        grads.push(g);
    }
    (acc, grads)
}

/// Accumulates the gradient of `items`' share of a batch objective into `g`
/// and returns that share. Evaluation mode: no dropout.
pub fn accumulate_gradient(
    model: &Model,
    params: &[f64],
    data: &Dataset,
    items: &[usize],
    norms: &BatchNorms,
    w: &LossWeights,
    g: &mut [f64],
) -> Result<LossBreakdown> {
    let its: Vec<_> = items.iter().map(|&i| data.item(i)).collect();
    let (xs, tgts) = targets(&its);
    let (outs, cache) = model.forward_batch::<ChaCha8Rng>(params, &xs, None)?;
    let (lb, dys) = batch_losses(&outs, &tgts, &w.effective(&model.ablations), norms);
    model.backward_batch(params, g, &cache, &dys);
    Ok(lb)
}

/// Batch normalizers for a set of items.
pub fn batch_norms(data: &Dataset, items: &[usize]) -> BatchNorms {
    let its: Vec<_> = items.iter().map(|&i| data.item(i)).collect();
    let (_, tgts) = targets(&its);
    BatchNorms::from_targets(tgts, data.config.d_model)
}

fn module_norms(model: &Model, g: &[f64]) -> [f64; 7] {
    let mut out = [0.0; 7];
    for e in model.layout().entries() {
        let module = e.name.split('.').next().unwrap_or("");
        if let Some(k) = MODULES.iter().position(|m| *m == module) {
            out[k] += e.slot().of(g).iter().map(|v| v * v).sum::<f64>();
        }
    }
    out.map(f64::sqrt)
}

/// Fraction of `indices` classified correctly.
pub fn accuracy(r: &dyn crate::Redirector, data: &Dataset, indices: &[usize]) -> Result<f64> {
    let mut hits = 0;
    for chunk in indices.chunks(256) {
        let its: Vec<_> = chunk.iter().map(|&i| data.item(i)).collect();
        let (xs, _) = targets(&its);
        let logits = r.classify_batch(&xs)?;
        for (l, it) in logits.iter().zip(&its) {
            hits += usize::from(crate::heads::decide(*l, r.tie_unsafe()) == it.label);
        }
    }
    Ok(hits as f64 / indices.len().max(1) as f64)
}

fn check_world(model: &ModelConfig, data: &Dataset) -> Result<()> {
    let c = &data.config;
    if c.d_model != model.d_model || c.latent != model.latent || c.steps > model.max_step {
        return Err(Error::Config(format!(
            "model (D = {}, latent {:?}, T = {}) does not fit the dataset (D = {}, latent {:?}, T = {})",
            model.d_model, model.latent, model.max_step, c.d_model, c.latent, c.steps
        )));
    }
    Ok(())
}

/// Runs the full training loop. `on_epoch` sees every epoch summary and the
/// checkpoint when one was saved.
pub fn train(
    model_config: &ModelConfig,
    config: &TrainConfig,
    data: &Dataset,
    split: &Split,
    mut on_epoch: impl FnMut(&EpochLog, Option<&Checkpoint>) -> Result<()>,
) -> Result<TrainOutcome> {
    config.validate()?;
    check_world(model_config, data)?;
    if split.train.is_empty() || split.val.is_empty() {
        return Err(Error::Config("training needs non-empty train and validation splits".into()));
    }
    let model = Model::new(model_config.clone(), config.ablations)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut params = model.init_params(&mut rng);
    let mut opt = AdamW::new(params.len(), config.lr, config.weight_decay, config.betas, config.eps);
    let w = config.loss.effective(&config.ablations);
    let d = model_config.d_model;

    let val: Vec<usize> = match config.val_samples {
        Some(n) if n < split.val.len() => {
            let mut v = split.val.clone();
            v.shuffle(&mut rng);
            v.truncate(n);
            v.sort_unstable();
            v
        }
        _ => split.val.clone(),
    };

    let mut log = TrainLog::default();
    let mut best: Option<Checkpoint> = None;
    let mut best_acc = f64::NEG_INFINITY;
    let mut since_improved = 0;
    let mut g = vec![0.0; params.len()];
    let mut step = 0;
    for epoch in 0..config.epochs {
        let mut order = split.train.clone();
        order.shuffle(&mut rng);
        if let Some(n) = config.samples_per_epoch {
            order.truncate(n);
        }
        let mut sum = LossBreakdown::default();
        let mut batches = 0;
        for batch in order.chunks(config.batch_size) {
            let its: Vec<_> = batch.iter().map(|&i| data.item(i)).collect();
            let (xs, tgts) = targets(&its);
            let norms = BatchNorms::from_targets(tgts.iter().copied(), d);
            let (outs, cache): (_, BatchCache) = model.forward_batch(&params, &xs, Some(&mut rng))?;
            let (lb, dys) = batch_losses(&outs, &tgts, &w, &norms);
            if !lb.total.is_finite() || !lb.raw.all_finite() {
                return Err(Error::NonFinite(format!(
                    "epoch {epoch}, batch {batches} (step {step}): total {} with terms {:?}",
                    lb.total, lb.weighted
                )));
            }
            g.fill(0.0);
            model.backward_batch(&params, &mut g, &cache, &dys);
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("epoch {epoch}, batch {batches} (step {step}): gradient; loss terms {:?}", lb.weighted)));
            }
            log.steps.push(StepLog {
                epoch,
                step,
                loss: lb,
                grad_norms: module_norms(&model, &g),
            });
            opt.step(&mut params, &g);
            sum.add(&lb);
            batches += 1;
            step += 1;
        }

        let trained = TrainedModel { model: model.clone(), params: params.clone() };
        let acc = accuracy(&trained, data, &val)?;
        let saved = acc >= best_acc;
        if acc > best_acc {
            since_improved = 0;
        } else {
            since_improved += 1;
        }
        if saved {
            best_acc = acc;
            best = Some(Checkpoint::new(model_config.clone(), config.clone(), &model, &params, acc, epoch, rng.clone()));
        }
        let scale = 1.0 / batches.max(1) as f64;
        let mean_loss = LossBreakdown {
            raw: scale_terms(sum.raw, scale),
            weighted: scale_terms(sum.weighted, scale),
            total: sum.total * scale,
        };
        let entry = EpochLog {
            epoch,
            mean_loss,
            val_accuracy: acc,
            saved,
        };
        on_epoch(&entry, if saved { best.as_ref() } else { None })?;
        log.epochs.push(entry);
        if config.patience.is_some_and(|p| since_improved >= p) {
            log.stopped_early = true;
            break;
        }
    }
    Ok(TrainOutcome {
        best: best.expect("at least one epoch ran and the first always saves"),
        log,
    })
}

fn scale_terms(mut t: crate::LossTerms, s: f64) -> crate::LossTerms {
    for v in [&mut t.cls, &mut t.mse, &mut t.cos, &mut t.mask, &mut t.alpha, &mut t.reg] {
        *v *= s;
    }
    t
}
