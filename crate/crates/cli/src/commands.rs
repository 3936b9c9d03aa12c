use std::path::Path;

use anyhow::{Context, Result};
use serde_json::json;

use promptredir::dataset::{self, beta_bound, generate_world, planted_recovery_f1, Dataset, Split};
use promptredir::inference::{evaluate_safety, run_generation, InferenceConfig, PromptSpec, ReferenceDetector};
use promptredir::training::{self, evaluate, load_checkpoint, save_checkpoint};
use promptredir::verify::{check_model_gradients, GradCheckSettings};
use promptredir::{atomic_write, Error, Redirector, RunConfig};

use crate::{HookArgs, SplitSide, VerificationFailed};

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    let Some(path) = path else { return Ok(RunConfig::default()) };
    let c = RunConfig::load(path).map_err(|e| match e {
        Error::Io { .. } => Error::Config(e.to_string()),
        e => e,
    })?;
    Ok(c)
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    atomic_write(path, text.as_bytes())?;
    Ok(())
}

fn print_json(value: &serde_json::Value) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

/// The split is a function of the dataset alone, so every command agrees on it.
fn split_of(data: &Dataset) -> Result<Split> {
    Ok(dataset::split(data, data.config.train_ratio, data.seed)?)
}

fn pairs_in(data: &Dataset, groups: &[usize]) -> Vec<usize> {
    data.pairs.iter().filter(|p| groups.binary_search(&p.group).is_ok()).map(|p| p.id).collect()
}

pub fn gen_data(config: Option<&Path>, seed: Option<u64>, out: &Path) -> Result<()> {
    let cfg = load_config(config)?;
    let seed = seed.unwrap_or(cfg.train.seed);
    let w = &cfg.world;
    let data = generate_world(w, seed)?;
    let split = split_of(&data)?;
    dataset::save_dataset(&data, out)?;
    let bound = beta_bound(w.rho_max, w.tau);
    let summary = json!({
        "seed": seed,
        "items": data.len(),
        "prompt_pairs": data.pairs.len(),
        "split": {
            "ratio": w.train_ratio,
            "train_items": split.train.len(),
            "val_items": split.val.len(),
            "train_groups": split.train_groups.len(),
            "val_groups": split.val_groups.len(),
            "hash": split.hash(),
        },
        "beta": {
            "value": w.beta,
            "bound": bound,
            "tau": w.tau,
            "rho_max": w.rho_max,
            "margin": w.beta - bound,
            "valid": w.beta > bound,
        },
        "planted_recovery_f1": planted_recovery_f1(&data),
        "dataset_hash": data.hash(),
        "dataset": out.display().to_string(),
    });
    let mut summary_path = out.as_os_str().to_owned();
    summary_path.push(".summary.json");
    write_json(Path::new(&summary_path), &summary)?;
    print_json(&summary)
}

pub fn train(config: Option<&Path>, data: &Path, out: &Path, ablate: &[String], seed: Option<u64>) -> Result<()> {
    let mut cfg = load_config(config)?;
    for name in ablate {
        cfg.train.ablations.enable(name)?;
    }
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    let data = dataset::load_dataset_checked(data, cfg.model.d_model, cfg.model.latent)?;
    let split = split_of(&data)?;
    std::fs::create_dir_all(out).map_err(|e| Error::Io { path: out.to_path_buf(), source: e })?;
    let ckpt_path = out.join("best.ckpt");
    let tc = cfg.train_config();
    let outcome = training::train(&cfg.model, &tc, &data, &split, |e, ckpt| {
        let t = &e.mean_loss.raw;
        eprintln!(
            "epoch {:>3}  total {:.5}  cls {:.4}  mse {:.4}  cos {:.4}  mask {:.4}  alpha {:.4}  reg {:.4}  val_acc {:.4}{}",
            e.epoch,
            e.mean_loss.total,
            t.cls,
            t.mse,
            t.cos,
            t.mask,
            t.alpha,
            t.reg,
            e.val_accuracy,
            if e.saved { "  saved" } else { "" }
        );
        match ckpt {
            Some(c) => save_checkpoint(c, &ckpt_path),
            None => Ok(()),
        }
    })?;
    atomic_write(&out.join("train_log.json"), serde_json::to_string(&outcome.log)?.as_bytes())?;
    atomic_write(&out.join("config.json"), cfg.to_json().as_bytes())?;
    print_json(&json!({
        "checkpoint": ckpt_path.display().to_string(),
        "best_epoch": outcome.best.epoch,
        "best_val_accuracy": outcome.best.best_acc,
        "epochs_run": outcome.log.epochs.len(),
        "stopped_early": outcome.log.stopped_early,
        "steps": outcome.log.steps.len(),
        "loss_curve_hash": outcome.log.loss_curve_hash(),
        "seed": tc.seed,
    }))
}

fn inference_config(h: &HookArgs) -> Result<InferenceConfig> {
    let base = load_config(h.config.as_deref())?.inference;
    let c = InferenceConfig {
        steps: h.steps.or(base.steps),
        cooldown: h.cooldown.unwrap_or(base.cooldown),
        alpha_scale: h.alpha_scale.unwrap_or(base.alpha_scale),
        seed: h.seed.seed.unwrap_or(base.seed),
        hard_mask: h.hard_mask || base.hard_mask,
    };
    c.validate()?;
    Ok(c)
}

pub fn eval(ckpt: &Path, data: &Path, side: SplitSide, stride: usize, hook: &HookArgs) -> Result<()> {
    if stride == 0 {
        return Err(Error::Config("--stride must be positive".into()).into());
    }
    let icfg = inference_config(hook)?;
    let ckpt = load_checkpoint(ckpt)?;
    let model = ckpt.trained()?;
    let data = dataset::load_dataset_checked(data, ckpt.model.d_model, ckpt.model.latent)?;
    let split = split_of(&data)?;
    let (items, groups): (Vec<usize>, Vec<usize>) = match side {
        SplitSide::Train => (split.train.clone(), split.train_groups.clone()),
        SplitSide::Val => (split.val.clone(), split.val_groups.clone()),
        SplitSide::All => ((0..data.len()).collect(), (0..data.config.pairs).collect()),
    };
    let items: Vec<usize> = items.into_iter().step_by(stride).collect();
    let m = evaluate(&model, &data, &items)?;

    let detector = ReferenceDetector::fit(&data, &pairs_in(&data, &split.train_groups))?;
    let mut traces = Vec::new();
    for (i, pair) in pairs_in(&data, &groups).into_iter().enumerate() {
        for label in [1, 0] {
            let cfg = InferenceConfig { seed: icfg.seed.wrapping_add(2 * i as u64 + label as u64), ..icfg.clone() };
            traces.push(run_generation(PromptSpec { pair, label }, &data, Some(&model as &dyn Redirector), &cfg)?);
        }
    }
    let s = evaluate_safety(&traces, &data, &detector, None)?;
    print_json(&json!({
        "split": format!("{side:?}").to_lowercase(),
        "items": m.items,
        "cls_accuracy": m.cls_accuracy,
        "mask_f1": m.mask_f1,
        "delta_cosine": m.delta_cosine,
        "alpha_mean": m.alpha_mean,
        "forget_rate": s.forget_rate,
        "benign_passthrough_rate": s.benign_passthrough_rate,
        "unsafe_prompts": s.unsafe_traces,
        "safe_prompts": s.safe_traces,
    }))
}

pub fn simulate(ckpt: Option<&Path>, world: &Path, pair: Option<usize>, unsafe_: bool, hook: &HookArgs, out: &Path) -> Result<()> {
    let icfg = inference_config(hook)?;
    let (model, data) = match ckpt {
        Some(p) => {
            let c = load_checkpoint(p)?;
            let data = dataset::load_dataset_checked(world, c.model.d_model, c.model.latent)?;
            (Some(c.trained()?), data)
        }
        None => (None, dataset::load_dataset(world)?),
    };
    let pair = match pair {
        Some(p) => p,
        None => {
            let split = split_of(&data)?;
            *pairs_in(&data, &split.val_groups).first().context("the world has no held-out pairs")?
        }
    };
    let prompt = PromptSpec { pair, label: u8::from(unsafe_) };
    let r = model.as_ref().map(|m| m as &dyn Redirector);
    let trace = run_generation(prompt, &data, r, &icfg)?;
    atomic_write(out, trace.to_json().as_bytes())?;
    print_json(&json!({
        "trace": out.display().to_string(),
        "pair": pair,
        "label": prompt.label,
        "hooked": trace.hooked,
        "steps": trace.steps_total,
        "interventions": trace.interventions,
        "base_presence": data.concept_presence(&trace.base_embedding),
        "final_presence": trace.final_presence,
    }))
}

pub fn gradcheck(config: Option<&Path>, eps: f64, tol: f64, tokens: usize, per_tensor: usize, seed: Option<u64>) -> Result<()> {
    let cfg = load_config(config)?;
    if !(eps > 0.0) || !(tol > 0.0) || tokens == 0 || per_tensor == 0 {
        return Err(Error::Config("eps and tol must be positive, tokens and per-tensor at least 1".into()).into());
    }
    let settings = GradCheckSettings { eps, tokens, per_tensor, seed: seed.unwrap_or(cfg.train.seed) };
    let blocks = check_model_gradients(&cfg.model, &settings)?;
    for b in &blocks {
        println!(
            "{:<10} max_rel_err {:.3e}  checked {:>5}  worst {}",
            b.block,
            b.max_rel_err,
            b.checked,
            b.worst_tensor.as_deref().unwrap_or("-")
        );
    }
    let failed: Vec<&str> = blocks.iter().filter(|b| !(b.max_rel_err <= tol)).map(|b| b.block.as_str()).collect();
    if failed.is_empty() {
        println!("ok: every block within {tol:e}");
        Ok(())
    } else {
        Err(VerificationFailed(format!("blocks above {tol:e}: {}", failed.join(", "))).into())
    }
}
