//! Acceptance criteria 1 to 10. Each test prints one `criterion N: PASS|FAIL`
//! line to the real stdout (bypassing the test harness capture) before
//! asserting.

use std::io::Write;
use std::sync::OnceLock;
use std::time::Instant;

use proptest::prelude::*;
use proptest::test_runner::{Config as PropConfig, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use promptredir::dataset::{generate_world, latent_probe, load_dataset, planted_recovery_f1, save_dataset, split, Dataset, Split};
use promptredir::inference::stubs::Scripted;
use promptredir::inference::{baseline_report, cooldown_oracle, planted_cosines, run_generation, simulate_prompts, GuidanceSession, PromptSpec, ReferenceDetector};
use promptredir::losses::LossWeights;
use promptredir::redirection::{build_pseudo_mask, redirect, Strategy as Baseline};
use promptredir::training::{accuracy, accumulate_gradient, batch_norms, load_checkpoint, save_checkpoint, train, Checkpoint, TrainConfig, TrainOutcome, MODULES};
use promptredir::verify::{check_model_gradients, GradCheckSettings};
use promptredir::{Ablations, Model, RunConfig, TrainedModel};

const DESK: &str = include_str!("../../../configs/desk.json");

fn report(n: u32, pass: bool, detail: String) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    let _ = writeln!(std::io::stdout(), "criterion {n}: {verdict} | {detail}");
}

struct World {
    config: RunConfig,
    data: Dataset,
    split: Split,
    train_pairs: Vec<usize>,
    val_pairs: Vec<usize>,
    gen_secs: f64,
}

fn world() -> &'static World {
    static W: OnceLock<World> = OnceLock::new();
    W.get_or_init(|| {
        let config = RunConfig::from_json(DESK).unwrap();
        let t0 = Instant::now();
        let data = generate_world(&config.world, config.train.seed).unwrap();
        let split = split(&data, config.world.train_ratio, config.train.seed).unwrap();
        let gen_secs = t0.elapsed().as_secs_f64();
        let pairs_of = |groups: &[usize]| -> Vec<usize> { data.pairs.iter().filter(|p| groups.contains(&p.group)).map(|p| p.id).collect() };
        let train_pairs = pairs_of(&split.train_groups);
        let val_pairs = pairs_of(&split.val_groups);
        World { config, data, split, train_pairs, val_pairs, gen_secs }
    })
}

struct Trained {
    outcome: TrainOutcome,
    model: TrainedModel,
    secs: f64,
}

fn run(ablations: Ablations) -> Trained {
    let w = world();
    let cfg = TrainConfig { ablations, ..w.config.train_config() };
    let t0 = Instant::now();
    let outcome = train(&w.config.model, &cfg, &w.data, &w.split, |_, _| Ok(())).unwrap();
    let secs = t0.elapsed().as_secs_f64();
    let model = outcome.best.trained().unwrap();
    Trained { outcome, model, secs }
}

fn tri_modal() -> &'static Trained {
    static T: OnceLock<Trained> = OnceLock::new();
    T.get_or_init(|| run(Ablations::default()))
}

fn detector() -> &'static ReferenceDetector {
    static D: OnceLock<ReferenceDetector> = OnceLock::new();
    D.get_or_init(|| ReferenceDetector::fit(&world().data, &world().train_pairs).unwrap())
}

/// Every fourth validation item.
fn val_subset() -> Vec<usize> {
    world().split.val.iter().copied().step_by(4).collect()
}

#[test]
fn criterion_01_gradient_fidelity() {
    let cfg = RunConfig::from_json(DESK).unwrap();
    let t0 = Instant::now();
    let blocks = check_model_gradients(&cfg.model, &GradCheckSettings { tokens: 8, ..Default::default() }).unwrap();
    let secs = t0.elapsed().as_secs_f64();
    let worst = blocks.iter().map(|b| b.max_rel_err).fold(0.0, f64::max);
    let pass = blocks.len() == MODULES.len() && worst <= 1e-4 && secs < 120.0 && cfg.model.d_model == 64 && cfg.model.latent.len() == 256;
    let per: Vec<String> = blocks.iter().map(|b| format!("{}={:.1e}", b.block, b.max_rel_err)).collect();
    report(1, pass, format!("max rel err {worst:.2e} ({}) in {secs:.1}s", per.join(", ")));
    assert!(pass);
}

#[test]
fn criterion_02_detection_modality_ordering() {
    let w = world();
    let val = val_subset();
    let tri = tri_modal();
    let text = run(Ablations::text_only());
    let lat = run(Ablations::latent_only());
    let acc = |t: &Trained| accuracy(&t.model, &w.data, &val).unwrap();
    let (a_tri, a_text, a_lat) = (acc(tri), acc(&text), acc(&lat));
    let epochs = tri.outcome.log.epochs.len();
    let pass = a_tri >= 0.99 && epochs <= 30 && a_text <= a_tri - 0.03 && a_lat <= a_tri - 0.03;
    report(
        2,
        pass,
        format!("tri-modal {:.2}% after {epochs} epochs, text-only {:.2}%, latent-only {:.2}% on {} val items", 100.0 * a_tri, 100.0 * a_text, 100.0 * a_lat, val.len()),
    );
    assert!(pass);
}

#[test]
fn criterion_03_latent_probe_trend() {
    let w = world();
    let r = latent_probe(&w.data, &w.split, 5000, 0).unwrap();
    let noisy = r.max_noisy(0.9);
    let clean = r.min_clean(0.1);
    let pass = noisy <= 0.55 && clean >= 0.90 && r.spearman >= 0.9;
    report(3, pass, format!("noisiest-10% max {:.3}, final-10% min {:.3}, spearman {:.4}", noisy, clean, r.spearman));
    assert!(pass);
}

fn redirection_case() -> impl Strategy<Value = (usize, usize, Vec<f64>, Vec<f64>, Vec<f64>, f64)> {
    (1usize..=8, 1usize..=6).prop_flat_map(|(l, d)| {
        (
            Just(l),
            Just(d),
            prop::collection::vec(-3.0f64..3.0, l * d),
            prop::collection::vec(-2.0f64..2.0, l * d),
            prop::collection::vec(prop_oneof![Just(0.0), Just(1.0), 0.0f64..1.0], l),
            0.1f64..20.0,
        )
    })
}

#[test]
fn criterion_04_redirection_properties() {
    let mut runner = TestRunner::new(PropConfig { cases: 2000, ..PropConfig::default() });
    let result = runner.run(&redirection_case(), |(l, d, p, delta, mask, c)| {
        // α = 0 is the identity, bit for bit.
        let r = redirect(&p, &delta, &mask, &vec![0.0; l], 1.0, None, d).unwrap();
        prop_assert!(r.p_hat.iter().zip(&p).all(|(a, b)| a.to_bits() == b.to_bits()));
        // Unit direction where the filtered shift is not negligible.
        let r = redirect(&p, &delta, &mask, &vec![1.0; l], 1.0, Some(&vec![1.0; l]), d).unwrap();
        for i in 0..l {
            let filt: f64 = delta[i * d..(i + 1) * d].iter().map(|v| (v * mask[i]).powi(2)).sum::<f64>().sqrt();
            let n: f64 = r.applied_shift[i * d..(i + 1) * d].iter().map(|v| v * v).sum::<f64>().sqrt();
            if filt >= 1e-3 {
                prop_assert!((n - 1.0).abs() <= 1e-4, "token {} norm {}", i, n);
            }
            // Masked-out tokens stay put.
            if mask[i] == 0.0 {
                prop_assert!((i * d..(i + 1) * d).all(|j| r.p_hat[j].to_bits() == p[j].to_bits()));
            }
        }
        // Degree-1 homogeneity in the prompt norm.
        let alpha = vec![0.7; l];
        let a = redirect(&p, &delta, &mask, &alpha, 1.0, None, d).unwrap();
        let scaled: Vec<f64> = p.iter().map(|v| c * v).collect();
        let b = redirect(&scaled, &delta, &mask, &alpha, 1.0, None, d).unwrap();
        for (x, y) in a.applied_shift.iter().zip(&b.applied_shift) {
            prop_assert!((c * x - y).abs() <= 1e-9 * (1.0 + y.abs()));
        }
        // All-zero mask: nothing moves and nothing blows up.
        let z = redirect(&p, &delta, &vec![0.0; l], &vec![1.0; l], 1.0, None, d).unwrap();
        prop_assert!(z.p_hat == p && z.applied_shift.iter().all(|v| *v == 0.0));
        Ok(())
    });
    let pass = result.is_ok();
    report(4, pass, format!("2000 random cases: {}", result.as_ref().map(|_| "all properties hold".to_string()).unwrap_or_else(|e| e.to_string())));
    assert!(pass);
}

/// The mask rule written out from scratch.
fn brute_force_mask(safe: &[f64], uns: &[f64], d: usize, tau: f64) -> Vec<f64> {
    let l = safe.len() / d;
    let mut out = Vec::with_capacity(l);
    for i in 0..l {
        let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
        for j in i * d..(i + 1) * d {
            dot += safe[j] * uns[j];
            na += safe[j] * safe[j];
            nb += uns[j] * uns[j];
        }
        let (na, nb) = (f64::sqrt(na), f64::sqrt(nb));
        let cos = if na < 1e-8 || nb < 1e-8 { 0.0 } else { (dot / (na * nb)).clamp(-1.0, 1.0) };
        out.push(if 1.0 - cos > tau { 1.0 } else { 0.0 });
    }
    out
}

#[test]
fn criterion_05_pseudo_mask_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut mismatches = 0;
    let mut flagged = 0;
    for case in 0..10_000 {
        let l = 1 + case % 8;
        let d = 1 + (case / 8) % 4;
        let grid = |rng: &mut ChaCha8Rng| (0..l * d).map(|_| rng.gen_range(-2i32..=2) as f64).collect::<Vec<f64>>();
        let safe = grid(&mut rng);
        let mut uns = grid(&mut rng);
        // Keep some tokens identical so both outcomes occur.
        for i in 0..l {
            if rng.gen_bool(0.4) {
                uns[i * d..(i + 1) * d].copy_from_slice(&safe[i * d..(i + 1) * d]);
            }
        }
        let got = build_pseudo_mask(&safe, &uns, d, 0.2).unwrap();
        let want = brute_force_mask(&safe, &uns, d, 0.2);
        mismatches += got.iter().zip(&want).filter(|(a, b)| a != b).count();
        flagged += want.iter().filter(|&&m| m == 1.0).count();
    }
    let f1 = planted_recovery_f1(&world().data);
    let pass = mismatches == 0 && f1 == 1.0;
    report(5, pass, format!("10000 grid cases, {mismatches} mismatches ({flagged} flagged tokens); planted-token F1 {f1}"));
    assert!(pass);
}

#[test]
fn criterion_06_cooldown_state_machine() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut failures = 0;
    let mut cases = 0;
    let base = [0.3, -0.1, 0.8, 0.2];
    for steps in [10usize, 50] {
        for k in [0usize, 1, 5, 10] {
            for _ in 0..1000 {
                let p = rng.gen_range(0.0..1.0);
                let stub = Scripted { d: 2, unsafe_at_t: (0..steps).map(|_| rng.gen_bool(p)).collect() };
                let mut s = GuidanceSession::new(&base, 2, k, 1.0).unwrap();
                for t in (1..=steps).rev() {
                    s.step(&[], t, &stub).unwrap();
                }
                let decisions: Vec<bool> = stub.unsafe_at_t.iter().rev().copied().collect();
                failures += usize::from(s.interventions() != cooldown_oracle(&decisions, k));
                cases += 1;
            }
        }
    }
    let stub = Scripted::constant(2, 50, true);
    let mut s = GuidanceSession::new(&base, 2, 5, 1.0).unwrap();
    for t in (1..=50).rev() {
        s.step(&[], t, &stub).unwrap();
    }
    let canonical = s.interventions();
    let pass = failures == 0 && canonical == vec![1, 7, 13, 19, 25, 31, 37, 43, 49];
    report(6, pass, format!("{cases} scripted sequences, {failures} mismatches; T=50 K=5 always-unsafe -> {canonical:?}"));
    assert!(pass);
}

#[test]
fn criterion_07_forget_and_preserve() {
    let w = world();
    let tri = tri_modal();
    let det = detector();
    let cfg = w.config.inference.clone();
    let unsafe_prompts: Vec<PromptSpec> = w.val_pairs.iter().map(|&pair| PromptSpec { pair, label: 1 }).collect();
    let safe_prompts: Vec<PromptSpec> = w.val_pairs.iter().map(|&pair| PromptSpec { pair, label: 0 }).collect();
    let t0 = Instant::now();
    let (traces, forget) = simulate_prompts(&w.data, &unsafe_prompts, Some(&tri.model), det, &cfg).unwrap();
    let (_, keep) = simulate_prompts(&w.data, &safe_prompts, Some(&tri.model), det, &cfg).unwrap();
    let sim_secs = t0.elapsed().as_secs_f64();
    let moved_toward_safe = traces
        .iter()
        .filter(|t| !t.interventions.is_empty())
        .all(|t| {
            let before = planted_cosines(&w.data, t.prompt.pair, &t.base_embedding);
            let after = planted_cosines(&w.data, t.prompt.pair, &t.final_embedding);
            before.iter().zip(&after).all(|(b, a)| a > b)
        });
    let total = w.gen_secs + tri.secs + sim_secs;
    let fr = forget.forget_rate.unwrap();
    let bp = keep.benign_passthrough_rate.unwrap();
    let pass = fr >= 0.95 && bp == 1.0 && moved_toward_safe && total < 1800.0;
    report(
        7,
        pass,
        format!(
            "forget_rate {:.2}% over {} unsafe prompts, benign passthrough {:.2}% over {}, planted tokens moved toward safe: {moved_toward_safe}; pipeline {total:.0}s (gen {:.1}s, train {:.0}s, simulate {:.0}s); overhead ratio {:.2}",
            100.0 * fr,
            forget.unsafe_traces,
            100.0 * bp,
            keep.safe_traces,
            w.gen_secs,
            tri.secs,
            sim_secs,
            forget.overhead_ratio.unwrap()
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_08_baseline_ordering() {
    let w = world();
    let rows = baseline_report(&w.data, &w.val_pairs, detector(), 1.5).unwrap();
    let get = |s: Baseline| rows.iter().find(|r| r.strategy == s).unwrap();
    let (direct, scaled, masked) = (get(Baseline::DirectAdd), get(Baseline::PairDiffScaled), get(Baseline::PairDiffMasked));
    let pass = masked.forget_rate >= scaled.forget_rate && scaled.forget_rate >= direct.forget_rate && masked.mean_unmasked_shift <= 1e-6;
    let table: Vec<String> = rows
        .iter()
        .map(|r| format!("{}(a={}) forget {:.2} unmasked shift {:.1e}", r.strategy.name(), r.alpha, r.forget_rate, r.mean_unmasked_shift))
        .collect();
    report(8, pass, table.join("; "));
    assert!(pass);
}

#[test]
fn criterion_09_reproducibility() {
    let w = world();
    let mut checks: Vec<(&str, bool)> = Vec::new();
    let again = generate_world(&w.config.world, w.config.train.seed).unwrap();
    checks.push(("dataset hash", again.hash() == w.data.hash()));

    let short = TrainConfig { epochs: 1, samples_per_epoch: Some(96), val_samples: Some(64), ..w.config.train_config() };
    let a = train(&w.config.model, &short, &w.data, &w.split, |_, _| Ok(())).unwrap();
    let b = train(&w.config.model, &short, &w.data, &w.split, |_, _| Ok(())).unwrap();
    checks.push(("loss-curve hash", a.log.loss_curve_hash() == b.log.loss_curve_hash()));

    let tri = tri_modal();
    let prompt = PromptSpec { pair: w.val_pairs[0], label: 1 };
    let t1 = run_generation(prompt, &w.data, Some(&tri.model), &w.config.inference).unwrap().to_json();
    let t2 = run_generation(prompt, &w.data, Some(&tri.model), &w.config.inference).unwrap().to_json();
    checks.push(("trace json", t1 == t2));

    let dir = tempfile::tempdir().unwrap();
    let ck = dir.path().join("best.src");
    save_checkpoint(&tri.outcome.best, &ck).unwrap();
    let loaded = load_checkpoint(&ck).unwrap();
    checks.push(("checkpoint round trip", loaded == tri.outcome.best && loaded.to_bytes().unwrap() == std::fs::read(&ck).unwrap()));
    let ds = dir.path().join("world.srd");
    save_dataset(&w.data, &ds).unwrap();
    checks.push(("dataset round trip", load_dataset(&ds).unwrap() == w.data));

    let mut rejected = true;
    for path in [&ck, &ds] {
        let bytes = std::fs::read(path).unwrap();
        for cut in [bytes.len() / 2, bytes.len() - 1] {
            let p = dir.path().join("cut");
            std::fs::write(&p, &bytes[..cut]).unwrap();
            let bad = if path == &ck { load_checkpoint(&p).is_ok() } else { load_dataset(&p).is_ok() };
            rejected &= !bad;
        }
    }
    checks.push(("truncation rejected", rejected));
    let pass = checks.iter().all(|c| c.1);
    let detail: Vec<String> = checks.iter().map(|(n, ok)| format!("{n} {}", if *ok { "ok" } else { "MISMATCH" })).collect();
    report(9, pass, detail.join(", "));
    assert!(pass);
}

#[test]
fn criterion_10_ablation_plumbing() {
    let w = world();
    let module = |m: &str| MODULES.iter().position(|x| *x == m).unwrap();
    let cfg_for = |a: Ablations| TrainConfig { epochs: 1, samples_per_epoch: Some(96), val_samples: Some(64), ablations: a, ..w.config.train_config() };
    let base = train(&w.config.model, &cfg_for(Ablations::default()), &w.data, &w.split, |_, _| Ok(())).unwrap().log;
    let b0 = base.steps[0].clone();
    // A mixed batch for per-tensor gradient signatures.
    let items: Vec<usize> = (0..32).map(|i| i * 1237 % w.data.len()).collect();
    let norms = batch_norms(&w.data, &items);
    let zero_tensors = |a: Ablations| -> Vec<String> {
        let m = Model::new(w.config.model.clone(), a).unwrap();
        let p = m.init_params(&mut ChaCha8Rng::seed_from_u64(0));
        let mut g = vec![0.0; p.len()];
        accumulate_gradient(&m, &p, &w.data, &items, &norms, &w.config.loss, &mut g).unwrap();
        m.layout().entries().iter().filter(|e| e.slot().of(&g).iter().all(|v| *v == 0.0)).map(|e| e.name.clone()).collect()
    };
    let baseline_zero = zero_tensors(Ablations::default());

    let mut results = Vec::new();
    for name in Ablations::NAMES {
        let mut a = Ablations::default();
        a.enable(name).unwrap();
        let log = train(&w.config.model, &cfg_for(a), &w.data, &w.split, |_, _| Ok(())).unwrap().log;
        let s0 = &log.steps[0];
        let every = |f: &dyn Fn(&promptredir::training::StepLog) -> bool| log.steps.iter().all(f);
        let raw = s0.loss.raw;
        let r0 = b0.loss.raw;
        let grad0 = |m: &str| s0.grad_norms[module(m)];
        let ok = match name {
            "no_mask" => every(&|s| s.loss.raw.mask == 0.0 && s.grad_norms[module("mask")] == 0.0),
            "no_alpha" => every(&|s| s.grad_norms[module("alpha")] == 0.0) && grad0("mask") > 0.0,
            "no_latent" => every(&|s| s.grad_norms[module("latent")] == 0.0) && grad0("timestep") > 0.0,
            "no_timestep" => every(&|s| s.grad_norms[module("timestep")] == 0.0) && grad0("latent") > 0.0,
            "no_prompt" => {
                let z = zero_tensors(a);
                let need = ["fusion.k.weight", "fusion.v.weight", "classifier.fc1.weight"];
                need.iter().all(|n| z.iter().any(|x| x == n)) && !z.iter().any(|x| x.starts_with("mask.")) && raw.mask == r0.mask
            }
            "no_mse" => every(&|s| s.loss.raw.mse == 0.0) && raw.cls == r0.cls && raw.cos == r0.cos && raw.mask == r0.mask,
            "no_cos" => every(&|s| s.loss.raw.cos == 0.0) && raw.cls == r0.cls && raw.mse == r0.mse && raw.mask == r0.mask,
            "no_reg" => every(&|s| s.loss.raw.reg == 0.0) && raw.cls == r0.cls && raw.mse == r0.mse && raw.cos == r0.cos,
            "no_conf" | "no_smoothing" => {
                raw.cls != r0.cls
                    && (raw.mse, raw.cos, raw.mask, raw.alpha, raw.reg) == (r0.mse, r0.cos, r0.mask, r0.alpha, r0.reg)
                    && ["delta", "mask", "alpha"].iter().all(|m| grad0(m) == b0.grad_norms[module(m)])
            }
            _ => unreachable!(),
        };
        results.push((name, ok));
    }
    let pass = results.iter().all(|r| r.1) && !baseline_zero.iter().any(|n| n.starts_with("alpha.") || n.starts_with("mask."));
    let detail: Vec<String> = results.iter().map(|(n, ok)| format!("{n} {}", if *ok { "ok" } else { "WRONG" })).collect();
    report(10, pass, detail.join(", "));
    assert!(pass);
}

#[test]
fn best_checkpoint_evaluates_well() {
    let w = world();
    let tri = tri_modal();
    let m = promptredir::training::evaluate(&tri.model, &w.data, &val_subset()).unwrap();
    assert!(m.cls_accuracy >= 0.99, "{m:?}");
    assert!(m.mask_f1 >= 0.95, "{m:?}");
    assert!(m.delta_cosine >= 0.9, "{m:?}");
    let ck: &Checkpoint = &tri.outcome.best;
    assert_eq!(ck.trained().unwrap().params, tri.model.params);
}

#[test]
fn cls_only_objective_separates_within_twenty_epochs() {
    let w = world();
    let loss = LossWeights { lambda_mse: 0.0, lambda_cos: 0.0, lambda_mask: 0.0, lambda_alpha: 0.0, ..LossWeights::default() };
    let cfg = TrainConfig { epochs: 20, samples_per_epoch: Some(1024), patience: Some(3), loss, ..w.config.train_config() };
    let out = train(&w.config.model, &cfg, &w.data, &w.split, |_, _| Ok(())).unwrap();
    let best = out.log.epochs.iter().map(|e| e.val_accuracy).fold(0.0, f64::max);
    assert!(best >= 0.99, "{best}");
}
