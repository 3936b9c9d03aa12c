//! Command-line driver: data generation, training, evaluation, simulation
//! and gradient verification.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

/// Exit status for a run whose result failed a numerical check.
#[derive(Debug)]
pub struct VerificationFailed(pub String);

impl std::fmt::Display for VerificationFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for VerificationFailed {}

#[derive(Parser, Debug)]
#[command(name = "promptredir", version, about = "Prompt-embedding redirection on a synthetic world")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Seed override shared by every seeded command. A flag beats the
/// environment, which beats the config file.
#[derive(Args, Debug, Clone, Copy)]
struct SeedArg {
    /// RNG seed; overrides the config.
    #[arg(long, env = "SAFEREDIR_SEED")]
    seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic world and write it with a summary.
    GenData {
        /// Run config (JSON); defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        seed: SeedArg,
        /// Dataset file to write; the summary goes to `<out>.summary.json`.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model and keep the best checkpoint.
    Train {
        /// Run config (JSON); defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Dataset file written by gen-data.
        #[arg(long)]
        data: PathBuf,
        /// Output directory for the checkpoint, log and effective config.
        #[arg(long)]
        out: PathBuf,
        /// Disable a component or loss term; repeatable.
        #[arg(long = "ablate", value_name = "NAME", value_parser = clap::builder::PossibleValuesParser::new(promptredir::Ablations::NAMES))]
        ablate: Vec<String>,
        #[command(flatten)]
        seed: SeedArg,
    },
    /// Score a checkpoint on one side of the dataset split.
    Eval {
        /// Checkpoint written by train.
        #[arg(long)]
        ckpt: PathBuf,
        /// Dataset file written by gen-data.
        #[arg(long)]
        data: PathBuf,
        /// Side of the pair-disjoint split to score.
        #[arg(long, value_enum, default_value_t = SplitSide::Val)]
        split: SplitSide,
        /// Keep every n-th item of the split for the item metrics.
        #[arg(long, default_value_t = 1)]
        stride: usize,
        #[command(flatten)]
        hook: HookArgs,
    },
    /// Run one hooked generation and write its trace.
    Simulate {
        /// Checkpoint; omit together with --no-hook for a plain generation.
        #[arg(long, required_unless_present = "no_hook")]
        ckpt: Option<PathBuf>,
        /// Dataset file holding the prompts.
        #[arg(long)]
        world: PathBuf,
        /// Index of the prompt pair; defaults to the first held-out pair.
        #[arg(long)]
        pair: Option<usize>,
        /// Which prompt of the pair to generate from.
        #[arg(long, value_enum, default_value_t = Label::Unsafe)]
        label: Label,
        /// Generate without the redirection hook.
        #[arg(long)]
        no_hook: bool,
        #[command(flatten)]
        hook: HookArgs,
        /// Trace file (JSON).
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference check of every encoder and head.
    Gradcheck {
        /// Run config whose model section is checked.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Central-difference step.
        #[arg(long, default_value_t = 1e-5)]
        eps: f64,
        /// Largest accepted relative error.
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
        /// Prompt length of the probe samples.
        #[arg(long, default_value_t = 8)]
        tokens: usize,
        /// Coordinates probed per tensor.
        #[arg(long, default_value_t = 24)]
        per_tensor: usize,
        #[command(flatten)]
        seed: SeedArg,
    },
}

/// Inference knobs; unset values come from the config's inference section.
#[derive(Args, Debug, Clone)]
struct HookArgs {
    /// Run config supplying inference defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Denoising steps.
    #[arg(long = "T", value_name = "T")]
    steps: Option<usize>,
    /// Cooldown length.
    #[arg(long = "K", value_name = "K")]
    cooldown: Option<usize>,
    /// Multiplier on the predicted scale.
    #[arg(long)]
    alpha_scale: Option<f64>,
    /// Binarize the predicted mask at 0.5.
    #[arg(long)]
    hard_mask: bool,
    #[command(flatten)]
    seed: SeedArg,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum SplitSide {
    Train,
    Val,
    All,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum Label {
    Safe,
    Unsafe,
}

/// 2 config, 3 data or format, 4 verification; 1 for anything unforeseen.
fn exit_code(e: &anyhow::Error) -> u8 {
    use promptredir::Error as E;
    for cause in e.chain() {
        if cause.is::<VerificationFailed>() {
            return 4;
        }
        if let Some(err) = cause.downcast_ref::<E>() {
            return match err {
                E::Config(_) => 2,
                E::NonFinite(_) => 4,
                E::Dimension(_) | E::Domain(_) | E::Format(_) | E::Session(_) | E::Io { .. } => 3,
            };
        }
    }
    1
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData { config, seed, out } => commands::gen_data(config.as_deref(), seed.seed, &out),
        Command::Train { config, data, out, ablate, seed } => commands::train(config.as_deref(), &data, &out, &ablate, seed.seed),
        Command::Eval { ckpt, data, split, stride, hook } => commands::eval(&ckpt, &data, split, stride, &hook),
        Command::Simulate { ckpt, world, pair, label, no_hook, hook, out } => {
            commands::simulate(ckpt.as_deref().filter(|_| !no_hook), &world, pair, label == Label::Unsafe, &hook, &out)
        }
        Command::Gradcheck { config, eps, tol, tokens, per_tensor, seed } => {
            commands::gradcheck(config.as_deref(), eps, tol, tokens, per_tensor, seed.seed)
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
