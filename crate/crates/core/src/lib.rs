//! Prompt-embedding redirection for concept unlearning on a synthetic
//! embedding/latent world: a multi-modal unsafe-content detector, token-level
//! redirection heads, the joint training objective, and a cooldown-governed
//! inference hook.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod dataset;
pub mod encoders;
pub mod error;
pub mod fusion;
pub mod heads;
pub mod inference;
pub mod layers;
pub mod losses;
pub mod model;
pub mod numerics;
pub mod params;
pub mod redirection;
pub mod training;
pub mod verify;
mod storage;

pub use storage::atomic_write;

pub use config::RunConfig;
pub use error::{Error, Result};
pub use heads::GuidanceOutput;
pub use losses::{LossBreakdown, LossTerms, LossWeights};
pub use model::{Ablations, Model, ModelConfig, Redirector, SampleInput, TrainedModel};
pub use numerics::{Array, Precision};
pub use params::ParamLayout;
