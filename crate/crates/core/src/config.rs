//! The run configuration document tying every section together.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::SynthWorldConfig;
use crate::error::{Error, Result};
use crate::inference::InferenceConfig;
use crate::losses::LossWeights;
use crate::model::ModelConfig;
use crate::training::TrainConfig;

pub const CONFIG_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    pub world: SynthWorldConfig,
    pub model: ModelConfig,
    pub loss: LossWeights,
    pub train: TrainConfig,
    pub inference: InferenceConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            version: CONFIG_VERSION,
            world: SynthWorldConfig::default(),
            model: ModelConfig::default(),
            loss: LossWeights::default(),
            train: TrainConfig::default(),
            inference: InferenceConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let c: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(format!("cannot parse config: {e}")))?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::Config(format!("config version {} is not supported (expected {CONFIG_VERSION})", self.version)));
        }
        self.world.validate()?;
        self.model.validate()?;
        self.loss.validate()?;
        self.train_config().validate()?;
        self.inference.validate()?;
        let (w, m) = (&self.world, &self.model);
        if w.d_model != m.d_model {
            return Err(Error::Config(format!("world embedding width D = {} differs from the model's D = {}", w.d_model, m.d_model)));
        }
        if w.latent != m.latent {
            return Err(Error::Config(format!("world latent shape {:?} differs from the model's {:?}", w.latent, m.latent)));
        }
        let steps = self.inference.steps.unwrap_or(w.steps);
        if w.steps > m.max_step || steps > m.max_step {
            return Err(Error::Config(format!("schedule length {} exceeds the model's largest step {}", w.steps.max(steps), m.max_step)));
        }
        Ok(())
    }

    /// The training section with the loss weights folded in.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig { loss: self.loss.clone(), ..self.train.clone() }
    }
}
