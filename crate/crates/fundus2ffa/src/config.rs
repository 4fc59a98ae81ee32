//! Run configuration file: one TOML document mirroring the training,
//! saliency, network, feature-extractor and SSIM settings. Every field is
//! optional and falls back to the owning module's default; unknown keys are
//! rejected naming the offender. Command-line flags override file values,
//! file values override built-in defaults.

use std::path::Path;

use crate::error::{Error, Result};
use crate::metrics::SsimParams;
use crate::networks::features::FeatureExtractorConfig;
use crate::networks::{DiscriminatorConfig, GeneratorConfig};
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, Default, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
    pub features: FeatureExtractorConfig,
    pub ssim: SsimParams,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        RunConfig::parse(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn parse(text: &str) -> std::result::Result<RunConfig, String> {
        toml::from_str(text).map_err(|e| e.to_string())
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.generator.validate()?;
        self.discriminator.validate()?;
        self.features.validate()
    }

    /// Canonical snapshot written next to every run; diffing two snapshots
    /// shows exactly which knobs distinguish the runs.
    pub fn snapshot_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("serializing config: {e}")))
    }

    /// Ablation preset: the combined loss without its saliency term.
    pub fn without_saliency_loss(&self) -> RunConfig {
        let mut cfg = self.clone();
        cfg.train.loss_weights.gamma = 0.0;
        cfg
    }

    /// Ablation preset: swaps in the heavily-strided five-layer
    /// discriminator whose receptive field covers whole desk-scale images.
    pub fn without_patch_discriminator(&self) -> RunConfig {
        let mut cfg = self.clone();
        cfg.discriminator = DiscriminatorConfig::whole_image();
        cfg
    }
}
