//! Training run configuration.
//!
//! ```toml
//! manifest = "data/toy/manifest.toml"
//! run_dir = "runs/toy"
//! validate_on_test = true
//!
//! [scaled]              # optional; replaces [generator] and [discriminator]
//! image_size = 16
//! base_filters = 8
//! growth_channels = 8
//! text_hidden = 64
//!
//! [text]
//! seed = 5              # seeded vocabulary over the training descriptions
//! # encoder = { kind = "file", path = "vectors.txt" }
//!
//! [perceptual]
//! provider = "identity-stub"   # or "vgg19" with weights = "vgg19.safetensors"
//!
//! [train]
//! batch_size = 8
//! iterations = 10000
//! [train.optimizer]
//! lr = 1e-4
//! ```
//!
//! Relative paths inside the file are resolved against the file's directory.
//! Command-line flags beat `TEXTCOLOR_*` environment variables, which beat the
//! file, which beats the defaults.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use textcolor::models::{DiscriminatorConfig, GeneratorConfig};
use textcolor::perceptual::{IdentityExtractor, PerceptualExtractor, Vgg};
use textcolor::text::TextEncoderSpec;
use textcolor::trainer::TrainConfig;
use textcolor::{Error, Result};

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub manifest: Option<PathBuf>,
    pub run_dir: Option<PathBuf>,
    /// Track validation L1 on the manifest's test split and keep `best.safetensors`.
    pub validate_on_test: bool,
    pub descriptions: DescriptionFiles,
    pub text: TextSettings,
    pub perceptual: PerceptualSettings,
    pub scaled: Option<ScaledModel>,
    pub generator: Option<GeneratorConfig>,
    pub discriminator: Option<DiscriminatorConfig>,
    pub train: TrainConfig,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DescriptionFiles {
    pub lexicon: Option<PathBuf>,
    pub classes: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TextSettings {
    pub encoder: Option<TextEncoderSpec>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PerceptualSettings {
    pub provider: String,
    pub weights: Option<PathBuf>,
}

impl Default for PerceptualSettings {
    fn default() -> Self {
        Self {
            provider: "identity-stub".into(),
            weights: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScaledModel {
    pub image_size: usize,
    pub base_filters: usize,
    pub growth_channels: usize,
    pub text_hidden: usize,
}

fn rebase(base: &Path, p: &mut PathBuf) {
    if p.is_relative() {
        *p = base.join(&*p);
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut cfg = Self::parse(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.rebase(path.parent().unwrap_or(Path::new("")));
        Ok(cfg)
    }

    fn rebase(&mut self, base: &Path) {
        for p in [
            self.manifest.as_mut(),
            self.run_dir.as_mut(),
            self.descriptions.lexicon.as_mut(),
            self.descriptions.classes.as_mut(),
            self.perceptual.weights.as_mut(),
        ]
        .into_iter()
        .flatten()
        {
            rebase(base, p);
        }
        if let Some(TextEncoderSpec::File { path }) = self.text.encoder.as_mut() {
            rebase(base, path);
        }
    }

    pub fn models(&self) -> Result<(GeneratorConfig, DiscriminatorConfig)> {
        let (g, d) = match (self.scaled, &self.generator, &self.discriminator) {
            (Some(_), Some(_), _) | (Some(_), _, Some(_)) => {
                return Err(Error::Config(
                    "[scaled] cannot be combined with [generator] or [discriminator]".into(),
                ))
            }
            (Some(s), None, None) => (
                GeneratorConfig::scaled(s.image_size, s.base_filters, s.growth_channels, s.text_hidden),
                DiscriminatorConfig::scaled(s.image_size, s.base_filters),
            ),
            (None, g, d) => (g.clone().unwrap_or_default(), d.clone().unwrap_or_default()),
        };
        g.validate()?;
        d.validate()?;
        Ok((g, d))
    }

    /// Everything that can be checked without touching the dataset.
    pub fn validate(&self) -> Result<()> {
        if self.manifest.is_none() {
            return Err(Error::Config("no manifest given (config `manifest`, --manifest or TEXTCOLOR_MANIFEST)".into()));
        }
        if self.run_dir.is_none() {
            return Err(Error::Config("no run directory given (config `run_dir`, --run-dir or TEXTCOLOR_RUN_DIR)".into()));
        }
        self.train.validate()?;
        let (g, d) = self.models()?;
        if g.image_size != d.image_size {
            return Err(Error::Config(format!(
                "generator image size {} differs from discriminator image size {}",
                g.image_size, d.image_size
            )));
        }
        self.extractor()?.check_layer(self.train.weights.rho)?;
        Ok(())
    }

    pub fn extractor(&self) -> Result<Arc<dyn PerceptualExtractor>> {
        match self.perceptual.provider.as_str() {
            "identity-stub" | "stub" => Ok(Arc::new(IdentityExtractor)),
            "vgg19" => {
                let path = self.perceptual.weights.as_ref().ok_or_else(|| {
                    Error::ProviderMissing("vgg19 needs `perceptual.weights` pointing at a safetensors file".into())
                })?;
                Ok(Arc::new(Vgg::vgg19(path, &candle_core::Device::Cpu)?))
            }
            other => Err(Error::Config(format!(
                "unknown perceptual provider {other:?} (expected identity-stub or vgg19)"
            ))),
        }
    }
}
