//! Run configuration file shared by the command-line subcommands.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference::{ClassifyOptions, SamplerConfig};
use crate::model::ModelConfig;
use crate::training::TrainConfig;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbedderBackend {
    #[default]
    Spectral,
    Precomputed,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmbedderConfig {
    pub backend: EmbedderBackend,
    /// JSON-lines embedding table for the precomputed backend.
    pub path: Option<PathBuf>,
    /// Analysis rate of the spectral backend.
    pub sample_rate: Option<u32>,
}

/// Everything one invocation needs; any field may be omitted.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub checkpoint: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub sampler: SamplerConfig,
    pub classify: ClassifyOptions,
    pub embedder: EmbedderConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: None,
            checkpoint: None,
            output_dir: None,
            model: ModelConfig::toy(0),
            train: TrainConfig::default(),
            sampler: SamplerConfig::default(),
            classify: ClassifyOptions::default(),
            embedder: EmbedderConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Reads a config file; relative paths inside it are taken relative to
    /// the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let fix = |p: &mut Option<PathBuf>| {
            if let Some(p) = p.as_mut().filter(|p| p.is_relative()) {
                *p = base.join(&*p);
            }
        };
        fix(&mut cfg.checkpoint);
        fix(&mut cfg.output_dir);
        fix(&mut cfg.embedder.path);
        fix(&mut cfg.model.text.weights_path);
        fix(&mut cfg.model.text.vocab_path);
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_round_trip() {
        let mut cfg = RunConfig::default();
        cfg.seed = Some(9);
        cfg.sampler.n_steps = 50;
        cfg.classify.weights = Some(vec![1.0, 2.0]);
        let text = cfg.to_toml().unwrap();
        assert_eq!(RunConfig::from_toml(&text).unwrap(), cfg);
    }

    #[test]
    fn partial_file_uses_defaults_and_resolves_paths() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(
            &path,
            "checkpoint = \"ck/step-00000010.ckpt\"\n[sampler]\nn_steps = 20\n",
        )
        .unwrap();
        let cfg = RunConfig::load(&path).unwrap();
        assert_eq!(cfg.sampler.n_steps, 20);
        assert_eq!(cfg.sampler.trim_chunk, 1024);
        assert_eq!(
            cfg.checkpoint.unwrap(),
            dir.path().join("ck/step-00000010.ckpt")
        );
        assert_eq!(cfg.model, ModelConfig::toy(0));
    }

    #[test]
    fn bad_file_is_config_error() {
        assert!(matches!(
            RunConfig::from_toml("seed = \"x\""),
            Err(Error::Config(_))
        ));
    }
}
