//! TOML configuration, command-line overrides and the resolved record.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use dinoiser_core::denoiser::pipeline::PipelineConfig;
use dinoiser_core::eval::{DatasetKind, SlidingWindow};
use dinoiser_core::featurizer::BackboneOptions;
use dinoiser_core::teachers::EmbeddingKind;
use dinoiser_core::templates::TemplateSet;
use dinoiser_core::training::TrainConfig;
use dinoiser_service::ServiceConfig;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TeacherConfig {
    pub weights: PathBuf,
    #[serde(default)]
    pub kind: EmbeddingKind,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSection {
    /// Dataset root with `images/` and `<split>.txt`.
    pub data: Option<PathBuf>,
    pub split: Option<String>,
    /// Directory of teacher objectness masks, `<id>.png`.
    pub masks: Option<PathBuf>,
    #[serde(flatten)]
    pub config: TrainConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub dataset: Option<DatasetKind>,
    pub root: Option<PathBuf>,
    pub split: Option<String>,
    pub sliding: SlidingWindow,
    /// Teacher objectness masks for teacher background refinement.
    pub masks: Option<PathBuf>,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            dataset: None,
            root: None,
            split: None,
            sliding: SlidingWindow::default(),
            masks: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ServeSection {
    pub addr: String,
    #[serde(flatten)]
    pub service: ServiceConfig,
}

impl Default for ServeSection {
    fn default() -> Self {
        Self {
            addr: "127.0.0.1:8080".into(),
            service: ServiceConfig::default(),
        }
    }
}

/// Everything a run depends on. Written out in full, after overrides, as
/// `resolved_config.toml` in the output directory.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CliConfig {
    pub command: String,
    pub deterministic: bool,
    pub output_dir: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub allow_tap_mismatch: bool,
    pub templates: TemplateSet,
    pub backbone: Option<BackboneOptions>,
    pub teacher: Option<TeacherConfig>,
    pub pipeline: PipelineConfig,
    pub train: TrainSection,
    pub eval: EvalSection,
    pub serve: ServeSection,
}

impl CliConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let mut cfg: CliConfig = toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.rebase(base);
        Ok(cfg)
    }

    /// Make relative paths in the file relative to the file's directory.
    fn rebase(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let Some(b) = &mut self.backbone {
            fix(&mut b.weights);
            if let Some(t) = &mut b.tokenizer {
                fix(t);
            }
        }
        for p in [
            self.checkpoint.as_mut(),
            self.output_dir.as_mut(),
            self.teacher.as_mut().map(|t| &mut t.weights),
            self.train.data.as_mut(),
            self.train.masks.as_mut(),
            self.eval.root.as_mut(),
            self.eval.masks.as_mut(),
        ]
        .into_iter()
        .flatten()
        {
            fix(p);
        }
    }

    pub fn backbone(&self) -> Result<BackboneOptions> {
        let mut opts = self
            .backbone
            .clone()
            .context("no backbone configured: pass --weights or set [backbone] in the config")?;
        opts.weights = resolve_weights(&opts.weights);
        if let Some(t) = &opts.tokenizer {
            opts.tokenizer = Some(resolve_weights(t));
        }
        Ok(opts)
    }

    pub fn output_dir(&self) -> PathBuf {
        self.output_dir.clone().unwrap_or_else(|| PathBuf::from("."))
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    /// Print the resolved config and write it next to the outputs.
    pub fn persist(&self) -> Result<()> {
        let text = self.to_toml()?;
        eprintln!("# resolved config\n{text}");
        let dir = self.output_dir();
        std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        std::fs::write(dir.join("resolved_config.toml"), text)?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if let Err(e) = self.pipeline.validate() {
            bail!(e);
        }
        Ok(())
    }
}

/// Relative weight paths that do not exist are looked up in the cache
/// directory named by `DINOISER_CACHE_DIR`.
pub fn resolve_weights(path: &Path) -> PathBuf {
    if path.is_relative() && !path.exists() {
        if let Some(cache) = dinoiser_core::runtime::cache_dir() {
            let candidate = cache.join(path);
            if candidate.exists() {
                return candidate;
            }
        }
    }
    path.to_path_buf()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trips_through_toml() {
        let mut cfg = CliConfig {
            command: "segment".into(),
            backbone: Some(BackboneOptions::new("clip.safetensors")),
            ..CliConfig::default()
        };
        cfg.pipeline.gamma = 0.5;
        cfg.eval.dataset = Some(DatasetKind::Voc20);
        let text = cfg.to_toml().unwrap();
        let back: CliConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn relative_paths_follow_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, "checkpoint = \"heads.safetensors\"\n[backbone]\nweights = \"w/clip.safetensors\"\n").unwrap();
        let cfg = CliConfig::load(Some(&path)).unwrap();
        assert_eq!(cfg.checkpoint.unwrap(), dir.path().join("heads.safetensors"));
        assert_eq!(cfg.backbone.unwrap().weights, dir.path().join("w/clip.safetensors"));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(toml::from_str::<CliConfig>("gama = 1.0").is_err());
    }
}
