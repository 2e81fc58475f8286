//! Run configuration: file locations plus the training section.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::training::TrainConfig;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ConfigError {
    #[error("reading {path}: {message}")]
    Io { path: String, message: String },
    #[error("{path}: {message}")]
    Parse { path: String, message: String },
    #[error("missing setting `{0}` (set it in the config file or pass --{1})")]
    Missing(&'static str, &'static str),
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub hierarchy: Option<PathBuf>,
    pub train: Option<PathBuf>,
    pub valid: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub embeddings: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
    pub training: TrainConfig,
}

impl RunConfig {
    /// Parses a JSON config. Relative paths are resolved against `base`.
    pub fn parse(text: &str, source: &str, base: &Path) -> Result<Self, ConfigError> {
        let mut cfg: RunConfig = serde_json::from_str(text)
            .map_err(|e| ConfigError::Parse { path: source.into(), message: e.to_string() })?;
        for path in cfg.paths_mut().into_iter().flatten() {
            if path.is_relative() {
                *path = base.join(&*path);
            }
        }
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .map_err(|e| ConfigError::Io { path: path.display().to_string(), message: e.to_string() })?;
        let base = path.parent().unwrap_or(Path::new(""));
        Self::parse(&text, &path.display().to_string(), base)
    }

    fn paths_mut(&mut self) -> [&mut Option<PathBuf>; 7] {
        [
            &mut self.hierarchy,
            &mut self.train,
            &mut self.valid,
            &mut self.test,
            &mut self.embeddings,
            &mut self.checkpoint,
            &mut self.output_dir,
        ]
    }

    pub fn hierarchy_path(&self) -> Result<&Path, ConfigError> {
        self.hierarchy.as_deref().ok_or(ConfigError::Missing("hierarchy", "hierarchy"))
    }

    pub fn train_path(&self) -> Result<&Path, ConfigError> {
        self.train.as_deref().ok_or(ConfigError::Missing("train", "train"))
    }

    pub fn test_path(&self) -> Result<&Path, ConfigError> {
        self.test.as_deref().ok_or(ConfigError::Missing("test", "test"))
    }

    pub fn output_dir(&self) -> PathBuf {
        self.output_dir.clone().unwrap_or_else(|| PathBuf::from("."))
    }

    /// The configured checkpoint, or `model.json` in the output directory.
    pub fn checkpoint_path(&self) -> PathBuf {
        self.checkpoint.clone().unwrap_or_else(|| self.output_dir().join("model.json"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_and_resolves_paths() {
        let text = r#"{"hierarchy": "h.tsv", "test": "/abs/t.jsonl", "training": {"seed": 3}}"#;
        let cfg = RunConfig::parse(text, "c.json", Path::new("/data")).unwrap();
        assert_eq!(cfg.hierarchy.as_deref(), Some(Path::new("/data/h.tsv")));
        assert_eq!(cfg.test.as_deref(), Some(Path::new("/abs/t.jsonl")));
        assert_eq!(cfg.training.seed, 3);
        assert_eq!(cfg.checkpoint_path(), PathBuf::from("./model.json"));
        assert!(matches!(cfg.train_path(), Err(ConfigError::Missing("train", _))));
    }

    #[test]
    fn rejects_unknown_keys() {
        let err = RunConfig::parse(r#"{"hierarchyy": "h"}"#, "c.json", Path::new("")).unwrap_err();
        assert!(matches!(err, ConfigError::Parse { .. }));
        let err = RunConfig::parse(r#"{"training": {"lr": 1}}"#, "c.json", Path::new("")).unwrap_err();
        assert!(err.to_string().contains("unknown field"));
    }
}
