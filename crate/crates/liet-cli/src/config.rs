//! Declarative run configuration: one JSON document with `net`, `train`,
//! `data` and `eval` sections. Unknown keys are rejected, defaults are
//! materialized, and the resolved document is echoed into the run directory
//! so a run can be reproduced from its artifacts alone.

use std::path::Path;

use anyhow::Context;
use liet::evalkit::{EvalMode, DEFAULT_EVAL_DELTA, DEFAULT_K_PER_IMAGE};
use liet::nets::NetConfig;
use liet::synthgen::SceneSpec;
use liet::trainer::TrainConfig;

/// Scene parameters plus the dataset location used by the run.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub scene: SceneSpec,
    pub dir: Option<String>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            scene: SceneSpec::default(),
            dir: None,
        }
    }
}

/// Evaluation defaults, overridable by `eval` subcommand flags.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub mode: EvalMode,
    pub k_per_image: usize,
    pub seed: u64,
    pub delta: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            mode: EvalMode::All,
            k_per_image: DEFAULT_K_PER_IMAGE,
            seed: 0,
            delta: DEFAULT_EVAL_DELTA,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> anyhow::Result<()> {
        anyhow::ensure!(
            self.k_per_image >= 1,
            "eval.k_per_image must be at least 1, got {}",
            self.k_per_image
        );
        anyhow::ensure!(
            self.delta > 1.0,
            "eval.delta must exceed 1, got {}",
            self.delta
        );
        Ok(())
    }
}

/// The full declarative run description.
#[derive(Clone, Debug, Default, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub net: NetConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn validate(&self) -> anyhow::Result<()> {
        self.net.validate()?;
        self.train.validate()?;
        self.data.scene.validate()?;
        self.eval.validate()?;
        Ok(())
    }
}

/// Reads, validates and default-fills a config file.
pub fn parse_config(path: &Path) -> anyhow::Result<RunConfig> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("cannot read config file {}", path.display()))?;
    let config: RunConfig = serde_json::from_str(&text)
        .with_context(|| format!("config file {} is invalid", path.display()))?;
    config.validate()?;
    Ok(config)
}

/// Writes the materialized configuration as `resolved_config.json`.
pub fn write_resolved(dir: &Path, config: &RunConfig) -> anyhow::Result<std::path::PathBuf> {
    std::fs::create_dir_all(dir)?;
    let path = dir.join("resolved_config.json");
    let mut text = serde_json::to_string_pretty(config)?;
    text.push('\n');
    std::fs::write(&path, text).with_context(|| format!("cannot write {}", path.display()))?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_materializes_all_defaults() {
        let config: RunConfig = serde_json::from_str("{}").unwrap();
        assert_eq!(config, RunConfig::default());
        assert_eq!(config.train.weights.img, 100.0);
        assert_eq!(config.train.weights.aa, 100.0);
        assert_eq!(config.train.lr_gen, 1e-4);
        assert_eq!(config.data.scene.size, 64);
        assert_eq!(config.eval.k_per_image, 5);
        config.validate().unwrap();
    }

    #[test]
    fn negative_learning_rate_error_names_the_key() {
        let config: RunConfig = serde_json::from_str("{\"train\":{\"lr_gen\":-1}}").unwrap();
        let err = config.validate().unwrap_err().to_string();
        assert!(err.contains("train.lr_gen"), "{err}");
    }

    #[test]
    fn unknown_keys_are_named() {
        let err = serde_json::from_str::<RunConfig>("{\"trian\":{}}")
            .unwrap_err()
            .to_string();
        assert!(err.contains("trian"), "{err}");
        let err = serde_json::from_str::<RunConfig>("{\"train\":{\"lr_gne\":0.1}}")
            .unwrap_err()
            .to_string();
        assert!(err.contains("lr_gne"), "{err}");
    }

    #[test]
    fn resolved_config_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let mut config = RunConfig::default();
        config.train.max_iters = 7;
        config.data.dir = Some("somewhere".into());
        let path = write_resolved(dir.path(), &config).unwrap();
        let back = parse_config(&path).unwrap();
        assert_eq!(back, config);
    }
}
