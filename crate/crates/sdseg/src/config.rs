//! Run configuration file: a strict TOML schema with data, model, training
//! and evaluation sections. Every field has a default, unknown keys are
//! rejected, and the effective post-default config can be snapshotted.

use crate::error::{Result, SdsegError};
use crate::game::TrainConfig;
use crate::nets::NetConfig;
use crate::synthdata::{style_preset, BenchmarkConfig};
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Benchmark geometry and domain roster, by preset name.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub depth: usize,
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    pub num_source_samples: usize,
    pub num_target_samples: usize,
    pub source_preset: String,
    pub target_presets: Vec<String>,
    pub paired_anatomy: bool,
    pub seed: u64,
}

impl Default for DataSection {
    fn default() -> Self {
        let b = BenchmarkConfig::default();
        DataSection {
            depth: b.depth,
            height: b.height,
            width: b.width,
            num_classes: b.num_classes,
            num_source_samples: b.num_source_samples,
            num_target_samples: b.num_target_samples,
            source_preset: "source".into(),
            target_presets: vec!["lowfield".into(), "bright".into(), "lowcontrast".into()],
            paired_anatomy: b.paired_anatomy,
            seed: b.seed,
        }
    }
}

impl DataSection {
    pub fn benchmark_config(&self) -> Result<BenchmarkConfig> {
        let k = self.num_classes;
        Ok(BenchmarkConfig {
            depth: self.depth,
            height: self.height,
            width: self.width,
            num_classes: k,
            num_source_samples: self.num_source_samples,
            num_target_samples: self.num_target_samples,
            source_style: style_preset(&self.source_preset, k)?,
            target_styles: self
                .target_presets
                .iter()
                .map(|name| style_preset(name, k))
                .collect::<Result<Vec<_>>>()?,
            paired_anatomy: self.paired_anatomy,
            seed: self.seed,
        })
    }
}

/// Output locations and the seed set used by the ablation suite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluationSection {
    /// Reports are written as `<report_base>.csv` and `<report_base>.txt`.
    pub report_base: String,
    pub plots_dir: String,
    pub ablation_seeds: Vec<u64>,
}

impl Default for EvaluationSection {
    fn default() -> Self {
        EvaluationSection {
            report_base: "report".into(),
            plots_dir: "plots".into(),
            ablation_seeds: vec![0, 1, 2],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfigFile {
    pub data: DataSection,
    pub model: NetConfig,
    pub training: TrainConfig,
    pub evaluation: EvaluationSection,
}

impl RunConfigFile {
    /// The sizing used throughout the desk experiments: small nets, 60
    /// epochs, and a learning rate matched to that short step budget.
    pub fn desk() -> Self {
        RunConfigFile {
            model: NetConfig::desk(DataSection::default().num_classes),
            training: TrainConfig {
                learning_rate: 1e-3,
                ..Default::default()
            },
            ..Default::default()
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| SdsegError::io(path.display().to_string(), e))?;
        let cfg: RunConfigFile = toml::from_str(&text)
            .map_err(|e| SdsegError::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.training.validate()?;
        if self.data.num_classes != self.model.num_classes {
            return Err(SdsegError::Config(format!(
                "data.num_classes {} != model.num_classes {}",
                self.data.num_classes, self.model.num_classes
            )));
        }
        if self.evaluation.ablation_seeds.is_empty() {
            return Err(SdsegError::Config(
                "evaluation.ablation_seeds must not be empty".into(),
            ));
        }
        self.data.benchmark_config().map(|_| ())
    }

    /// Effective configuration with all defaults applied, as TOML.
    pub fn snapshot_toml(&self) -> Result<String> {
        toml::to_string_pretty(self)
            .map_err(|e| SdsegError::Config(format!("config serialization: {e}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_yields_defaults() {
        let cfg: RunConfigFile = toml::from_str("").unwrap();
        assert_eq!(cfg, RunConfigFile::default());
        cfg.validate().unwrap();
    }

    #[test]
    fn partial_sections_fill_in_defaults() {
        let cfg: RunConfigFile = toml::from_str(
            "[training]\nlearning_rate = 0.001\n\n[data]\nseed = 99\n",
        )
        .unwrap();
        assert_eq!(cfg.training.learning_rate, 1e-3);
        assert_eq!(cfg.training.epochs, TrainConfig::default().epochs);
        assert_eq!(cfg.data.seed, 99);
        assert_eq!(cfg.model, NetConfig::default());
    }

    #[test]
    fn unknown_keys_are_rejected_everywhere() {
        assert!(toml::from_str::<RunConfigFile>("[extra]\nx = 1\n").is_err());
        assert!(toml::from_str::<RunConfigFile>("[data]\nbogus = 1\n").is_err());
        assert!(toml::from_str::<RunConfigFile>("[model]\nbogus = 1\n").is_err());
        assert!(toml::from_str::<RunConfigFile>("[training]\nbogus = 1\n").is_err());
        assert!(toml::from_str::<RunConfigFile>("[evaluation]\nbogus = 1\n").is_err());
    }

    #[test]
    fn snapshot_round_trips() {
        let cfg = RunConfigFile::desk();
        let text = cfg.snapshot_toml().unwrap();
        let back: RunConfigFile = toml::from_str(&text).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn benchmark_config_resolves_presets() {
        let cfg = RunConfigFile::default();
        let bench = cfg.data.benchmark_config().unwrap();
        assert_eq!(bench.target_styles.len(), 3);
        assert_eq!(bench.target_styles[0].domain_id, "lowfield");
        assert_eq!(bench.source_style.domain_id, "source");

        let mut bad = cfg.clone();
        bad.data.target_presets = vec!["nope".into()];
        assert!(bad.data.benchmark_config().is_err());
        assert!(bad.validate().is_err());
    }

    #[test]
    fn class_count_mismatch_is_rejected() {
        let mut cfg = RunConfigFile::default();
        cfg.model.num_classes = 5;
        assert!(cfg.validate().is_err());
    }
}
