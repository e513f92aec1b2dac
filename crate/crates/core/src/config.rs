//! Declarative pipeline configuration: one TOML file drives every stage.
//! A SHA-256 over the canonical JSON encoding is stamped into every artifact
//! so stages refuse to mix outputs produced under different settings.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::model::ModelConfig;
use crate::signal::FilterSpec;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {msg}")]
    Read { path: String, msg: String },
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("missing path {role}: {path}")]
    MissingPath { role: String, path: String },
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Paths {
    /// Where the corpus (manifest.csv, labels.csv, waves/) lives.
    pub data_dir: PathBuf,
    /// Image cache directory.
    pub cache_dir: PathBuf,
    /// Run outputs: checkpoints, reports, overlays.
    pub out_dir: PathBuf,
}

impl Paths {
    pub fn manifest(&self) -> PathBuf {
        self.data_dir.join("manifest.csv")
    }
    pub fn labels(&self) -> PathBuf {
        self.data_dir.join("labels.csv")
    }
    pub fn image_cache(&self) -> PathBuf {
        self.cache_dir.join("images.hbrt")
    }
    pub fn codebook(&self) -> PathBuf {
        self.out_dir.join("tokenizer").join("codebook.hbcb")
    }
    pub fn pretrain_dir(&self) -> PathBuf {
        self.out_dir.join("pretrain")
    }
    pub fn pretrain_checkpoint(&self) -> PathBuf {
        self.pretrain_dir().join("checkpoint_final.hbck")
    }
    pub fn finetune_dir(&self, variant: &str) -> PathBuf {
        self.out_dir.join("finetune").join(variant)
    }
    pub fn eval_dir(&self) -> PathBuf {
        self.out_dir.join("eval")
    }
    pub fn saliency_dir(&self) -> PathBuf {
        self.out_dir.join("saliency")
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RasterSettings {
    pub native_canvas: usize,
    pub side: usize,
    pub target_samples: usize,
}

impl Default for RasterSettings {
    fn default() -> Self {
        RasterSettings {
            native_canvas: 560,
            side: 224,
            target_samples: 2500,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TokenizerSettings {
    pub vocab_size: usize,
    /// Cap on the seeded uniform patch sample used for k-means.
    pub sample_patches: usize,
    pub max_iters: usize,
    pub seed: u64,
}

impl Default for TokenizerSettings {
    fn default() -> Self {
        TokenizerSettings {
            vocab_size: 64,
            sample_patches: 50_000,
            max_iters: 25,
            seed: 11,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TrainingSettings {
    pub pretrain_epochs: usize,
    pub finetune_epochs: usize,
    pub batch_size: usize,
    pub mask_ratio: f64,
    pub pretrain_lr: f64,
    pub weight_decay: f64,
    pub base_lr: f64,
    pub max_lr: f64,
    /// Model init, shuffles, and masking.
    pub seed: u64,
    /// Patient split; keep constant across runs so cohorts never move.
    pub split_seed: u64,
    pub test_fraction: f64,
    pub fractions: Vec<f64>,
    pub head_only: bool,
    pub checkpoint_every: Option<usize>,
}

impl Default for TrainingSettings {
    fn default() -> Self {
        TrainingSettings {
            pretrain_epochs: 10,
            finetune_epochs: 30,
            batch_size: 32,
            mask_ratio: 0.40,
            pretrain_lr: 5e-4,
            weight_decay: 0.05,
            base_lr: 3e-4,
            max_lr: 1e-3,
            seed: 7,
            split_seed: 17,
            test_fraction: 0.2,
            fractions: vec![0.01, 0.10, 0.25, 0.50, 1.00],
            head_only: false,
            checkpoint_every: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EvalSettings {
    pub n_bootstrap: usize,
    /// Cohort sample size for Wasserstein comparisons.
    pub sample_n: usize,
    pub seed: u64,
}

impl Default for EvalSettings {
    fn default() -> Self {
        EvalSettings {
            n_bootstrap: 500,
            sample_n: 1000,
            seed: 23,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SynthSettings {
    pub n_records: usize,
    pub positive_rate: f64,
    pub seed: u64,
    pub noise_mv: f64,
    pub st_offset_mv: f64,
    pub duration_s: f64,
}

impl Default for SynthSettings {
    fn default() -> Self {
        SynthSettings {
            n_records: 2000,
            positive_rate: 0.5,
            seed: 7,
            noise_mv: 0.05,
            st_offset_mv: 0.2,
            duration_s: 10.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct PipelineConfig {
    pub paths: Paths,
    #[serde(default)]
    pub filter: FilterSpec,
    #[serde(default)]
    pub raster: RasterSettings,
    #[serde(default)]
    pub tokenizer: TokenizerSettings,
    pub model: ModelConfig,
    #[serde(default)]
    pub training: TrainingSettings,
    #[serde(default)]
    pub eval: EvalSettings,
    #[serde(default)]
    pub synth: SynthSettings,
}

impl PipelineConfig {
    /// Desk-scale defaults rooted at a working directory.
    pub fn desk(root: &Path) -> Self {
        PipelineConfig {
            paths: Paths {
                data_dir: root.join("data"),
                cache_dir: root.join("cache"),
                out_dir: root.join("out"),
            },
            filter: FilterSpec::default(),
            raster: RasterSettings::default(),
            tokenizer: TokenizerSettings::default(),
            model: ModelConfig::desk(),
            training: TrainingSettings::default(),
            eval: EvalSettings::default(),
            synth: SynthSettings::default(),
        }
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Read {
            path: path.display().to_string(),
            msg: e.to_string(),
        })?;
        let config: PipelineConfig = toml::from_str(&text).map_err(|e| ConfigError::Read {
            path: path.display().to_string(),
            msg: e.to_string(),
        })?;
        config.validate()?;
        Ok(config)
    }

    pub fn save(&self, path: &Path) -> Result<(), ConfigError> {
        let text = toml::to_string_pretty(self).map_err(|e| ConfigError::Invalid(e.to_string()))?;
        std::fs::write(path, text).map_err(|e| ConfigError::Read {
            path: path.display().to_string(),
            msg: e.to_string(),
        })
    }

    /// Structural validation; path existence is checked per stage.
    pub fn validate(&self) -> Result<(), ConfigError> {
        self.model
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.model.vocab_size != self.tokenizer.vocab_size {
            return Err(ConfigError::Invalid(format!(
                "model.vocab_size {} != tokenizer.vocab_size {}",
                self.model.vocab_size, self.tokenizer.vocab_size
            )));
        }
        if self.model.image_side != self.raster.side {
            return Err(ConfigError::Invalid(format!(
                "model.image_side {} != raster.side {}",
                self.model.image_side, self.raster.side
            )));
        }
        if !(self.training.test_fraction > 0.0 && self.training.test_fraction < 1.0) {
            return Err(ConfigError::Invalid("test_fraction outside (0,1)".into()));
        }
        for &f in &self.training.fractions {
            if !(f > 0.0 && f <= 1.0) {
                return Err(ConfigError::Invalid(format!("fraction {f} outside (0,1]")));
            }
        }
        if !(self.training.mask_ratio > 0.0 && self.training.mask_ratio <= 1.0) {
            return Err(ConfigError::Invalid("mask_ratio outside (0,1]".into()));
        }
        if self.raster.native_canvas % 4 != 0 || self.raster.side == 0 {
            return Err(ConfigError::Invalid("bad raster geometry".into()));
        }
        Ok(())
    }

    /// Existence checks for the inputs a stage consumes.
    pub fn require_paths(&self, roles: &[(&str, PathBuf)]) -> Result<(), ConfigError> {
        for (role, path) in roles {
            if !path.exists() {
                return Err(ConfigError::MissingPath {
                    role: role.to_string(),
                    path: path.display().to_string(),
                });
            }
        }
        Ok(())
    }

    /// SHA-256 over the canonical JSON encoding.
    pub fn hash(&self) -> [u8; 32] {
        let json = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        digest.into()
    }

    pub fn hash_hex(&self) -> String {
        crate::training::hex(&self.hash())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_round_trip_preserves_hash() {
        let config = PipelineConfig::desk(Path::new("/tmp/work"));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("config.toml");
        config.save(&path).unwrap();
        let back = PipelineConfig::load(&path).unwrap();
        assert_eq!(config, back);
        assert_eq!(config.hash(), back.hash());
    }

    #[test]
    fn hash_changes_with_any_field() {
        let a = PipelineConfig::desk(Path::new("/w"));
        let mut b = a.clone();
        b.training.seed += 1;
        assert_ne!(a.hash(), b.hash());
        let mut c = a.clone();
        c.filter.high_cut_hz = 35.0;
        assert_ne!(a.hash(), c.hash());
    }

    #[test]
    fn validation_rejects_inconsistencies() {
        let mut config = PipelineConfig::desk(Path::new("/w"));
        config.tokenizer.vocab_size = 99;
        assert!(matches!(config.validate(), Err(ConfigError::Invalid(_))));

        let mut config = PipelineConfig::desk(Path::new("/w"));
        config.training.fractions = vec![0.0];
        assert!(config.validate().is_err());

        let mut config = PipelineConfig::desk(Path::new("/w"));
        config.model.hidden = 65; // not divisible by heads
        assert!(config.validate().is_err());
    }

    #[test]
    fn require_paths_reports_role() {
        let config = PipelineConfig::desk(Path::new("/nonexistent-root"));
        let err = config
            .require_paths(&[("manifest", config.paths.manifest())])
            .unwrap_err();
        assert!(matches!(err, ConfigError::MissingPath { .. }));
        assert!(err.to_string().contains("manifest"));
    }
}
