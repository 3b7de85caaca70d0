//! Experiment configuration, read from a single TOML file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::catalog::{DEFAULT_TARGET, NUM_FOLDS};
use crate::error::{Error, Result};
use crate::metrics::AggregationMode;
use crate::surgery::TransplantMode;
use crate::trainer::TrainConfig;
use crate::zoo::{Backbone, Variant, Widths};

/// Channel-width profile of every network built by the experiment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum WidthProfile {
    #[default]
    Reference,
    Tiny,
}

impl WidthProfile {
    pub fn widths(self, backbone: Backbone) -> Widths {
        match self {
            WidthProfile::Reference => Widths::reference(backbone),
            WidthProfile::Tiny => Widths::tiny(backbone),
        }
    }
}

/// Classification pretraining on synthetic shapes (stand-in for ImageNet).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Tier1Config {
    pub enabled: bool,
    pub mode: TransplantMode,
    /// Existing classifier checkpoint used instead of synthetic pretraining.
    pub checkpoint: Option<PathBuf>,
    pub images: usize,
    pub seed: u64,
    pub train: TrainConfig,
}

impl Default for Tier1Config {
    fn default() -> Self {
        Tier1Config {
            enabled: true,
            mode: TransplantMode::Partial,
            checkpoint: None,
            images: 32,
            seed: 101,
            train: TrainConfig {
                learning_rate: 0.002,
                epochs: 3,
                dropout_rate: 0.0,
                ..TrainConfig::default()
            },
        }
    }
}

/// Segmentation pretraining on synthetic multi-class blobs (stand-in for the
/// 21-class source).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Tier2Config {
    pub enabled: bool,
    pub mode: TransplantMode,
    /// Existing segmentation checkpoint used instead of synthetic pretraining.
    pub checkpoint: Option<PathBuf>,
    pub num_classes: usize,
    pub images: usize,
    pub image_size: u32,
    pub seed: u64,
    pub train: TrainConfig,
}

impl Default for Tier2Config {
    fn default() -> Self {
        Tier2Config {
            enabled: true,
            mode: TransplantMode::Full,
            checkpoint: None,
            num_classes: 21,
            images: 32,
            image_size: 48,
            seed: 202,
            train: TrainConfig {
                learning_rate: 0.002,
                epochs: 3,
                dropout_rate: 0.0,
                ..TrainConfig::default()
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReportOptions {
    /// Aggregation shown in the Markdown table; CSVs always carry both.
    pub aggregation: AggregationMode,
    /// Overlay panels rendered per cell from the start of the test list.
    pub overlays: usize,
}

impl Default for ReportOptions {
    fn default() -> Self {
        ReportOptions {
            aggregation: AggregationMode::Micro,
            overlays: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Dataset root with `images/` and `masks/`, relative to the work directory.
    pub dataset_root: PathBuf,
    /// Diagnosis CSV; `<dataset_root>/diagnosis.csv` when absent.
    pub diagnosis_table: Option<PathBuf>,
    pub variants: Vec<Variant>,
    pub folds: Vec<usize>,
    /// (height, width) every image is resized to.
    pub image_size: (u32, u32),
    pub widths: WidthProfile,
    pub fold_seed: u64,
    pub train: TrainConfig,
    pub tier1: Tier1Config,
    pub tier2: Tier2Config,
    pub report: ReportOptions,
    pub parallel_cells: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            dataset_root: PathBuf::from("data"),
            diagnosis_table: None,
            variants: Variant::ALL.to_vec(),
            folds: (0..NUM_FOLDS).collect(),
            image_size: DEFAULT_TARGET,
            widths: WidthProfile::Reference,
            fold_seed: 0,
            train: TrainConfig::default(),
            tier1: Tier1Config::default(),
            tier2: Tier2Config::default(),
            report: ReportOptions::default(),
            parallel_cells: false,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn resolve(&self, work: &Path, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            work.join(p)
        }
    }

    pub fn dataset_root(&self, work: &Path) -> PathBuf {
        self.resolve(work, &self.dataset_root)
    }

    pub fn diagnosis_table(&self, work: &Path) -> PathBuf {
        match &self.diagnosis_table {
            Some(p) => self.resolve(work, p),
            None => self.dataset_root(work).join("diagnosis.csv"),
        }
    }

    /// Checks that do not touch the file system.
    pub fn validate_values(&self) -> Result<()> {
        if self.variants.is_empty() {
            return Err(Error::Config("variants must list at least one network".into()));
        }
        if self.folds.is_empty() || self.folds.iter().any(|&k| k >= NUM_FOLDS) {
            return Err(Error::Config(format!(
                "folds must be a non-empty subset of 0..{NUM_FOLDS}, got {:?}",
                self.folds
            )));
        }
        if self.image_size.0 == 0 || self.image_size.1 == 0 {
            return Err(Error::Config(format!("image_size must be positive, got {:?}", self.image_size)));
        }
        if self.tier2.num_classes < 2 || self.tier2.image_size == 0 {
            return Err(Error::Config("tier2 needs at least 2 classes and a positive image_size".into()));
        }
        self.train.validate()?;
        self.tier1.train.validate()?;
        self.tier2.train.validate()
    }

    /// Value checks plus existence of every referenced path.
    pub fn validate(&self, work: &Path) -> Result<()> {
        self.validate_values()?;
        let mut paths = vec![self.dataset_root(work), self.diagnosis_table(work)];
        paths.extend(self.tier1.checkpoint.iter().map(|p| self.resolve(work, p)));
        paths.extend(self.tier2.checkpoint.iter().map(|p| self.resolve(work, p)));
        for p in paths {
            if !p.exists() {
                return Err(Error::Config(format!("{} does not exist", p.display())));
            }
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        sha256_json(self)
    }

    /// Hash of the settings that determine a single cell's outcome; the
    /// variant/fold selection and report options are excluded.
    pub fn cell_hash(&self) -> String {
        let mut c = self.clone();
        c.variants.clear();
        c.folds.clear();
        c.report = ReportOptions::default();
        c.parallel_cells = false;
        sha256_json(&c)
    }
}

pub(crate) fn sha256_json<T: Serialize>(value: &T) -> String {
    let bytes = serde_json::to_vec(value).expect("config serialises");
    let digest = Sha256::digest(&bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_variant_list_is_rejected() {
        let cfg = ExperimentConfig::from_toml_str("variants = []").unwrap();
        let err = cfg.validate_values().unwrap_err();
        assert!(err.to_string().contains("variants"));
    }

    #[test]
    fn defaults_and_overrides() {
        let cfg = ExperimentConfig::from_toml_str(
            r#"
            variants = ["fcn8s", "fcn-alexnet"]
            widths = "tiny"
            image_size = [64, 80]
            [train]
            epochs = 5
            [tier2]
            enabled = false
            "#,
        )
        .unwrap();
        assert_eq!(cfg.variants, vec![Variant::Fcn8s, Variant::FcnAlexNet]);
        assert_eq!(cfg.train.epochs, 5);
        assert_eq!(cfg.train.learning_rate, 1e-4);
        assert_eq!(cfg.tier2.mode, TransplantMode::Full);
        assert!(!cfg.tier2.enabled);
        assert_eq!(cfg.folds, vec![0, 1, 2, 3, 4]);
        cfg.validate_values().unwrap();
    }

    #[test]
    fn hash_is_stable_under_reserialisation() {
        let cfg = ExperimentConfig::from_toml_str("fold_seed = 9\nvariants = [\"fcn16s\"]").unwrap();
        let again = ExperimentConfig::from_toml_str(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(cfg, again);
        assert_eq!(cfg.hash(), again.hash());
        let other = ExperimentConfig { fold_seed: 10, ..cfg.clone() };
        assert_ne!(cfg.hash(), other.hash());
        let more = ExperimentConfig { variants: Variant::ALL.to_vec(), ..cfg.clone() };
        assert_eq!(cfg.cell_hash(), more.cell_hash());
    }

    #[test]
    fn unknown_keys_are_errors() {
        assert!(ExperimentConfig::from_toml_str("epochs = 3").is_err());
    }

    #[test]
    fn missing_dataset_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let err = ExperimentConfig::default().validate(dir.path()).unwrap_err();
        assert!(err.to_string().contains("does not exist"));
    }
}
