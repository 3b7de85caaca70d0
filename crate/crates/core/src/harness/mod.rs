//! Cross-validated experiment orchestration.

pub mod config;
pub mod experiment;
pub mod manifest;
pub mod overlay;
pub mod pretrain;
pub mod table;

use std::path::{Path, PathBuf};

use crate::zoo::{Backbone, Variant};

pub use config::{ExperimentConfig, Tier1Config, Tier2Config, WidthProfile};
pub use experiment::{run_experiment, RunOptions, RunSummary};
pub use manifest::{CellRecord, CellStatus, RunManifest};
pub use overlay::render_overlay;
pub use table::{emit_table, read_metrics_csv, TableOutput};

/// File layout under the work directory.
#[derive(Debug, Clone)]
pub struct Workspace {
    root: PathBuf,
}

impl Workspace {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Workspace { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn prepared_dir(&self) -> PathBuf {
        self.root.join("prepared")
    }

    pub fn prepared_image(&self, id: &str) -> PathBuf {
        self.prepared_dir().join("images").join(format!("{id}.png"))
    }

    pub fn prepared_label(&self, id: &str) -> PathBuf {
        self.prepared_dir().join("labels").join(format!("{id}.png"))
    }

    pub fn catalog_path(&self) -> PathBuf {
        self.prepared_dir().join("catalog.json")
    }

    pub fn folds_dir(&self) -> PathBuf {
        self.root.join("folds")
    }

    pub fn pretrained_dir(&self) -> PathBuf {
        self.root.join("pretrained")
    }

    pub fn tier1_checkpoint(&self, backbone: Backbone) -> PathBuf {
        self.pretrained_dir().join(format!("{}-classifier.safetensors", backbone.slug()))
    }

    pub fn tier2_checkpoint(&self, variant: Variant) -> PathBuf {
        self.pretrained_dir().join(format!("{}-source.safetensors", variant.slug()))
    }

    /// Relative path of a cell directory.
    pub fn cell_rel(&self, variant: Variant, fold: usize) -> PathBuf {
        PathBuf::from("runs").join(variant.slug()).join(format!("fold{fold}"))
    }

    pub fn cell_dir(&self, variant: Variant, fold: usize) -> PathBuf {
        self.root.join(self.cell_rel(variant, fold))
    }

    pub fn report_dir(&self) -> PathBuf {
        self.root.join("report")
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.root.join("manifest.json")
    }
}
