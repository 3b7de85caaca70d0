//! Record of completed experiment cells, used for resumption.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::weights::atomic_write;
use crate::zoo::Variant;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellStatus {
    Completed,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellRecord {
    pub variant: Variant,
    pub fold: usize,
    pub status: CellStatus,
    pub error: Option<String>,
    /// Relative to the work directory.
    pub checkpoint: PathBuf,
    /// Relative to the work directory.
    pub metrics_csv: PathBuf,
    pub wall_clock_secs: f64,
    pub seed: u64,
    pub config_hash: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub cells: Vec<CellRecord>,
}

impl RunManifest {
    pub fn load_or_default(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Ok(RunManifest::default());
        }
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text)
            .map_err(|e| Error::Experiment(format!("corrupt manifest {}: {e}", path.display())))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        atomic_write(path, serde_json::to_string_pretty(self)?.as_bytes())
    }

    pub fn get(&self, variant: Variant, fold: usize) -> Option<&CellRecord> {
        self.cells.iter().find(|c| c.variant == variant && c.fold == fold)
    }

    /// Insert or replace the record of `(variant, fold)`, keeping cells sorted.
    pub fn upsert(&mut self, record: CellRecord) {
        self.cells.retain(|c| !(c.variant == record.variant && c.fold == record.fold));
        self.cells.push(record);
        self.cells.sort_by_key(|c| (Variant::ALL.iter().position(|v| *v == c.variant), c.fold));
    }

    /// Every requested cell is recorded as completed.
    pub fn is_complete(&self, variants: &[Variant], folds: &[usize]) -> bool {
        variants.iter().all(|&v| {
            folds
                .iter()
                .all(|&k| self.get(v, k).is_some_and(|c| c.status == CellStatus::Completed))
        })
    }

    /// Hash of the manifest with wall-clock times removed.
    pub fn content_hash(&self) -> String {
        let mut m = self.clone();
        for c in &mut m.cells {
            c.wall_clock_secs = 0.0;
        }
        super::config::sha256_json(&m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(v: Variant, fold: usize, secs: f64) -> CellRecord {
        CellRecord {
            variant: v,
            fold,
            status: CellStatus::Completed,
            error: None,
            checkpoint: format!("runs/{}/fold{fold}/best.safetensors", v.slug()).into(),
            metrics_csv: format!("runs/{}/fold{fold}/metrics.csv", v.slug()).into(),
            wall_clock_secs: secs,
            seed: 1,
            config_hash: "abc".into(),
        }
    }

    #[test]
    fn upsert_replaces_and_sorts() {
        let mut m = RunManifest::default();
        m.upsert(record(Variant::Fcn8s, 1, 1.0));
        m.upsert(record(Variant::Fcn8s, 0, 1.0));
        m.upsert(record(Variant::FcnAlexNet, 0, 1.0));
        m.upsert(record(Variant::Fcn8s, 1, 2.0));
        assert_eq!(m.cells.len(), 3);
        assert_eq!(m.cells[0].variant, Variant::FcnAlexNet);
        assert_eq!(m.get(Variant::Fcn8s, 1).unwrap().wall_clock_secs, 2.0);
        assert!(m.is_complete(&[Variant::Fcn8s], &[0, 1]));
        assert!(!m.is_complete(&[Variant::Fcn8s], &[0, 1, 2]));
    }

    #[test]
    fn content_hash_ignores_wall_clock() {
        let mut a = RunManifest::default();
        a.upsert(record(Variant::Fcn32s, 0, 1.0));
        let mut b = RunManifest::default();
        b.upsert(record(Variant::Fcn32s, 0, 99.0));
        assert_eq!(a.content_hash(), b.content_hash());
        b.cells[0].seed = 2;
        assert_ne!(a.content_hash(), b.content_hash());
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("manifest.json");
        assert_eq!(RunManifest::load_or_default(&p).unwrap(), RunManifest::default());
        let mut m = RunManifest { config_hash: "h".into(), cells: vec![] };
        m.upsert(record(Variant::Fcn16s, 3, 4.5));
        m.save(&p).unwrap();
        assert_eq!(RunManifest::load_or_default(&p).unwrap(), m);
    }
}
