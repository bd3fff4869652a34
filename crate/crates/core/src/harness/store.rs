//! Content-addressed artifact cache and the per-run manifest.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::data::{load_dataset, save_dataset, Dataset, Split};
use crate::digest::sha256_hex;
use crate::models::{load_model, save_model, Classifier, ConditionalVae, SavedModel};

pub const CACHE_ENV: &str = "CACE_LAB_CACHE";

/// Cache directory: `$CACE_LAB_CACHE` if set, else `<out>/cache`.
pub fn cache_root(out_dir: &Path) -> PathBuf {
    match std::env::var_os(CACHE_ENV) {
        Some(v) if !v.is_empty() => PathBuf::from(v),
        _ => out_dir.join("cache"),
    }
}

#[derive(Debug, Clone)]
pub struct Store {
    pub root: PathBuf,
}

fn split_stem(split: Split) -> &'static str {
    match split {
        Split::Train => "train",
        Split::Test => "test",
    }
}

impl Store {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn dataset_dir(&self, key: &str) -> PathBuf {
        self.root.join("datasets").join(key)
    }

    pub fn dataset_manifest(&self, key: &str, split: Split) -> PathBuf {
        self.dataset_dir(key)
            .join(format!("{}.manifest.json", split_stem(split)))
    }

    pub fn has_dataset(&self, key: &str) -> bool {
        self.dataset_manifest(key, Split::Train).is_file()
            && self.dataset_manifest(key, Split::Test).is_file()
    }

    /// Write both splits into a scratch directory, then move it into place,
    /// so an interrupted run never leaves a half-written artifact.
    pub fn save_dataset(&self, key: &str, train: &Dataset, test: &Dataset) -> Result<(), HarnessError> {
        let dir = self.dataset_dir(key);
        let tmp = dir.with_extension("tmp");
        if tmp.exists() {
            std::fs::remove_dir_all(&tmp)?;
        }
        save_dataset(train, &tmp, "train")?;
        save_dataset(test, &tmp, "test")?;
        if dir.exists() {
            std::fs::remove_dir_all(&dir)?;
        }
        std::fs::rename(&tmp, &dir)?;
        Ok(())
    }

    pub fn load_dataset(&self, key: &str, split: Split) -> Result<Dataset, HarnessError> {
        let path = self.dataset_manifest(key, split);
        if !path.is_file() {
            return Err(HarnessError::MissingArtifact(format!(
                "dataset {key} ({}); run `generate` first",
                split_stem(split)
            )));
        }
        Ok(load_dataset(&path)?)
    }

    pub fn model_path(&self, kind: &str, key: &str) -> PathBuf {
        self.root.join("models").join(format!("{kind}-{key}.ckpt"))
    }

    pub fn save_model(&self, kind: &str, key: &str, model: &SavedModel) -> Result<PathBuf, HarnessError> {
        let path = self.model_path(kind, key);
        std::fs::create_dir_all(self.root.join("models"))?;
        save_model(model, &path)?;
        Ok(path)
    }

    fn load(&self, kind: &str, key: &str) -> Result<SavedModel, HarnessError> {
        let path = self.model_path(kind, key);
        if !path.is_file() {
            return Err(HarnessError::MissingArtifact(format!(
                "{kind} checkpoint {key}; run `train` first"
            )));
        }
        Ok(load_model(&path)?)
    }

    pub fn load_classifier(&self, key: &str) -> Result<Classifier, HarnessError> {
        Ok(self.load("classifier", key)?.into_classifier()?)
    }

    pub fn load_vae(&self, key: &str) -> Result<ConditionalVae, HarnessError> {
        Ok(self.load("vae", key)?.into_vae()?)
    }
}

/// One artifact the run produced or consumed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArtifactEntry {
    pub path: PathBuf,
    /// SHA-256 of the file at `path`.
    pub sha256: String,
}

impl ArtifactEntry {
    pub fn of(path: &Path) -> Result<Self, HarnessError> {
        Ok(Self {
            path: path.to_path_buf(),
            sha256: sha256_hex(&std::fs::read(path)?),
        })
    }
}

/// Everything needed to trace a number in the results back to its inputs.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub name: String,
    pub config_digest: String,
    pub code_version: String,
    pub master_seed: u64,
    pub stage_seeds: BTreeMap<String, u64>,
    pub artifacts: BTreeMap<String, ArtifactEntry>,
    pub reports: BTreeMap<String, ArtifactEntry>,
    /// Final training metrics per model.
    pub metrics: BTreeMap<String, serde_json::Value>,
    pub wall_clock_seconds: BTreeMap<String, f64>,
    /// Choices the run depends on that are not visible in the numbers.
    #[serde(default)]
    pub notes: Vec<String>,
}

impl RunManifest {
    pub fn load_or_default(path: &Path) -> Result<Self, HarnessError> {
        if path.is_file() {
            Ok(serde_json::from_slice(&std::fs::read(path)?)?)
        } else {
            Ok(Self::default())
        }
    }

    pub fn save(&self, path: &Path) -> Result<(), HarnessError> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    /// Re-hash every listed file and report the first mismatch.
    pub fn verify(&self) -> Result<(), HarnessError> {
        for (name, entry) in self.artifacts.iter().chain(&self.reports) {
            let bytes = std::fs::read(&entry.path)
                .map_err(|_| HarnessError::MissingArtifact(format!("{name} at {}", entry.path.display())))?;
            if sha256_hex(&bytes) != entry.sha256 {
                return Err(HarnessError::Corrupt(format!(
                    "{name} at {} changed on disk",
                    entry.path.display()
                )));
            }
        }
        Ok(())
    }
}
