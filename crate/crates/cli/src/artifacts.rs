//! Work-directory layout, config hashing and artifact IO.
//!
//! Every stage writes into one work directory. Each artifact records the
//! hash of the settings that produced it, chained through the hash of its
//! upstream artifact, so the final hash identifies the whole pipeline
//! configuration. Paths never enter a hash.

use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};

/// Version of the JSON artifact schemas.
pub const ARTIFACT_VERSION: u32 = 1;

pub struct Work {
    root: PathBuf,
}

impl Work {
    pub fn new(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        fs::create_dir_all(&root).map_err(|e| io(&root, e))?;
        Ok(Self { root })
    }

    pub fn model(&self) -> PathBuf {
        self.root.join("model").join("model.json")
    }
    pub fn transform(&self) -> PathBuf {
        self.root.join("transform.json")
    }
    pub fn calibration(&self) -> PathBuf {
        self.root.join("calibration.json")
    }
    pub fn finetune(&self) -> PathBuf {
        self.root.join("finetune.json")
    }
    pub fn train_log(&self) -> PathBuf {
        self.root.join("train_log.jsonl")
    }
    pub fn compiled(&self) -> PathBuf {
        self.root.join("model.fatq")
    }
    pub fn eval(&self) -> PathBuf {
        self.root.join("eval.json")
    }

    /// Fails with [`CliError::MissingPrerequisite`] unless `path` exists.
    pub fn require(&self, path: PathBuf, stage: &'static str) -> Result<PathBuf> {
        if path.exists() {
            Ok(path)
        } else {
            Err(CliError::MissingPrerequisite { stage, artifact: path })
        }
    }

    /// Removes artifacts that a rerun of an earlier stage invalidates.
    pub fn clear(&self, paths: &[PathBuf]) -> Result<()> {
        for p in paths {
            match fs::remove_file(p) {
                Ok(()) => log::info!("removed stale {}", p.display()),
                Err(e) if e.kind() == std::io::ErrorKind::NotFound => {}
                Err(e) => return Err(io(p, e)),
            }
        }
        Ok(())
    }
}

pub fn io(path: &Path, source: std::io::Error) -> CliError {
    CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// `sha256` over the stage name, the upstream hash and the settings.
pub fn config_hash(stage: &str, upstream: &str, settings: &impl Serialize) -> String {
    let doc = serde_json::json!({
        "stage": stage,
        "upstream": upstream,
        "settings": settings,
    });
    let bytes = serde_json::to_vec(&doc).expect("settings serialize");
    hex::encode(Sha256::digest(bytes))
}

pub fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|source| CliError::Json {
        path: path.to_path_buf(),
        source,
    })?;
    text.push('\n');
    write_bytes(path, text.as_bytes())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| io(path, e))?;
    serde_json::from_str(&text).map_err(|source| CliError::Json {
        path: path.to_path_buf(),
        source,
    })
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hash_depends_on_every_part() {
        let a = config_hash("calibrate", "u", &serde_json::json!({"bits": 8}));
        assert_eq!(a.len(), 64);
        assert_eq!(a, config_hash("calibrate", "u", &serde_json::json!({"bits": 8})));
        assert_ne!(a, config_hash("finetune", "u", &serde_json::json!({"bits": 8})));
        assert_ne!(a, config_hash("calibrate", "v", &serde_json::json!({"bits": 8})));
        assert_ne!(a, config_hash("calibrate", "u", &serde_json::json!({"bits": 7})));
    }

    #[test]
    fn floats_survive_a_json_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("v.json");
        let v: Vec<f64> = (1..2000)
            .map(|i| (i as f64).sqrt() / 7.0 + 1e-300 * i as f64)
            .chain([0.1 + 0.2, f64::MIN_POSITIVE])
            .collect();
        write_json(&p, &v).unwrap();
        let back: Vec<f64> = read_json(&p).unwrap();
        assert!(v.iter().zip(&back).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn missing_prerequisite_names_the_stage() {
        let dir = tempfile::tempdir().unwrap();
        let w = Work::new(dir.path()).unwrap();
        let err = w.require(w.calibration(), "calibrate").unwrap_err();
        assert!(err.to_string().contains("fatq calibrate"));
    }
}
