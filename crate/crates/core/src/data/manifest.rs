//! Dataset manifests: a JSON list of clean/noisy cube pairs.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub clean_path: PathBuf,
    pub noisy_path: PathBuf,
    pub sigma_255: f64,
    pub seed: u64,
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestEntry>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let entries: Vec<ManifestEntry> = serde_json::from_str(&text).map_err(|e| Error::Format {
        kind: "manifest",
        detail: e.to_string(),
    })?;
    for (i, e) in entries.iter().enumerate() {
        if !(e.sigma_255 >= 0.0) {
            return Err(Error::Format {
                kind: "manifest",
                detail: format!("entry {i}: sigma_255 must be >= 0"),
            });
        }
    }
    // Relative paths are resolved against the manifest's directory.
    let base = path.parent().unwrap_or(Path::new(""));
    Ok(entries
        .into_iter()
        .map(|mut e| {
            if e.clean_path.is_relative() {
                e.clean_path = base.join(&e.clean_path);
            }
            if e.noisy_path.is_relative() {
                e.noisy_path = base.join(&e.noisy_path);
            }
            e
        })
        .collect())
}

pub fn write_manifest(path: impl AsRef<Path>, entries: &[ManifestEntry]) -> Result<()> {
    let path = path.as_ref();
    let text = serde_json::to_string_pretty(entries)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}
