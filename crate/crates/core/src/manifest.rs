//! Run manifest: everything needed to reproduce a run, written as JSON
//! next to the run's outputs.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::path::Path;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct RunManifest {
    /// The exact command line as invoked.
    pub command: Vec<String>,
    /// Full configuration, defaults included.
    pub config: BTreeMap<String, String>,
    pub seed: u64,
    /// SHA-256 of each input file, keyed by role (train/dev/test/...).
    pub dataset_hashes: BTreeMap<String, String>,
    pub vocab_hash: String,
    pub code_version: String,
    pub started_at: String,
    pub finished_at: String,
}

/// SHA-256 hex digest of a file's bytes.
pub fn file_hash(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path)?;
    let mut h = Sha256::new();
    h.update(&bytes);
    Ok(format!("{:x}", h.finalize()))
}

/// Seconds since the epoch, as a plain sortable string. Wall-clock
/// timestamps are informational only and never affect results.
pub fn timestamp() -> String {
    let now = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .unwrap_or_default();
    format!("{}.{:03}", now.as_secs(), now.subsec_millis())
}

pub fn code_version() -> String {
    format!("gdtc-core {}", env!("CARGO_PKG_VERSION"))
}

impl RunManifest {
    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Format(format!("manifest serialization: {e}")))?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("manifest parse: {e}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Config;

    #[test]
    fn manifest_round_trip() {
        let m = RunManifest {
            command: vec!["gdtc".into(), "train".into()],
            config: Config::default().to_map(),
            seed: 7,
            dataset_hashes: BTreeMap::from([("train".to_string(), "abc".to_string())]),
            vocab_hash: "def".into(),
            code_version: code_version(),
            started_at: timestamp(),
            finished_at: timestamp(),
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.json");
        m.save(&path).unwrap();
        assert_eq!(RunManifest::load(&path).unwrap(), m);
    }

    #[test]
    fn file_hash_is_content_hash() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a");
        let b = dir.path().join("b");
        std::fs::write(&a, "same").unwrap();
        std::fs::write(&b, "same").unwrap();
        assert_eq!(file_hash(&a).unwrap(), file_hash(&b).unwrap());
        std::fs::write(&b, "different").unwrap();
        assert_ne!(file_hash(&a).unwrap(), file_hash(&b).unwrap());
        // known digest of the empty file
        std::fs::write(&b, "").unwrap();
        assert_eq!(
            file_hash(&b).unwrap(),
            "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"
        );
    }
}
