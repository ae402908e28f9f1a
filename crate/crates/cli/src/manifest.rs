//! Run manifests: enough provenance to reproduce any output file.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::time::Instant;

use crisk_core::{CriskError, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// SHA-256 of one input file, tagged by its role so downstream commands can
/// match inputs without caring about paths.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputDigest {
    pub role: String,
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    /// Effective configuration after layering defaults, file and flags.
    pub config: serde_json::Value,
    pub inputs: Vec<InputDigest>,
    /// Wall-clock stage timings. Omitted in deterministic mode so reruns
    /// serialize byte-identically.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timings_ms: Option<BTreeMap<String, u64>>,
}

impl RunManifest {
    pub fn digest_for(&self, role: &str) -> Result<&str> {
        self.inputs
            .iter()
            .find(|d| d.role == role)
            .map(|d| d.sha256.as_str())
            .ok_or_else(|| {
                CriskError::Config(format!("manifest carries no {role:?} input digest"))
            })
    }
}

pub fn digest_file(role: &str, path: &Path) -> Result<InputDigest> {
    let bytes = fs::read(path).map_err(|source| CriskError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    Ok(InputDigest {
        role: role.into(),
        path: path.display().to_string(),
        sha256: hex::encode(hasher.finalize()),
    })
}

/// Stage stopwatch that simply records nothing in deterministic mode.
pub struct Timings {
    enabled: bool,
    stages: BTreeMap<String, u64>,
    current: Option<(String, Instant)>,
}

impl Timings {
    pub fn new(enabled: bool) -> Self {
        Timings {
            enabled,
            stages: BTreeMap::new(),
            current: None,
        }
    }

    pub fn stage(&mut self, name: &str) {
        self.finish_current();
        if self.enabled {
            self.current = Some((name.into(), Instant::now()));
        }
    }

    fn finish_current(&mut self) {
        if let Some((name, start)) = self.current.take() {
            self.stages.insert(name, start.elapsed().as_millis() as u64);
        }
    }

    pub fn into_map(mut self) -> Option<BTreeMap<String, u64>> {
        self.finish_current();
        if self.enabled {
            Some(self.stages)
        } else {
            None
        }
    }
}
