//! Content-addressed cache for stage-1/2 transcripts, one JSON document per
//! (user request, model) pair. Files are human-readable on purpose: the
//! stratification can be inspected and edited offline, and entries are
//! re-validated on load.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autostrat::AutoStratTranscript;
use crate::error::{Error, Result};
use crate::estimate::EstimationTranscript;

/// Environment variable overriding the cache directory.
pub const CACHE_DIR_ENV: &str = "STRATSAMPLE_CACHE_DIR";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineCacheEntry {
    pub key: String,
    pub model: String,
    pub user_request: String,
    pub autostrat: AutoStratTranscript,
    pub estimation: EstimationTranscript,
    /// Unix seconds at creation.
    pub created_at: u64,
}

impl PipelineCacheEntry {
    pub fn new(
        model: impl Into<String>,
        user_request: impl Into<String>,
        autostrat: AutoStratTranscript,
        estimation: EstimationTranscript,
    ) -> Self {
        let model = model.into();
        let user_request = user_request.into();
        Self {
            key: cache_key(&user_request, &model),
            model,
            user_request,
            autostrat,
            estimation,
            created_at: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
        }
    }

    fn validate(&self, path: &Path) -> Result<()> {
        let expected = cache_key(&self.user_request, &self.model);
        if self.key != expected {
            return Err(Error::Cache {
                path: path.to_path_buf(),
                message: format!("key {} does not match its contents", self.key),
            });
        }
        self.estimation
            .stratification
            .validate()
            .map_err(|e| Error::Cache {
                path: path.to_path_buf(),
                message: e.to_string(),
            })
    }
}

/// Digest of the canonical serialization of (user request, model).
pub fn cache_key(user_request: &str, model: &str) -> String {
    let canonical = serde_json::json!({
        "model": model,
        "user_request": user_request,
    });
    hex::encode(Sha256::digest(canonical.to_string().as_bytes()))
}

#[derive(Debug, Clone)]
pub struct PipelineCache {
    dir: PathBuf,
    enabled: bool,
}

impl PipelineCache {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self {
            dir: dir.into(),
            enabled: true,
        }
    }

    /// A cache that never hits and never writes.
    pub fn disabled() -> Self {
        Self {
            dir: PathBuf::new(),
            enabled: false,
        }
    }

    pub fn is_enabled(&self) -> bool {
        self.enabled
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn path_for(&self, user_request: &str, model: &str) -> PathBuf {
        self.dir.join(format!("{}.json", cache_key(user_request, model)))
    }

    /// Loads and validates an entry. Absence is not an error; a file that
    /// exists but fails to parse or validate is, so bad hand-edits surface
    /// instead of silently recomputing.
    pub fn load(&self, user_request: &str, model: &str) -> Result<Option<PipelineCacheEntry>> {
        if !self.enabled {
            return Ok(None);
        }
        let path = self.path_for(user_request, model);
        let text = match std::fs::read_to_string(&path) {
            Ok(text) => text,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
            Err(e) => return Err(e.into()),
        };
        let entry: PipelineCacheEntry = serde_json::from_str(&text).map_err(|e| Error::Cache {
            path: path.clone(),
            message: e.to_string(),
        })?;
        entry.validate(&path)?;
        Ok(Some(entry))
    }

    /// Writes an entry via create-then-atomic-rename so concurrent readers
    /// never observe a partial file.
    pub fn store(&self, entry: &PipelineCacheEntry) -> Result<Option<PathBuf>> {
        if !self.enabled {
            return Ok(None);
        }
        std::fs::create_dir_all(&self.dir)?;
        let path = self.dir.join(format!("{}.json", entry.key));
        let mut tmp = tempfile::NamedTempFile::new_in(&self.dir)?;
        serde_json::to_writer_pretty(&mut tmp, entry)?;
        tmp.persist(&path).map_err(|e| e.error)?;
        Ok(Some(path))
    }
}
