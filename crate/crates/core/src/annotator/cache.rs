use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Mutex, RwLock};

use serde::{Deserialize, Serialize};

use super::provider::TokenUsage;
use super::AnnotateError;
use crate::hashing::sha256_fields;

/// One cached answer slot. `label` is `None` when the batch stayed
/// unparseable after all retries.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub key: String,
    pub sample_id: String,
    pub iteration: u32,
    pub label: Option<String>,
    pub raw_response: String,
    pub token_usage: TokenUsage,
}

pub fn cache_key(model_name: &str, prompt_hash: &str, sample_id: &str, iteration: u32) -> String {
    sha256_fields([model_name, prompt_hash, sample_id, &iteration.to_string()])
}

/// Append-only line-delimited JSON cache. Readers share a lock; appends are
/// serialized and flushed per batch. A torn final line (from a crash) is
/// skipped on load.
pub struct AnnotationCache {
    path: Option<PathBuf>,
    entries: RwLock<HashMap<String, CacheEntry>>,
    file: Mutex<Option<File>>,
}

impl AnnotationCache {
    /// In-memory cache, for tests and one-off runs.
    pub fn in_memory() -> Self {
        Self { path: None, entries: RwLock::new(HashMap::new()), file: Mutex::new(None) }
    }

    pub fn open(path: &Path) -> Result<Self, AnnotateError> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        let mut entries = HashMap::new();
        if path.exists() {
            let raw = std::fs::read_to_string(path)?;
            for (i, line) in raw.lines().enumerate() {
                if line.trim().is_empty() {
                    continue;
                }
                match serde_json::from_str::<CacheEntry>(line) {
                    Ok(e) => {
                        entries.insert(e.key.clone(), e);
                    }
                    Err(e) => log::warn!("{}: skipping unreadable cache line {}: {e}", path.display(), i + 1),
                }
            }
        }
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Self { path: Some(path.to_path_buf()), entries: RwLock::new(entries), file: Mutex::new(Some(file)) })
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    pub fn get(&self, key: &str) -> Option<CacheEntry> {
        self.entries.read().expect("cache lock").get(key).cloned()
    }

    pub fn len(&self) -> usize {
        self.entries.read().expect("cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn insert_all(&self, batch: &[CacheEntry]) -> Result<(), AnnotateError> {
        let mut file = self.file.lock().expect("cache file lock");
        if let Some(f) = file.as_mut() {
            let mut buf = String::new();
            for e in batch {
                buf.push_str(&serde_json::to_string(e).expect("cache entry serializes"));
                buf.push('\n');
            }
            f.write_all(buf.as_bytes())?;
            f.flush()?;
        }
        let mut entries = self.entries.write().expect("cache lock");
        for e in batch {
            entries.insert(e.key.clone(), e.clone());
        }
        Ok(())
    }
}
