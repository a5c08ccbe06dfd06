use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::{ErrorKind, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::PipelineError;
use crate::annotator::{AnnotationCache, PromptStore};
use crate::corpus::TaskSpec;
use crate::hashing::sha256_hex;
use crate::review::AuditLog;

pub const INDEX_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Step {
    Ingest,
    Split,
    Validate,
    Generate,
    Train,
    Test,
    Arms,
    Ablate,
    Drift,
}

impl Step {
    pub fn as_str(self) -> &'static str {
        match self {
            Step::Ingest => "ingest",
            Step::Split => "split",
            Step::Validate => "validate",
            Step::Generate => "generate",
            Step::Train => "train",
            Step::Test => "test",
            Step::Arms => "arms",
            Step::Ablate => "ablate",
            Step::Drift => "drift",
        }
    }
}

impl std::fmt::Display for Step {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Completed,
    Failed,
}

/// One executed step. `inputs` and `outputs` map names to object hashes; the
/// run id is derived from the step, task, arm and inputs, so a rerun with the
/// same inputs lands on the same id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub task_id: String,
    pub step: Step,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub arm: Option<String>,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    #[serde(default)]
    pub summary: serde_json::Value,
    pub status: RunStatus,
    /// Seconds since the Unix epoch.
    pub started_at: u64,
    pub finished_at: u64,
}

pub fn run_id(step: Step, task_id: &str, arm: Option<&str>, inputs: &BTreeMap<String, String>) -> String {
    let mut fields = vec![step.as_str().to_string(), task_id.to_string(), arm.unwrap_or("").to_string()];
    for (k, v) in inputs {
        fields.push(format!("{k}={v}"));
    }
    let h = crate::hashing::sha256_fields(fields.iter().map(|s| s.as_bytes()));
    format!("{}-{}", step.as_str(), &h[..16])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskEntry {
    pub spec: TaskSpec,
    /// Object hash of the binarized corpus.
    pub corpus: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoreIndex {
    pub format_version: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_corpus: Option<String>,
    #[serde(default)]
    pub tasks: BTreeMap<String, TaskEntry>,
    /// In execution order.
    #[serde(default)]
    pub runs: Vec<RunManifest>,
}

impl Default for StoreIndex {
    fn default() -> Self {
        Self { format_version: INDEX_FORMAT_VERSION, source_corpus: None, tasks: BTreeMap::new(), runs: Vec::new() }
    }
}

impl StoreIndex {
    pub fn run(&self, run_id: &str) -> Option<&RunManifest> {
        self.runs.iter().find(|r| r.run_id == run_id)
    }

    /// Most recent completed run of `step` for `task_id` (and `arm`, if given).
    pub fn latest(&self, task_id: &str, step: Step, arm: Option<&str>) -> Option<&RunManifest> {
        self.runs.iter().rev().find(|r| {
            r.task_id == task_id
                && r.step == step
                && r.status == RunStatus::Completed
                && (arm.is_none() || r.arm.as_deref() == arm)
        })
    }

    pub fn runs_of(&self, task_id: &str, step: Step) -> impl Iterator<Item = &RunManifest> + '_ {
        let task_id = task_id.to_string();
        self.runs
            .iter()
            .filter(move |r| r.task_id == task_id && r.step == step && r.status == RunStatus::Completed)
    }

    /// Replaces a run with the same id or appends.
    pub fn record(&mut self, run: RunManifest) {
        match self.runs.iter_mut().find(|r| r.run_id == run.run_id) {
            Some(slot) => *slot = run,
            None => self.runs.push(run),
        }
    }
}

/// Exclusive writer lock; the file is removed on drop.
#[derive(Debug)]
pub struct StoreLock {
    path: PathBuf,
}

impl StoreLock {
    pub fn acquire(root: &Path) -> Result<Self, PipelineError> {
        fs::create_dir_all(root)?;
        let path = root.join("store.lock");
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(Self { path })
            }
            Err(e) if e.kind() == ErrorKind::AlreadyExists => Err(PipelineError::Locked(path)),
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for StoreLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

/// Directory tree holding content-addressed objects and one JSON index.
///
/// ```text
/// <root>/index.json
/// <root>/objects/<sha256>
/// <root>/prompts/<prompt_id>/v<N>.txt
/// <root>/cache/annotations.jsonl
/// <root>/audit.jsonl
/// <root>/store.lock
/// ```
#[derive(Debug)]
pub struct Store {
    root: PathBuf,
    pub index: StoreIndex,
    lock: Option<StoreLock>,
}

impl Store {
    /// Opens for writing: takes the lock, then creates the layout if missing.
    pub fn open(root: &Path) -> Result<Self, PipelineError> {
        let lock = StoreLock::acquire(root)?;
        fs::create_dir_all(root.join("objects"))?;
        let index = Self::read_index(root)?.unwrap_or_default();
        Ok(Self { root: root.to_path_buf(), index, lock: Some(lock) })
    }

    /// Opens without the lock. Fails if there is no index.
    pub fn open_read_only(root: &Path) -> Result<Self, PipelineError> {
        let index = Self::read_index(root)?.ok_or_else(|| PipelineError::NoStore(root.to_path_buf()))?;
        Ok(Self { root: root.to_path_buf(), index, lock: None })
    }

    pub fn read_index(root: &Path) -> Result<Option<StoreIndex>, PipelineError> {
        match fs::read_to_string(root.join("index.json")) {
            Ok(s) => {
                let idx: StoreIndex = serde_json::from_str(&s)
                    .map_err(|e| PipelineError::CorruptStore(format!("index.json: {e}")))?;
                if idx.format_version != INDEX_FORMAT_VERSION {
                    return Err(PipelineError::CorruptStore(format!(
                        "index format {} (expected {INDEX_FORMAT_VERSION})",
                        idx.format_version
                    )));
                }
                Ok(Some(idx))
            }
            Err(e) if e.kind() == ErrorKind::NotFound => Ok(None),
            Err(e) => Err(e.into()),
        }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn is_writable(&self) -> bool {
        self.lock.is_some()
    }

    fn require_writable(&self) -> Result<(), PipelineError> {
        if self.is_writable() {
            Ok(())
        } else {
            Err(PipelineError::ReadOnly)
        }
    }

    pub fn save_index(&self) -> Result<(), PipelineError> {
        self.require_writable()?;
        let body = serde_json::to_string_pretty(&self.index).expect("index serializes") + "\n";
        atomic_write(&self.root.join("index.json"), body.as_bytes())
    }

    pub fn object_path(&self, hash: &str) -> PathBuf {
        self.root.join("objects").join(hash)
    }

    /// Writes `bytes` under their SHA-256 and returns the hash.
    pub fn put(&self, bytes: &[u8]) -> Result<String, PipelineError> {
        self.require_writable()?;
        let hash = sha256_hex(bytes);
        let path = self.object_path(&hash);
        if !path.exists() {
            atomic_write(&path, bytes)?;
        }
        Ok(hash)
    }

    pub fn put_json<T: Serialize>(&self, value: &T) -> Result<String, PipelineError> {
        let body = serde_json::to_string_pretty(value).expect("artifact serializes") + "\n";
        self.put(body.as_bytes())
    }

    pub fn get(&self, hash: &str) -> Result<Vec<u8>, PipelineError> {
        if hash.len() != 64 || !hash.bytes().all(|b| b.is_ascii_hexdigit()) {
            return Err(PipelineError::MissingObject(hash.to_string()));
        }
        match fs::read(self.object_path(hash)) {
            Ok(b) => Ok(b),
            Err(e) if e.kind() == ErrorKind::NotFound => Err(PipelineError::MissingObject(hash.to_string())),
            Err(e) => Err(e.into()),
        }
    }

    pub fn get_string(&self, hash: &str) -> Result<String, PipelineError> {
        String::from_utf8(self.get(hash)?).map_err(|_| PipelineError::CorruptStore(format!("object {hash} is not UTF-8")))
    }

    pub fn get_json<T: DeserializeOwned>(&self, hash: &str) -> Result<T, PipelineError> {
        serde_json::from_slice(&self.get(hash)?)
            .map_err(|e| PipelineError::CorruptStore(format!("object {hash}: {e}")))
    }

    pub fn has(&self, hash: &str) -> bool {
        self.object_path(hash).is_file()
    }

    pub fn prompts(&self) -> PromptStore {
        PromptStore::new(self.root.join("prompts"))
    }

    pub fn cache(&self) -> Result<AnnotationCache, PipelineError> {
        Ok(AnnotationCache::open(&self.root.join("cache").join("annotations.jsonl"))?)
    }

    pub fn audit_path(&self) -> PathBuf {
        self.root.join("audit.jsonl")
    }

    pub fn audit(&self) -> Result<AuditLog, PipelineError> {
        Ok(AuditLog::open(&self.audit_path())?)
    }

    pub fn task(&self, task_id: &str) -> Result<&TaskEntry, PipelineError> {
        self.index.tasks.get(task_id).ok_or_else(|| PipelineError::UnknownTask(task_id.to_string()))
    }

    /// A completed run is reusable when every output object is still present.
    pub fn reusable(&self, run_id: &str) -> Option<&RunManifest> {
        self.index
            .run(run_id)
            .filter(|r| r.status == RunStatus::Completed && r.outputs.values().all(|h| self.has(h)))
    }
}

fn atomic_write(path: &Path, bytes: &[u8]) -> Result<(), PipelineError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let tmp = path.with_extension(format!("tmp{}", std::process::id()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn now_secs() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn objects_are_content_addressed() {
        let dir = tempfile::tempdir().unwrap();
        let store = Store::open(dir.path()).unwrap();
        let a = store.put(b"hello").unwrap();
        let b = store.put(b"hello").unwrap();
        assert_eq!(a, b);
        assert_eq!(a, sha256_hex(b"hello"));
        assert_eq!(store.get(&a).unwrap(), b"hello");
        assert!(matches!(store.get(&"0".repeat(64)), Err(PipelineError::MissingObject(_))));
        assert!(matches!(store.get("../index.json"), Err(PipelineError::MissingObject(_))));
    }

    #[test]
    fn lock_is_exclusive_and_released() {
        let dir = tempfile::tempdir().unwrap();
        let s = Store::open(dir.path()).unwrap();
        assert!(matches!(Store::open(dir.path()), Err(PipelineError::Locked(_))));
        drop(s);
        Store::open(dir.path()).unwrap();
    }

    #[test]
    fn index_round_trips_and_read_only_cannot_write() {
        let dir = tempfile::tempdir().unwrap();
        {
            let mut s = Store::open(dir.path()).unwrap();
            s.index.source_corpus = Some("abc".into());
            s.save_index().unwrap();
        }
        let ro = Store::open_read_only(dir.path()).unwrap();
        assert_eq!(ro.index.source_corpus.as_deref(), Some("abc"));
        assert!(matches!(ro.put(b"x"), Err(PipelineError::ReadOnly)));
        assert!(matches!(
            Store::open_read_only(&dir.path().join("nope")),
            Err(PipelineError::NoStore(_))
        ));
    }

    #[test]
    fn run_id_depends_on_inputs() {
        let mut a = BTreeMap::new();
        a.insert("corpus".to_string(), "h1".to_string());
        let mut b = a.clone();
        b.insert("prompt".to_string(), "h2".to_string());
        assert_eq!(run_id(Step::Validate, "t", None, &a), run_id(Step::Validate, "t", None, &a));
        assert_ne!(run_id(Step::Validate, "t", None, &a), run_id(Step::Validate, "t", None, &b));
        assert_ne!(run_id(Step::Train, "t", Some("x"), &a), run_id(Step::Train, "t", Some("y"), &a));
        assert!(run_id(Step::Train, "t", None, &a).starts_with("train-"));
    }
}
