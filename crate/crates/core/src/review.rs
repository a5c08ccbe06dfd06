//! Human review of LLM/human disagreements and prompt revisions.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::fs::OpenOptions;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::Corpus;
use crate::evaluator::{compute_metrics, Arm, EvalError, Metric, MetricsReport, Prediction};

#[derive(Debug, thiserror::Error)]
pub enum ReviewError {
    #[error("annotation and gold ids differ: missing {missing:?}, extra {extra:?}")]
    MisalignedIds { missing: Vec<String>, extra: Vec<String> },
    #[error("no complete run for prompt version {0}")]
    MissingRun(u32),
    #[error("prompt versions {0} and {1} were run on different samples")]
    SampleSetMismatch(u32, u32),
    #[error("stale write: expected sequence {expected}, log is at {actual}")]
    Conflict { expected: u64, actual: u64 },
    #[error("unknown status {0:?}")]
    UnknownStatus(String),
    #[error("audit log line {line}: {reason}")]
    CorruptLog { line: usize, reason: String },
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ResolutionStatus {
    #[default]
    Open,
    /// The prompt was reworded to cover this case.
    PromptClarified,
    /// The human label looks wrong. Flagged only; never excluded automatically.
    GoldSuspect,
    Dismissed,
}

impl ResolutionStatus {
    pub const ALL: [ResolutionStatus; 4] = [Self::Open, Self::PromptClarified, Self::GoldSuspect, Self::Dismissed];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Open => "open",
            Self::PromptClarified => "prompt_clarified",
            Self::GoldSuspect => "gold_suspect",
            Self::Dismissed => "dismissed",
        }
    }

    /// Accepts `prompt_clarified` and `prompt-clarified` spellings.
    pub fn parse(s: &str) -> Result<Self, ReviewError> {
        let norm = s.trim().replace('-', "_");
        Self::ALL.into_iter().find(|st| st.as_str() == norm).ok_or_else(|| ReviewError::UnknownStatus(s.to_string()))
    }
}

impl fmt::Display for ResolutionStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Disagreement {
    pub task_id: String,
    pub sample_id: String,
    pub text: String,
    pub gold: String,
    pub llm: String,
    pub prompt_id: String,
    pub prompt_version: u32,
    #[serde(default)]
    pub note: Option<String>,
    #[serde(default)]
    pub status: ResolutionStatus,
}

/// One record per sample whose LLM label differs from gold, ordered by
/// sample id. `llm` must cover exactly the gold-labeled samples of `gold`.
pub fn extract_disagreements(
    task_id: &str,
    llm: &BTreeMap<String, String>,
    gold: &Corpus,
    prompt_id: &str,
    prompt_version: u32,
) -> Result<Vec<Disagreement>, ReviewError> {
    let labeled: BTreeMap<&str, (&str, &str)> = gold
        .iter()
        .filter_map(|s| s.gold.as_deref().map(|g| (s.id(), (g, s.text()))))
        .collect();
    let missing: Vec<String> = labeled.keys().filter(|id| !llm.contains_key(**id)).map(|s| s.to_string()).collect();
    let extra: Vec<String> = llm.keys().filter(|id| !labeled.contains_key(id.as_str())).cloned().collect();
    if !missing.is_empty() || !extra.is_empty() {
        return Err(ReviewError::MisalignedIds { missing, extra });
    }
    Ok(labeled
        .iter()
        .filter(|(id, (g, _))| llm[**id] != *g)
        .map(|(id, (g, text))| Disagreement {
            task_id: task_id.to_string(),
            sample_id: id.to_string(),
            text: text.to_string(),
            gold: g.to_string(),
            llm: llm[*id].clone(),
            prompt_id: prompt_id.to_string(),
            prompt_version,
            note: None,
            status: ResolutionStatus::Open,
        })
        .collect())
}

pub fn disagreements_to_jsonl(items: &[Disagreement]) -> String {
    items.iter().map(|d| serde_json::to_string(d).expect("disagreement serializes") + "\n").collect()
}

/// Plain-text review sheet, one block per disagreement.
pub fn review_sheet(items: &[Disagreement]) -> String {
    let mut out = String::new();
    for (i, d) in items.iter().enumerate() {
        let _ = writeln!(out, "[{}/{}] {} ({} v{})", i + 1, items.len(), d.sample_id, d.prompt_id, d.prompt_version);
        let _ = writeln!(out, "  text:   {}", d.text);
        let _ = writeln!(out, "  gold:   {}", d.gold);
        let _ = writeln!(out, "  llm:    {}", d.llm);
        let _ = writeln!(out, "  status: {}", d.status);
        if let Some(n) = &d.note {
            let _ = writeln!(out, "  note:   {n}");
        }
        out.push('\n');
    }
    out
}

/// A status change. `seq` numbers entries from 0 in log order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditEntry {
    pub seq: u64,
    pub task_id: String,
    pub sample_id: String,
    pub from: ResolutionStatus,
    pub to: ResolutionStatus,
    #[serde(default)]
    pub note: Option<String>,
    /// Seconds since the Unix epoch, when known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub at: Option<u64>,
}

/// Current status and note per (task, sample), rebuilt from the log.
pub type StatusMap = BTreeMap<(String, String), (ResolutionStatus, Option<String>)>;

pub fn replay(entries: &[AuditEntry]) -> StatusMap {
    let mut m = StatusMap::new();
    for e in entries {
        m.insert((e.task_id.clone(), e.sample_id.clone()), (e.to, e.note.clone()));
    }
    m
}

/// Overlays replayed statuses on freshly extracted disagreements.
pub fn apply_statuses(items: &mut [Disagreement], statuses: &StatusMap) {
    for d in items {
        if let Some((st, note)) = statuses.get(&(d.task_id.clone(), d.sample_id.clone())) {
            d.status = *st;
            d.note = note.clone();
        }
    }
}

/// Append-only line-delimited JSON log of status changes.
#[derive(Debug)]
pub struct AuditLog {
    path: PathBuf,
    entries: Vec<AuditEntry>,
}

impl AuditLog {
    pub fn open(path: &Path) -> Result<Self, ReviewError> {
        let mut entries = Vec::new();
        if path.exists() {
            for (i, line) in std::fs::read_to_string(path)?.lines().enumerate() {
                if line.trim().is_empty() {
                    continue;
                }
                let e: AuditEntry = serde_json::from_str(line)
                    .map_err(|e| ReviewError::CorruptLog { line: i + 1, reason: e.to_string() })?;
                if e.seq != entries.len() as u64 {
                    return Err(ReviewError::CorruptLog { line: i + 1, reason: format!("sequence {} out of order", e.seq) });
                }
                entries.push(e);
            }
        }
        Ok(Self { path: path.to_path_buf(), entries })
    }

    pub fn entries(&self) -> &[AuditEntry] {
        &self.entries
    }

    pub fn next_seq(&self) -> u64 {
        self.entries.len() as u64
    }

    pub fn statuses(&self) -> StatusMap {
        replay(&self.entries)
    }

    pub fn status_of(&self, task_id: &str, sample_id: &str) -> ResolutionStatus {
        self.entries
            .iter()
            .rev()
            .find(|e| e.task_id == task_id && e.sample_id == sample_id)
            .map_or(ResolutionStatus::Open, |e| e.to)
    }

    /// Records a status change. With `expected_seq`, the write fails with
    /// `Conflict` if another change landed first.
    pub fn set_status(
        &mut self,
        task_id: &str,
        sample_id: &str,
        to: ResolutionStatus,
        note: Option<String>,
        expected_seq: Option<u64>,
        at: Option<u64>,
    ) -> Result<AuditEntry, ReviewError> {
        if let Some(expected) = expected_seq {
            if expected != self.next_seq() {
                return Err(ReviewError::Conflict { expected, actual: self.next_seq() });
            }
        }
        let entry = AuditEntry {
            seq: self.next_seq(),
            task_id: task_id.to_string(),
            sample_id: sample_id.to_string(),
            from: self.status_of(task_id, sample_id),
            to,
            note,
            at,
        };
        if let Some(dir) = self.path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        let mut f = OpenOptions::new().create(true).append(true).open(&self.path)?;
        f.write_all(format!("{}\n", serde_json::to_string(&entry).expect("entry serializes")).as_bytes())?;
        f.flush()?;
        self.entries.push(entry.clone());
        Ok(entry)
    }
}

/// Predictions of one prompt version on the prompt-validation split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptRun {
    pub prompt_id: String,
    pub version: u32,
    pub predictions: Vec<Prediction>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptDeltaReport {
    pub task_id: String,
    pub prompt_id: String,
    pub version_a: u32,
    pub version_b: u32,
    pub before: MetricsReport,
    pub after: MetricsReport,
    /// `after − before` per metric.
    pub deltas: BTreeMap<Metric, f64>,
    /// Metrics that got worse.
    pub regressions: Vec<Metric>,
}

impl PromptDeltaReport {
    pub fn to_text(&self) -> String {
        let mut out = format!("{} {}: v{} -> v{}\n", self.task_id, self.prompt_id, self.version_a, self.version_b);
        for m in Metric::ALL {
            let flag = if self.regressions.contains(&m) { "  REGRESSION" } else { "" };
            let _ = writeln!(
                out,
                "  {:<9} {:.3} -> {:.3}  ({:+.3}){flag}",
                m.as_str(),
                self.before.get(m),
                self.after.get(m),
                self.deltas[&m]
            );
        }
        out
    }
}

/// Compares two prompt versions evaluated on the same samples.
pub fn prompt_delta(
    task_id: &str,
    runs: &[PromptRun],
    gold: &[(String, bool)],
    version_a: u32,
    version_b: u32,
) -> Result<PromptDeltaReport, ReviewError> {
    let find = |v: u32| runs.iter().find(|r| r.version == v).ok_or(ReviewError::MissingRun(v));
    let (a, b) = (find(version_a)?, find(version_b)?);
    fn ids(r: &PromptRun) -> Vec<&str> {
        let mut v: Vec<&str> = r.predictions.iter().map(|p| p.sample_id.as_str()).collect();
        v.sort_unstable();
        v
    }
    if ids(a) != ids(b) {
        return Err(ReviewError::SampleSetMismatch(version_a, version_b));
    }
    let eval = |r: &PromptRun| compute_metrics(&r.predictions, gold, task_id, Arm::FewShot, &format!("{} v{}", r.prompt_id, r.version));
    let before = eval(a)?;
    let after = eval(b)?;
    let deltas: BTreeMap<Metric, f64> = Metric::ALL.into_iter().map(|m| (m, after.get(m) - before.get(m))).collect();
    let regressions = Metric::ALL.into_iter().filter(|m| deltas[m] < 0.0).collect();
    Ok(PromptDeltaReport {
        task_id: task_id.to_string(),
        prompt_id: b.prompt_id.clone(),
        version_a,
        version_b,
        before,
        after,
        deltas,
        regressions,
    })
}

/// Revisions beyond this many invite overfitting the prompt to the
/// validation split.
pub const MAX_PROMPT_REVISIONS: usize = 2;

/// Warns once a task's prompt has been revised more than twice. The first
/// version is not a revision. Never blocks.
pub fn iteration_guard(task_id: &str, versions: &[u32]) -> Option<String> {
    let revisions = versions.len().saturating_sub(1);
    (revisions > MAX_PROMPT_REVISIONS).then(|| {
        let msg = format!(
            "{task_id}: prompt revised {revisions} times; more than {MAX_PROMPT_REVISIONS} revisions risks overfitting the prompt to the validation split"
        );
        log::warn!("{msg}");
        msg
    })
}
