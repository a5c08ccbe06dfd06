//! Read paths over a store, shared by the CLI and the HTTP service. Nothing
//! here recomputes metrics; results are stored artifacts plus filters.

use std::collections::BTreeMap;
use std::path::Path;

use super::store::{now_secs, Step, Store, StoreLock};
use super::PipelineError;
use crate::evaluator::{ArmComparison, MetricsReport};
use crate::review::{apply_statuses, AuditEntry, AuditLog, Disagreement, PromptDeltaReport, ResolutionStatus};

/// Latest test report per arm, in arm order.
pub fn latest_reports(store: &Store, task_id: &str) -> Result<Vec<MetricsReport>, PipelineError> {
    store.task(task_id)?;
    let mut latest: BTreeMap<String, &str> = BTreeMap::new();
    for r in store.index.runs_of(task_id, Step::Test) {
        if let (Some(arm), Some(h)) = (&r.arm, r.outputs.get("report")) {
            latest.insert(arm.clone(), h);
        }
    }
    let mut reports: Vec<MetricsReport> =
        latest.values().map(|h| store.get_json(h)).collect::<Result<_, _>>()?;
    reports.sort_by(|a, b| a.arm.cmp(&b.arm));
    Ok(reports)
}

/// The newest arm comparison that covers `task_id`.
pub fn arm_comparison_of(store: &Store, task_id: &str) -> Result<Option<ArmComparison>, PipelineError> {
    store.task(task_id)?;
    let run = store.index.runs.iter().rev().find(|r| {
        r.step == Step::Arms
            && r.status == super::RunStatus::Completed
            && r.summary["tasks"].as_array().is_some_and(|ts| ts.iter().any(|t| t == task_id))
    });
    match run {
        Some(r) => Ok(Some(store.get_json(&r.outputs["comparison"])?)),
        None => Ok(None),
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct DisagreementFilter {
    pub status: Option<ResolutionStatus>,
    /// Defaults to the newest validated prompt version.
    pub prompt_version: Option<u32>,
}

/// Validated prompt versions of the task with the disagreements object of
/// the newest run for each.
fn disagreement_objects(store: &Store, task_id: &str) -> Result<BTreeMap<u32, String>, PipelineError> {
    store.task(task_id)?;
    let mut by_version = BTreeMap::new();
    for r in store.index.runs_of(task_id, Step::Validate) {
        if let (Some(v), Some(h)) = (r.summary["prompt_version"].as_u64(), r.outputs.get("disagreements")) {
            by_version.insert(v as u32, h.clone());
        }
    }
    Ok(by_version)
}

/// Disagreements of one prompt version with review statuses from the audit
/// log applied, ordered by sample id.
pub fn disagreements(store: &Store, task_id: &str, filter: DisagreementFilter) -> Result<Vec<Disagreement>, PipelineError> {
    let objects = disagreement_objects(store, task_id)?;
    let hash = match filter.prompt_version {
        Some(v) => objects.get(&v),
        None => objects.values().next_back(),
    };
    let Some(hash) = hash else {
        return Ok(Vec::new());
    };
    let mut items: Vec<Disagreement> = store.get_json(hash)?;
    let audit = AuditLog::open(&store.audit_path())?;
    apply_statuses(&mut items, &audit.statuses());
    if let Some(st) = filter.status {
        items.retain(|d| d.status == st);
    }
    Ok(items)
}

/// Prompt-version delta reports in the order they were produced.
pub fn prompt_deltas(store: &Store, task_id: &str) -> Result<Vec<PromptDeltaReport>, PipelineError> {
    store.task(task_id)?;
    store
        .index
        .runs_of(task_id, Step::Validate)
        .filter_map(|r| r.outputs.get("prompt_delta"))
        .map(|h| store.get_json(h))
        .collect()
}

/// Records a review decision. Takes the store lock for the write, so a
/// running pipeline or a concurrent writer yields `Locked`.
pub fn set_disagreement_status(
    root: &Path,
    task_id: &str,
    sample_id: &str,
    status: ResolutionStatus,
    note: Option<String>,
    expected_seq: Option<u64>,
) -> Result<AuditEntry, PipelineError> {
    let _lock = StoreLock::acquire(root)?;
    let store = Store::open_read_only(root)?;
    let known = disagreement_objects(&store, task_id)?
        .values()
        .map(|h| store.get_json::<Vec<Disagreement>>(h))
        .collect::<Result<Vec<_>, _>>()?
        .iter()
        .flatten()
        .any(|d| d.sample_id == sample_id);
    if !known {
        return Err(PipelineError::UnknownDisagreement { task_id: task_id.to_string(), sample_id: sample_id.to_string() });
    }
    let mut audit = AuditLog::open(&store.audit_path())?;
    Ok(audit.set_status(task_id, sample_id, status, note, expected_seq, Some(now_secs()))?)
}
