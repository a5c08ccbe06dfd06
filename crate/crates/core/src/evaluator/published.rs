//! Published result tables shipped as JSON golden files under `data/`.
//!
//! * `per_task_metrics.json`: per-task metrics of the few-shot teacher and three
//!   student models across four training arms (14 tasks).
//! * `median_table.json`: the median table derived from it, at two-decimal
//!   display, with its shaded cells.
//! * `consistency_ablation.json`: F1 with and without consistency filtering.
//! * `drift_runs.json`: paired few-shot runs six months apart.

use serde::{Deserialize, Serialize};

use super::metrics::{Arm, MetricsReport};
use super::EvalError;

pub const PER_TASK_METRICS_JSON: &str = include_str!("../../data/per_task_metrics.json");
pub const MEDIAN_TABLE_JSON: &str = include_str!("../../data/median_table.json");
pub const CONSISTENCY_ABLATION_JSON: &str = include_str!("../../data/consistency_ablation.json");
pub const DRIFT_RUNS_JSON: &str = include_str!("../../data/drift_runs.json");

#[derive(Debug, Clone, Deserialize, Serialize)]
struct PublishedReport {
    #[serde(default)]
    dataset: Option<String>,
    task_id: String,
    model: String,
    arm: Arm,
    accuracy: f64,
    f1: f64,
    precision: f64,
    recall: f64,
}

impl From<PublishedReport> for MetricsReport {
    fn from(p: PublishedReport) -> Self {
        MetricsReport {
            task_id: p.task_id,
            arm: p.arm,
            model: p.model,
            counts: None,
            n: None,
            accuracy: p.accuracy,
            f1: p.f1,
            precision: p.precision,
            recall: p.recall,
        }
    }
}

#[derive(Deserialize)]
struct ReportFile {
    reports: Vec<PublishedReport>,
}

/// Parses a `{"reports": [...]}` file of published per-task metrics.
pub fn parse_reports(json: &str) -> Result<Vec<MetricsReport>, EvalError> {
    let f: ReportFile = serde_json::from_str(json)?;
    Ok(f.reports.into_iter().map(Into::into).collect())
}

pub fn per_task_reports() -> Vec<MetricsReport> {
    parse_reports(PER_TASK_METRICS_JSON).expect("embedded fixture parses")
}

/// One row of the published median table.
#[derive(Debug, Clone, PartialEq, Eq, Deserialize, Serialize)]
pub struct MedianRow {
    pub model: String,
    pub arm: Arm,
    pub accuracy: String,
    pub f1: String,
    pub precision: String,
    pub recall: String,
    pub highlighted: Vec<String>,
}

#[derive(Deserialize)]
struct MedianFile {
    rows: Vec<MedianRow>,
}

pub fn median_table() -> Vec<MedianRow> {
    let f: MedianFile = serde_json::from_str(MEDIAN_TABLE_JSON).expect("embedded fixture parses");
    f.rows
}

#[derive(Debug, Clone, PartialEq, Deserialize, Serialize)]
pub struct NoiseAblationRow {
    pub task_id: String,
    pub f1_without_noise: f64,
    pub f1_with_noise: f64,
    pub difference: f64,
}

#[derive(Deserialize)]
struct NoiseFile {
    rows: Vec<NoiseAblationRow>,
}

pub fn consistency_ablation() -> Vec<NoiseAblationRow> {
    let f: NoiseFile = serde_json::from_str(CONSISTENCY_ABLATION_JSON).expect("embedded fixture parses");
    f.rows
}

/// The consistency ablation as two runs: `(with_noise, without_noise)`.
pub fn consistency_ablation_runs() -> (Vec<MetricsReport>, Vec<MetricsReport>) {
    let mk = |task: &str, arm: &str, f1: f64| MetricsReport {
        task_id: task.to_string(),
        arm: Arm::parse(arm),
        model: "BERT".into(),
        counts: None,
        n: None,
        accuracy: 0.0,
        f1,
        precision: 0.0,
        recall: 0.0,
    };
    consistency_ablation()
        .iter()
        .map(|r| (mk(&r.task_id, "surrogate_1000", r.f1_with_noise), mk(&r.task_id, "surrogate_filtered", r.f1_without_noise)))
        .unzip()
}

#[derive(Deserialize)]
struct DriftFile {
    run_a: Vec<PublishedReport>,
    run_b: Vec<PublishedReport>,
}

/// Paired runs `(a, b)` from an arbitrary drift file.
pub fn parse_drift_runs(json: &str) -> Result<(Vec<MetricsReport>, Vec<MetricsReport>), EvalError> {
    let f: DriftFile = serde_json::from_str(json)?;
    Ok((
        f.run_a.into_iter().map(Into::into).collect(),
        f.run_b.into_iter().map(Into::into).collect(),
    ))
}

pub fn drift_runs() -> (Vec<MetricsReport>, Vec<MetricsReport>) {
    parse_drift_runs(DRIFT_RUNS_JSON).expect("embedded fixture parses")
}
