//! Binary-classification metrics, precision-recall curves, cross-task
//! medians, arm comparisons and paired-run drift.

mod compare;
mod metrics;
mod pr;
pub mod published;

pub use compare::{
    arm_comparison, decimal_median, drift_compare, median_across_tasks, round_display, to_decimal, ArmCell, ArmComparison,
    BoxPlotData, BoxSeries, DriftReport, TaskDelta,
};
pub use metrics::{compute_metrics, confusion, Arm, Confusion, Metric, MetricsReport, Prediction};
pub use pr::{pr_curve, PrCurve, PrPoint};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("prediction ids do not match gold ids (missing: {missing:?}, unexpected: {extra:?})")]
    MisalignedIds { missing: Vec<String>, extra: Vec<String> },
    #[error("no positive examples in gold labels")]
    NoPositives,
    #[error("score {0} is not finite")]
    NonFiniteScore(f64),
    #[error("{scores} scores for {gold} gold labels")]
    LengthMismatch { scores: usize, gold: usize },
    #[error("empty input")]
    EmptyInput,
    #[error("missing (model, arm, task) cells: {0:?}")]
    RaggedGrid(Vec<String>),
    #[error("duplicate report for {model}/{arm}/{task}")]
    DuplicateReport { model: String, arm: String, task: String },
    #[error("runs cover different tasks (only in a: {only_a:?}, only in b: {only_b:?})")]
    TaskSetMismatch { only_a: Vec<String>, only_b: Vec<String> },
    #[error("malformed fixture: {0}")]
    Fixture(#[from] serde_json::Error),
}
