use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::str::FromStr;

use rust_decimal::prelude::ToPrimitive;
use rust_decimal::{Decimal, RoundingStrategy};
use serde::{Deserialize, Serialize};

use super::metrics::{Arm, Metric, MetricsReport};
use super::EvalError;

/// Standard median; even counts average the two central values.
pub fn median_across_tasks(values: &[f64]) -> Result<f64, EvalError> {
    if values.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let mid = v.len() / 2;
    Ok(if v.len() % 2 == 1 { v[mid] } else { (v[mid - 1] + v[mid]) / 2.0 })
}

/// Median of the exact decimals of `values`, so a tie such as
/// `(0.80 + 0.81) / 2` is exactly `0.805` rather than a binary neighbour.
pub fn decimal_median(values: &[f64]) -> Result<Decimal, EvalError> {
    if values.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    let mut v: Vec<Decimal> = values.iter().map(|&x| to_decimal(x)).collect();
    v.sort();
    let mid = v.len() / 2;
    Ok(if v.len() % 2 == 1 { v[mid] } else { ((v[mid - 1] + v[mid]) / Decimal::TWO).normalize() })
}

/// Exact decimal of the shortest representation of `x`, so that `0.805`
/// stays `0.805` rather than its binary neighbour.
pub fn to_decimal(x: f64) -> Decimal {
    Decimal::from_str(&format!("{x}")).unwrap_or_else(|_| Decimal::from_f64_retain(x).unwrap_or_default())
}

/// Half-up rounding to `dp` places for display.
pub fn round_display(x: f64, dp: u32) -> String {
    let r = to_decimal(x).round_dp_with_strategy(dp, RoundingStrategy::MidpointAwayFromZero);
    format!("{r:.prec$}", prec = dp as usize)
}

/// One (model, arm) row: per-task reports and per-metric medians.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmCell {
    pub model: String,
    pub arm: Arm,
    pub tasks: Vec<String>,
    pub medians: BTreeMap<Metric, f64>,
    /// Two-decimal half-up display of each exact decimal median.
    pub display: BTreeMap<Metric, String>,
    /// Metrics where this row holds the column maximum within its model block.
    pub highlighted: Vec<Metric>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmComparison {
    pub rows: Vec<ArmCell>,
    pub reports: Vec<MetricsReport>,
}

impl ArmComparison {
    pub fn row(&self, model: &str, arm: &Arm) -> Option<&ArmCell> {
        self.rows.iter().find(|r| r.model == model && &r.arm == arm)
    }

    pub fn to_text(&self) -> String {
        let mw = self.rows.iter().map(|r| r.model.len()).max().unwrap_or(5).max(5);
        let aw = self.rows.iter().map(|r| r.arm.as_str().len()).max().unwrap_or(3).max(3);
        let mut out = String::new();
        let _ = writeln!(out, "{:<mw$}  {:<aw$}  {:>9}  {:>9}  {:>9}  {:>9}", "model", "arm", "accuracy", "f1", "precision", "recall");
        for r in &self.rows {
            let cell = |m: Metric| {
                let v = r.display.get(&m).cloned().unwrap_or_default();
                if r.highlighted.contains(&m) {
                    format!("*{v}")
                } else {
                    v
                }
            };
            let _ = writeln!(
                out,
                "{:<mw$}  {:<aw$}  {:>9}  {:>9}  {:>9}  {:>9}",
                r.model,
                r.arm.as_str(),
                cell(Metric::Accuracy),
                cell(Metric::F1),
                cell(Metric::Precision),
                cell(Metric::Recall)
            );
        }
        out.push_str("(* = column maximum within the model block)\n");
        out
    }

    /// Per-task metric vectors per (model, arm), for external box plots.
    pub fn box_plot_data(&self) -> BoxPlotData {
        let mut series = Vec::new();
        for row in &self.rows {
            let mut reports: Vec<&MetricsReport> = self
                .reports
                .iter()
                .filter(|r| r.model == row.model && r.arm == row.arm)
                .collect();
            reports.sort_by(|a, b| a.task_id.cmp(&b.task_id));
            let values = Metric::ALL
                .iter()
                .map(|&m| (m, reports.iter().map(|r| r.get(m)).collect()))
                .collect();
            series.push(BoxSeries {
                model: row.model.clone(),
                arm: row.arm.clone(),
                tasks: reports.iter().map(|r| r.task_id.clone()).collect(),
                values,
                medians: row.medians.clone(),
            });
        }
        BoxPlotData { series }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxSeries {
    pub model: String,
    pub arm: Arm,
    pub tasks: Vec<String>,
    pub values: BTreeMap<Metric, Vec<f64>>,
    pub medians: BTreeMap<Metric, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxPlotData {
    pub series: Vec<BoxSeries>,
}

/// Groups reports into (model, arm) rows, in first-seen order, and computes
/// per-metric medians. Every row must cover the same task set.
pub fn arm_comparison(reports: &[MetricsReport]) -> Result<ArmComparison, EvalError> {
    if reports.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    let mut order: Vec<(String, Arm)> = Vec::new();
    let mut cells: BTreeMap<(String, Arm), BTreeMap<String, &MetricsReport>> = BTreeMap::new();
    for r in reports {
        let key = (r.model.clone(), r.arm.clone());
        if !cells.contains_key(&key) {
            order.push(key.clone());
        }
        let tasks = cells.entry(key).or_default();
        if tasks.insert(r.task_id.clone(), r).is_some() {
            return Err(EvalError::DuplicateReport {
                model: r.model.clone(),
                arm: r.arm.to_string(),
                task: r.task_id.clone(),
            });
        }
    }
    let all_tasks: BTreeSet<&String> = cells.values().flat_map(|t| t.keys()).collect();
    let mut missing = Vec::new();
    for (model, arm) in &order {
        let tasks = &cells[&(model.clone(), arm.clone())];
        for t in &all_tasks {
            if !tasks.contains_key(*t) {
                missing.push(format!("{model}/{arm}/{t}"));
            }
        }
    }
    if !missing.is_empty() {
        return Err(EvalError::RaggedGrid(missing));
    }

    let mut rows = Vec::with_capacity(order.len());
    for (model, arm) in &order {
        let tasks = &cells[&(model.clone(), arm.clone())];
        let mut medians = BTreeMap::new();
        let mut display = BTreeMap::new();
        for m in Metric::ALL {
            let vals: Vec<f64> = tasks.values().map(|r| r.get(m)).collect();
            let med = decimal_median(&vals)?;
            medians.insert(m, med.to_f64().unwrap_or(f64::NAN));
            let r = med.round_dp_with_strategy(2, RoundingStrategy::MidpointAwayFromZero);
            display.insert(m, format!("{r:.2}"));
        }
        rows.push(ArmCell {
            model: model.clone(),
            arm: arm.clone(),
            tasks: tasks.keys().cloned().collect(),
            medians,
            display,
            highlighted: Vec::new(),
        });
    }

    // Column maxima per model block, compared at display precision so that
    // displayed ties are all marked. Single-row blocks are not highlighted.
    let models: BTreeSet<String> = rows.iter().map(|r| r.model.clone()).collect();
    for model in models {
        let idx: Vec<usize> = (0..rows.len()).filter(|&i| rows[i].model == model).collect();
        if idx.len() < 2 {
            continue;
        }
        for m in Metric::ALL {
            let shown: Vec<Decimal> = idx
                .iter()
                .map(|&i| Decimal::from_str(&rows[i].display[&m]).unwrap_or_default())
                .collect();
            let best = shown.iter().copied().max().unwrap_or_default();
            for (&i, v) in idx.iter().zip(&shown) {
                if *v == best {
                    rows[i].highlighted.push(m);
                }
            }
        }
    }
    Ok(ArmComparison { rows, reports: reports.to_vec() })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskDelta {
    pub task_id: String,
    /// `b − a` per metric.
    pub deltas: BTreeMap<Metric, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftReport {
    pub tasks: Vec<TaskDelta>,
    pub mean_deltas: BTreeMap<Metric, f64>,
}

impl DriftReport {
    pub fn mean(&self, m: Metric) -> f64 {
        self.mean_deltas[&m]
    }

    pub fn to_text(&self) -> String {
        let tw = self.tasks.iter().map(|t| t.task_id.len()).max().unwrap_or(4).max(4);
        let mut out = String::new();
        let _ = writeln!(out, "{:<tw$}  {:>9}  {:>9}  {:>9}  {:>9}", "task", "accuracy", "f1", "precision", "recall");
        let fmt = |v: f64| format!("{:+.3}", to_decimal(v).round_dp_with_strategy(3, RoundingStrategy::MidpointAwayFromZero));
        for t in &self.tasks {
            let _ = writeln!(
                out,
                "{:<tw$}  {:>9}  {:>9}  {:>9}  {:>9}",
                t.task_id,
                fmt(t.deltas[&Metric::Accuracy]),
                fmt(t.deltas[&Metric::F1]),
                fmt(t.deltas[&Metric::Precision]),
                fmt(t.deltas[&Metric::Recall])
            );
        }
        let _ = writeln!(
            out,
            "{:<tw$}  {:>9}  {:>9}  {:>9}  {:>9}",
            "mean",
            fmt(self.mean(Metric::Accuracy)),
            fmt(self.mean(Metric::F1)),
            fmt(self.mean(Metric::Precision)),
            fmt(self.mean(Metric::Recall))
        );
        out
    }
}

/// Paired per-task deltas `b − a` and their means. Arithmetic is decimal on
/// the shortest representation of each value, so published figures subtract
/// exactly.
pub fn drift_compare(run_a: &[MetricsReport], run_b: &[MetricsReport]) -> Result<DriftReport, EvalError> {
    let index = |run: &[MetricsReport]| -> Result<BTreeMap<String, MetricsReport>, EvalError> {
        let mut m = BTreeMap::new();
        for r in run {
            if m.insert(r.task_id.clone(), r.clone()).is_some() {
                return Err(EvalError::DuplicateReport {
                    model: r.model.clone(),
                    arm: r.arm.to_string(),
                    task: r.task_id.clone(),
                });
            }
        }
        Ok(m)
    };
    let a = index(run_a)?;
    let b = index(run_b)?;
    let ka: BTreeSet<&String> = a.keys().collect();
    let kb: BTreeSet<&String> = b.keys().collect();
    if ka != kb || ka.is_empty() {
        return Err(EvalError::TaskSetMismatch {
            only_a: ka.difference(&kb).map(|s| s.to_string()).collect(),
            only_b: kb.difference(&ka).map(|s| s.to_string()).collect(),
        });
    }
    let mut sums: BTreeMap<Metric, Decimal> = Metric::ALL.iter().map(|&m| (m, Decimal::ZERO)).collect();
    let mut tasks = Vec::with_capacity(a.len());
    for (task, ra) in &a {
        let rb = &b[task];
        let mut deltas = BTreeMap::new();
        for m in Metric::ALL {
            let d = to_decimal(rb.get(m)) - to_decimal(ra.get(m));
            *sums.get_mut(&m).expect("all metrics present") += d;
            deltas.insert(m, d.to_f64().unwrap_or(f64::NAN));
        }
        tasks.push(TaskDelta { task_id: task.clone(), deltas });
    }
    let n = Decimal::from(a.len() as u64);
    let mean_deltas = sums
        .into_iter()
        .map(|(m, s)| (m, (s / n).to_f64().unwrap_or(f64::NAN)))
        .collect();
    Ok(DriftReport { tasks, mean_deltas })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn report(task: &str, model: &str, arm: Arm, v: [f64; 4]) -> MetricsReport {
        MetricsReport {
            task_id: task.into(),
            arm,
            model: model.into(),
            counts: None,
            n: None,
            accuracy: v[0],
            f1: v[1],
            precision: v[2],
            recall: v[3],
        }
    }

    #[test]
    fn median_examples() {
        assert_eq!(median_across_tasks(&[0.3]).unwrap(), 0.3);
        assert_eq!(median_across_tasks(&[1.0, 3.0]).unwrap(), 2.0);
        assert_eq!(median_across_tasks(&[5.0, 1.0, 3.0]).unwrap(), 3.0);
        assert!(matches!(median_across_tasks(&[]), Err(EvalError::EmptyInput)));
        assert_eq!(decimal_median(&[0.81, 0.80]).unwrap().to_string(), "0.805");
    }

    #[test]
    fn display_rounding_is_half_up_on_decimal_value() {
        assert_eq!(round_display(0.805, 2), "0.81");
        assert_eq!(round_display(0.745, 2), "0.75");
        assert_eq!(round_display(0.744999, 2), "0.74");
        assert_eq!(round_display(1.0, 2), "1.00");
    }

    #[test]
    fn single_task_medians_equal_task() {
        let r = report("t", "m", Arm::Human1000, [0.9, 0.5, 0.4, 0.6]);
        let cmp = arm_comparison(std::slice::from_ref(&r)).unwrap();
        let row = cmp.row("m", &Arm::Human1000).unwrap();
        assert_eq!(row.medians[&Metric::F1], 0.5);
        assert_eq!(row.medians[&Metric::Accuracy], 0.9);
        assert!(row.highlighted.is_empty());
    }

    #[test]
    fn ragged_grid_names_missing_cell() {
        let rs = vec![
            report("t1", "m", Arm::Human250, [0.5; 4]),
            report("t2", "m", Arm::Human250, [0.5; 4]),
            report("t1", "m", Arm::Human1000, [0.5; 4]),
        ];
        match arm_comparison(&rs) {
            Err(EvalError::RaggedGrid(cells)) => assert_eq!(cells, ["m/human_1000/t2"]),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn highlights_block_maxima() {
        let rs = vec![
            report("t", "m", Arm::Human250, [0.8, 0.3, 0.7, 0.2]),
            report("t", "m", Arm::Human1000, [0.9, 0.6, 0.7, 0.5]),
        ];
        let cmp = arm_comparison(&rs).unwrap();
        assert_eq!(cmp.rows[0].highlighted, vec![Metric::Precision]);
        assert_eq!(cmp.rows[1].highlighted, Metric::ALL.to_vec());
        let boxes = cmp.box_plot_data();
        assert_eq!(boxes.series.len(), 2);
        assert_eq!(boxes.series[1].values[&Metric::F1], vec![0.6]);
    }

    #[test]
    fn drift_identical_runs() {
        let run = vec![report("a", "m", Arm::FewShot, [0.8, 0.5, 0.4, 0.7]), report("b", "m", Arm::FewShot, [0.7, 0.2, 0.1, 0.9])];
        let d = drift_compare(&run, &run).unwrap();
        assert!(d.tasks.iter().all(|t| t.deltas.values().all(|&v| v == 0.0)));
        assert!(d.mean_deltas.values().all(|&v| v == 0.0));
    }

    #[test]
    fn drift_task_mismatch() {
        let a = vec![report("a", "m", Arm::FewShot, [0.5; 4])];
        let b = vec![report("b", "m", Arm::FewShot, [0.5; 4])];
        assert!(matches!(drift_compare(&a, &b), Err(EvalError::TaskSetMismatch { .. })));
    }

    proptest! {
        #[test]
        fn median_of_copies_is_median(v in prop::collection::vec(0.0f64..1.0, 1..30), k in 1usize..5) {
            let rep: Vec<f64> = (0..k).flat_map(|_| v.iter().copied()).collect();
            prop_assert_eq!(median_across_tasks(&rep).unwrap(), median_across_tasks(&v).unwrap());
        }
    }
}
