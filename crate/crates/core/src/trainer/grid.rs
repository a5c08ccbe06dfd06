use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::features::FeatureSpec;
use super::model::{train, Provenance, TrainConfig};
use super::TrainError;
use crate::evaluator::{Confusion, MetricsReport, Arm};

/// Axis values. Cells are enumerated row-major: learning rate outermost,
/// then batch size, then epochs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub learning_rates: Vec<f64>,
    pub batch_sizes: Vec<usize>,
    pub epochs: Vec<usize>,
    #[serde(default)]
    pub l2: f64,
}

impl Default for Grid {
    /// Three learning rates × two batch sizes × three epoch counts. The
    /// rates suit mean-batch gradients on L2-normalized features.
    fn default() -> Self {
        Self {
            learning_rates: vec![2.0, 5.0, 10.0],
            batch_sizes: vec![8, 16],
            epochs: vec![2, 4, 6],
            l2: 1e-4,
        }
    }
}

impl Grid {
    pub fn single(config: &TrainConfig) -> Self {
        Self {
            learning_rates: vec![config.learning_rate],
            batch_sizes: vec![config.batch_size],
            epochs: vec![config.epochs],
            l2: config.l2,
        }
    }

    pub fn len(&self) -> usize {
        self.learning_rates.len() * self.batch_sizes.len() * self.epochs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Cell configs in grid order; seed and flags come from `base`.
    pub fn cells(&self, base: &TrainConfig) -> Vec<TrainConfig> {
        let mut out = Vec::with_capacity(self.len());
        for &learning_rate in &self.learning_rates {
            for &batch_size in &self.batch_sizes {
                for &epochs in &self.epochs {
                    out.push(TrainConfig { learning_rate, epochs, batch_size, l2: self.l2, ..*base });
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum CellOutcome {
    Ok { f1: f64, accuracy: f64, precision: f64, recall: f64 },
    Failed { error: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub config: TrainConfig,
    pub outcome: CellOutcome,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridResult {
    pub best: TrainConfig,
    pub best_f1: f64,
    pub cells: Vec<GridCell>,
}

/// Trains every cell on `train_set`, scores F1 on `tune_set` and returns the
/// best cell (earliest in grid order on ties). Failed cells are recorded and
/// skipped. Cells run in parallel; the table is in grid order.
pub fn grid_search(
    train_set: &[(&str, bool)],
    tune_set: &[(&str, bool)],
    spec: FeatureSpec,
    grid: &Grid,
    base: &TrainConfig,
) -> Result<GridResult, TrainError> {
    if grid.is_empty() {
        return Err(TrainError::EmptyGrid);
    }
    let tune_pos = tune_set.iter().filter(|(_, y)| *y).count();
    if tune_pos == 0 || tune_pos == tune_set.len() {
        return Err(TrainError::DegenerateLabels { n: tune_set.len(), positives: tune_pos });
    }
    let cells: Vec<GridCell> = grid
        .cells(base)
        .into_par_iter()
        .map(|config| {
            let outcome = match train(train_set, spec, &config, Provenance::default()) {
                Ok(model) => {
                    let scorer = model.scorer();
                    let mut c = Confusion::default();
                    for (t, y) in tune_set {
                        c.add(scorer.predict(t).1, *y);
                    }
                    let r = MetricsReport::from_counts("", Arm::Other("grid".into()), "", c);
                    CellOutcome::Ok { f1: r.f1, accuracy: r.accuracy, precision: r.precision, recall: r.recall }
                }
                Err(e) => CellOutcome::Failed { error: e.to_string() },
            };
            GridCell { config, outcome }
        })
        .collect();

    let mut best: Option<(usize, f64)> = None;
    for (i, cell) in cells.iter().enumerate() {
        if let CellOutcome::Ok { f1, .. } = cell.outcome {
            if best.is_none_or(|(_, b)| f1 > b) {
                best = Some((i, f1));
            }
        }
    }
    let (idx, best_f1) = best.ok_or(TrainError::AllCellsFailed)?;
    Ok(GridResult { best: cells[idx].config, best_f1, cells })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate, SynthConfig};

    type Labelled = Vec<(String, bool)>;

    fn data() -> (Labelled, Labelled) {
        let c = generate(&SynthConfig::binary(600, 0.4, 3));
        let all: Vec<(String, bool)> = c.iter().map(|s| (s.text().to_string(), s.gold.as_deref() == Some("pos"))).collect();
        (all[..400].to_vec(), all[400..].to_vec())
    }

    fn refs(v: &[(String, bool)]) -> Vec<(&str, bool)> {
        v.iter().map(|(t, y)| (t.as_str(), *y)).collect()
    }

    fn base(seed: u64) -> TrainConfig {
        TrainConfig { seed, ..TrainConfig::default() }
    }

    fn spec() -> FeatureSpec {
        FeatureSpec { hash_dim: 1 << 14, ..FeatureSpec::default() }
    }

    #[test]
    fn default_grid_has_eighteen_cells() {
        let (tr, tu) = data();
        let g = Grid::default();
        assert_eq!(g.len(), 18);
        let res = grid_search(&refs(&tr), &refs(&tu), spec(), &g, &base(1)).unwrap();
        assert_eq!(res.cells.len(), 18);
        // row-major order
        assert_eq!(res.cells[0].config.learning_rate, g.learning_rates[0]);
        assert_eq!(res.cells[1].config.epochs, g.epochs[1]);
        assert_eq!(res.cells[3].config.batch_size, g.batch_sizes[1]);
        assert_eq!(res.cells[6].config.learning_rate, g.learning_rates[1]);
        assert!(res.cells.iter().all(|c| matches!(c.outcome, CellOutcome::Ok { f1, .. } if f1 <= res.best_f1)));
    }

    #[test]
    fn single_cell_grid_returns_it() {
        let (tr, tu) = data();
        let cfg = TrainConfig { learning_rate: 0.7, epochs: 3, batch_size: 5, l2: 0.0, seed: 2, class_weighting: false, tail_averaging: false };
        let res = grid_search(&refs(&tr), &refs(&tu), spec(), &Grid::single(&cfg), &cfg).unwrap();
        assert_eq!(res.best, cfg);
    }

    #[test]
    fn ties_go_to_first_cell() {
        let (tr, tu) = data();
        // Duplicate axis values give identical cells, hence identical F1.
        let g = Grid { learning_rates: vec![1.0, 1.0], batch_sizes: vec![8], epochs: vec![2], l2: 0.0 };
        let res = grid_search(&refs(&tr), &refs(&tu), spec(), &g, &base(5)).unwrap();
        assert_eq!(res.cells[0].outcome, res.cells[1].outcome);
        assert_eq!(res.best, res.cells[0].config);
    }

    #[test]
    fn deterministic_table() {
        let (tr, tu) = data();
        let g = Grid { learning_rates: vec![0.5, 2.0], batch_sizes: vec![8], epochs: vec![2, 3], l2: 1e-4 };
        let a = grid_search(&refs(&tr), &refs(&tu), spec(), &g, &base(9)).unwrap();
        let b = grid_search(&refs(&tr), &refs(&tu), spec(), &g, &base(9)).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    }

    #[test]
    fn failed_cells_are_recorded() {
        let (tr, tu) = data();
        let g = Grid { learning_rates: vec![1e308, 1.0], batch_sizes: vec![1], epochs: vec![2], l2: 0.0 };
        let res = grid_search(&refs(&tr), &refs(&tu), spec(), &g, &base(0)).unwrap();
        assert!(matches!(res.cells[0].outcome, CellOutcome::Failed { .. }));
        assert_eq!(res.best.learning_rate, 1.0);
    }

    #[test]
    fn empty_grid_and_degenerate_tune_set() {
        let (tr, tu) = data();
        let g = Grid { learning_rates: vec![], ..Grid::default() };
        assert!(matches!(grid_search(&refs(&tr), &refs(&tu), spec(), &g, &base(0)), Err(TrainError::EmptyGrid)));
        let all_neg: Vec<(&str, bool)> = tu.iter().map(|(t, _)| (t.as_str(), false)).collect();
        assert!(grid_search(&refs(&tr), &all_neg, spec(), &Grid::default(), &base(0)).is_err());
    }
}
