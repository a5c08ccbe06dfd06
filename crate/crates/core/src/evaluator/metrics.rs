use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use super::EvalError;

/// Training-data condition a model was evaluated under. Serialized as its
/// snake_case name (`few_shot`, `human_250`, ...).
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Arm {
    /// Direct LLM labels on the test split.
    FewShot,
    Human250,
    Human1000,
    Surrogate1000,
    /// Surrogate labels kept only where every draw agreed.
    SurrogateFiltered,
    /// Anything else (external experiments, ablations).
    Other(String),
}

impl Serialize for Arm {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for Arm {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Ok(Arm::parse(&s))
    }
}

impl Arm {
    pub fn as_str(&self) -> &str {
        match self {
            Arm::FewShot => "few_shot",
            Arm::Human250 => "human_250",
            Arm::Human1000 => "human_1000",
            Arm::Surrogate1000 => "surrogate_1000",
            Arm::SurrogateFiltered => "surrogate_filtered",
            Arm::Other(s) => s,
        }
    }

    pub fn parse(s: &str) -> Arm {
        match s {
            "few_shot" => Arm::FewShot,
            "human_250" => Arm::Human250,
            "human_1000" => Arm::Human1000,
            "surrogate_1000" => Arm::Surrogate1000,
            "surrogate_filtered" => Arm::SurrogateFiltered,
            other => Arm::Other(other.to_string()),
        }
    }
}

impl fmt::Display for Arm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Binary confusion counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl Confusion {
    pub fn n(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    pub fn add(&mut self, predicted: bool, actual: bool) {
        match (predicted, actual) {
            (true, true) => self.tp += 1,
            (true, false) => self.fp += 1,
            (false, true) => self.fn_ += 1,
            (false, false) => self.tn += 1,
        }
    }

    /// Counts under swapped class definitions.
    pub fn swapped(&self) -> Confusion {
        Confusion { tp: self.tn, fp: self.fn_, fn_: self.fp, tn: self.tp }
    }
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Accuracy, F1, precision and recall for one (model, arm, task). Counts are
/// absent when the report was ingested from published figures.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub task_id: String,
    pub arm: Arm,
    pub model: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub counts: Option<Confusion>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n: Option<u64>,
    pub accuracy: f64,
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Accuracy,
    F1,
    Precision,
    Recall,
}

impl Metric {
    pub const ALL: [Metric; 4] = [Metric::Accuracy, Metric::F1, Metric::Precision, Metric::Recall];

    pub fn as_str(self) -> &'static str {
        match self {
            Metric::Accuracy => "accuracy",
            Metric::F1 => "f1",
            Metric::Precision => "precision",
            Metric::Recall => "recall",
        }
    }
}

impl MetricsReport {
    /// Metrics from confusion counts. Every 0/0 ratio is 0.
    pub fn from_counts(task_id: impl Into<String>, arm: Arm, model: impl Into<String>, c: Confusion) -> Self {
        let precision = ratio(c.tp, c.tp + c.fp);
        let recall = ratio(c.tp, c.tp + c.fn_);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            // 2tp / (2tp + fp + fn) equals the harmonic mean and is exact in counts.
            ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn_)
        };
        Self {
            task_id: task_id.into(),
            arm,
            model: model.into(),
            counts: Some(c),
            n: Some(c.n()),
            accuracy: ratio(c.tp + c.tn, c.n()),
            f1,
            precision,
            recall,
        }
    }

    pub fn get(&self, m: Metric) -> f64 {
        match m {
            Metric::Accuracy => self.accuracy,
            Metric::F1 => self.f1,
            Metric::Precision => self.precision,
            Metric::Recall => self.recall,
        }
    }
}

/// A binary prediction for one sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub sample_id: String,
    pub label: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
}

/// Confusion counts of `predictions` against `gold`, matched by sample id.
/// Both sides must cover exactly the same ids.
pub fn confusion(predictions: &[Prediction], gold: &[(String, bool)]) -> Result<Confusion, EvalError> {
    let truth: BTreeMap<&str, bool> = gold.iter().map(|(id, g)| (id.as_str(), *g)).collect();
    let mut seen = BTreeMap::new();
    let mut extra = Vec::new();
    let mut c = Confusion::default();
    for p in predictions {
        match truth.get(p.sample_id.as_str()) {
            Some(&actual) => {
                if seen.insert(p.sample_id.as_str(), ()).is_some() {
                    extra.push(p.sample_id.clone());
                    continue;
                }
                c.add(p.label, actual);
            }
            None => extra.push(p.sample_id.clone()),
        }
    }
    let missing: Vec<String> = truth
        .keys()
        .filter(|id| !seen.contains_key(*id))
        .map(|id| id.to_string())
        .collect();
    if !missing.is_empty() || !extra.is_empty() || truth.len() != gold.len() {
        return Err(EvalError::MisalignedIds { missing, extra });
    }
    Ok(c)
}

pub fn compute_metrics(
    predictions: &[Prediction],
    gold: &[(String, bool)],
    task_id: &str,
    arm: Arm,
    model: &str,
) -> Result<MetricsReport, EvalError> {
    let c = confusion(predictions, gold)?;
    Ok(MetricsReport::from_counts(task_id, arm, model, c))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn preds(v: &[(usize, bool)]) -> Vec<Prediction> {
        v.iter()
            .map(|&(i, l)| Prediction { sample_id: i.to_string(), label: l, score: None })
            .collect()
    }

    fn gold(v: &[bool]) -> Vec<(String, bool)> {
        v.iter().enumerate().map(|(i, &g)| (i.to_string(), g)).collect()
    }

    fn run(p: &[bool], g: &[bool]) -> MetricsReport {
        let p: Vec<(usize, bool)> = p.iter().copied().enumerate().collect();
        compute_metrics(&preds(&p), &gold(g), "t", Arm::FewShot, "m").unwrap()
    }

    #[test]
    fn all_correct() {
        let r = run(&[true, false, true], &[true, false, true]);
        assert_eq!((r.accuracy, r.precision, r.recall, r.f1), (1.0, 1.0, 1.0, 1.0));
    }

    #[test]
    fn no_positive_predictions_scores_zero() {
        let g: Vec<bool> = (0..50).map(|i| i == 0).collect();
        let r = run(&[false; 50], &g);
        assert_eq!((r.precision, r.recall, r.f1), (0.0, 0.0, 0.0));
        assert_eq!(r.accuracy, 49.0 / 50.0);
    }

    #[test]
    fn hand_counted_case() {
        // tp=1, fp=1, fn=0, tn=2
        let r = run(&[true, true, false, false], &[true, false, false, false]);
        let c = r.counts.unwrap();
        assert_eq!((c.tp, c.fp, c.fn_, c.tn), (1, 1, 0, 2));
        assert_eq!(r.precision, 0.5);
        assert_eq!(r.recall, 1.0);
        assert!((r.f1 - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(r.accuracy, 0.75);
    }

    #[test]
    fn misaligned_ids_listed() {
        let p = preds(&[(0, true), (5, false)]);
        match compute_metrics(&p, &gold(&[true, false]), "t", Arm::FewShot, "m") {
            Err(EvalError::MisalignedIds { missing, extra }) => {
                assert_eq!(missing, ["1"]);
                assert_eq!(extra, ["5"]);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn arm_names_round_trip() {
        for a in [Arm::FewShot, Arm::Human250, Arm::Human1000, Arm::Surrogate1000, Arm::SurrogateFiltered, Arm::Other("x".into())] {
            let json = serde_json::to_string(&a).unwrap();
            assert_eq!(json, format!("\"{}\"", a.as_str()));
            assert_eq!(serde_json::from_str::<Arm>(&json).unwrap(), a);
            assert_eq!(Arm::parse(a.as_str()), a);
        }
    }

    #[test]
    fn label_swap_swaps_counts() {
        let p = [true, false, true, true, false, false];
        let g = [true, true, false, true, false, true];
        let a = run(&p, &g);
        let b = run(&p.map(|x| !x), &g.map(|x| !x));
        assert_eq!(a.counts.unwrap().swapped(), b.counts.unwrap());
        assert_eq!(a.accuracy, b.accuracy);
    }
}
