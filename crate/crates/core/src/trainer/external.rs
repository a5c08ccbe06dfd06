use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::process::Command;

use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::corpus::TaskSpec;
use crate::evaluator::Prediction;

/// argv of the external trainer. Each argument may contain the placeholders
/// `{train}`, `{val}`, `{test}`, `{config}`, `{predictions}` and `{dir}`.
/// When no argument uses a placeholder, the train, val, test, config and
/// predictions paths are appended in that order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommandTemplate(pub Vec<String>);

impl CommandTemplate {
    pub fn parse(s: &str) -> Self {
        Self(s.split_whitespace().map(str::to_string).collect())
    }
}

/// A sample handed to the external trainer. `label` is absent for test items.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExternalSample {
    pub id: String,
    pub text: String,
    pub label: Option<bool>,
}

#[derive(Debug, Clone)]
pub struct ExternalJob {
    pub task: TaskSpec,
    pub train: Vec<ExternalSample>,
    pub val: Vec<ExternalSample>,
    pub test: Vec<ExternalSample>,
    /// Written verbatim as `config.json` (grid cell, seed, arm).
    pub config: serde_json::Value,
}

#[derive(Debug, Clone)]
pub struct ExternalOutcome {
    pub dir: PathBuf,
    pub predictions_path: PathBuf,
    /// In test-file order.
    pub predictions: Vec<Prediction>,
}

#[derive(Serialize)]
struct Line<'a> {
    id: &'a str,
    text: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    label: Option<&'a str>,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum WireLabel {
    Bool(bool),
    Int(u8),
    Name(String),
}

#[derive(Deserialize)]
struct WirePrediction {
    sample_id: String,
    #[serde(default)]
    score: Option<f64>,
    label: WireLabel,
}

fn write_split(path: &Path, task: &TaskSpec, items: &[ExternalSample]) -> std::io::Result<()> {
    let mut out = String::new();
    for s in items {
        let label = s.label.map(|y| if y { task.positive_label.as_str() } else { task.negative_label.as_str() });
        out.push_str(&serde_json::to_string(&Line { id: &s.id, text: &s.text, label }).expect("line serializes"));
        out.push('\n');
    }
    std::fs::write(path, out)
}

fn tail(bytes: &[u8], max: usize) -> String {
    let s = String::from_utf8_lossy(bytes);
    let s = s.trim_end();
    let start = s.char_indices().rev().nth(max.saturating_sub(1)).map_or(0, |(i, _)| i);
    s[start..].to_string()
}

/// Writes the contract files into `dir`, runs the trainer and reads back
/// `predictions.jsonl`, checking it covers every test id exactly once.
pub fn external_train(job: &ExternalJob, template: &CommandTemplate, dir: &Path) -> Result<ExternalOutcome, TrainError> {
    let (program, rest) = template
        .0
        .split_first()
        .ok_or_else(|| TrainError::InvalidConfig("empty external command".into()))?;
    std::fs::create_dir_all(dir)?;
    let paths = [
        ("{train}", dir.join("train.jsonl")),
        ("{val}", dir.join("val.jsonl")),
        ("{test}", dir.join("test.jsonl")),
        ("{config}", dir.join("config.json")),
        ("{predictions}", dir.join("predictions.jsonl")),
    ];
    write_split(&paths[0].1, &job.task, &job.train)?;
    write_split(&paths[1].1, &job.task, &job.val)?;
    write_split(&paths[2].1, &job.task, &job.test)?;
    std::fs::write(&paths[3].1, serde_json::to_vec_pretty(&job.config).expect("config serializes"))?;
    let predictions_path = paths[4].1.clone();
    let _ = std::fs::remove_file(&predictions_path);

    let dir_s = dir.display().to_string();
    let mut templated = false;
    let mut args: Vec<String> = rest
        .iter()
        .map(|a| {
            let mut a = a.replace("{dir}", &dir_s);
            for (k, p) in &paths {
                if a.contains(k) {
                    a = a.replace(k, &p.display().to_string());
                    templated = true;
                }
            }
            a
        })
        .collect();
    if !templated {
        args.extend(paths.iter().map(|(_, p)| p.display().to_string()));
    }
    log::info!("running external trainer {program} in {dir_s}");
    let out = Command::new(program).args(&args).current_dir(dir).output()?;
    if !out.status.success() {
        return Err(TrainError::NonZeroExit { code: out.status.code(), stderr_tail: tail(&out.stderr, 2000) });
    }

    let raw = std::fs::read_to_string(&predictions_path).unwrap_or_default();
    let wanted: BTreeSet<&str> = job.test.iter().map(|s| s.id.as_str()).collect();
    let mut by_id = std::collections::HashMap::new();
    for (i, line) in raw.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let bad = |reason: String| TrainError::BadPredictions { line: i + 1, reason };
        let w: WirePrediction = serde_json::from_str(line).map_err(|e| bad(e.to_string()))?;
        let label = match w.label {
            WireLabel::Bool(b) => b,
            WireLabel::Int(n) if n <= 1 => n == 1,
            WireLabel::Name(n) if n == job.task.positive_label => true,
            WireLabel::Name(n) if n == job.task.negative_label => false,
            _ => return Err(bad("label is not a task label".into())),
        };
        if let Some(s) = w.score {
            if !(0.0..=1.0).contains(&s) {
                return Err(bad(format!("score {s} outside [0, 1]")));
            }
        }
        if !wanted.contains(w.sample_id.as_str()) {
            return Err(bad(format!("unknown sample id {}", w.sample_id)));
        }
        if by_id.insert(w.sample_id.clone(), (w.score, label)).is_some() {
            return Err(bad(format!("duplicate sample id {}", w.sample_id)));
        }
    }
    let missing: Vec<String> = job.test.iter().filter(|s| !by_id.contains_key(&s.id)).map(|s| s.id.clone()).collect();
    if !missing.is_empty() {
        return Err(TrainError::IncompletePredictions(missing));
    }
    let predictions = job
        .test
        .iter()
        .map(|s| {
            let (score, label) = by_id[&s.id];
            Prediction { sample_id: s.id.clone(), label, score }
        })
        .collect();
    Ok(ExternalOutcome { dir: dir.to_path_buf(), predictions_path, predictions })
}
