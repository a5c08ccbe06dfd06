//! Corpus ingestion with one-vs-rest binarization, plus the seeded four-way split.
//!
//! Corpora are stored one JSON object per line:
//!
//! ```text
//! {"id":"s-0001","text":"...","label":"past","meta":{"source":"manifesto"}}
//! ```
//!
//! `label` and `meta` are optional. Record order is preserved, and
//! [`Corpus::to_jsonl`] writes records back in the same canonical form, so a
//! file produced by this crate round-trips byte for byte.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::path::Path;

use rand::RngCore;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("malformed record on line {line}: {reason}")]
    MalformedRecord { line: usize, reason: String },
    #[error("duplicate sample id `{0}`")]
    DuplicateId(String),
    #[error("sample `{0}` has empty text")]
    EmptyText(String),
    #[error("sample `{id}` carries label `{label}` which is not in the schema")]
    UnknownLabel { id: String, label: String },
    #[error("schema needs at least two classes, got {0}")]
    DegenerateSchema(usize),
    #[error("split plan needs {needed} samples but the corpus has {available}")]
    InsufficientSamples { needed: usize, available: usize },
    #[error("invalid split plan: {0}")]
    InvalidPlan(String),
    #[error("sample `{0}` is not in the corpus")]
    UnknownSample(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One unit of text.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextSample {
    pub id: String,
    pub text: String,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub meta: BTreeMap<String, String>,
}

impl TextSample {
    pub fn new(id: impl Into<String>, text: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            text: text.into(),
            meta: BTreeMap::new(),
        }
    }
}

/// A sample with an optional human (gold) label and an optional LLM
/// (surrogate) label.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledSample {
    pub sample: TextSample,
    pub gold: Option<String>,
    pub surrogate: Option<String>,
}

impl LabeledSample {
    pub fn id(&self) -> &str {
        &self.sample.id
    }

    pub fn text(&self) -> &str {
        &self.sample.text
    }
}

/// Wire form of a corpus line.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CorpusRecord {
    id: String,
    text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    label: Option<String>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    meta: BTreeMap<String, String>,
}

/// Ordered collection of samples with unique ids.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Corpus {
    samples: Vec<LabeledSample>,
    index: HashMap<String, usize>,
}

impl Corpus {
    /// Builds a corpus, enforcing unique non-empty ids and non-blank text.
    pub fn new(samples: Vec<LabeledSample>) -> Result<Self, CorpusError> {
        let mut index = HashMap::with_capacity(samples.len());
        for (i, s) in samples.iter().enumerate() {
            if s.id().is_empty() {
                return Err(CorpusError::MalformedRecord {
                    line: i + 1,
                    reason: "empty id".into(),
                });
            }
            if s.text().trim().is_empty() {
                return Err(CorpusError::EmptyText(s.id().to_string()));
            }
            if index.insert(s.id().to_string(), i).is_some() {
                return Err(CorpusError::DuplicateId(s.id().to_string()));
            }
        }
        Ok(Self { samples, index })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn samples(&self) -> &[LabeledSample] {
        &self.samples
    }

    pub fn iter(&self) -> std::slice::Iter<'_, LabeledSample> {
        self.samples.iter()
    }

    pub fn get(&self, id: &str) -> Option<&LabeledSample> {
        self.index.get(id).map(|&i| &self.samples[i])
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.samples.iter().map(|s| s.id())
    }

    /// Sub-corpus with the given ids, in the order given.
    pub fn select(&self, ids: &[String]) -> Result<Corpus, CorpusError> {
        let samples = ids
            .iter()
            .map(|id| {
                self.get(id)
                    .cloned()
                    .ok_or_else(|| CorpusError::UnknownSample(id.clone()))
            })
            .collect::<Result<Vec<_>, _>>()?;
        Corpus::new(samples)
    }

    /// Sets the surrogate label of each listed sample; other samples are untouched.
    pub fn with_surrogates(&self, labels: &BTreeMap<String, String>) -> Corpus {
        let samples = self
            .samples
            .iter()
            .map(|s| {
                let mut s = s.clone();
                if let Some(l) = labels.get(s.id()) {
                    s.surrogate = Some(l.clone());
                }
                s
            })
            .collect();
        Corpus {
            samples,
            index: self.index.clone(),
        }
    }

    /// Parses line-delimited JSON. Blank lines are skipped; line numbers in
    /// errors are 1-based.
    pub fn from_jsonl(input: &str) -> Result<Self, CorpusError> {
        let mut samples = Vec::new();
        let mut seen = HashSet::new();
        for (i, line) in input.lines().enumerate() {
            let line_no = i + 1;
            if line.trim().is_empty() {
                continue;
            }
            let rec: CorpusRecord =
                serde_json::from_str(line).map_err(|e| CorpusError::MalformedRecord {
                    line: line_no,
                    reason: e.to_string(),
                })?;
            if rec.id.is_empty() {
                return Err(CorpusError::MalformedRecord {
                    line: line_no,
                    reason: "empty id".into(),
                });
            }
            if !seen.insert(rec.id.clone()) {
                return Err(CorpusError::DuplicateId(rec.id));
            }
            if rec.text.trim().is_empty() {
                return Err(CorpusError::EmptyText(rec.id));
            }
            samples.push(LabeledSample {
                sample: TextSample {
                    id: rec.id,
                    text: rec.text,
                    meta: rec.meta,
                },
                gold: rec.label,
                surrogate: None,
            });
        }
        Corpus::new(samples)
    }

    /// Writes the canonical line-delimited form. `label` carries the gold label.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for s in &self.samples {
            let rec = CorpusRecord {
                id: s.sample.id.clone(),
                text: s.sample.text.clone(),
                label: s.gold.clone(),
                meta: s.sample.meta.clone(),
            };
            out.push_str(&serde_json::to_string(&rec).expect("corpus record serializes"));
            out.push('\n');
        }
        out
    }
}

impl<'a> IntoIterator for &'a Corpus {
    type Item = &'a LabeledSample;
    type IntoIter = std::slice::Iter<'a, LabeledSample>;

    fn into_iter(self) -> Self::IntoIter {
        self.samples.iter()
    }
}

/// Reads a corpus file (line-delimited JSON).
pub fn ingest_corpus(path: &Path) -> Result<Corpus, CorpusError> {
    let raw = std::fs::read_to_string(path)?;
    Corpus::from_jsonl(&raw)
}

/// A binary classification task.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task_id: String,
    pub positive_label: String,
    pub negative_label: String,
    pub source_schema: Vec<String>,
    pub description: String,
}

impl TaskSpec {
    pub fn binary(
        task_id: impl Into<String>,
        positive: impl Into<String>,
        negative: impl Into<String>,
    ) -> Self {
        let positive = positive.into();
        let negative = negative.into();
        assert_ne!(positive, negative, "task labels must differ");
        Self {
            task_id: task_id.into(),
            source_schema: vec![positive.clone(), negative.clone()],
            description: String::new(),
            positive_label: positive,
            negative_label: negative,
        }
    }

    pub fn labels(&self) -> [&str; 2] {
        [&self.positive_label, &self.negative_label]
    }

    pub fn is_positive(&self, label: &str) -> bool {
        label == self.positive_label
    }

    pub fn contains(&self, label: &str) -> bool {
        label == self.positive_label || label == self.negative_label
    }
}

/// Negative label name used when binarizing class `class`.
pub fn negative_label_for(class: &str) -> String {
    format!("not_{class}")
}

/// Splits a k-class corpus into k one-vs-rest binary tasks. Samples without
/// a gold label stay unlabeled in every task.
pub fn binarize(schema: &[String], corpus: &Corpus) -> Result<Vec<(TaskSpec, Corpus)>, CorpusError> {
    let classes: Vec<&String> = {
        let mut seen = HashSet::new();
        schema.iter().filter(|c| seen.insert(c.as_str())).collect()
    };
    if classes.len() < 2 {
        return Err(CorpusError::DegenerateSchema(classes.len()));
    }
    for s in corpus {
        if let Some(label) = &s.gold {
            if !classes.contains(&label) {
                return Err(CorpusError::UnknownLabel {
                    id: s.id().to_string(),
                    label: label.clone(),
                });
            }
        }
    }

    let mut tasks = Vec::with_capacity(classes.len());
    for class in classes {
        let spec = TaskSpec {
            task_id: class.clone(),
            positive_label: class.clone(),
            negative_label: negative_label_for(class),
            source_schema: schema.to_vec(),
            description: format!("Does the text belong to the `{class}` category?"),
        };
        let samples = corpus
            .iter()
            .map(|s| LabeledSample {
                sample: s.sample.clone(),
                gold: s.gold.as_ref().map(|g| {
                    if g == class {
                        spec.positive_label.clone()
                    } else {
                        spec.negative_label.clone()
                    }
                }),
                surrogate: None,
            })
            .collect();
        tasks.push((spec, Corpus::new(samples)?));
    }
    Ok(tasks)
}

/// Sizes of the four partitions plus the sampling seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub train_n: usize,
    pub prompt_val_n: usize,
    pub tune_val_n: usize,
    pub test_n: usize,
    pub seed: u64,
    /// Keep class proportions roughly equal across partitions.
    #[serde(default)]
    pub stratified: bool,
}

impl Default for SplitPlan {
    fn default() -> Self {
        Self {
            train_n: 1000,
            prompt_val_n: 250,
            tune_val_n: 250,
            test_n: 1000,
            seed: 0,
            stratified: false,
        }
    }
}

impl SplitPlan {
    pub fn total(&self) -> usize {
        self.train_n + self.prompt_val_n + self.tune_val_n + self.test_n
    }

    fn validate(&self) -> Result<(), CorpusError> {
        let counts = [
            ("train_n", self.train_n),
            ("prompt_val_n", self.prompt_val_n),
            ("tune_val_n", self.tune_val_n),
            ("test_n", self.test_n),
        ];
        for (name, n) in counts {
            if n == 0 {
                return Err(CorpusError::InvalidPlan(format!("{name} must be at least 1")));
            }
        }
        Ok(())
    }
}

/// Which partition a sample belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitName {
    Train,
    PromptVal,
    TuneVal,
    Test,
}

impl SplitName {
    pub const ALL: [SplitName; 4] = [
        SplitName::Train,
        SplitName::PromptVal,
        SplitName::TuneVal,
        SplitName::Test,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            SplitName::Train => "train",
            SplitName::PromptVal => "prompt_val",
            SplitName::TuneVal => "tune_val",
            SplitName::Test => "test",
        }
    }
}

impl fmt::Display for SplitName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Sample ids per partition, in draw order.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<String>,
    pub prompt_val: Vec<String>,
    pub tune_val: Vec<String>,
    pub test: Vec<String>,
}

impl Splits {
    pub fn get(&self, name: SplitName) -> &[String] {
        match name {
            SplitName::Train => &self.train,
            SplitName::PromptVal => &self.prompt_val,
            SplitName::TuneVal => &self.tune_val,
            SplitName::Test => &self.test,
        }
    }
}

/// Partition plus any non-fatal observations (e.g. a split without positives).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitOutcome {
    pub splits: Splits,
    pub warnings: Vec<String>,
}

/// JSON manifest listing the ids of every partition, so external trainers
/// see the exact partition.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub task_id: String,
    pub corpus_hash: String,
    pub plan: SplitPlan,
    pub splits: Splits,
}

/// Uniform integer in `[0, bound)` by rejection sampling on 64-bit draws.
fn uniform_below(rng: &mut ChaCha8Rng, bound: u64) -> u64 {
    debug_assert!(bound > 0);
    let zone = u64::MAX - (u64::MAX % bound);
    loop {
        let x = rng.next_u64();
        if x < zone {
            return x % bound;
        }
    }
}

/// Fisher–Yates over `0..n` driven by ChaCha8 seeded with `seed`: for
/// `i = n-1 … 1`, swap `i` with a uniform `j ∈ [0, i]`.
pub fn seeded_permutation(n: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = uniform_below(&mut rng, i as u64 + 1) as usize;
        order.swap(i, j);
    }
    order
}

/// Reorders a shuffled index list so that every prefix holds classes in
/// proportion to their overall frequency (largest-deficit interleave).
fn stratify(order: Vec<usize>, corpus: &Corpus) -> Vec<usize> {
    let mut groups: BTreeMap<Option<&str>, Vec<usize>> = BTreeMap::new();
    for idx in order {
        groups
            .entry(corpus.samples[idx].gold.as_deref())
            .or_default()
            .push(idx);
    }
    let total: usize = groups.values().map(Vec::len).sum();
    let mut cursors: Vec<(usize, &Vec<usize>)> = groups.values().map(|g| (0, g)).collect();
    let mut out = Vec::with_capacity(total);
    for k in 1..=total {
        // Pick the class furthest behind its quota for a prefix of length k.
        let (best, _) = cursors
            .iter()
            .enumerate()
            .filter(|(_, (taken, g))| *taken < g.len())
            .map(|(ci, (taken, g))| {
                let quota = (g.len() * k) as f64 / total as f64;
                (ci, quota - *taken as f64)
            })
            .fold((usize::MAX, f64::NEG_INFINITY), |acc, cur| {
                if cur.1 > acc.1 {
                    cur
                } else {
                    acc
                }
            });
        let (taken, g) = &mut cursors[best];
        out.push(g[*taken]);
        *taken += 1;
    }
    out
}

/// Draws the four disjoint partitions uniformly without replacement.
pub fn split(corpus: &Corpus, plan: &SplitPlan) -> Result<SplitOutcome, CorpusError> {
    plan.validate()?;
    let needed = plan.total();
    if needed > corpus.len() {
        return Err(CorpusError::InsufficientSamples {
            needed,
            available: corpus.len(),
        });
    }
    let mut order = seeded_permutation(corpus.len(), plan.seed);
    if plan.stratified {
        order = stratify(order, corpus);
    }

    let mut cursor = order.into_iter().map(|i| corpus.samples[i].id().to_string());
    let mut take = |n: usize| cursor.by_ref().take(n).collect::<Vec<_>>();
    let splits = Splits {
        train: take(plan.train_n),
        prompt_val: take(plan.prompt_val_n),
        tune_val: take(plan.tune_val_n),
        test: take(plan.test_n),
    };

    let mut warnings = Vec::new();
    let labels: BTreeMap<&str, ()> = corpus
        .iter()
        .filter_map(|s| s.gold.as_deref())
        .map(|l| (l, ()))
        .collect();
    for name in SplitName::ALL {
        let present: HashSet<&str> = splits
            .get(name)
            .iter()
            .filter_map(|id| corpus.get(id).and_then(|s| s.gold.as_deref()))
            .collect();
        for label in labels.keys() {
            if !present.contains(label) {
                let msg = format!("split `{name}` contains no samples labeled `{label}`");
                log::warn!("{msg}");
                warnings.push(msg);
            }
        }
    }
    Ok(SplitOutcome { splits, warnings })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(id: &str, text: &str, gold: Option<&str>) -> LabeledSample {
        LabeledSample {
            sample: TextSample::new(id, text),
            gold: gold.map(str::to_string),
            surrogate: None,
        }
    }

    fn corpus_of(n: usize) -> Corpus {
        Corpus::new(
            (0..n)
                .map(|i| sample(&format!("s{i:05}"), &format!("text {i}"), Some(if i % 3 == 0 { "a" } else { "b" })))
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn ingests_in_file_order() {
        let raw = concat!(
            r#"{"id":"b","text":"second","label":"x"}"#,
            "\n",
            r#"{"id":"a","text":"first"}"#,
            "\n",
            r#"{"id":"c","text":"third","meta":{"source":"web"}}"#,
            "\n"
        );
        let c = Corpus::from_jsonl(raw).unwrap();
        assert_eq!(c.len(), 3);
        assert_eq!(c.ids().collect::<Vec<_>>(), ["b", "a", "c"]);
        assert_eq!(c.get("b").unwrap().gold.as_deref(), Some("x"));
        assert_eq!(c.get("c").unwrap().sample.meta["source"], "web");
        assert_eq!(c.to_jsonl(), raw);
    }

    #[test]
    fn duplicate_id_is_named() {
        let raw = "{\"id\":\"x\",\"text\":\"one\"}\n{\"id\":\"x\",\"text\":\"two\"}\n";
        match Corpus::from_jsonl(raw) {
            Err(CorpusError::DuplicateId(id)) => assert_eq!(id, "x"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn malformed_record_reports_line() {
        let raw = "{\"id\":\"x\",\"text\":\"one\"}\n\nnot json\n";
        match Corpus::from_jsonl(raw) {
            Err(CorpusError::MalformedRecord { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn blank_text_rejected() {
        let raw = "{\"id\":\"x\",\"text\":\"   \"}\n";
        assert!(matches!(Corpus::from_jsonl(raw), Err(CorpusError::EmptyText(id)) if id == "x"));
    }

    #[test]
    fn three_class_schema_gives_three_tasks() {
        let schema: Vec<String> = ["past", "present", "future"].map(String::from).to_vec();
        let c = Corpus::new(vec![
            sample("1", "we did", Some("past")),
            sample("2", "we do", Some("present")),
            sample("3", "we will", Some("future")),
        ])
        .unwrap();
        let tasks = binarize(&schema, &c).unwrap();
        assert_eq!(tasks.len(), 3);
        for (spec, corpus) in &tasks {
            assert_eq!(corpus.len(), 3);
            let pos = corpus.iter().filter(|s| s.gold.as_deref() == Some(&spec.positive_label)).count();
            assert_eq!(pos, 1);
        }
    }

    #[test]
    fn binary_schema_tasks_are_complementary() {
        let schema: Vec<String> = vec!["A".into(), "B".into()];
        let c = Corpus::new(vec![
            sample("1", "x", Some("A")),
            sample("2", "y", Some("B")),
            sample("3", "z", Some("A")),
        ])
        .unwrap();
        let tasks = binarize(&schema, &c).unwrap();
        let positives = |k: usize| -> HashSet<String> {
            let (spec, corpus) = &tasks[k];
            corpus
                .iter()
                .filter(|s| s.gold.as_deref() == Some(&spec.positive_label))
                .map(|s| s.id().to_string())
                .collect()
        };
        let (a, b) = (positives(0), positives(1));
        assert!(a.is_disjoint(&b));
        assert_eq!(a.len() + b.len(), 3);
    }

    #[test]
    fn binarize_counts_match_hand_count() {
        // 100 samples, 10 labeled A.
        let labels = |i: usize| if i < 10 { "A" } else if i < 55 { "B" } else { "C" };
        let c = Corpus::new((0..100).map(|i| sample(&i.to_string(), "t", Some(labels(i)))).collect()).unwrap();
        let schema: Vec<String> = ["A", "B", "C"].map(String::from).to_vec();
        let tasks = binarize(&schema, &c).unwrap();
        let (spec, corpus) = &tasks[0];
        assert_eq!(spec.task_id, "A");
        let pos = corpus.iter().filter(|s| s.gold.as_deref() == Some("A")).count();
        let neg = corpus.iter().filter(|s| s.gold.as_deref() == Some("not_A")).count();
        assert_eq!((pos, neg), (10, 90));
    }

    #[test]
    fn binarize_errors() {
        let c = Corpus::new(vec![sample("1", "x", Some("Z"))]).unwrap();
        let schema: Vec<String> = vec!["A".into(), "B".into()];
        assert!(matches!(binarize(&schema, &c), Err(CorpusError::UnknownLabel { .. })));
        assert!(matches!(
            binarize(&["A".to_string()], &c),
            Err(CorpusError::DegenerateSchema(1))
        ));
    }

    #[test]
    fn default_plan_sizes() {
        let out = split(&corpus_of(2500), &SplitPlan::default()).unwrap();
        let s = &out.splits;
        assert_eq!(
            (s.train.len(), s.prompt_val.len(), s.tune_val.len(), s.test.len()),
            (1000, 250, 250, 1000)
        );
    }

    #[test]
    fn insufficient_samples() {
        match split(&corpus_of(2499), &SplitPlan::default()) {
            Err(CorpusError::InsufficientSamples { needed, available }) => {
                assert_eq!((needed, available), (2500, 2499))
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn zero_count_plan_rejected() {
        let plan = SplitPlan { test_n: 0, ..SplitPlan::default() };
        assert!(matches!(split(&corpus_of(3000), &plan), Err(CorpusError::InvalidPlan(_))));
    }

    #[test]
    fn same_seed_same_order() {
        let c = corpus_of(2500);
        let plan = SplitPlan { seed: 7, ..SplitPlan::default() };
        assert_eq!(split(&c, &plan).unwrap(), split(&c, &plan).unwrap());
        let other = SplitPlan { seed: 8, ..plan };
        assert_ne!(split(&c, &plan).unwrap().splits, split(&c, &other).unwrap().splits);
    }

    #[test]
    fn stratified_split_keeps_proportions() {
        let c = corpus_of(3000); // one third "a"
        let plan = SplitPlan { stratified: true, seed: 3, ..SplitPlan::default() };
        let out = split(&c, &plan).unwrap();
        for name in SplitName::ALL {
            let ids = out.splits.get(name);
            let a = ids.iter().filter(|id| c.get(id).unwrap().gold.as_deref() == Some("a")).count();
            let expect = ids.len() as f64 / 3.0;
            assert!((a as f64 - expect).abs() <= 1.0, "{name}: {a} vs {expect}");
        }
    }

    #[test]
    fn absent_class_warns() {
        let mut samples: Vec<_> = (0..20).map(|i| sample(&i.to_string(), "t", Some("neg"))).collect();
        samples.push(sample("p", "t", Some("pos")));
        let c = Corpus::new(samples).unwrap();
        let plan = SplitPlan { train_n: 5, prompt_val_n: 5, tune_val_n: 5, test_n: 5, seed: 1, stratified: false };
        let out = split(&c, &plan).unwrap();
        assert!(out.warnings.iter().any(|w| w.contains("`pos`")));
    }

    #[test]
    fn permutation_is_a_permutation() {
        let mut p = seeded_permutation(500, 11);
        p.sort_unstable();
        assert_eq!(p, (0..500).collect::<Vec<_>>());
    }
}
