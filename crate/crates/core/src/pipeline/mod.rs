//! The four-step workflow (validate, generate, train, test) as idempotent
//! runs over a content-addressed store, plus the arm comparison, the
//! consistency ablation and drift reports.

mod config;
mod query;
mod store;

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use log::{info, warn};
use serde::{Deserialize, Serialize};

pub use config::{
    FewShotSettings, GenerationSettings, MockSettings, PipelineConfig, TrainingSettings, ValidationSettings,
};
pub use query::{
    arm_comparison_of, disagreements, latest_reports, prompt_deltas, set_disagreement_status, DisagreementFilter,
};
pub use store::{run_id, now_secs, RunManifest, RunStatus, Step, Store, StoreIndex, StoreLock, TaskEntry};

use crate::annotator::{
    annotate, AnnotateError, AnnotationRun, HttpProvider, MockProvider, PromptVersion, Provider, ProviderConfig,
    RawAnnotation, TokenLedger,
};
use crate::consistency::{self, filter_by_consistency, AnnotationRecord, ConsistencyError};
use crate::corpus::{binarize, split, Corpus, CorpusError, SplitManifest, TaskSpec, TextSample};
use crate::evaluator::{
    arm_comparison, compute_metrics, drift_compare, pr_curve, Arm, DriftReport, EvalError, MetricsReport, Prediction,
};
use crate::hashing::sha256_hex;
use crate::review::{extract_disagreements, iteration_guard, prompt_delta, PromptRun, ReviewError};
use crate::trainer::{
    external_train, grid_search, train, training_set_hash, CommandTemplate, ExternalJob, ExternalSample, ModelArtifact,
    Provenance, TrainError,
};

/// Label used for answers that could not be parsed when listing
/// disagreements.
pub const UNPARSEABLE: &str = "<unparseable>";

/// Model name of the built-in student in reports.
pub const STUDENT_MODEL: &str = "hashed-logreg";

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("store is locked by another run ({0}); remove it if no run is active")]
    Locked(PathBuf),
    #[error("no store index at {0}")]
    NoStore(PathBuf),
    #[error("store is open read-only")]
    ReadOnly,
    #[error("corrupt store: {0}")]
    CorruptStore(String),
    #[error("missing object {0}")]
    MissingObject(String),
    #[error("unknown task {0:?}")]
    UnknownTask(String),
    #[error("unknown run {0:?}")]
    UnknownRun(String),
    #[error("{step} requires {requires}")]
    OrderViolation { step: String, requires: String },
    #[error("missing arm inputs:\n  {}", .0.join("\n  "))]
    MissingArms(Vec<String>),
    #[error("sample {0} has no gold label")]
    MissingGold(String),
    #[error("no disagreement {sample_id} in task {task_id}")]
    UnknownDisagreement { task_id: String, sample_id: String },
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Annotate(#[from] AnnotateError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Review(#[from] ReviewError),
    #[error(transparent)]
    Consistency(#[from] ConsistencyError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl PipelineError {
    /// 1 for validation and contract failures, 2 for environment and
    /// provider failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Locked(_)
            | PipelineError::NoStore(_)
            | PipelineError::CorruptStore(_)
            | PipelineError::MissingObject(_)
            | PipelineError::Io(_) => 2,
            PipelineError::Corpus(CorpusError::Io(_)) => 2,
            PipelineError::Annotate(
                AnnotateError::AuthMissing(_)
                | AnnotateError::ProviderUnreachable { .. }
                | AnnotateError::Rejected { .. }
                | AnnotateError::Io(_),
            ) => 2,
            PipelineError::Train(TrainError::NonZeroExit { .. } | TrainError::Io(_)) => 2,
            PipelineError::Review(ReviewError::Io(_)) => 2,
            _ => 1,
        }
    }
}

/// Arms trained by the pipeline. The few-shot arm is evaluated directly.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainArm {
    Human250,
    Human1000,
    Surrogate1000,
    SurrogateFiltered,
}

impl TrainArm {
    pub const ALL: [TrainArm; 4] =
        [TrainArm::Human250, TrainArm::Human1000, TrainArm::Surrogate1000, TrainArm::SurrogateFiltered];

    pub fn arm(self) -> Arm {
        match self {
            TrainArm::Human250 => Arm::Human250,
            TrainArm::Human1000 => Arm::Human1000,
            TrainArm::Surrogate1000 => Arm::Surrogate1000,
            TrainArm::SurrogateFiltered => Arm::SurrogateFiltered,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TrainArm::Human250 => "human_250",
            TrainArm::Human1000 => "human_1000",
            TrainArm::Surrogate1000 => "surrogate_1000",
            TrainArm::SurrogateFiltered => "surrogate_filtered",
        }
    }

    pub fn parse(s: &str) -> Option<TrainArm> {
        let s = s.replace('-', "_");
        TrainArm::ALL.into_iter().find(|a| a.as_str() == s)
    }

    fn uses_surrogates(self) -> bool {
        matches!(self, TrainArm::Surrogate1000 | TrainArm::SurrogateFiltered)
    }
}

/// An arm to evaluate on the test split.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalArm {
    FewShot,
    Trained(TrainArm),
}

impl EvalArm {
    pub fn parse(s: &str) -> Option<EvalArm> {
        match s.replace('-', "_").as_str() {
            "few_shot" => Some(EvalArm::FewShot),
            other => TrainArm::parse(other).map(EvalArm::Trained),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            EvalArm::FewShot => "few_shot",
            EvalArm::Trained(a) => a.as_str(),
        }
    }
}

/// Per-task row of the consistency ablation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub task_id: String,
    pub kept: usize,
    pub dropped: usize,
    pub with_noise: MetricsReport,
    pub without_noise: MetricsReport,
    /// F1 without noise minus F1 with noise.
    pub f1_difference: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub threshold: String,
    pub rows: Vec<AblationRow>,
    pub mean_f1_difference: f64,
}

struct StepOutput {
    outputs: BTreeMap<String, String>,
    summary: serde_json::Value,
}

/// Orchestrates runs against one store. Holds the store lock for its
/// lifetime.
pub struct Pipeline {
    store: Store,
    config: PipelineConfig,
    offline: bool,
    provider_override: Option<Arc<dyn Provider>>,
}

impl Pipeline {
    pub fn open(root: &Path, config: PipelineConfig, offline: bool) -> Result<Self, PipelineError> {
        config.validate()?;
        Ok(Self { store: Store::open(root)?, config, offline, provider_override: None })
    }

    /// Uses `provider` instead of the configured one. The cache namespace
    /// stays that of the configured provider.
    pub fn with_provider(mut self, provider: Arc<dyn Provider>) -> Self {
        self.provider_override = Some(provider);
        self
    }

    pub fn store(&self) -> &Store {
        &self.store
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn index(&self) -> &StoreIndex {
        &self.store.index
    }

    /// Every `(run_id, output name, object hash)` in execution order.
    pub fn artifact_hashes(&self) -> Vec<(String, String, String)> {
        self.store
            .index
            .runs
            .iter()
            .flat_map(|r| r.outputs.iter().map(move |(k, v)| (r.run_id.clone(), k.clone(), v.clone())))
            .collect()
    }

    fn execute(
        &mut self,
        step: Step,
        task_id: &str,
        arm: Option<&str>,
        inputs: BTreeMap<String, String>,
        work: impl FnOnce(&Self) -> Result<StepOutput, PipelineError>,
    ) -> Result<RunManifest, PipelineError> {
        let id = run_id(step, task_id, arm, &inputs);
        if let Some(done) = self.store.reusable(&id) {
            info!("{id}: inputs unchanged, reusing");
            return Ok(done.clone());
        }
        info!("{id}: running {step} for {task_id}{}", arm.map(|a| format!(" ({a})")).unwrap_or_default());
        let started_at = now_secs();
        let result = work(self);
        let mut manifest = RunManifest {
            run_id: id,
            task_id: task_id.to_string(),
            step,
            arm: arm.map(str::to_string),
            inputs,
            outputs: BTreeMap::new(),
            summary: serde_json::Value::Null,
            status: RunStatus::Completed,
            started_at,
            finished_at: now_secs(),
        };
        match result {
            Ok(out) => {
                manifest.outputs = out.outputs;
                manifest.summary = out.summary;
                self.store.index.record(manifest.clone());
                self.store.save_index()?;
                Ok(manifest)
            }
            Err(e) => {
                manifest.status = RunStatus::Failed;
                manifest.summary = serde_json::json!({ "error": e.to_string() });
                self.store.index.record(manifest);
                if let Err(save) = self.store.save_index() {
                    warn!("could not record failed run: {save}");
                }
                Err(e)
            }
        }
    }

    // ---- ingest and split ----

    /// Reads a JSONL corpus and binarizes it into one task per class. The
    /// schema defaults to the sorted set of gold labels. Each new task gets a
    /// YES/NO prompt as version 1.
    pub fn ingest(&mut self, path: &Path, schema: Option<Vec<String>>) -> Result<RunManifest, PipelineError> {
        let text = std::fs::read_to_string(path)?;
        let corpus = Corpus::from_jsonl(&text)?;
        self.ingest_corpus(&corpus, schema)
    }

    pub fn ingest_corpus(&mut self, corpus: &Corpus, schema: Option<Vec<String>>) -> Result<RunManifest, PipelineError> {
        let schema = match schema {
            Some(s) => s,
            None => {
                let mut labels: Vec<String> = corpus.iter().filter_map(|s| s.gold.clone()).collect();
                labels.sort();
                labels.dedup();
                labels
            }
        };
        let canonical = corpus.to_jsonl();
        let mut inputs = BTreeMap::new();
        inputs.insert("corpus".to_string(), sha256_hex(canonical.as_bytes()));
        inputs.insert("schema".to_string(), sha256_hex(schema.join("\n").as_bytes()));
        let tasks = binarize(&schema, corpus)?;

        let manifest = self.execute(Step::Ingest, "*", None, inputs, |p| {
            let mut outputs = BTreeMap::new();
            outputs.insert("corpus".to_string(), p.store.put(canonical.as_bytes())?);
            for (spec, c) in &tasks {
                outputs.insert(format!("task:{}", spec.task_id), p.store.put(c.to_jsonl().as_bytes())?);
                outputs.insert(format!("spec:{}", spec.task_id), p.store.put_json(spec)?);
            }
            let summary = serde_json::json!({
                "samples": corpus.len(),
                "schema": schema,
                "tasks": tasks.iter().map(|(s, _)| s.task_id.clone()).collect::<Vec<_>>(),
            });
            Ok(StepOutput { outputs, summary })
        })?;

        self.store.index.source_corpus = manifest.outputs.get("corpus").cloned();
        for (spec, _) in &tasks {
            let corpus_hash = manifest.outputs[&format!("task:{}", spec.task_id)].clone();
            let keep_split = self
                .store
                .index
                .tasks
                .get(&spec.task_id)
                .filter(|t| t.corpus == corpus_hash)
                .and_then(|t| t.split.clone());
            self.store
                .index
                .tasks
                .insert(spec.task_id.clone(), TaskEntry { spec: spec.clone(), corpus: corpus_hash, split: keep_split });
            let prompts = self.store.prompts();
            if prompts.versions(&spec.task_id)?.is_empty() {
                prompts.save(&PromptVersion::yes_no(spec, 1))?;
            }
        }
        self.store.save_index()?;
        Ok(manifest)
    }

    pub fn task_ids(&self) -> Vec<String> {
        self.store.index.tasks.keys().cloned().collect()
    }

    pub fn task_corpus(&self, task_id: &str) -> Result<Corpus, PipelineError> {
        let entry = self.store.task(task_id)?;
        Ok(Corpus::from_jsonl(&self.store.get_string(&entry.corpus)?)?)
    }

    pub fn split(&mut self, task_id: &str) -> Result<RunManifest, PipelineError> {
        let entry = self.store.task(task_id)?.clone();
        let plan = self.config.split;
        let mut inputs = BTreeMap::new();
        inputs.insert("corpus".to_string(), entry.corpus.clone());
        inputs.insert("plan".to_string(), sha256_hex(serde_json::to_string(&plan).expect("plan serializes").as_bytes()));
        let manifest = self.execute(Step::Split, task_id, None, inputs, |p| {
            let corpus = p.task_corpus(task_id)?;
            let outcome = split(&corpus, &plan)?;
            for w in &outcome.warnings {
                warn!("{task_id}: {w}");
            }
            let m = SplitManifest {
                task_id: task_id.to_string(),
                corpus_hash: entry.corpus.clone(),
                plan,
                splits: outcome.splits,
            };
            let mut outputs = BTreeMap::new();
            outputs.insert("split".to_string(), p.store.put_json(&m)?);
            let summary = serde_json::json!({
                "train": m.splits.train.len(),
                "prompt_val": m.splits.prompt_val.len(),
                "tune_val": m.splits.tune_val.len(),
                "test": m.splits.test.len(),
                "seed": plan.seed,
                "warnings": outcome.warnings,
            });
            Ok(StepOutput { outputs, summary })
        })?;
        let hash = manifest.outputs["split"].clone();
        if let Some(t) = self.store.index.tasks.get_mut(task_id) {
            t.split = Some(hash);
        }
        self.store.save_index()?;
        Ok(manifest)
    }

    fn split_of(&self, task_id: &str, step: &str) -> Result<(String, SplitManifest), PipelineError> {
        let entry = self.store.task(task_id)?;
        let hash = entry.split.clone().ok_or_else(|| PipelineError::OrderViolation {
            step: format!("{step} for {task_id}"),
            requires: "split".into(),
        })?;
        let m = self.store.get_json(&hash)?;
        Ok((hash, m))
    }

    // ---- prompts and providers ----

    /// The configured prompt version for the task, or its latest.
    pub fn prompt_for(&self, task_id: &str) -> Result<PromptVersion, PipelineError> {
        let prompts = self.store.prompts();
        let id = self.config.prompt_ids.get(task_id).cloned().unwrap_or_else(|| task_id.to_string());
        let prompt = match self.config.prompt_version {
            Some(v) => prompts.load(&id, v)?,
            None => prompts
                .latest(&id)?
                .ok_or_else(|| PipelineError::Config(format!("no prompt versions for {id:?}")))?,
        };
        Ok(prompt)
    }

    /// Provider settings with the cache namespace adjusted for the mock.
    fn provider_config(&self, temperature: f64) -> ProviderConfig {
        let mut cfg = self.config.provider.clone();
        cfg.temperature = temperature;
        if self.offline {
            cfg.model_name = format!(
                "mock:{}:noise={}:seed={}",
                self.config.provider.model_name, self.config.mock.noise, self.config.mock.seed
            );
        }
        cfg
    }

    fn provider_identity(cfg: &ProviderConfig, offline: bool) -> String {
        let ident = serde_json::json!({
            "model": cfg.model_name,
            "temperature": cfg.temperature,
            "batch_size": cfg.batch_size,
            "endpoint": if offline { "offline" } else { cfg.base_url.as_str() },
        });
        sha256_hex(ident.to_string().as_bytes())
    }

    fn make_provider(&self, corpus: &Corpus, prompt: &PromptVersion) -> Result<Arc<dyn Provider>, PipelineError> {
        if let Some(p) = &self.provider_override {
            return Ok(p.clone());
        }
        if self.offline {
            let gold: HashMap<String, String> =
                corpus.iter().filter_map(|s| s.gold.clone().map(|g| (s.text().to_string(), g))).collect();
            Ok(Arc::new(MockProvider::new(gold, &prompt.label_lexicon, self.config.mock.noise, self.config.mock.seed)))
        } else {
            Ok(Arc::new(HttpProvider::from_env(&self.config.provider)?))
        }
    }

    fn run_annotation(
        &self,
        spec: &TaskSpec,
        corpus: &Corpus,
        ids: &[String],
        prompt: &PromptVersion,
        cfg: &ProviderConfig,
        iterations: u32,
    ) -> Result<AnnotationRun, PipelineError> {
        let samples: Vec<TextSample> = corpus.select(ids)?.iter().map(|s| s.sample.clone()).collect();
        let provider = self.make_provider(corpus, prompt)?;
        let cache = self.store.cache()?;
        let run = annotate(&samples, spec, prompt, provider.as_ref(), cfg, iterations, &cache)?;
        info!(
            "{}: {} records, {} cache hits, {} requests, {} unparseable",
            spec.task_id, run.records.len(), run.stats.cache_hits, run.stats.requests, run.stats.unparseable
        );
        Ok(run)
    }

    // ---- validate ----

    /// Annotates the prompt-validation split once and scores it against
    /// gold. The F1 gate is advisory.
    pub fn validate(&mut self, task_id: &str) -> Result<RunManifest, PipelineError> {
        let entry = self.store.task(task_id)?.clone();
        let (split_hash, manifest) = self.split_of(task_id, "validate")?;
        let prompt = self.prompt_for(task_id)?;
        prompt.validate_for(&entry.spec)?;
        let cfg = self.provider_config(self.config.validation.temperature);
        cfg.validate()?;

        // The newest earlier version validated on the same split is the baseline.
        let baseline = self
            .store
            .index
            .runs_of(task_id, Step::Validate)
            .filter(|r| r.inputs.get("split") == Some(&split_hash))
            .filter(|r| r.summary["prompt_id"] == prompt.prompt_id.as_str())
            .filter_map(|r| {
                let v = r.summary["prompt_version"].as_u64()? as u32;
                (v < prompt.version).then(|| (v, r.outputs.get("prompt_run").cloned()))
            })
            .max_by_key(|(v, _)| *v)
            .and_then(|(_, h)| h);

        let mut inputs = BTreeMap::new();
        inputs.insert("corpus".to_string(), entry.corpus.clone());
        inputs.insert("split".to_string(), split_hash);
        inputs.insert("prompt".to_string(), prompt.hash());
        inputs.insert("provider".to_string(), Self::provider_identity(&cfg, self.offline));
        if let Some(b) = &baseline {
            inputs.insert("baseline_prompt_run".to_string(), b.clone());
        }
        let gate = self.config.validation.gate_f1;

        self.execute(Step::Validate, task_id, None, inputs, |p| {
            let corpus = p.task_corpus(task_id)?;
            let ids = &manifest.splits.prompt_val;
            let run = p.run_annotation(&entry.spec, &corpus, ids, &prompt, &cfg, 1)?;
            let predictions = single_draw_predictions(&run, &entry.spec);
            let gold = gold_pairs(&corpus, ids, &entry.spec)?;
            let report = compute_metrics(&predictions, &gold, task_id, Arm::FewShot, &p.config.provider.model_name)?;

            let llm: BTreeMap<String, String> = run
                .records
                .iter()
                .map(|r| (r.sample_id.clone(), r.label.clone().unwrap_or_else(|| UNPARSEABLE.to_string())))
                .collect();
            let found = extract_disagreements(task_id, &llm, &corpus.select(ids)?, &prompt.prompt_id, prompt.version)?;
            let prompt_run =
                PromptRun { prompt_id: prompt.prompt_id.clone(), version: prompt.version, predictions };

            let mut outputs = BTreeMap::new();
            outputs.insert("annotations".to_string(), p.store.put(annotations_jsonl(&run.records).as_bytes())?);
            outputs.insert("report".to_string(), p.store.put_json(&report)?);
            outputs.insert("disagreements".to_string(), p.store.put_json(&found)?);
            outputs.insert("prompt_run".to_string(), p.store.put_json(&prompt_run)?);
            if let Some(b) = &baseline {
                let before: PromptRun = p.store.get_json(b)?;
                let delta =
                    prompt_delta(task_id, &[before.clone(), prompt_run.clone()], &gold, before.version, prompt.version)?;
                outputs.insert("prompt_delta".to_string(), p.store.put_json(&delta)?);
            }

            let versions = p.store.prompts().versions(&prompt.prompt_id)?;
            let guard = iteration_guard(task_id, &versions);
            let gate_pass = report.f1 >= gate;
            if !gate_pass {
                warn!("{task_id}: validation F1 {:.3} is below the advisory gate {gate}", report.f1);
            }
            let summary = serde_json::json!({
                "prompt_id": prompt.prompt_id,
                "prompt_version": prompt.version,
                "n": ids.len(),
                "accuracy": report.accuracy,
                "f1": report.f1,
                "precision": report.precision,
                "recall": report.recall,
                "gate_f1": gate,
                "gate_pass": gate_pass,
                "disagreements": found.len(),
                "unparseable": run.stats.unparseable,
                "ledger": run.ledger,
                "warnings": guard.into_iter().collect::<Vec<_>>(),
            });
            Ok(StepOutput { outputs, summary })
        })
    }

    /// The validate run for the task's current prompt and split, if any.
    fn validated(&self, task_id: &str, split_hash: &str, prompt: &PromptVersion) -> Option<&RunManifest> {
        let ph = prompt.hash();
        self.store
            .index
            .runs_of(task_id, Step::Validate)
            .filter(|r| r.inputs.get("split").map(String::as_str) == Some(split_hash) && r.inputs.get("prompt") == Some(&ph))
            .last()
    }

    fn require_validated(&self, task_id: &str, step: &str) -> Result<(String, SplitManifest, PromptVersion, String), PipelineError> {
        let (split_hash, manifest) = self.split_of(task_id, step)?;
        let prompt = self.prompt_for(task_id)?;
        let run = self.validated(task_id, &split_hash, &prompt).ok_or_else(|| PipelineError::OrderViolation {
            step: format!("{step} for {task_id}"),
            requires: format!("validate with prompt {} v{}", prompt.prompt_id, prompt.version),
        })?;
        let id = run.run_id.clone();
        Ok((split_hash, manifest, prompt, id))
    }

    // ---- generate ----

    /// Labels the train split with repeated draws and records the modal
    /// label and consistency of every sample.
    pub fn generate(&mut self, task_id: &str) -> Result<RunManifest, PipelineError> {
        let entry = self.store.task(task_id)?.clone();
        let (split_hash, manifest, prompt, validate_id) = self.require_validated(task_id, "generate")?;
        let settings = self.config.generation;
        let cfg = self.provider_config(settings.temperature);
        cfg.validate()?;

        let mut inputs = BTreeMap::new();
        inputs.insert("corpus".to_string(), entry.corpus.clone());
        inputs.insert("split".to_string(), split_hash);
        inputs.insert("prompt".to_string(), prompt.hash());
        inputs.insert("provider".to_string(), Self::provider_identity(&cfg, self.offline));
        inputs.insert("iterations".to_string(), settings.iterations.to_string());
        inputs.insert("validate_run".to_string(), validate_id);

        self.execute(Step::Generate, task_id, None, inputs, |p| {
            let corpus = p.task_corpus(task_id)?;
            let ids = &manifest.splits.train;
            let run = p.run_annotation(&entry.spec, &corpus, ids, &prompt, &cfg, settings.iterations)?;
            let records = run.consistency_records();
            let surrogates: BTreeMap<String, String> =
                records.iter().map(|r| (r.sample_id.clone(), r.modal.clone())).collect();
            let excluded: Vec<&String> = ids.iter().filter(|id| !surrogates.contains_key(*id)).collect();
            if !excluded.is_empty() {
                warn!("{task_id}: {} samples have no readable label and are left out", excluded.len());
            }
            let summary_c = consistency::summarize(&records);

            let mut outputs = BTreeMap::new();
            outputs.insert("annotations".to_string(), p.store.put(annotations_jsonl(&run.records).as_bytes())?);
            outputs.insert("consistency".to_string(), p.store.put(consistency::to_jsonl(&records).as_bytes())?);
            outputs.insert("surrogates".to_string(), p.store.put_json(&surrogates)?);
            let summary = serde_json::json!({
                "prompt_id": prompt.prompt_id,
                "prompt_version": prompt.version,
                "iterations": settings.iterations,
                "temperature": settings.temperature,
                "raw_annotations": run.records.len(),
                "surrogate_labels": surrogates.len(),
                "excluded": excluded,
                "consistency": summary_c,
                "ledger": run.ledger,
            });
            Ok(StepOutput { outputs, summary })
        })
    }

    fn latest_generate(&self, task_id: &str, split_hash: &str) -> Option<&RunManifest> {
        self.store
            .index
            .runs_of(task_id, Step::Generate)
            .filter(|r| r.inputs.get("split").map(String::as_str) == Some(split_hash))
            .last()
    }

    // ---- train ----

    /// Training set of an arm as `(id, text, label)` in split order.
    fn training_examples(
        &self,
        task_id: &str,
        arm: TrainArm,
        corpus: &Corpus,
        manifest: &SplitManifest,
        generate: Option<&RunManifest>,
    ) -> Result<Vec<(String, String, bool)>, PipelineError> {
        let spec = &self.store.task(task_id)?.spec;
        let train_ids = &manifest.splits.train;
        match arm {
            TrainArm::Human250 | TrainArm::Human1000 => {
                let ids: &[String] = if arm == TrainArm::Human250 {
                    let n = self.config.training.human_small_n;
                    if n >= train_ids.len() {
                        return Err(PipelineError::Config(format!(
                            "human_small_n {n} must be smaller than the train split ({})",
                            train_ids.len()
                        )));
                    }
                    &train_ids[..n]
                } else {
                    train_ids
                };
                ids.iter()
                    .map(|id| {
                        let s = corpus.get(id).ok_or_else(|| CorpusError::UnknownSample(id.clone()))?;
                        let g = s.gold.as_deref().ok_or_else(|| PipelineError::MissingGold(id.clone()))?;
                        Ok((id.clone(), s.text().to_string(), spec.is_positive(g)))
                    })
                    .collect()
            }
            TrainArm::Surrogate1000 | TrainArm::SurrogateFiltered => {
                let generate = generate.ok_or_else(|| PipelineError::OrderViolation {
                    step: format!("train {} for {task_id}", arm.as_str()),
                    requires: "generate".into(),
                })?;
                let labels: BTreeMap<String, String> = if arm == TrainArm::Surrogate1000 {
                    self.store.get_json(&generate.outputs["surrogates"])?
                } else {
                    let records = read_consistency(&self.store.get_string(&generate.outputs["consistency"])?)?;
                    let threshold = self.config.consistency_threshold()?;
                    let (kept, _) = filter_by_consistency(&records, threshold);
                    kept.into_iter().map(|r| (r.sample_id, r.modal)).collect()
                };
                Ok(train_ids
                    .iter()
                    .filter_map(|id| {
                        let label = labels.get(id)?;
                        let s = corpus.get(id)?;
                        Some((id.clone(), s.text().to_string(), spec.is_positive(label)))
                    })
                    .collect())
            }
        }
    }

    /// Tunes on the gold-labeled tune split and trains the final model.
    pub fn train(&mut self, task_id: &str, arm: TrainArm) -> Result<RunManifest, PipelineError> {
        let entry = self.store.task(task_id)?.clone();
        let (split_hash, manifest) = self.split_of(task_id, "train")?;
        let generate = if arm.uses_surrogates() {
            Some(self.latest_generate(task_id, &split_hash).cloned().ok_or_else(|| PipelineError::OrderViolation {
                step: format!("train {} for {task_id}", arm.as_str()),
                requires: "generate".into(),
            })?)
        } else {
            None
        };
        let training = &self.config.training;
        let settings_hash = sha256_hex(
            serde_json::to_string(&serde_json::json!({
                "training": training,
                "threshold": if arm == TrainArm::SurrogateFiltered { self.config.consistency_threshold.as_str() } else { "" },
                "seed": self.config.seed,
            }))
            .expect("settings serialize")
            .as_bytes(),
        );
        let mut inputs = BTreeMap::new();
        inputs.insert("corpus".to_string(), entry.corpus.clone());
        inputs.insert("split".to_string(), split_hash.clone());
        inputs.insert("config".to_string(), settings_hash);
        if let Some(g) = &generate {
            inputs.insert("labels".to_string(), g.outputs["surrogates"].clone());
            inputs.insert("consistency".to_string(), g.outputs["consistency"].clone());
        }

        self.execute(Step::Train, task_id, Some(arm.as_str()), inputs, |p| {
            let corpus = p.task_corpus(task_id)?;
            let examples = p.training_examples(task_id, arm, &corpus, &manifest, generate.as_ref())?;
            let tune = gold_pairs(&corpus, &manifest.splits.tune_val, &entry.spec)?;
            let tune_texts: Vec<(String, bool)> =
                tune.iter().map(|(id, y)| (corpus.get(id).expect("tune id").text().to_string(), *y)).collect();
            let positives = examples.iter().filter(|e| e.2).count();
            let label_source = if arm.uses_surrogates() { "surrogate" } else { "gold" };
            let id_labels: Vec<(&str, bool)> = examples.iter().map(|(id, _, y)| (id.as_str(), *y)).collect();

            let mut outputs = BTreeMap::new();
            let mut summary = serde_json::json!({
                "arm": arm.as_str(),
                "n_train": examples.len(),
                "positives": positives,
                "label_source": label_source,
                "tuned_on": "gold",
                "training_set_hash": training_set_hash(&id_labels),
            });

            if let Some(cmd) = &p.config.training.external {
                let to_ext = |v: &[(String, String, bool)]| {
                    v.iter()
                        .map(|(id, text, y)| ExternalSample { id: id.clone(), text: text.clone(), label: Some(*y) })
                        .collect::<Vec<_>>()
                };
                let test: Vec<ExternalSample> = corpus
                    .select(&manifest.splits.test)?
                    .iter()
                    .map(|s| ExternalSample { id: s.id().to_string(), text: s.text().to_string(), label: None })
                    .collect();
                let val: Vec<(String, String, bool)> = tune
                    .iter()
                    .zip(&tune_texts)
                    .map(|((id, y), (text, _))| (id.clone(), text.clone(), *y))
                    .collect();
                let job = ExternalJob {
                    task: entry.spec.clone(),
                    train: to_ext(&examples),
                    val: to_ext(&val),
                    test,
                    config: serde_json::json!({
                        "arm": arm.as_str(),
                        "seed": p.config.seed,
                        "task_id": task_id,
                    }),
                };
                let dir = p.store.root().join("work").join(format!("external-{task_id}-{}", arm.as_str()));
                let outcome = external_train(&job, &CommandTemplate(cmd.clone()), &dir);
                let _ = std::fs::remove_dir_all(&dir);
                let outcome = outcome?;
                outputs.insert("predictions".to_string(), p.store.put_json(&outcome.predictions)?);
                summary["trainer"] = serde_json::json!("external");
                return Ok(StepOutput { outputs, summary });
            }

            let train_refs: Vec<(&str, bool)> = examples.iter().map(|(_, t, y)| (t.as_str(), *y)).collect();
            let tune_refs: Vec<(&str, bool)> = tune_texts.iter().map(|(t, y)| (t.as_str(), *y)).collect();
            let base = p.config.training.base_config(p.config.seed);
            let features = p.config.training.features;
            let result = grid_search(&train_refs, &tune_refs, features, &p.config.training.grid, &base)?;
            let provenance = Provenance {
                label_source: label_source.to_string(),
                arm: arm.as_str().to_string(),
                task_id: task_id.to_string(),
                corpus_hash: entry.corpus.clone(),
                split_manifest_hash: split_hash.clone(),
                training_set_hash: training_set_hash(&id_labels),
                tuned_on: "gold".to_string(),
            };
            let model = train(&train_refs, features, &result.best, provenance)?;
            outputs.insert("model".to_string(), p.store.put(model.to_json().as_bytes())?);
            outputs.insert("grid".to_string(), p.store.put_json(&result)?);
            summary["trainer"] = serde_json::json!("built-in");
            summary["best"] = serde_json::to_value(result.best).expect("config serializes");
            summary["best_tune_f1"] = serde_json::json!(result.best_f1);
            Ok(StepOutput { outputs, summary })
        })
    }

    // ---- test ----

    /// Scores one arm on the test split.
    pub fn test(&mut self, task_id: &str, arm: EvalArm) -> Result<RunManifest, PipelineError> {
        match arm {
            EvalArm::FewShot => self.test_few_shot(task_id),
            EvalArm::Trained(a) => self.test_trained(task_id, a),
        }
    }

    fn test_few_shot(&mut self, task_id: &str) -> Result<RunManifest, PipelineError> {
        let entry = self.store.task(task_id)?.clone();
        let (split_hash, manifest, prompt, _) = self.require_validated(task_id, "few-shot test")?;
        let cfg = self.provider_config(self.config.few_shot.temperature);
        cfg.validate()?;
        let mut inputs = BTreeMap::new();
        inputs.insert("corpus".to_string(), entry.corpus.clone());
        inputs.insert("split".to_string(), split_hash);
        inputs.insert("prompt".to_string(), prompt.hash());
        inputs.insert("provider".to_string(), Self::provider_identity(&cfg, self.offline));
        self.execute(Step::Test, task_id, Some("few_shot"), inputs, |p| {
            let corpus = p.task_corpus(task_id)?;
            let ids = &manifest.splits.test;
            let run = p.run_annotation(&entry.spec, &corpus, ids, &prompt, &cfg, 1)?;
            let predictions = single_draw_predictions(&run, &entry.spec);
            let gold = gold_pairs(&corpus, ids, &entry.spec)?;
            let report = compute_metrics(&predictions, &gold, task_id, Arm::FewShot, &p.config.provider.model_name)?;
            let mut outputs = BTreeMap::new();
            outputs.insert("annotations".to_string(), p.store.put(annotations_jsonl(&run.records).as_bytes())?);
            outputs.insert("predictions".to_string(), p.store.put_json(&predictions)?);
            outputs.insert("report".to_string(), p.store.put_json(&report)?);
            let summary = serde_json::json!({
                "arm": "few_shot",
                "draws": 1,
                "temperature": cfg.temperature,
                "f1": report.f1,
                "accuracy": report.accuracy,
                "unparseable": run.stats.unparseable,
                "ledger": run.ledger,
            });
            Ok(StepOutput { outputs, summary })
        })
    }

    fn test_trained(&mut self, task_id: &str, arm: TrainArm) -> Result<RunManifest, PipelineError> {
        let entry = self.store.task(task_id)?.clone();
        let (split_hash, manifest) = self.split_of(task_id, "test")?;
        let trained = self
            .store
            .index
            .runs_of(task_id, Step::Train)
            .filter(|r| r.arm.as_deref() == Some(arm.as_str()) && r.inputs.get("split") == Some(&split_hash))
            .last()
            .cloned()
            .ok_or_else(|| PipelineError::OrderViolation {
                step: format!("test {} for {task_id}", arm.as_str()),
                requires: format!("train {}", arm.as_str()),
            })?;
        let mut inputs = BTreeMap::new();
        inputs.insert("corpus".to_string(), entry.corpus.clone());
        inputs.insert("split".to_string(), split_hash);
        let source = trained.outputs.get("model").or_else(|| trained.outputs.get("predictions")).cloned().ok_or_else(
            || PipelineError::CorruptStore(format!("train run {} has no model", trained.run_id)),
        )?;
        inputs.insert("model".to_string(), source);
        inputs.insert("train_run".to_string(), trained.run_id.clone());

        self.execute(Step::Test, task_id, Some(arm.as_str()), inputs, |p| {
            let corpus = p.task_corpus(task_id)?;
            let ids = &manifest.splits.test;
            let (predictions, model_name) = match trained.outputs.get("model") {
                Some(h) => {
                    let model = ModelArtifact::from_json(&p.store.get_string(h)?)?;
                    let scorer = model.scorer();
                    let preds = corpus
                        .select(ids)?
                        .iter()
                        .map(|s| {
                            let (score, label) = scorer.predict(s.text());
                            Prediction { sample_id: s.id().to_string(), label, score: Some(score) }
                        })
                        .collect::<Vec<_>>();
                    (preds, STUDENT_MODEL)
                }
                None => (p.store.get_json::<Vec<Prediction>>(&trained.outputs["predictions"])?, "external"),
            };
            let gold = gold_pairs(&corpus, ids, &entry.spec)?;
            let report = compute_metrics(&predictions, &gold, task_id, arm.arm(), model_name)?;
            let mut outputs = BTreeMap::new();
            outputs.insert("predictions".to_string(), p.store.put_json(&predictions)?);
            outputs.insert("report".to_string(), p.store.put_json(&report)?);
            let truth: BTreeMap<&str, bool> = gold.iter().map(|(id, y)| (id.as_str(), *y)).collect();
            if predictions.iter().all(|x| x.score.is_some()) {
                let scores: Vec<f64> = predictions.iter().map(|x| x.score.unwrap_or(0.0)).collect();
                let labels: Vec<bool> = predictions.iter().map(|x| truth[x.sample_id.as_str()]).collect();
                match pr_curve(&scores, &labels) {
                    Ok(curve) => {
                        outputs.insert("pr_curve".to_string(), p.store.put_json(&curve)?);
                    }
                    Err(e) => warn!("{task_id}/{}: no PR curve: {e}", arm.as_str()),
                }
            }
            let summary = serde_json::json!({
                "arm": arm.as_str(),
                "model": model_name,
                "f1": report.f1,
                "accuracy": report.accuracy,
                "precision": report.precision,
                "recall": report.recall,
            });
            Ok(StepOutput { outputs, summary })
        })
    }

    fn test_report(&self, run: &RunManifest) -> Result<MetricsReport, PipelineError> {
        self.store.get_json(&run.outputs["report"])
    }

    // ---- arms ----

    /// Trains and tests few-shot, human-250, human-1000 and surrogate-1000
    /// on every listed task and stores the comparison. Missing
    /// prerequisites are reported together before anything runs.
    pub fn arms(&mut self, task_ids: &[String]) -> Result<RunManifest, PipelineError> {
        if task_ids.is_empty() {
            return Err(PipelineError::Config("no tasks".into()));
        }
        let mut missing = Vec::new();
        for t in task_ids {
            let (split_hash, _) = match self.split_of(t, "arms") {
                Ok(s) => s,
                Err(PipelineError::OrderViolation { .. }) => {
                    missing.push(format!("{t}: all arms require split"));
                    continue;
                }
                Err(e) => return Err(e),
            };
            let prompt = self.prompt_for(t)?;
            if self.validated(t, &split_hash, &prompt).is_none() {
                missing.push(format!("{t}/few_shot: requires validate with prompt {} v{}", prompt.prompt_id, prompt.version));
            }
            if self.latest_generate(t, &split_hash).is_none() {
                missing.push(format!("{t}/surrogate_1000: requires generate"));
            }
        }
        if !missing.is_empty() {
            return Err(PipelineError::MissingArms(missing));
        }

        let mut reports = Vec::new();
        let mut inputs = BTreeMap::new();
        for t in task_ids {
            let fs = self.test(t, EvalArm::FewShot)?;
            inputs.insert(format!("{t}/few_shot"), fs.outputs["report"].clone());
            reports.push(self.test_report(&fs)?);
            for arm in [TrainArm::Human250, TrainArm::Human1000, TrainArm::Surrogate1000] {
                self.train(t, arm)?;
                let run = self.test(t, EvalArm::Trained(arm))?;
                inputs.insert(format!("{t}/{}", arm.as_str()), run.outputs["report"].clone());
                reports.push(self.test_report(&run)?);
            }
        }
        let scope = scope_id(task_ids);
        self.execute(Step::Arms, &scope, None, inputs, |p| {
            let cmp = arm_comparison(&reports)?;
            let mut outputs = BTreeMap::new();
            outputs.insert("comparison".to_string(), p.store.put_json(&cmp)?);
            outputs.insert("reports".to_string(), p.store.put_json(&reports)?);
            let summary = serde_json::json!({ "tasks": task_ids, "table": cmp.to_text() });
            Ok(StepOutput { outputs, summary })
        })
    }

    // ---- ablation ----

    /// Compares students trained on all surrogate labels with students
    /// trained only on labels that meet the consistency threshold.
    pub fn ablate_consistency(&mut self, task_ids: &[String]) -> Result<RunManifest, PipelineError> {
        if task_ids.is_empty() {
            return Err(PipelineError::Config("no tasks".into()));
        }
        let threshold = self.config.consistency_threshold()?;
        let mut rows = Vec::new();
        let mut inputs = BTreeMap::new();
        for t in task_ids {
            let mut reports = Vec::new();
            for arm in [TrainArm::Surrogate1000, TrainArm::SurrogateFiltered] {
                self.train(t, arm)?;
                let run = self.test(t, EvalArm::Trained(arm))?;
                inputs.insert(format!("{t}/{}", arm.as_str()), run.outputs["report"].clone());
                reports.push(self.test_report(&run)?);
            }
            let (split_hash, _) = self.split_of(t, "ablate")?;
            let g = self.latest_generate(t, &split_hash).expect("generate ran for training");
            let records = read_consistency(&self.store.get_string(&g.outputs["consistency"])?)?;
            let (kept, dropped) = filter_by_consistency(&records, threshold);
            let without = reports.pop().expect("two reports");
            let with = reports.pop().expect("two reports");
            rows.push(AblationRow {
                task_id: t.clone(),
                kept: kept.len(),
                dropped: dropped.len(),
                f1_difference: without.f1 - with.f1,
                with_noise: with,
                without_noise: without,
            });
        }
        let scope = scope_id(task_ids);
        let threshold_text = self.config.consistency_threshold.clone();
        self.execute(Step::Ablate, &scope, None, inputs, |p| {
            let mean = rows.iter().map(|r| r.f1_difference).sum::<f64>() / rows.len() as f64;
            let report = AblationReport { threshold: threshold_text, rows, mean_f1_difference: mean };
            let mut outputs = BTreeMap::new();
            outputs.insert("ablation".to_string(), p.store.put_json(&report)?);
            let summary = serde_json::json!({ "mean_f1_difference": mean, "tasks": task_ids });
            Ok(StepOutput { outputs, summary })
        })
    }

    // ---- drift ----

    /// Paired comparison of two sets of reports on the same tasks.
    pub fn drift(&mut self, run_a: &[MetricsReport], run_b: &[MetricsReport]) -> Result<(RunManifest, DriftReport), PipelineError> {
        let report = drift_compare(run_a, run_b)?;
        let mut inputs = BTreeMap::new();
        inputs.insert("run_a".to_string(), sha256_hex(serde_json::to_string(run_a).expect("reports serialize").as_bytes()));
        inputs.insert("run_b".to_string(), sha256_hex(serde_json::to_string(run_b).expect("reports serialize").as_bytes()));
        let r = report.clone();
        let manifest = self.execute(Step::Drift, "*", None, inputs, |p| {
            let mut outputs = BTreeMap::new();
            outputs.insert("drift".to_string(), p.store.put_json(&r)?);
            let summary = serde_json::json!({ "tasks": r.tasks.len() });
            Ok(StepOutput { outputs, summary })
        })?;
        Ok((manifest, report))
    }

    /// Sum of tokens sent across all completed runs.
    pub fn token_ledger(&self) -> TokenLedger {
        total_ledger(&self.store.index)
    }
}

pub fn total_ledger(index: &StoreIndex) -> TokenLedger {
    let mut total = TokenLedger::default();
    for r in &index.runs {
        if r.status == RunStatus::Completed {
            if let Ok(l) = serde_json::from_value::<TokenLedger>(r.summary["ledger"].clone()) {
                total.merge(&l);
            }
        }
    }
    total
}

fn scope_id(task_ids: &[String]) -> String {
    if task_ids.len() == 1 {
        task_ids[0].clone()
    } else {
        "*".to_string()
    }
}

fn single_draw_predictions(run: &AnnotationRun, spec: &TaskSpec) -> Vec<Prediction> {
    // An unreadable answer counts as a negative prediction.
    run.records
        .iter()
        .map(|r| Prediction {
            sample_id: r.sample_id.clone(),
            label: r.label.as_deref().is_some_and(|l| spec.is_positive(l)),
            score: None,
        })
        .collect()
}

fn gold_pairs(corpus: &Corpus, ids: &[String], spec: &TaskSpec) -> Result<Vec<(String, bool)>, PipelineError> {
    ids.iter()
        .map(|id| {
            let s = corpus.get(id).ok_or_else(|| CorpusError::UnknownSample(id.clone()))?;
            let g = s.gold.as_deref().ok_or_else(|| PipelineError::MissingGold(id.clone()))?;
            Ok((id.clone(), spec.is_positive(g)))
        })
        .collect()
}

fn annotations_jsonl(records: &[RawAnnotation]) -> String {
    records.iter().map(|r| serde_json::to_string(r).expect("annotation serializes") + "\n").collect()
}

fn read_consistency(text: &str) -> Result<Vec<AnnotationRecord>, PipelineError> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| PipelineError::CorruptStore(format!("consistency record: {e}"))))
        .collect()
}

#[cfg(test)]
mod tests;
