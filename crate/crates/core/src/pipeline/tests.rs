use super::*;
use crate::annotator::PromptVersion;
use crate::corpus::SplitPlan;
use crate::evaluator::Metric;
use crate::review::ResolutionStatus;
use crate::synth::{generate as synth, SynthConfig};
use crate::trainer::{Grid, TrainConfig};

fn small_config(seed: u64) -> PipelineConfig {
    let mut c = PipelineConfig::default().with_seed(seed);
    c.split = SplitPlan { train_n: 200, prompt_val_n: 60, tune_val_n: 60, test_n: 150, seed, stratified: false };
    c.training.human_small_n = 50;
    c.training.grid = Grid::single(&TrainConfig::default());
    c
}

fn fixture(seed: u64) -> Corpus {
    synth(&SynthConfig::distillation(500, seed))
}

fn ready(dir: &Path, cfg: PipelineConfig) -> Pipeline {
    let mut p = Pipeline::open(dir, cfg, true).unwrap();
    p.ingest_corpus(&fixture(3), None).unwrap();
    p.split("pos").unwrap();
    p
}

fn object_count(dir: &Path) -> usize {
    std::fs::read_dir(dir.join("objects")).unwrap().count()
}

#[test]
fn ingest_binarizes_and_seeds_prompts() {
    let dir = tempfile::tempdir().unwrap();
    let p = ready(dir.path(), small_config(1));
    assert_eq!(p.task_ids(), vec!["neg".to_string(), "pos".to_string()]);
    assert_eq!(p.store().prompts().versions("pos").unwrap(), vec![1]);
    assert_eq!(p.task_corpus("pos").unwrap().len(), 500);
}

#[test]
fn full_offline_run_fills_every_arm() {
    let dir = tempfile::tempdir().unwrap();
    let mut p = ready(dir.path(), small_config(1));
    let v = p.validate("pos").unwrap();
    assert_eq!(v.summary["n"], 60);
    let g = p.generate("pos").unwrap();
    assert_eq!(g.summary["raw_annotations"], 600);
    assert_eq!(g.summary["surrogate_labels"], 200);

    let arms = p.arms(&["pos".to_string()]).unwrap();
    let cmp: crate::evaluator::ArmComparison = p.store().get_json(&arms.outputs["comparison"]).unwrap();
    assert_eq!(cmp.reports.len(), 4);
    for r in &cmp.reports {
        assert_eq!(r.n, Some(150));
        for m in Metric::ALL {
            assert!(r.get(m).is_finite());
        }
    }
    let listed = latest_reports(p.store(), "pos").unwrap();
    assert_eq!(listed.len(), 4);
    assert!(arm_comparison_of(p.store(), "pos").unwrap().is_some());
}

#[test]
fn small_human_arm_is_a_strict_prefix_of_the_large_one() {
    let dir = tempfile::tempdir().unwrap();
    let p = ready(dir.path(), small_config(2));
    let corpus = p.task_corpus("pos").unwrap();
    let (_, m) = p.split_of("pos", "t").unwrap();
    let small = p.training_examples("pos", TrainArm::Human250, &corpus, &m, None).unwrap();
    let large = p.training_examples("pos", TrainArm::Human1000, &corpus, &m, None).unwrap();
    assert_eq!(small.len(), 50);
    assert_eq!(large.len(), 200);
    assert_eq!(&large[..50], &small[..]);
}

#[test]
fn generate_before_validate_is_an_order_violation() {
    let dir = tempfile::tempdir().unwrap();
    let mut p = ready(dir.path(), small_config(1));
    assert!(matches!(p.generate("pos"), Err(PipelineError::OrderViolation { .. })));
    assert!(matches!(p.train("pos", TrainArm::Surrogate1000), Err(PipelineError::OrderViolation { .. })));
    assert!(matches!(
        p.test("pos", EvalArm::Trained(TrainArm::Human1000)),
        Err(PipelineError::OrderViolation { .. })
    ));
    assert!(matches!(p.validate("neg"), Err(PipelineError::OrderViolation { .. })));
}

#[test]
fn arms_lists_every_missing_input() {
    let dir = tempfile::tempdir().unwrap();
    let mut p = ready(dir.path(), small_config(1));
    match p.arms(&["pos".to_string(), "neg".to_string()]) {
        Err(PipelineError::MissingArms(m)) => {
            assert_eq!(m.len(), 3, "{m:?}");
            assert!(m.iter().any(|s| s.starts_with("neg:")));
            assert!(m.iter().any(|s| s.contains("pos/few_shot")));
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn reruns_with_unchanged_inputs_are_no_ops() {
    let dir = tempfile::tempdir().unwrap();
    let mut p = ready(dir.path(), small_config(1));
    let a = p.validate("pos").unwrap();
    let objects = object_count(dir.path());
    let runs = p.index().runs.len();
    let index = std::fs::read(dir.path().join("index.json")).unwrap();
    let b = p.validate("pos").unwrap();
    assert_eq!(a, b);
    assert_eq!(object_count(dir.path()), objects);
    assert_eq!(p.index().runs.len(), runs);
    assert_eq!(std::fs::read(dir.path().join("index.json")).unwrap(), index);
    p.split("pos").unwrap();
    assert_eq!(p.index().runs.len(), runs);
}

#[test]
fn noiseless_teacher_passes_the_gate_with_perfect_f1() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config(1);
    cfg.mock.noise = 0.0;
    let mut p = ready(dir.path(), cfg);
    let v = p.validate("pos").unwrap();
    assert_eq!(v.summary["f1"], 1.0);
    assert_eq!(v.summary["gate_pass"], true);
    assert_eq!(v.summary["disagreements"], 0);
}

#[test]
fn twenty_percent_flips_give_about_eighty_percent_accuracy() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config(5);
    cfg.mock.noise = 0.2;
    cfg.split = SplitPlan { train_n: 10, prompt_val_n: 400, tune_val_n: 10, test_n: 10, seed: 5, stratified: false };
    let mut p = ready(dir.path(), cfg);
    let v = p.validate("pos").unwrap();
    let acc = v.summary["accuracy"].as_f64().unwrap();
    // Four binomial standard deviations: 4 * sqrt(0.16 / 400) = 0.08.
    assert!((acc - 0.8).abs() <= 0.08, "accuracy {acc}");
}

#[test]
fn missing_prompt_version_fails_before_any_request() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config(1);
    cfg.prompt_version = Some(7);
    cfg.provider.auth_token_env = "SURROGATE_TEST_UNSET_TOKEN".into();
    let mut p = Pipeline::open(dir.path(), cfg, false).unwrap();
    p.ingest_corpus(&fixture(3), None).unwrap();
    p.split("pos").unwrap();
    let err = p.validate("pos").unwrap_err();
    assert!(matches!(err, PipelineError::Annotate(AnnotateError::UnknownPrompt { .. })), "{err:?}");
    assert_eq!(err.exit_code(), 1);
}

#[test]
fn missing_token_is_an_environment_failure() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config(1);
    cfg.provider.auth_token_env = "SURROGATE_TEST_UNSET_TOKEN".into();
    let mut p = Pipeline::open(dir.path(), cfg, false).unwrap();
    p.ingest_corpus(&fixture(3), None).unwrap();
    p.split("pos").unwrap();
    let err = p.validate("pos").unwrap_err();
    assert!(matches!(err, PipelineError::Annotate(AnnotateError::AuthMissing(_))), "{err:?}");
    assert_eq!(err.exit_code(), 2);
    assert_eq!(p.index().runs.last().unwrap().status, RunStatus::Failed);
}

#[test]
fn single_iteration_is_fully_consistent() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config(1);
    cfg.generation.iterations = 1;
    let mut p = ready(dir.path(), cfg);
    p.validate("pos").unwrap();
    let g = p.generate("pos").unwrap();
    assert_eq!(g.summary["consistency"]["unanimous"], 200);
    assert_eq!(g.summary["raw_annotations"], 200);
}

#[test]
fn offline_runs_are_byte_identical() {
    let run = || {
        let dir = tempfile::tempdir().unwrap();
        let mut p = ready(dir.path(), small_config(4));
        p.validate("pos").unwrap();
        p.generate("pos").unwrap();
        p.arms(&["pos".to_string()]).unwrap();
        p.ablate_consistency(&["pos".to_string()]).unwrap();
        p.artifact_hashes()
    };
    let a = run();
    assert!(a.len() > 20);
    assert_eq!(a, run());
}

#[test]
fn second_prompt_version_gets_a_delta_report() {
    let dir = tempfile::tempdir().unwrap();
    let mut p = ready(dir.path(), small_config(1));
    p.validate("pos").unwrap();
    assert!(prompt_deltas(p.store(), "pos").unwrap().is_empty());
    let v1 = p.store().prompts().load("pos", 1).unwrap();
    let v2 = PromptVersion { version: 2, ..v1 };
    p.store().prompts().save(&v2).unwrap();
    let run = p.validate("pos").unwrap();
    assert!(run.outputs.contains_key("prompt_delta"));
    let deltas = prompt_deltas(p.store(), "pos").unwrap();
    assert_eq!(deltas.len(), 1);
    assert_eq!((deltas[0].version_a, deltas[0].version_b), (1, 2));
    // Same instructions and a deterministic teacher: nothing moves.
    assert!(deltas[0].deltas.values().all(|d| *d == 0.0));
    // generate now requires validating v2, which just happened.
    p.generate("pos").unwrap();
}

#[test]
fn review_statuses_overlay_disagreements() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config(1);
    cfg.mock.noise = 0.3;
    let mut p = ready(dir.path(), cfg);
    p.validate("pos").unwrap();
    let all = disagreements(p.store(), "pos", DisagreementFilter::default()).unwrap();
    assert!(!all.is_empty());
    let target = all[0].sample_id.clone();
    drop(p);

    let e = set_disagreement_status(dir.path(), "pos", &target, ResolutionStatus::GoldSuspect, Some("typo".into()), Some(0))
        .unwrap();
    assert_eq!(e.seq, 0);
    assert!(matches!(
        set_disagreement_status(dir.path(), "pos", &target, ResolutionStatus::Dismissed, None, Some(0)),
        Err(PipelineError::Review(ReviewError::Conflict { .. }))
    ));
    assert!(matches!(
        set_disagreement_status(dir.path(), "pos", "no-such-id", ResolutionStatus::Dismissed, None, None),
        Err(PipelineError::UnknownDisagreement { .. })
    ));

    let store = Store::open_read_only(dir.path()).unwrap();
    let open = disagreements(&store, "pos", DisagreementFilter { status: Some(ResolutionStatus::Open), prompt_version: None })
        .unwrap();
    assert_eq!(open.len(), all.len() - 1);
    let suspect =
        disagreements(&store, "pos", DisagreementFilter { status: Some(ResolutionStatus::GoldSuspect), prompt_version: Some(1) })
            .unwrap();
    assert_eq!(suspect.len(), 1);
    assert_eq!(suspect[0].note.as_deref(), Some("typo"));
    assert!(disagreements(&store, "pos", DisagreementFilter { status: None, prompt_version: Some(9) }).unwrap().is_empty());
}

#[test]
fn status_write_fails_while_a_run_holds_the_lock() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config(1);
    cfg.mock.noise = 0.3;
    let mut p = ready(dir.path(), cfg);
    p.validate("pos").unwrap();
    let id = disagreements(p.store(), "pos", DisagreementFilter::default()).unwrap()[0].sample_id.clone();
    assert!(matches!(
        set_disagreement_status(dir.path(), "pos", &id, ResolutionStatus::Dismissed, None, None),
        Err(PipelineError::Locked(_))
    ));
    assert!(matches!(Pipeline::open(dir.path(), small_config(1), true), Err(PipelineError::Locked(_))));
}

#[test]
fn ablation_reports_kept_and_dropped() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config(1);
    cfg.mock.noise = 0.2;
    let mut p = ready(dir.path(), cfg);
    p.validate("pos").unwrap();
    p.generate("pos").unwrap();
    let run = p.ablate_consistency(&["pos".to_string()]).unwrap();
    let report: AblationReport = p.store().get_json(&run.outputs["ablation"]).unwrap();
    let row = &report.rows[0];
    assert_eq!(row.kept + row.dropped, 200);
    assert!(row.dropped > 0);
    assert_eq!(row.f1_difference, row.without_noise.f1 - row.with_noise.f1);
}

#[test]
fn drift_is_stored() {
    let dir = tempfile::tempdir().unwrap();
    let mut p = Pipeline::open(dir.path(), PipelineConfig::default(), true).unwrap();
    let (a, b) = crate::evaluator::published::drift_runs();
    let (run, report) = p.drift(&a, &b).unwrap();
    let stored: DriftReport = p.store().get_json(&run.outputs["drift"]).unwrap();
    assert_eq!(stored, report);
}

#[test]
fn token_ledger_sums_runs() {
    let dir = tempfile::tempdir().unwrap();
    let mut p = ready(dir.path(), small_config(1));
    p.validate("pos").unwrap();
    let l = p.token_ledger();
    // 60 samples in batches of 10.
    assert_eq!(l.requests, 6);
    assert!(l.input_tokens > 0 && l.output_tokens > 0);
}
