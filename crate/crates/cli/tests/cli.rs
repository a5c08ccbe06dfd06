use std::path::PathBuf;
use std::process::{Command, Output};

use surrogate_core::evaluator::published::drift_runs;

struct Env {
    _dir: tempfile::TempDir,
    root: PathBuf,
}

impl Env {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        let config = serde_json::json!({
            "split": {"train_n": 200, "prompt_val_n": 60, "tune_val_n": 60, "test_n": 150, "seed": 0},
            "training": {
                "human_small_n": 50,
                "grid": {"learning_rates": [5.0], "batch_sizes": [8], "epochs": [4], "l2": 0.0001}
            }
        });
        std::fs::write(root.join("config.json"), config.to_string()).unwrap();
        Self { _dir: dir, root }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    fn run(&self, args: &[&str]) -> Output {
        let store = self.path("store");
        let config = self.path("config.json");
        Command::new(env!("CARGO_BIN_EXE_surrogate"))
            .arg("--store")
            .arg(&store)
            .arg("--config")
            .arg(&config)
            .args(args)
            .env_remove("SURROGATE_API_KEY")
            .output()
            .unwrap()
    }

    fn ok(&self, args: &[&str]) -> String {
        let out = self.run(args);
        assert!(
            out.status.success(),
            "{args:?} failed ({:?}):\n{}",
            out.status.code(),
            String::from_utf8_lossy(&out.stderr)
        );
        String::from_utf8(out.stdout).unwrap()
    }

    fn ingested(&self) {
        let corpus = self.path("corpus.jsonl");
        self.ok(&["--seed", "3", "synth", "--n", "500", "--out", corpus.to_str().unwrap()]);
        self.ok(&["--offline", "ingest", corpus.to_str().unwrap()]);
        self.ok(&["--offline", "split", "--task", "pos"]);
    }
}

fn code(o: &Output) -> Option<i32> {
    o.status.code()
}

#[test]
fn offline_workflow_end_to_end() {
    let env = Env::new();
    env.ingested();
    let v = env.ok(&["--offline", "validate", "--task", "pos"]);
    assert!(v.contains("pos prompt v1: f1"), "{v}");
    let g = env.ok(&["--offline", "generate", "--task", "pos"]);
    assert!(g.contains("200 surrogate labels from 600 annotations"), "{g}");
    let arms = env.ok(&["--offline", "arms", "--task", "pos"]);
    for arm in ["few_shot", "human_250", "human_1000", "surrogate_1000"] {
        assert!(arms.contains(arm), "{arms}");
    }
    let json = env.ok(&["--offline", "evaluate", "--task", "pos", "--arm", "human-1000", "--json"]);
    let report: serde_json::Value = serde_json::from_str(&json).unwrap();
    assert_eq!(report["n"], 150);
    let ab = env.ok(&["--offline", "ablate-consistency", "--task", "pos"]);
    assert!(ab.contains("mean difference"), "{ab}");
    let runs = env.ok(&["runs", "--task", "pos"]);
    assert!(runs.contains("validate") && runs.contains("generate") && runs.contains("Completed"));
}

#[test]
fn rerunning_a_step_changes_nothing() {
    let env = Env::new();
    env.ingested();
    env.ok(&["--offline", "split"]);
    env.ok(&["--offline", "validate"]);
    let index = std::fs::read(env.path("store/index.json")).unwrap();
    env.ok(&["--offline", "validate"]);
    env.ok(&["--offline", "split"]);
    assert_eq!(std::fs::read(env.path("store/index.json")).unwrap(), index);
}

#[test]
fn generate_before_validate_exits_1() {
    let env = Env::new();
    env.ingested();
    let out = env.run(&["--offline", "generate", "--task", "pos"]);
    assert_eq!(code(&out), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("requires validate"));
}

#[test]
fn missing_token_exits_2() {
    let env = Env::new();
    env.ingested();
    let out = env.run(&["validate", "--task", "pos"]);
    assert_eq!(code(&out), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("SURROGATE_API_KEY"));
}

#[test]
fn bad_config_and_usage_exit_1() {
    let env = Env::new();
    std::fs::write(env.path("bad.json"), r#"{"generation": {"iterations": 0}}"#).unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_surrogate"))
        .args(["--store", env.path("s").to_str().unwrap(), "--config", env.path("bad.json").to_str().unwrap(), "split"])
        .output()
        .unwrap();
    assert_eq!(code(&out), Some(1));
    assert_eq!(code(&env.run(&["train", "--task", "pos", "--arm", "nonsense"])), Some(1));
    assert_eq!(code(&env.run(&["--offline", "split", "--task", "pos"])), Some(1));
}

#[test]
fn cost_prints_reference_scenarios() {
    let env = Env::new();
    let out = env.ok(&["cost"]);
    assert!(out.contains("$8,990.00"), "{out}");
    assert!(out.contains("$187.50"), "{out}");
    assert!(out.contains("$125.00"), "{out}");
    let json: serde_json::Value = serde_json::from_str(&env.ok(&["cost", "--json"])).unwrap();
    assert_eq!(json["rows"].as_array().unwrap().len(), 4);
}

#[test]
fn drift_reads_report_files() {
    let env = Env::new();
    let (a, b) = drift_runs();
    let write = |name: &str, v: &[surrogate_core::evaluator::MetricsReport]| {
        let p = env.path(name);
        std::fs::write(&p, serde_json::to_string(v).unwrap()).unwrap();
        p
    };
    let (pa, pb) = (write("a.json", &a), write("b.json", &b));
    let out = env.ok(&["--offline", "drift", pa.to_str().unwrap(), pb.to_str().unwrap(), "--json"]);
    let report: serde_json::Value = serde_json::from_str(&out).unwrap();
    let acc = report["mean_deltas"]["accuracy"].as_f64().unwrap();
    let f1 = report["mean_deltas"]["f1"].as_f64().unwrap();
    assert!((acc - 0.007).abs() < 1e-9, "{acc}");
    assert!((f1 - 0.022).abs() < 1e-9, "{f1}");
    let bad = env.run(&["--offline", "drift", pa.to_str().unwrap(), "/nonexistent/b.json"]);
    assert_eq!(code(&bad), Some(2));
}

#[test]
fn review_export_set_and_prompt_revision() {
    let env = Env::new();
    std::fs::write(
        env.path("config.json"),
        serde_json::json!({
            "split": {"train_n": 200, "prompt_val_n": 60, "tune_val_n": 60, "test_n": 150, "seed": 0},
            "mock": {"noise": 0.3, "seed": 0}
        })
        .to_string(),
    )
    .unwrap();
    env.ingested();
    env.ok(&["--offline", "validate", "--task", "pos"]);
    let jsonl = env.ok(&["review", "export", "--task", "pos"]);
    let first: serde_json::Value = serde_json::from_str(jsonl.lines().next().unwrap()).unwrap();
    let n = jsonl.lines().count();
    assert!(n > 0);
    let id = first["sample_id"].as_str().unwrap();
    let set = env.ok(&["review", "set", "--task", "pos", "--sample", id, "--status", "gold-suspect", "--note", "check"]);
    assert!(set.contains("open -> gold_suspect"), "{set}");
    let open = env.ok(&["review", "export", "--task", "pos", "--status", "open"]);
    assert_eq!(open.lines().count(), n - 1);
    let sheet = env.ok(&["review", "export", "--task", "pos", "--format", "sheet", "--status", "gold_suspect"]);
    assert!(sheet.contains("note:   check"), "{sheet}");

    let instr = env.path("v2.txt");
    std::fs::write(&instr, "Answer YES when the text is about pos.").unwrap();
    env.ok(&["prompt", "new", "--task", "pos", "--instructions", instr.to_str().unwrap()]);
    let list = env.ok(&["prompt", "list", "--task", "pos"]);
    assert_eq!(list.lines().count(), 2);
    // v2 is not validated yet.
    assert_eq!(code(&env.run(&["--offline", "generate", "--task", "pos"])), Some(1));
    env.ok(&["--offline", "validate", "--task", "pos"]);
    env.ok(&["--offline", "generate", "--task", "pos"]);
}

#[test]
fn store_lock_blocks_a_second_writer() {
    let env = Env::new();
    env.ingested();
    std::fs::write(env.path("store/store.lock"), "1").unwrap();
    let out = env.run(&["--offline", "validate"]);
    assert_eq!(code(&out), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("locked"));
}

