use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use surrogate_core::annotator::PromptVersion;
use surrogate_core::cost::{cost_comparison_report, reference_scenarios, ScenarioFile};
use surrogate_core::evaluator::{ArmComparison, MetricsReport};
use surrogate_core::pipeline::{
    disagreements, set_disagreement_status, AblationReport, DisagreementFilter, EvalArm, Pipeline, PipelineConfig,
    PipelineError, Store, TrainArm,
};
use surrogate_core::review::{disagreements_to_jsonl, review_sheet, ResolutionStatus};
use surrogate_core::service::{serve_blocking, ApiSession};
use surrogate_core::synth::{generate as synth_generate, SynthConfig};

/// Build text classifiers from LLM surrogate labels.
#[derive(Debug, Parser)]
#[command(name = "surrogate", version)]
struct Cli {
    /// Project store directory.
    #[arg(long, global = true, default_value = "surrogate-store", env = "SURROGATE_STORE")]
    store: PathBuf,
    /// Pipeline config (JSON). Defaults apply to anything left out.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed applied to every seeded step.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Use the mock teacher and the response cache; no network.
    #[arg(long, global = true)]
    offline: bool,
    /// Log more (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a seeded planted-signal corpus as JSONL.
    Synth {
        #[arg(long, default_value_t = 2500)]
        n: usize,
        /// Class names; two or more. `pos,neg` gives the distillation preset.
        #[arg(long, value_delimiter = ',', default_value = "pos,neg")]
        classes: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Read a JSONL corpus and binarize it into one task per class.
    Ingest {
        corpus: PathBuf,
        /// Comma-separated class names; defaults to the gold labels found.
        #[arg(long, value_delimiter = ',')]
        schema: Option<Vec<String>>,
    },
    /// Partition tasks into train, prompt-validation, tuning and test splits.
    Split {
        #[arg(long = "task")]
        tasks: Vec<String>,
    },
    /// Score the prompt against gold on the prompt-validation split.
    Validate {
        #[arg(long = "task")]
        tasks: Vec<String>,
    },
    /// Label the train split with repeated LLM draws.
    Generate {
        #[arg(long = "task")]
        tasks: Vec<String>,
    },
    /// Train one arm's student.
    Train {
        #[arg(long)]
        task: String,
        #[arg(long, value_enum)]
        arm: TrainArmArg,
    },
    /// Score one arm on the test split.
    Evaluate {
        #[arg(long)]
        task: String,
        #[arg(long, value_enum)]
        arm: EvalArmArg,
        #[arg(long)]
        json: bool,
    },
    /// Few-shot, human-250, human-1000 and surrogate-1000 side by side.
    Arms {
        #[arg(long = "task")]
        tasks: Vec<String>,
        #[arg(long)]
        json: bool,
    },
    /// Students on all surrogate labels versus only consistent ones.
    AblateConsistency {
        #[arg(long = "task")]
        tasks: Vec<String>,
        #[arg(long)]
        json: bool,
    },
    /// Paired per-task deltas between two runs (JSON arrays of reports).
    Drift {
        run_a: PathBuf,
        run_b: PathBuf,
        #[arg(long)]
        json: bool,
    },
    /// Annotation cost comparison.
    Cost {
        /// Scenario file; defaults to the built-in reference scenarios.
        #[arg(long)]
        scenarios: Option<PathBuf>,
        #[arg(long)]
        json: bool,
    },
    /// Disagreement review.
    Review {
        #[command(subcommand)]
        command: ReviewCommand,
    },
    /// Prompt versions.
    Prompt {
        #[command(subcommand)]
        command: PromptCommand,
    },
    /// List run manifests.
    Runs {
        #[arg(long)]
        task: Option<String>,
    },
    /// HTTP API for the review UI.
    Serve {
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: SocketAddr,
        #[arg(long)]
        read_only: bool,
        /// Directory served under /ui/.
        #[arg(long)]
        ui: Option<PathBuf>,
    },
}

#[derive(Debug, Subcommand)]
enum ReviewCommand {
    /// Write disagreements as JSONL or a plain-text sheet.
    Export {
        #[arg(long)]
        task: String,
        #[arg(long, value_enum, default_value = "jsonl")]
        format: ExportFormat,
        #[arg(long)]
        status: Option<String>,
        #[arg(long)]
        prompt_version: Option<u32>,
        /// Output file; stdout if absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Record a review decision in the audit log.
    Set {
        #[arg(long)]
        task: String,
        #[arg(long)]
        sample: String,
        #[arg(long)]
        status: String,
        #[arg(long)]
        note: Option<String>,
    },
}

#[derive(Debug, Subcommand)]
enum PromptCommand {
    /// List versions of a task's prompt.
    List {
        #[arg(long)]
        task: String,
    },
    /// Save new instructions as the next version, keeping the label lexicon.
    New {
        #[arg(long)]
        task: String,
        #[arg(long)]
        instructions: PathBuf,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ExportFormat {
    Jsonl,
    Sheet,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum TrainArmArg {
    #[value(name = "human_250", alias = "human-250")]
    Human250,
    #[value(name = "human_1000", alias = "human-1000")]
    Human1000,
    #[value(name = "surrogate_1000", alias = "surrogate-1000")]
    Surrogate1000,
    #[value(name = "surrogate_filtered", alias = "surrogate-filtered")]
    SurrogateFiltered,
}

impl From<TrainArmArg> for TrainArm {
    fn from(a: TrainArmArg) -> Self {
        match a {
            TrainArmArg::Human250 => TrainArm::Human250,
            TrainArmArg::Human1000 => TrainArm::Human1000,
            TrainArmArg::Surrogate1000 => TrainArm::Surrogate1000,
            TrainArmArg::SurrogateFiltered => TrainArm::SurrogateFiltered,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum EvalArmArg {
    #[value(name = "few_shot", alias = "few-shot")]
    FewShot,
    #[value(name = "human_250", alias = "human-250")]
    Human250,
    #[value(name = "human_1000", alias = "human-1000")]
    Human1000,
    #[value(name = "surrogate_1000", alias = "surrogate-1000")]
    Surrogate1000,
    #[value(name = "surrogate_filtered", alias = "surrogate-filtered")]
    SurrogateFiltered,
}

impl From<EvalArmArg> for EvalArm {
    fn from(a: EvalArmArg) -> Self {
        match a {
            EvalArmArg::FewShot => EvalArm::FewShot,
            EvalArmArg::Human250 => EvalArm::Trained(TrainArm::Human250),
            EvalArmArg::Human1000 => EvalArm::Trained(TrainArm::Human1000),
            EvalArmArg::Surrogate1000 => EvalArm::Trained(TrainArm::Surrogate1000),
            EvalArmArg::SurrogateFiltered => EvalArm::Trained(TrainArm::SurrogateFiltered),
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    if let Some(p) = e.downcast_ref::<PipelineError>() {
        return p.exit_code() as u8;
    }
    if e.downcast_ref::<std::io::Error>().is_some() {
        return 2;
    }
    1
}

fn load_config(cli: &Cli) -> Result<PipelineConfig> {
    let mut cfg = match &cli.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg = cfg.with_seed(seed);
    }
    Ok(cfg)
}

fn open_pipeline(cli: &Cli) -> Result<Pipeline> {
    Ok(Pipeline::open(&cli.store, load_config(cli)?, cli.offline)?)
}

fn tasks_or_all(p: &Pipeline, tasks: &[String]) -> Result<Vec<String>> {
    let all = p.task_ids();
    if all.is_empty() {
        bail!(PipelineError::OrderViolation { step: "this command".into(), requires: "ingest".into() });
    }
    if tasks.is_empty() {
        return Ok(all);
    }
    for t in tasks {
        if !all.contains(t) {
            bail!(PipelineError::UnknownTask(t.clone()));
        }
    }
    Ok(tasks.to_vec())
}

fn print_json<T: serde::Serialize>(v: &T) {
    println!("{}", serde_json::to_string_pretty(v).expect("output serializes"));
}

fn print_report(r: &MetricsReport) {
    println!(
        "{} {} ({}): accuracy {:.3}  f1 {:.3}  precision {:.3}  recall {:.3}",
        r.task_id, r.arm, r.model, r.accuracy, r.f1, r.precision, r.recall
    );
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::Synth { n, classes, out } => {
            let seed = cli.seed.unwrap_or(0);
            let cfg = if classes == &["pos", "neg"] {
                SynthConfig::distillation(*n, seed)
            } else {
                let names: Vec<&str> = classes.iter().map(String::as_str).collect();
                SynthConfig::multiclass(*n, &names, seed)
            };
            let corpus = synth_generate(&cfg);
            std::fs::write(out, corpus.to_jsonl())?;
            println!("wrote {} samples to {}", corpus.len(), out.display());
        }
        Command::Ingest { corpus, schema } => {
            let mut p = open_pipeline(&cli)?;
            let run = p.ingest(corpus, schema.clone())?;
            println!(
                "ingested {} samples into tasks: {}",
                run.summary["samples"],
                p.task_ids().join(", ")
            );
        }
        Command::Split { tasks } => {
            let mut p = open_pipeline(&cli)?;
            for t in tasks_or_all(&p, tasks)? {
                let run = p.split(&t)?;
                let s = &run.summary;
                println!(
                    "{t}: train {} / prompt_val {} / tune_val {} / test {} (seed {})",
                    s["train"], s["prompt_val"], s["tune_val"], s["test"], s["seed"]
                );
                for w in s["warnings"].as_array().into_iter().flatten() {
                    println!("  warning: {}", w.as_str().unwrap_or_default());
                }
            }
        }
        Command::Validate { tasks } => {
            let mut p = open_pipeline(&cli)?;
            for t in tasks_or_all(&p, tasks)? {
                let run = p.validate(&t)?;
                let s = &run.summary;
                let gate = if s["gate_pass"] == true { "pass" } else { "below gate (advisory)" };
                println!(
                    "{t} prompt v{}: f1 {:.3} accuracy {:.3} on {} samples; {} disagreements; gate {}: {gate}",
                    s["prompt_version"],
                    s["f1"].as_f64().unwrap_or_default(),
                    s["accuracy"].as_f64().unwrap_or_default(),
                    s["n"],
                    s["disagreements"],
                    s["gate_f1"],
                );
                for w in s["warnings"].as_array().into_iter().flatten() {
                    println!("  warning: {}", w.as_str().unwrap_or_default());
                }
            }
        }
        Command::Generate { tasks } => {
            let mut p = open_pipeline(&cli)?;
            for t in tasks_or_all(&p, tasks)? {
                let run = p.generate(&t)?;
                let s = &run.summary;
                println!(
                    "{t}: {} surrogate labels from {} annotations; {} unanimous",
                    s["surrogate_labels"], s["raw_annotations"], s["consistency"]["unanimous"]
                );
            }
        }
        Command::Train { task, arm } => {
            let mut p = open_pipeline(&cli)?;
            let run = p.train(task, (*arm).into())?;
            let s = &run.summary;
            println!("{task} {}: trained on {} samples ({} trainer)", s["arm"], s["n_train"], s["trainer"].as_str().unwrap_or("?"));
            if let Some(f1) = s["best_tune_f1"].as_f64() {
                println!("  best tuning f1 {f1:.3} with {}", s["best"]);
            }
        }
        Command::Evaluate { task, arm, json } => {
            let mut p = open_pipeline(&cli)?;
            let run = p.test(task, (*arm).into())?;
            let report: MetricsReport = p.store().get_json(&run.outputs["report"])?;
            if *json {
                print_json(&report);
            } else {
                print_report(&report);
            }
        }
        Command::Arms { tasks, json } => {
            let mut p = open_pipeline(&cli)?;
            let tasks = tasks_or_all(&p, tasks)?;
            let run = p.arms(&tasks)?;
            let cmp: ArmComparison = p.store().get_json(&run.outputs["comparison"])?;
            if *json {
                print_json(&cmp);
            } else {
                print!("{}", cmp.to_text());
            }
        }
        Command::AblateConsistency { tasks, json } => {
            let mut p = open_pipeline(&cli)?;
            let tasks = tasks_or_all(&p, tasks)?;
            let run = p.ablate_consistency(&tasks)?;
            let report: AblationReport = p.store().get_json(&run.outputs["ablation"])?;
            if *json {
                print_json(&report);
            } else {
                println!("threshold {}", report.threshold);
                for r in &report.rows {
                    println!(
                        "{}: kept {} dropped {}; f1 with noise {:.3}, without {:.3}, difference {:+.4}",
                        r.task_id, r.kept, r.dropped, r.with_noise.f1, r.without_noise.f1, r.f1_difference
                    );
                }
                println!("mean difference {:+.4}", report.mean_f1_difference);
            }
        }
        Command::Drift { run_a, run_b, json } => {
            let read = |path: &Path| -> Result<Vec<MetricsReport>> {
                let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
                serde_json::from_str(&text).map_err(|e| anyhow!(PipelineError::Config(format!("{}: {e}", path.display()))))
            };
            let (a, b) = (read(run_a)?, read(run_b)?);
            let mut p = open_pipeline(&cli)?;
            let (_, report) = p.drift(&a, &b)?;
            if *json {
                print_json(&report);
            } else {
                print!("{}", report.to_text());
            }
        }
        Command::Cost { scenarios, json } => {
            let list = match scenarios {
                Some(path) => ScenarioFile::from_json(&std::fs::read_to_string(path)?)?.scenarios,
                None => reference_scenarios(),
            };
            let report = cost_comparison_report(&list)?;
            if *json {
                println!("{}", report.to_json());
            } else {
                print!("{}", report.to_text());
                if let Ok(store) = Store::open_read_only(&cli.store) {
                    let l = surrogate_core::pipeline::total_ledger(&store.index);
                    println!(
                        "store usage: {} requests, {} input tokens, {} output tokens",
                        l.requests, l.input_tokens, l.output_tokens
                    );
                }
            }
        }
        Command::Review { command } => match command {
            ReviewCommand::Export { task, format, status, prompt_version, out } => {
                let store = Store::open_read_only(&cli.store)?;
                let status = status.as_deref().map(ResolutionStatus::parse).transpose().map_err(PipelineError::from)?;
                let items = disagreements(&store, task, DisagreementFilter { status, prompt_version: *prompt_version })?;
                let text = match format {
                    ExportFormat::Jsonl => disagreements_to_jsonl(&items),
                    ExportFormat::Sheet => review_sheet(&items),
                };
                match out {
                    Some(path) => {
                        std::fs::write(path, text)?;
                        eprintln!("wrote {} disagreements to {}", items.len(), path.display());
                    }
                    None => print!("{text}"),
                }
            }
            ReviewCommand::Set { task, sample, status, note } => {
                let status = ResolutionStatus::parse(status).map_err(PipelineError::from)?;
                let entry = set_disagreement_status(&cli.store, task, sample, status, note.clone(), None)?;
                println!("#{} {task}/{sample}: {} -> {}", entry.seq, entry.from, entry.to);
            }
        },
        Command::Prompt { command } => match command {
            PromptCommand::List { task } => {
                let store = Store::open_read_only(&cli.store)?;
                let prompts = store.prompts();
                for v in prompts.versions(task).map_err(PipelineError::from)? {
                    let pv = prompts.load(task, v).map_err(PipelineError::from)?;
                    println!("v{v}  {}  {}", &pv.hash()[..12], pv.instructions.lines().next().unwrap_or(""));
                }
            }
            PromptCommand::New { task, instructions } => {
                let p = open_pipeline(&cli)?;
                let prompts = p.store().prompts();
                let latest = prompts
                    .latest(task)
                    .map_err(PipelineError::from)?
                    .ok_or_else(|| PipelineError::UnknownTask(task.clone()))?;
                let text = std::fs::read_to_string(instructions)?;
                let next = PromptVersion { version: latest.version + 1, instructions: text, created_at: String::new(), ..latest };
                prompts.save(&next).map_err(PipelineError::from)?;
                println!("saved {task} v{}", next.version);
            }
        },
        Command::Runs { task } => {
            let store = Store::open_read_only(&cli.store)?;
            for r in store.index.runs.iter().filter(|r| task.as_ref().is_none_or(|t| &r.task_id == t)) {
                println!(
                    "{:<26} {:<9} {:<10} {:<20} {:?}",
                    r.run_id,
                    r.step.as_str(),
                    r.task_id,
                    r.arm.as_deref().unwrap_or("-"),
                    r.status
                );
            }
        }
        Command::Serve { addr, read_only, ui } => {
            let session = ApiSession { store: cli.store.clone(), read_only: *read_only, address: *addr, ui_dir: ui.clone() };
            eprintln!("serving {} on http://{addr}/api/v1/", cli.store.display());
            serve_blocking(session)?;
        }
    }
    Ok(())
}
