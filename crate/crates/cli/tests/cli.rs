//! End-to-end behaviour of the subcommands on a tiny synthetic suite.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use gtl_core::model::ModelConfig;
use gtl_core::sampler::{Split, CONTEXT_COUNTS};
use gtl_core::synthbench::SuiteConfig;
use gtl_core::templating::Template;
use gtl_core::tokenization::TokenizerSpec;
use gtl_core::trainer::{LogRecord, RunFiles, TrainConfig};

use gtl_forge::commands::{cmd_build_corpus, cmd_train, execute, BUILD_REPORT_FILE, METRICS_FILE};
use gtl_forge::config::{BuildCorpusConfig, DataSource, EvaluateConfig, ModelSource, ReportConfig, RunConfig, TrainRunConfig};
use gtl_forge::pipeline::{BuildReport, CorpusSpec, EvalSpec};

fn tiny_suite() -> SuiteConfig {
    SuiteConfig {
        n_pretrain: 4,
        n_holdout: 2,
        rows_per_task: 96,
        ..SuiteConfig::default()
    }
}

fn build_config(max_len: usize) -> BuildCorpusConfig {
    BuildCorpusConfig {
        source: DataSource::Synthetic { suite: tiny_suite() },
        corpus: CorpusSpec {
            templates: vec![Template::Anony, Template::Table],
            context_counts: vec![0, 4],
            samples_per_cell: 4,
            max_len,
            ..CorpusSpec::default()
        },
        tokenizer: TokenizerSpec::ByteLevel,
        template_resource: None,
        oracle_draws: 2000,
    }
}

fn tiny_model() -> ModelConfig {
    ModelConfig {
        n_layers: 1,
        n_heads: 2,
        d_model: 16,
        d_ff: 32,
        max_positions: 1024,
        ..ModelConfig::default()
    }
}

fn tiny_train(corpus_dir: &Path, max_steps: u64) -> TrainRunConfig {
    TrainRunConfig {
        corpus_dir: corpus_dir.to_path_buf(),
        model: tiny_model(),
        train: TrainConfig {
            batch_size: 2,
            max_steps,
            eval_every: 1000,
            checkpoint_every: 20,
            ..TrainConfig::desk()
        },
        curve: None,
    }
}

fn corpus(root: &Path) -> PathBuf {
    execute(&RunConfig::BuildCorpus(build_config(1024)), root).unwrap()
}

fn train_log(dir: &Path) -> Vec<LogRecord> {
    fs::read_to_string(RunFiles::new(dir).log_path())
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

fn train_steps(dir: &Path) -> Vec<u64> {
    train_log(dir).iter().filter(|r| r.split == "train").map(|r| r.step).collect()
}

fn forge(root: &Path, args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_gtl-forge"))
        .arg("--out")
        .arg(root)
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

#[test]
fn build_report_matches_grid_arithmetic() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = build_config(1024);
    let dir = RunConfig::BuildCorpus(cfg.clone()).prepare(tmp.path()).unwrap();
    let report = cmd_build_corpus(&cfg, &dir).unwrap();
    let expected = 4 * 2 * 2 * 4;
    assert_eq!(report.tasks, 4);
    assert_eq!(report.total.rendered, expected);
    assert_eq!(report.total.kept, expected - report.total.discarded);
    let lines = fs::read_to_string(dir.join("corpus.jsonl")).unwrap().lines().count();
    assert_eq!(lines, report.total.kept);
    let on_disk: BuildReport = serde_json::from_str(&fs::read_to_string(dir.join(BUILD_REPORT_FILE)).unwrap()).unwrap();
    assert_eq!(on_disk, report);
}

#[test]
fn short_cap_reports_discards() {
    let tmp = tempfile::tempdir().unwrap();
    // Zero-shot T-anony prompts fit in 250 tokens; four-shot T-table ones do not.
    let cfg = build_config(250);
    let dir = RunConfig::BuildCorpus(cfg.clone()).prepare(tmp.path()).unwrap();
    let report = cmd_build_corpus(&cfg, &dir).unwrap();
    assert!(report.total.discarded > 0);
    assert!(report.total.kept > 0);
    assert!(report.discarded_by_cell.get("T-table/n4").copied().unwrap_or(0) > 0);
}

#[test]
fn zero_surviving_samples_is_a_data_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = build_config(8);
    let dir = RunConfig::BuildCorpus(cfg.clone()).prepare(tmp.path()).unwrap();
    assert_eq!(cmd_build_corpus(&cfg, &dir).unwrap_err().exit_code(), 3);
}

#[test]
fn max_steps_100_logs_exactly_100_updates() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus_dir = corpus(tmp.path());
    let out = forge(
        tmp.path(),
        &[
            "train",
            "--corpus",
            corpus_dir.to_str().unwrap(),
            "--model",
            "small",
            "--batch-size",
            "2",
            "--max-steps",
            "100",
            "--no-curve",
        ],
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let run_dir = PathBuf::from(String::from_utf8(out.stdout).unwrap().trim());
    assert_eq!(train_steps(&run_dir), (1..=100).collect::<Vec<u64>>());
    assert!(run_dir.join("config.json").exists());
    assert!(RunFiles::new(&run_dir).checkpoint_path(100).exists());
}

#[test]
fn resume_after_kill_continues_the_same_run() {
    let full = tempfile::tempdir().unwrap();
    let killed = tempfile::tempdir().unwrap();
    let corpus_dir = corpus(full.path());
    let cfg = tiny_train(&corpus_dir, 100);

    let full_dir = RunConfig::Train(cfg.clone()).prepare(full.path()).unwrap();
    cmd_train(&cfg, &full_dir).unwrap();

    // The killed run got as far as step 71; its last checkpoint is step 60.
    let dir = RunConfig::Train(cfg.clone()).prepare(killed.path()).unwrap();
    let files = RunFiles::new(&dir);
    fs::copy(RunFiles::new(&full_dir).checkpoint_path(60), files.checkpoint_path(60)).unwrap();
    let partial: String = fs::read_to_string(RunFiles::new(&full_dir).log_path())
        .unwrap()
        .lines()
        .filter(|l| serde_json::from_str::<LogRecord>(l).unwrap().step <= 71)
        .map(|l| format!("{l}\n"))
        .collect();
    fs::write(files.log_path(), partial).unwrap();

    let outcome = cmd_train(&cfg, &dir).unwrap();
    assert_eq!(outcome.step, 100);
    let steps = train_steps(&dir);
    assert_eq!(steps.len(), 100);
    assert!(steps.windows(2).all(|w| w[0] < w[1]));
    assert_eq!(
        fs::read(files.checkpoint_path(100)).unwrap(),
        fs::read(RunFiles::new(&full_dir).checkpoint_path(100)).unwrap()
    );
}

#[test]
fn stop_file_halts_with_a_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus_dir = corpus(tmp.path());
    let cfg = tiny_train(&corpus_dir, 50);
    let dir = RunConfig::Train(cfg.clone()).prepare(tmp.path()).unwrap();
    fs::write(dir.join(RunFiles::STOP_FILE), "").unwrap();
    let outcome = cmd_train(&cfg, &dir).unwrap();
    assert!(outcome.stopped);
    assert_eq!(outcome.step, 1);
    assert!(RunFiles::new(&dir).checkpoint_path(1).exists());

    // Removing the stop file resumes to completion.
    fs::remove_file(dir.join(RunFiles::STOP_FILE)).unwrap();
    let outcome = cmd_train(&cfg, &dir).unwrap();
    assert!(!outcome.stopped);
    assert_eq!(train_steps(&dir), (1..=50).collect::<Vec<u64>>());
}

fn evaluate_untrained(root: &Path, corpus_dir: &Path, knn: bool) -> PathBuf {
    let cfg = RunConfig::Evaluate(EvaluateConfig {
        corpus_dir: corpus_dir.to_path_buf(),
        model: ModelSource::Untrained { model: tiny_model() },
        split: Split::Holdout,
        eval: EvalSpec {
            templates: vec![Template::Anony],
            context_counts: vec![0, 4],
            decode_steps: 4,
            ..EvalSpec::holdout()
        },
        knn,
        label: "tiny".into(),
    });
    execute(&cfg, root).unwrap()
}

#[test]
fn evaluation_writes_one_metric_row_per_task_and_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus_dir = corpus(tmp.path());
    let dir = evaluate_untrained(tmp.path(), &corpus_dir, true);
    let lines: Vec<serde_json::Value> = fs::read_to_string(dir.join(METRICS_FILE))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    for n in [0, 4] {
        let model_rows = lines
            .iter()
            .filter(|l| l["method"] == "tiny/T-anony" && l["n_context"] == n)
            .count();
        // two holdout tasks, three seeds
        assert_eq!(model_rows, 6, "n_context {n}");
    }
    assert!(!lines.iter().any(|l| l["method"] == "knn/T-anony" && l["n_context"] == 0));

    let md = fs::read_to_string(dir.join("report_auroc.md")).unwrap();
    let knn_row = md.lines().find(|l| l.contains("knn")).unwrap();
    assert!(knn_row.contains('\u{2212}'), "{knn_row}");
    let model_row = md.lines().find(|l| l.contains("tiny")).unwrap();
    let cell = model_row.split('|').map(str::trim).find(|c| c.contains("_[")).unwrap();
    let (mean, interval) = cell.split_once('_').unwrap();
    assert_eq!(mean.len(), 5, "{cell}");
    assert!(interval.starts_with('[') && interval.ends_with(']') && interval.contains(", "), "{cell}");
}

#[test]
fn report_merges_logs_and_leaves_missing_cells_empty() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus_dir = corpus(tmp.path());
    let a = execute(&RunConfig::Train(tiny_train(&corpus_dir, 4)), tmp.path()).unwrap();
    let b = execute(&RunConfig::Train(tiny_train(&corpus_dir, 6)), tmp.path()).unwrap();
    let eval = evaluate_untrained(tmp.path(), &corpus_dir, false);
    let report = RunConfig::Report(ReportConfig {
        train_runs: vec![a.clone(), b.clone()],
        eval_runs: vec![eval],
        sweep_runs: vec![],
    });
    let dir = execute(&report, tmp.path()).unwrap();

    let curve = fs::read_to_string(dir.join("convergence.tsv")).unwrap();
    let mut rows = curve.lines();
    assert_eq!(rows.next().unwrap(), "run\tstep\tsplit\tmetric_name\tvalue");
    assert_eq!(rows.count(), 10);

    let table = fs::read_to_string(dir.join("template_comparison_auroc.tsv")).unwrap();
    let header: Vec<&str> = table.lines().next().unwrap().split('\t').collect();
    assert_eq!(header.len(), 2 + CONTEXT_COUNTS.len());
    let row: Vec<&str> = table.lines().nth(1).unwrap().split('\t').collect();
    assert_eq!(row.len(), header.len());
    assert!(!row[2].is_empty() && !row[3].is_empty());
    assert!(row[4..].iter().all(|c| c.is_empty()));

    // Identical inputs give byte-identical outputs.
    let again = tempfile::tempdir().unwrap();
    let dir2 = execute(&report, again.path()).unwrap();
    for f in ["convergence.tsv", "template_comparison_auroc.tsv", "report_auroc.md"] {
        assert_eq!(fs::read(dir.join(f)).unwrap(), fs::read(dir2.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn report_rejects_inconsistent_metric_names() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus_dir = corpus(tmp.path());
    let plain = execute(&RunConfig::Train(tiny_train(&corpus_dir, 2)), tmp.path()).unwrap();
    let mut with_curve = tiny_train(&corpus_dir, 2);
    with_curve.train.eval_every = 2;
    with_curve.curve = Some(gtl_forge::config::CurveSpec {
        eval: EvalSpec {
            templates: vec![Template::Anony],
            context_counts: vec![0],
            seeds: vec![0],
            decode_steps: 4,
            ..EvalSpec::holdout()
        },
        max_pretrain_tasks: 1,
    });
    let curved = execute(&RunConfig::Train(with_curve), tmp.path()).unwrap();
    assert!(train_log(&curved).iter().any(|r| r.split == "holdout"));
    let err = execute(
        &RunConfig::Report(ReportConfig {
            train_runs: vec![plain, curved],
            eval_runs: vec![],
            sweep_runs: vec![],
        }),
        tmp.path(),
    )
    .unwrap_err();
    assert_eq!(err.exit_code(), 3);
}

#[test]
fn exit_codes_follow_the_error_class() {
    let tmp = tempfile::tempdir().unwrap();

    let missing = forge(tmp.path(), &["train", "--corpus", "/no/such/corpus"]);
    assert_eq!(missing.status.code(), Some(2));

    let bad_flag = forge(tmp.path(), &["train", "--no-such-flag"]);
    assert_eq!(bad_flag.status.code(), Some(2));

    let data = tmp.path().join("data");
    fs::create_dir_all(data.join("pretrain")).unwrap();
    fs::create_dir_all(data.join("holdout")).unwrap();
    fs::write(data.join("pretrain/broken.csv"), "a,b\n1,2,3\n").unwrap();
    fs::write(data.join("pretrain/broken.meta.json"), "{}").unwrap();
    let bad_data = forge(tmp.path(), &["build-corpus", "--data-dir", data.to_str().unwrap()]);
    assert_eq!(bad_data.status.code(), Some(3), "{}", String::from_utf8_lossy(&bad_data.stderr));

    let corpus_dir = corpus(tmp.path());
    let diverging = forge(
        tmp.path(),
        &[
            "train",
            "--corpus",
            corpus_dir.to_str().unwrap(),
            "--model",
            "small",
            "--batch-size",
            "2",
            "--max-steps",
            "20",
            "--lr",
            "1e300",
            "--no-curve",
        ],
    );
    assert_eq!(diverging.status.code(), Some(4), "{}", String::from_utf8_lossy(&diverging.stderr));
}

#[test]
fn workers_env_overrides_flag() {
    let tmp = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_gtl-forge"))
        .args(["--out", tmp.path().to_str().unwrap(), "--workers", "1", "report", "--train-run", "/nowhere"])
        .env(gtl_forge::config::WORKERS_ENV, "not-a-number")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains(gtl_forge::config::WORKERS_ENV));
}
