//! Subcommand implementations. Each takes its effective configuration and
//! an already prepared run directory.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use gtl_core::evaluation::{aggregate, CaseMetric, PredictionRecord};
use gtl_core::model::{Checkpoint, ModelConfig, Params};
use gtl_core::objective::CorpusRecord;
use gtl_core::sampler::{Split, CONTEXT_COUNTS};
use gtl_core::synthbench::{build_suite, monte_carlo_bayes};
use gtl_core::tabular::{validate_task, TabularTask};
use gtl_core::templating::{TemplateResource, BUILTIN_RESOURCE};
use gtl_core::tokenization::TokenizerSpec;
use gtl_core::trainer::{scaling_sweep, train, EvalPoint, LogRecord, RunFiles, SweepRow, SweepSetting, TrainOutcome};

use crate::config::{read_frozen, BuildCorpusConfig, DataSource, EvaluateConfig, ModelSource, ReportConfig, RunConfig, SweepConfig, TrainRunConfig};
use crate::error::{CliError, Result};
use crate::pipeline::{build_corpus, evaluate, load_task_dir, mean_at, training_pool, write_task_dir, BuildReport, EvalOutput, EvalSpec, Method};

pub const CORPUS_FILE: &str = "corpus.jsonl";
pub const BUILD_REPORT_FILE: &str = "build_report.json";
pub const ORACLE_FILE: &str = "oracle.json";
pub const TEMPLATES_FILE: &str = "templates.toml";
pub const TOKENIZER_FILE: &str = "tokenizer.json";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const SUMMARY_FILE: &str = "summary.json";
pub const SWEEP_FILE: &str = "sweep.tsv";
pub const TIMING_FILE: &str = "timing.json";

/// Wall-clock seconds spent in `cmd_train`, summed over resumed sessions.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainTiming {
    pub seconds: f64,
}

impl TrainTiming {
    pub fn read(run_dir: &Path) -> Result<Self> {
        let path = run_dir.join(TIMING_FILE);
        match fs::read_to_string(&path) {
            Ok(text) => Ok(serde_json::from_str(&text)?),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(Self::default()),
            Err(e) => Err(CliError::io(&path, e)),
        }
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_text(path, &(serde_json::to_string_pretty(value)? + "\n"))
}

fn write_jsonl<T: Serialize>(path: &Path, items: impl IntoIterator<Item = T>) -> Result<()> {
    let f = File::create(path).map_err(|e| CliError::io(path, e))?;
    let mut w = BufWriter::new(f);
    for item in items {
        serde_json::to_writer(&mut w, &item)?;
        w.write_all(b"\n").map_err(|e| CliError::io(path, e))?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let f = File::open(path).map_err(|e| CliError::io(path, e))?;
    let mut out = Vec::new();
    for line in BufReader::new(f).lines() {
        let line = line.map_err(|e| CliError::io(path, e))?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

/// Holdout oracle values of a synthetic suite, keyed by task id.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct OracleFile {
    pub draws: usize,
    pub bayes: BTreeMap<String, f64>,
}

/// Everything later stages need from a corpus directory.
pub struct CorpusDir {
    pub dir: PathBuf,
    pub config: BuildCorpusConfig,
    pub pretrain: Vec<TabularTask>,
    pub holdout: Vec<TabularTask>,
    pub resource: TemplateResource,
    pub tokenizer: TokenizerSpec,
}

impl CorpusDir {
    pub fn open(dir: &Path) -> Result<Self> {
        let config = match read_frozen(dir)? {
            RunConfig::BuildCorpus(c) => c,
            other => {
                return Err(CliError::Config(format!(
                    "{} is a {} run, not a corpus",
                    dir.display(),
                    other.name()
                )))
            }
        };
        let tok_path = dir.join(TOKENIZER_FILE);
        let tok_text = fs::read_to_string(&tok_path).map_err(|e| CliError::io(&tok_path, e))?;
        Ok(CorpusDir {
            pretrain: load_task_dir(&dir.join("data").join("pretrain"))?,
            holdout: load_task_dir(&dir.join("data").join("holdout"))?,
            resource: TemplateResource::load(&dir.join(TEMPLATES_FILE))?,
            tokenizer: serde_json::from_str(&tok_text)?,
            config,
            dir: dir.to_path_buf(),
        })
    }

    pub fn records(&self) -> Result<Vec<CorpusRecord>> {
        read_jsonl(&self.dir.join(CORPUS_FILE))
    }

    pub fn tasks(&self, split: Split) -> &[TabularTask] {
        match split {
            Split::Pretrain => &self.pretrain,
            Split::Holdout => &self.holdout,
        }
    }

    pub fn oracle(&self) -> Result<Option<OracleFile>> {
        let path = self.dir.join(ORACLE_FILE);
        if !path.exists() {
            return Ok(None);
        }
        let text = fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
        Ok(Some(serde_json::from_str(&text)?))
    }
}

fn check_tasks(tasks: &[TabularTask]) -> Result<()> {
    for t in tasks {
        if let Some(v) = validate_task(t).first() {
            return Err(CliError::Data(format!("task {} is invalid: {:?}", t.id, v)));
        }
    }
    Ok(())
}

/// Generate or load tasks, then render, tokenize, mask and length-filter
/// the pretraining corpus.
pub fn cmd_build_corpus(cfg: &BuildCorpusConfig, run_dir: &Path) -> Result<BuildReport> {
    let resource_text = match &cfg.template_resource {
        Some(p) => fs::read_to_string(p).map_err(|e| CliError::io(p, e))?,
        None => BUILTIN_RESOURCE.to_string(),
    };
    let resource = TemplateResource::from_toml(&resource_text)?;
    let (pretrain, holdout, oracle) = match &cfg.source {
        DataSource::Synthetic { suite } => {
            let (pre, hold) = build_suite(suite)?;
            let mut oracle = OracleFile {
                draws: cfg.oracle_draws,
                ..Default::default()
            };
            if cfg.oracle_draws > 0 {
                for t in &hold {
                    oracle.bayes.insert(t.task.id.clone(), monte_carlo_bayes(&t.spec, cfg.oracle_draws)?);
                }
            }
            (
                pre.into_iter().map(|t| t.task).collect::<Vec<_>>(),
                hold.into_iter().map(|t| t.task).collect::<Vec<_>>(),
                Some(oracle),
            )
        }
        DataSource::Directories { pretrain, holdout } => (load_task_dir(pretrain)?, load_task_dir(holdout)?, None),
    };
    check_tasks(&pretrain)?;
    check_tasks(&holdout)?;
    let data = run_dir.join("data");
    write_task_dir(&pretrain, &data.join("pretrain"))?;
    write_task_dir(&holdout, &data.join("holdout"))?;
    // later stages read the tasks back from disk, so build from the same copy
    let pretrain = load_task_dir(&data.join("pretrain"))?;

    let (corpus, report) = build_corpus(&pretrain, &cfg.corpus, &resource, &cfg.tokenizer)?;
    write_jsonl(&run_dir.join(CORPUS_FILE), &corpus)?;
    write_json(&run_dir.join(BUILD_REPORT_FILE), &report)?;
    write_text(&run_dir.join(TEMPLATES_FILE), &resource_text)?;
    write_json(&run_dir.join(TOKENIZER_FILE), &cfg.tokenizer)?;
    if let Some(o) = oracle {
        write_json(&run_dir.join(ORACLE_FILE), &o)?;
    }
    log::info!(
        "corpus: {} kept, {} discarded, {} tokens",
        report.total.kept,
        report.total.discarded,
        report.kept_tokens
    );
    Ok(report)
}

/// Mean metrics per context count, as training-log points.
fn curve_points(split: &str, out: &EvalOutput, counts: &[usize]) -> Vec<EvalPoint> {
    let mut points = Vec::new();
    for (name, metrics) in [("auroc", &out.auroc), ("nmae", &out.nmae)] {
        if metrics.is_empty() {
            continue;
        }
        let mean = metrics.iter().map(|m| m.value).sum::<f64>() / metrics.len() as f64;
        points.push(EvalPoint {
            split: split.into(),
            metric_name: name.into(),
            value: mean,
        });
        for &n in counts {
            if let Some(v) = mean_at(metrics, n) {
                points.push(EvalPoint {
                    split: split.into(),
                    metric_name: format!("{name}_n{n}"),
                    value: v,
                });
            }
        }
    }
    points
}

/// Train on a corpus directory, resuming from the run's latest checkpoint.
pub fn cmd_train(cfg: &TrainRunConfig, run_dir: &Path) -> Result<TrainOutcome> {
    let corpus_dir = CorpusDir::open(&cfg.corpus_dir)?;
    if cfg.model.vocab != corpus_dir.tokenizer.vocab_size() {
        return Err(CliError::Config(format!(
            "model vocabulary {} does not match tokenizer vocabulary {}",
            cfg.model.vocab,
            corpus_dir.tokenizer.vocab_size()
        )));
    }
    if corpus_dir.config.corpus.max_len > cfg.model.max_positions {
        return Err(CliError::Config(format!(
            "corpus max_len {} exceeds model max_positions {}",
            corpus_dir.config.corpus.max_len, cfg.model.max_positions
        )));
    }
    let records = corpus_dir.records()?;
    let eval_queries = corpus_dir.config.corpus.eval_queries;
    let n_curve = cfg.curve.as_ref().map_or(0, |c| c.max_pretrain_tasks.min(corpus_dir.pretrain.len()));
    for task in &corpus_dir.pretrain[..n_curve] {
        let (pool, eval) = training_pool(task, &eval_queries)?;
        let pool: BTreeSet<usize> = pool.into_iter().collect();
        assert!(
            eval.iter().all(|i| !pool.contains(i)),
            "in-domain evaluation rows of {} overlap the training pool",
            task.id
        );
    }

    let started = std::time::Instant::now();
    let init = Params::init(&cfg.model)?;
    let files = RunFiles::new(run_dir);
    let mut curve = |_step: u64, p: &Params| -> gtl_core::Result<Vec<EvalPoint>> {
        let Some(c) = &cfg.curve else {
            return Ok(Vec::new());
        };
        let run = || -> Result<Vec<EvalPoint>> {
            let mut points = Vec::new();
            if n_curve > 0 {
                let spec = EvalSpec {
                    queries: eval_queries,
                    ..c.eval.clone()
                };
                let out = evaluate(
                    Method::Model(p),
                    "model",
                    &corpus_dir.pretrain[..n_curve],
                    &spec,
                    &corpus_dir.resource,
                    &corpus_dir.tokenizer,
                )?;
                points.extend(curve_points("pretrain_test", &out, &c.eval.context_counts));
            }
            let out = evaluate(Method::Model(p), "model", &corpus_dir.holdout, &c.eval, &corpus_dir.resource, &corpus_dir.tokenizer)?;
            points.extend(curve_points("holdout", &out, &c.eval.context_counts));
            Ok(points)
        };
        run().map_err(|e| match e {
            CliError::Core(e) => e,
            other => gtl_core::Error::Shape(other.to_string()),
        })
    };
    let outcome = train(&records, init, &cfg.train, Some(&files), &mut curve)?;
    let timing = TrainTiming {
        seconds: TrainTiming::read(run_dir)?.seconds + started.elapsed().as_secs_f64(),
    };
    let path = run_dir.join(TIMING_FILE);
    fs::write(&path, serde_json::to_string(&timing)? + "\n").map_err(|e| CliError::io(&path, e))?;
    log::info!("training stopped at step {} (stopped early: {})", outcome.step, outcome.stopped);
    Ok(outcome)
}

/// Load the parameters a model source points at. A directory resolves to
/// its latest checkpoint.
pub fn load_model(source: &ModelSource) -> Result<Params> {
    match source {
        ModelSource::Untrained { model } => Ok(Params::init(model)?),
        ModelSource::Checkpoint { path } => {
            let file = if path.is_dir() {
                RunFiles::new(path)
                    .latest_checkpoint()?
                    .map(|(_, p)| p)
                    .ok_or_else(|| CliError::Data(format!("no checkpoint in {}", path.display())))?
            } else {
                path.clone()
            };
            Ok(Checkpoint::load(&file)?.params)
        }
    }
}

/// Headline numbers of an evaluation run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub label: String,
    /// method -> n_context -> mean over cases
    pub auroc: BTreeMap<String, BTreeMap<usize, f64>>,
    pub nmae: BTreeMap<String, BTreeMap<usize, f64>>,
    /// "<template>/n<count>" -> rate, model method only
    pub parse_failure_rate: BTreeMap<String, f64>,
    pub skipped_cases: Vec<String>,
    /// Mean Bayes oracle over classification tasks, when known.
    pub oracle_auroc: Option<f64>,
    /// Mean Bayes oracle NMAE over regression tasks, when known.
    pub oracle_nmae: Option<f64>,
}

fn means_by_method(metrics: &[CaseMetric]) -> BTreeMap<String, BTreeMap<usize, f64>> {
    let mut sums: BTreeMap<String, BTreeMap<usize, (f64, usize)>> = BTreeMap::new();
    for m in metrics {
        let e = sums.entry(m.method.clone()).or_default().entry(m.n_context).or_default();
        e.0 += m.value;
        e.1 += 1;
    }
    sums.into_iter()
        .map(|(k, v)| (k, v.into_iter().map(|(n, (s, c))| (n, s / c as f64)).collect()))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct MetricLine {
    metric: String,
    #[serde(flatten)]
    case: CaseMetric,
}

#[derive(Serialize)]
struct PredictionLine<'a> {
    method: &'a str,
    #[serde(flatten)]
    record: &'a PredictionRecord,
}

/// Score a model (and optionally the kNN reference) on one split.
pub fn cmd_evaluate(cfg: &EvaluateConfig, run_dir: &Path) -> Result<EvalSummary> {
    let corpus_dir = CorpusDir::open(&cfg.corpus_dir)?;
    let tasks = corpus_dir.tasks(cfg.split);
    if tasks.is_empty() {
        return Err(CliError::Data(format!("no {} tasks in the corpus", cfg.split)));
    }
    let params = load_model(&cfg.model)?;
    let mut spec = cfg.eval.clone();
    if cfg.split == Split::Pretrain {
        spec.queries = corpus_dir.config.corpus.eval_queries;
    }
    let mut outputs = vec![(
        cfg.label.clone(),
        evaluate(Method::Model(&params), &cfg.label, tasks, &spec, &corpus_dir.resource, &corpus_dir.tokenizer)?,
    )];
    if cfg.knn {
        outputs.push((
            "knn".to_string(),
            evaluate(Method::Knn, "knn", tasks, &spec, &corpus_dir.resource, &corpus_dir.tokenizer)?,
        ));
    }

    let mut auroc = Vec::new();
    let mut nmae = Vec::new();
    for (label, out) in &outputs {
        write_jsonl(
            &run_dir.join(format!("predictions-{label}.jsonl")),
            out.predictions.iter().map(|r| PredictionLine { method: label, record: r }),
        )?;
        auroc.extend(out.auroc.iter().cloned());
        nmae.extend(out.nmae.iter().cloned());
    }
    let lines = auroc
        .iter()
        .map(|c| MetricLine {
            metric: "auroc".into(),
            case: c.clone(),
        })
        .chain(nmae.iter().map(|c| MetricLine {
            metric: "nmae".into(),
            case: c.clone(),
        }));
    write_jsonl(&run_dir.join(METRICS_FILE), lines)?;
    for (name, metrics, higher) in [("auroc", &auroc, true), ("nmae", &nmae, false)] {
        if metrics.is_empty() {
            continue;
        }
        let report = aggregate(name, metrics, higher)?;
        write_text(&run_dir.join(format!("report_{name}.md")), &report.to_markdown())?;
        write_text(&run_dir.join(format!("report_{name}.tsv")), &report.to_tsv())?;
    }

    let model_out = &outputs[0].1;
    let (oracle_auroc, oracle_nmae) = match corpus_dir.oracle()? {
        Some(o) if cfg.split == Split::Holdout && o.draws > 0 => {
            let mean = |clf: bool| -> Option<f64> {
                let v: Vec<f64> = tasks
                    .iter()
                    .filter(|t| t.kind.is_classification() == clf)
                    .filter_map(|t| o.bayes.get(&t.id).copied())
                    .collect();
                (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
            };
            (mean(true), mean(false))
        }
        _ => (None, None),
    };
    let summary = EvalSummary {
        label: cfg.label.clone(),
        auroc: means_by_method(&auroc),
        nmae: means_by_method(&nmae),
        parse_failure_rate: model_out
            .parse_failures
            .iter()
            .filter(|(_, (_, n))| *n > 0)
            .map(|(k, (f, n))| (k.clone(), *f as f64 / *n as f64))
            .collect(),
        skipped_cases: model_out.skipped.clone(),
        oracle_auroc,
        oracle_nmae,
    };
    write_json(&run_dir.join(SUMMARY_FILE), &summary)?;
    Ok(summary)
}

fn run_label(dir: &Path) -> String {
    dir.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| dir.display().to_string())
}

fn tsv_field(s: &str) -> String {
    s.replace(['\t', '\n'], " ")
}

/// Merge training logs, evaluation metrics and sweep tables into
/// delimiter-separated files for plotting. Returns the files written.
pub fn cmd_report(cfg: &ReportConfig, run_dir: &Path) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();

    if !cfg.train_runs.is_empty() {
        let mut names: Option<(String, BTreeSet<String>)> = None;
        let mut text = String::from("run\tstep\tsplit\tmetric_name\tvalue\n");
        for dir in &cfg.train_runs {
            let label = run_label(dir);
            let log: Vec<LogRecord> = read_jsonl(&RunFiles::new(dir).log_path())?;
            let these: BTreeSet<String> = log
                .iter()
                .filter(|r| r.split != "train")
                .map(|r| format!("{}/{}", r.split, r.metric_name))
                .collect();
            match &names {
                Some((first, seen)) if *seen != these => {
                    return Err(CliError::Data(format!("metric names of {label} differ from those of {first}")));
                }
                None => names = Some((label.clone(), these)),
                _ => {}
            }
            for r in &log {
                text.push_str(&format!(
                    "{}\t{}\t{}\t{}\t{}\n",
                    tsv_field(&label),
                    r.step,
                    tsv_field(&r.split),
                    tsv_field(&r.metric_name),
                    r.value
                ));
            }
        }
        let path = run_dir.join("convergence.tsv");
        write_text(&path, &text)?;
        written.push(path);
    }

    if !cfg.eval_runs.is_empty() {
        let mut by_metric: BTreeMap<String, Vec<CaseMetric>> = BTreeMap::new();
        let mut owner: BTreeMap<String, String> = BTreeMap::new();
        for dir in &cfg.eval_runs {
            let label = run_label(dir);
            let lines: Vec<MetricLine> = read_jsonl(&dir.join(METRICS_FILE))?;
            let methods: BTreeSet<String> = lines.iter().map(|l| l.case.method.clone()).collect();
            // the same method name from two runs would be silently averaged
            let clash = methods.iter().any(|m| owner.get(m).is_some_and(|o| *o != label));
            for m in &methods {
                owner.entry(m.clone()).or_insert_with(|| label.clone());
            }
            for mut l in lines {
                if clash {
                    l.case.method = format!("{label}:{}", l.case.method);
                }
                by_metric.entry(l.metric).or_default().push(l.case);
            }
        }
        for (metric, cases) in &by_metric {
            let higher = metric != "nmae";
            let report = aggregate(metric, cases, higher)?;
            for (ext, body) in [("md", report.to_markdown()), ("tsv", report.to_tsv())] {
                let path = run_dir.join(format!("report_{metric}.{ext}"));
                write_text(&path, &body)?;
                written.push(path);
            }
            // per-template comparison: method rows carry the template suffix
            let means = means_by_method(cases);
            let mut text = String::from("method\ttemplate");
            for n in CONTEXT_COUNTS {
                text.push_str(&format!("\tn={n}"));
            }
            text.push('\n');
            for (method, cells) in &means {
                let (name, template) = method.rsplit_once('/').unwrap_or((method.as_str(), ""));
                text.push_str(&format!("{}\t{}", tsv_field(name), tsv_field(template)));
                for n in CONTEXT_COUNTS {
                    match cells.get(&n) {
                        Some(v) => text.push_str(&format!("\t{v:.4}")),
                        None => text.push('\t'),
                    }
                }
                text.push('\n');
            }
            let path = run_dir.join(format!("template_comparison_{metric}.tsv"));
            write_text(&path, &text)?;
            written.push(path);
        }
    }

    if !cfg.sweep_runs.is_empty() {
        let mut metric_of_axis: BTreeMap<String, String> = BTreeMap::new();
        let mut text = String::from("run\taxis\tsetting\tmetric_name\tvalue\n");
        for dir in &cfg.sweep_runs {
            let label = run_label(dir);
            for row in read_sweep(&dir.join(SWEEP_FILE))? {
                let known = metric_of_axis.entry(row.axis.clone()).or_insert_with(|| row.metric_name.clone());
                if *known != row.metric_name {
                    return Err(CliError::Data(format!(
                        "axis {} reports {} in {label} but {} elsewhere",
                        row.axis, row.metric_name, known
                    )));
                }
                text.push_str(&format!(
                    "{}\t{}\t{}\t{}\t{}\n",
                    tsv_field(&label),
                    row.axis,
                    row.setting,
                    row.metric_name,
                    row.value
                ));
            }
        }
        let path = run_dir.join("scaling.tsv");
        write_text(&path, &text)?;
        written.push(path);
    }
    Ok(written)
}

fn write_sweep(path: &Path, rows: &[SweepRow]) -> Result<()> {
    let mut text = String::from("axis\tsetting\tmetric_name\tvalue\n");
    for r in rows {
        text.push_str(&format!("{}\t{}\t{}\t{}\n", r.axis, r.setting, r.metric_name, r.value));
    }
    write_text(path, &text)
}

fn read_sweep(path: &Path) -> Result<Vec<SweepRow>> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    text.lines()
        .skip(1)
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split('\t').collect();
            if f.len() != 4 {
                return Err(CliError::Data(format!("malformed sweep line `{l}` in {}", path.display())));
            }
            Ok(SweepRow {
                axis: f[0].into(),
                setting: f[1].into(),
                metric_name: f[2].into(),
                value: f[3]
                    .parse()
                    .map_err(|_| CliError::Data(format!("bad value `{}` in {}", f[3], path.display())))?,
            })
        })
        .collect()
}

/// Retrain from scratch for each setting of each axis and record the
/// holdout metric.
pub fn cmd_sweep(cfg: &SweepConfig, run_dir: &Path) -> Result<Vec<SweepRow>> {
    let corpus_dir = CorpusDir::open(&cfg.corpus_dir)?;
    let holdout_clf = corpus_dir.holdout.iter().any(|t| t.kind.is_classification());
    let mut run = |setting: &SweepSetting| -> gtl_core::Result<(String, f64)> {
        let inner = || -> Result<(String, f64)> {
            let mut corpus_spec = corpus_dir.config.corpus.clone();
            let mut model = cfg.model.clone();
            let mut tasks: &[TabularTask] = &corpus_dir.pretrain;
            match setting {
                SweepSetting::SamplesPerTask(n) => corpus_spec.samples_per_cell = *n,
                SweepSetting::TaskFraction(f) => {
                    if !(*f > 0.0 && *f <= 1.0) {
                        return Err(CliError::Config(format!("task fraction {f} is outside (0, 1]")));
                    }
                    let k = ((tasks.len() as f64 * f).ceil() as usize).max(1);
                    tasks = &tasks[..k];
                }
                SweepSetting::ModelSize(name) => {
                    model = ModelConfig {
                        seed: cfg.model.seed,
                        max_positions: cfg.model.max_positions,
                        ..ModelConfig::preset(name).ok_or_else(|| CliError::Config(format!("unknown model size `{name}`")))?
                    };
                }
            }
            let (records, _) = build_corpus(tasks, &corpus_spec, &corpus_dir.resource, &corpus_dir.tokenizer)?;
            let mut none = |_: u64, _: &Params| Ok(Vec::new());
            let out = train(&records, Params::init(&model)?, &cfg.train, None, &mut none)?;
            let ev = evaluate(
                Method::Model(&out.params),
                "model",
                &corpus_dir.holdout,
                &cfg.eval,
                &corpus_dir.resource,
                &corpus_dir.tokenizer,
            )?;
            let (name, metrics) = if holdout_clf {
                ("holdout_auroc", &ev.auroc)
            } else {
                ("holdout_nmae", &ev.nmae)
            };
            if metrics.is_empty() {
                return Err(CliError::Data("sweep evaluation produced no metrics".into()));
            }
            Ok((name.to_string(), metrics.iter().map(|m| m.value).sum::<f64>() / metrics.len() as f64))
        };
        inner().map_err(|e| match e {
            CliError::Core(e) => e,
            other => gtl_core::Error::InvalidTrainConfig(other.to_string()),
        })
    };
    let rows = scaling_sweep(&cfg.axes, &mut run)?;
    write_sweep(&run_dir.join(SWEEP_FILE), &rows)?;
    Ok(rows)
}

/// Prepare the run directory for `cfg` under `root` and execute it.
pub fn execute(cfg: &RunConfig, root: &Path) -> Result<PathBuf> {
    let dir = cfg.prepare(root)?;
    match cfg {
        RunConfig::BuildCorpus(c) => {
            cmd_build_corpus(c, &dir)?;
        }
        RunConfig::Train(c) => {
            cmd_train(c, &dir)?;
        }
        RunConfig::Evaluate(c) => {
            cmd_evaluate(c, &dir)?;
        }
        RunConfig::Report(c) => {
            cmd_report(c, &dir)?;
        }
        RunConfig::Sweep(c) => {
            cmd_sweep(c, &dir)?;
        }
    }
    Ok(dir)
}
