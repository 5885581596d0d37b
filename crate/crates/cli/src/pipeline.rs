//! Corpus construction and evaluation over sets of tabular tasks.
//!
//! Work is split per task or per case and run on the current rayon pool;
//! results are always collected in input order.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use gtl_core::evaluation::{
    auroc_multiclass, nmae, predict_classification, predict_regression, prompt_ids, CaseMetric, Outcome,
    PredictionRecord,
};
use gtl_core::linalg::Real;
use gtl_core::model::{Params, Session};
use gtl_core::objective::{CorpusRecord, MaskOptions};
use gtl_core::rng::rng_for;
use gtl_core::sampler::{context_for_case, split_rows, CaseSpec, ContextSet, DemoOrder, QueryCounts, Split};
use gtl_core::tabular::{load_dataset, write_dataset, Cell, Label, TabularTask, TaskKind};
use gtl_core::templating::{render_case, RenderMode, Template, TemplateResource};
use gtl_core::tokenization::{filter_tokenized, tokenize_with_spans, TokenizedSample, TokenizerSpec};
use gtl_core::trainer::Precision;

use crate::error::{CliError, Result};

/// Seed of the pool/eval row split. Fixed so that the rows held out from
/// the corpus are the rows used for in-domain evaluation.
pub const SPLIT_SEED: u64 = 0;

/// Load every `<stem>.csv` with a sibling `<stem>.meta.json`, sorted by stem.
pub fn load_task_dir(dir: &Path) -> Result<Vec<TabularTask>> {
    let entries = fs::read_dir(dir).map_err(|e| CliError::io(dir, e))?;
    let mut csvs = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| CliError::io(dir, e))?.path();
        if path.extension().is_some_and(|e| e == "csv") {
            csvs.push(path);
        }
    }
    csvs.sort();
    let mut tasks = Vec::with_capacity(csvs.len());
    for values in csvs {
        let stem = values.file_stem().unwrap_or_default().to_string_lossy().into_owned();
        let meta = values.with_file_name(format!("{stem}.meta.json"));
        if !meta.exists() {
            return Err(CliError::Data(format!("{} has no metadata file", values.display())));
        }
        tasks.push(load_dataset(&values, &meta)?);
    }
    Ok(tasks)
}

pub fn write_task_dir(tasks: &[TabularTask], dir: &Path) -> Result<()> {
    for t in tasks {
        write_dataset(t, dir)?;
    }
    Ok(())
}

/// How training samples are drawn from the pretraining tasks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusSpec {
    pub templates: Vec<Template>,
    pub context_counts: Vec<usize>,
    /// Samples per (task, template, context count); sample k uses seed k.
    pub samples_per_cell: usize,
    pub max_len: usize,
    pub demo_order: DemoOrder,
    pub supervise_demonstrations: bool,
    /// Rows per task held out for in-domain evaluation.
    pub eval_queries: QueryCounts,
    /// Shuffle the feature columns of every sample (demonstrations and
    /// query share one order).
    #[serde(default)]
    pub permute_features: bool,
    /// Mirror each numeric column inside its range with probability 1/2,
    /// per sample.
    #[serde(default)]
    pub reflect_numeric: bool,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        CorpusSpec {
            templates: Template::ALL.to_vec(),
            context_counts: gtl_core::sampler::CONTEXT_COUNTS.to_vec(),
            samples_per_cell: 64,
            max_len: 4096,
            demo_order: DemoOrder::RoundRobin,
            supervise_demonstrations: true,
            eval_queries: QueryCounts::PRETRAIN_TEST,
            permute_features: false,
            reflect_numeric: false,
        }
    }
}

/// Counts per pipeline stage.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StageCounts {
    pub cases: usize,
    pub rendered: usize,
    pub tokenized: usize,
    pub discarded: usize,
    pub kept: usize,
}

impl StageCounts {
    fn add(&mut self, other: &StageCounts) {
        self.cases += other.cases;
        self.rendered += other.rendered;
        self.tokenized += other.tokenized;
        self.discarded += other.discarded;
        self.kept += other.kept;
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BuildReport {
    pub tasks: usize,
    pub total: StageCounts,
    pub per_template: BTreeMap<String, StageCounts>,
    /// Discards keyed by "<template>/n<count>".
    pub discarded_by_cell: BTreeMap<String, usize>,
    pub balance_warnings: usize,
    pub kept_tokens: usize,
}

fn cell_key(template: Template, n: usize) -> String {
    format!("{template}/n{n}")
}

/// Pool rows for corpus sampling: everything except the in-domain eval rows.
pub fn training_pool(task: &TabularTask, eval_queries: &QueryCounts) -> Result<(Vec<usize>, Vec<usize>)> {
    Ok(split_rows(task, SPLIT_SEED, eval_queries.for_kind(task.kind))?)
}

/// Copy of `task` with permuted and/or mirrored feature columns. Labels
/// are untouched, so the result is a different task over the same rows.
pub fn augment_task(task: &TabularTask, permute: bool, reflect: bool, rng: &mut impl Rng) -> TabularTask {
    let m = task.n_features();
    let mut order: Vec<usize> = (0..m).collect();
    if permute {
        order.shuffle(rng);
    }
    let mut mirror = vec![None; m];
    if reflect {
        for (j, slot) in mirror.iter_mut().enumerate() {
            let nums = task.rows.iter().filter_map(|r| match r.values[j] {
                Cell::Num(x) => Some(x),
                _ => None,
            });
            let (lo, hi) = nums.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
            if lo < hi && rng.random_bool(0.5) {
                *slot = Some(lo + hi);
            }
        }
    }
    let mut out = task.clone();
    out.features = order.iter().map(|&j| task.features[j].clone()).collect();
    for (dst, src) in out.rows.iter_mut().zip(&task.rows) {
        dst.values = order
            .iter()
            .map(|&j| match (&src.values[j], mirror[j]) {
                (Cell::Num(x), Some(sum)) => Cell::Num(sum - x),
                (c, _) => c.clone(),
            })
            .collect();
    }
    out
}

/// One training sample per (task, template, context count, seed) with a
/// single query row drawn from the pool.
fn task_samples(
    task: &TabularTask,
    spec: &CorpusSpec,
    res: &TemplateResource,
    tok: &TokenizerSpec,
) -> Result<(Vec<(Template, usize, TokenizedSample)>, usize)> {
    let (pool, _) = training_pool(task, &spec.eval_queries)?;
    let mut out = Vec::new();
    let mut warnings = 0;
    for &template in &spec.templates {
        for &n in &spec.context_counts {
            for seed in 0..spec.samples_per_cell as u64 {
                let case = CaseSpec::new(&task.id, template, n, seed, Split::Pretrain)?;
                let q = pool[rng_for(seed, &["query", &case.case_id]).random_range(0..pool.len())];
                let (ctx, w) = context_for_case(task, &case, &pool, vec![q], spec.demo_order)?;
                warnings += w.len();
                let augmented;
                let view = if spec.permute_features || spec.reflect_numeric {
                    let mut rng = rng_for(seed, &["augment", &case.case_id]);
                    augmented = augment_task(task, spec.permute_features, spec.reflect_numeric, &mut rng);
                    &augmented
                } else {
                    task
                };
                for s in render_case(&case, &ctx, view, RenderMode::Train, res)? {
                    out.push((template, n, tokenize_with_spans(&s, tok)?));
                }
            }
        }
    }
    Ok((out, warnings))
}

/// Build the tokenized, masked and length-filtered training corpus.
pub fn build_corpus(
    tasks: &[TabularTask],
    spec: &CorpusSpec,
    res: &TemplateResource,
    tok: &TokenizerSpec,
) -> Result<(Vec<CorpusRecord>, BuildReport)> {
    if tasks.is_empty() {
        return Err(CliError::Data("no pretraining tasks".into()));
    }
    if spec.samples_per_cell == 0 {
        return Err(CliError::Config("samples_per_cell must be at least 1".into()));
    }
    let per_task: Vec<Result<_>> = tasks.par_iter().map(|t| task_samples(t, spec, res, tok)).collect();
    let opts = MaskOptions {
        supervise_demonstrations: spec.supervise_demonstrations,
    };
    let mut report = BuildReport {
        tasks: tasks.len(),
        ..Default::default()
    };
    let mut corpus = Vec::new();
    for r in per_task {
        let (samples, warnings) = r?;
        report.balance_warnings += warnings;
        for (template, n, s) in samples {
            let counts = report.per_template.entry(template.to_string()).or_default();
            counts.cases += 1;
            counts.rendered += 1;
            counts.tokenized += 1;
            let filtered = filter_tokenized(vec![s], spec.max_len);
            if filtered.kept.is_empty() {
                counts.discarded += 1;
                *report.discarded_by_cell.entry(cell_key(template, n)).or_default() += 1;
            } else {
                counts.kept += 1;
                for s in filtered.kept {
                    report.kept_tokens += s.len();
                    corpus.push(CorpusRecord::new(s, opts));
                }
            }
        }
    }
    for c in report.per_template.values() {
        report.total.add(c);
    }
    if corpus.is_empty() {
        return Err(CliError::Data("no samples survived the length filter".into()));
    }
    Ok((corpus, report))
}

/// Evaluation grid and decoding settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSpec {
    pub templates: Vec<Template>,
    pub context_counts: Vec<usize>,
    pub seeds: Vec<u64>,
    pub decode_steps: usize,
    pub queries: QueryCounts,
    pub demo_order: DemoOrder,
    pub precision: Precision,
}

impl EvalSpec {
    pub fn holdout() -> Self {
        EvalSpec {
            templates: Template::ALL.to_vec(),
            context_counts: gtl_core::sampler::CONTEXT_COUNTS.to_vec(),
            seeds: gtl_core::sampler::DEFAULT_SEEDS.to_vec(),
            decode_steps: 10,
            queries: QueryCounts::HOLDOUT,
            demo_order: DemoOrder::RoundRobin,
            precision: Precision::F32,
        }
    }
}

/// A predictor evaluated over the case grid.
#[derive(Clone, Copy, Debug)]
pub enum Method<'a> {
    Model(&'a Params),
    /// Nearest neighbours among the demonstrations; undefined at n = 0.
    Knn,
}

#[derive(Clone, Debug, Default)]
pub struct EvalOutput {
    pub predictions: Vec<PredictionRecord>,
    pub auroc: Vec<CaseMetric>,
    pub nmae: Vec<CaseMetric>,
    /// Cases whose prompts exceed the model context, or with an undefined metric.
    pub skipped: Vec<String>,
    /// (parse failures, regression queries) keyed by "<template>/n<count>".
    pub parse_failures: BTreeMap<String, (usize, usize)>,
}

impl EvalOutput {
    /// Worst parse-failure rate over all cells.
    pub fn max_parse_failure_rate(&self) -> f64 {
        self.parse_failures
            .values()
            .filter(|(_, n)| *n > 0)
            .map(|(f, n)| *f as f64 / *n as f64)
            .fold(0.0, f64::max)
    }
}

struct CaseResult {
    predictions: Vec<PredictionRecord>,
    metric: Option<f64>,
    skipped: bool,
    parse: (usize, usize),
}

/// Evaluate `method` on every (task, template, context count, seed) case.
/// Metric rows are labelled `<label>/<template>`.
pub fn evaluate(
    method: Method<'_>,
    label: &str,
    tasks: &[TabularTask],
    spec: &EvalSpec,
    res: &TemplateResource,
    tok: &TokenizerSpec,
) -> Result<EvalOutput> {
    let split = Split::Holdout;
    let mut cases = Vec::new();
    for (ti, task) in tasks.iter().enumerate() {
        for &template in &spec.templates {
            for &n in &spec.context_counts {
                if matches!(method, Method::Knn) && n == 0 {
                    continue;
                }
                for &seed in &spec.seeds {
                    cases.push((ti, CaseSpec::new(&task.id, template, n, seed, split)?));
                }
            }
        }
    }
    let w32: Option<Vec<f32>> = match (method, spec.precision) {
        (Method::Model(p), Precision::F32) => Some(p.cast()),
        _ => None,
    };
    let results: Vec<Result<CaseResult>> = cases
        .par_iter()
        .map(|(ti, case)| {
            let task = &tasks[*ti];
            match method {
                Method::Model(p) => match &w32 {
                    Some(w) => model_case(&p.config, w, task, case, spec, res, tok),
                    None => model_case(&p.config, &p.data, task, case, spec, res, tok),
                },
                Method::Knn => knn_case(task, case, spec),
            }
        })
        .collect();

    let mut out = EvalOutput::default();
    for ((ti, case), r) in cases.iter().zip(results) {
        let r = r?;
        let task = &tasks[*ti];
        out.predictions.extend(r.predictions);
        let key = cell_key(case.template, case.n_context);
        if !task.kind.is_classification() {
            let e = out.parse_failures.entry(key).or_default();
            e.0 += r.parse.0;
            e.1 += r.parse.1;
        }
        match r.metric {
            Some(value) if !r.skipped => {
                let m = CaseMetric {
                    method: format!("{label}/{}", case.template),
                    dataset: task.id.clone(),
                    n_context: case.n_context,
                    seed: case.seed,
                    value,
                };
                if task.kind.is_classification() {
                    out.auroc.push(m);
                } else {
                    out.nmae.push(m);
                }
            }
            _ => out.skipped.push(case.case_id.clone()),
        }
    }
    Ok(out)
}

/// Demonstrations and query rows of an evaluation case.
fn case_context(task: &TabularTask, case: &CaseSpec, spec: &EvalSpec) -> Result<ContextSet> {
    let (pool, eval) = split_rows(task, SPLIT_SEED, spec.queries.for_kind(task.kind))?;
    Ok(context_for_case(task, case, &pool, eval, spec.demo_order)?.0)
}

fn case_metric(task: &TabularTask, queries: &[usize], predictions: &[PredictionRecord]) -> Result<Option<f64>> {
    match task.kind {
        TaskKind::Classification { .. } => {
            let probs: Vec<Vec<f64>> = predictions
                .iter()
                .map(|p| match &p.outcome {
                    Outcome::Probs(v) => v.clone(),
                    _ => Vec::new(),
                })
                .collect();
            let labels: Vec<usize> = queries.iter().map(|&q| task.rows[q].label.class().unwrap_or(0)).collect();
            match auroc_multiclass(&probs, &labels) {
                Ok(v) => Ok(Some(v)),
                Err(gtl_core::Error::SingleClass) => Ok(None),
                Err(e) => Err(e.into()),
            }
        }
        TaskKind::Regression => {
            let preds: Vec<Option<f64>> = predictions.iter().map(|p| p.outcome.value()).collect();
            let truths: Vec<f64> = predictions.iter().map(|p| p.truth).collect();
            // normalized by the label range of the evaluated rows
            let range = truths
                .iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
            match nmae(&preds, &truths, range) {
                Ok(v) => Ok(Some(v)),
                Err(gtl_core::Error::DegenerateRange(_)) => Ok(None),
                Err(e) => Err(e.into()),
            }
        }
    }
}

fn model_case<F: Real>(
    config: &gtl_core::model::ModelConfig,
    w: &[F],
    task: &TabularTask,
    case: &CaseSpec,
    spec: &EvalSpec,
    res: &TemplateResource,
    tok: &TokenizerSpec,
) -> Result<CaseResult> {
    let ctx = case_context(task, case, spec)?;
    let samples = render_case(case, &ctx, task, RenderMode::Inference, res)?;
    let queries = ctx.query_rows;
    let answer_room = match task.n_classes() {
        Some(c) => c.to_string().len() + 1,
        None => spec.decode_steps,
    };
    let too_long = samples
        .iter()
        .map(|s| prompt_ids(s, tok).map(|ids| ids.len() + answer_room > config.max_positions))
        .collect::<gtl_core::Result<Vec<bool>>>()?
        .into_iter()
        .any(|b| b);
    if too_long {
        return Ok(CaseResult {
            predictions: Vec::new(),
            metric: None,
            skipped: true,
            parse: (0, 0),
        });
    }
    let mut session = Session::new(config, w)?;
    let mut predictions = Vec::with_capacity(samples.len());
    let mut fails = 0;
    for (qi, (s, &q)) in samples.iter().zip(&queries).enumerate() {
        let outcome = match task.n_classes() {
            Some(c) => Outcome::Probs(predict_classification(&mut session, s, c, tok)?),
            None => predict_regression(&mut session, s, spec.decode_steps, tok)?,
        };
        if matches!(outcome, Outcome::ParseFail(_)) {
            fails += 1;
        }
        predictions.push(PredictionRecord {
            case_id: case.case_id.clone(),
            seed: case.seed,
            query_index: qi,
            outcome,
            truth: task.rows[q].label.as_f64(),
        });
    }
    let metric = case_metric(task, &queries, &predictions)?;
    let parse = if task.n_classes().is_none() {
        (fails, predictions.len())
    } else {
        (0, 0)
    };
    Ok(CaseResult {
        predictions,
        metric,
        skipped: false,
        parse,
    })
}

/// Per-column scale for neighbour distances: numeric ranges over the task.
fn column_scales(task: &TabularTask) -> Vec<f64> {
    (0..task.n_features())
        .map(|j| {
            let vals = task.rows.iter().filter_map(|r| match &r.values[j] {
                Cell::Num(x) => Some(*x),
                _ => None,
            });
            let (lo, hi) = vals.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
            if hi > lo {
                hi - lo
            } else {
                1.0
            }
        })
        .collect()
}

fn distance(a: &[Cell], b: &[Cell], scales: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .zip(scales)
        .map(|((x, y), s)| match (x, y) {
            (Cell::Num(x), Cell::Num(y)) => (x - y).abs() / s,
            (Cell::Cat(x), Cell::Cat(y)) if x == y => 0.0,
            _ => 1.0,
        })
        .sum()
}

/// Neighbours considered by the kNN reference.
pub const KNN_K: usize = 5;

fn knn_case(task: &TabularTask, case: &CaseSpec, spec: &EvalSpec) -> Result<CaseResult> {
    let ContextSet {
        examples: demos,
        query_rows: queries,
        ..
    } = case_context(task, case, spec)?;
    let scales = column_scales(task);
    let k = KNN_K.min(demos.len());
    let predictions: Vec<PredictionRecord> = queries
        .iter()
        .enumerate()
        .map(|(qi, &q)| {
            let mut near: Vec<(f64, usize)> = demos
                .iter()
                .map(|&d| (distance(&task.rows[q].values, &task.rows[d].values, &scales), d))
                .collect();
            near.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            let near = &near[..k];
            let outcome = match task.n_classes() {
                Some(c) => {
                    let mut p = vec![0.0; c];
                    for (_, d) in near {
                        if let Label::Class(l) = task.rows[*d].label {
                            p[l] += 1.0 / k as f64;
                        }
                    }
                    Outcome::Probs(p)
                }
                None => Outcome::Prediction(near.iter().map(|(_, d)| task.rows[*d].label.as_f64()).sum::<f64>() / k as f64),
            };
            PredictionRecord {
                case_id: case.case_id.clone(),
                seed: case.seed,
                query_index: qi,
                outcome,
                truth: task.rows[q].label.as_f64(),
            }
        })
        .collect();
    let metric = case_metric(task, &queries, &predictions)?;
    let parse = if task.n_classes().is_none() { (0, predictions.len()) } else { (0, 0) };
    Ok(CaseResult {
        predictions,
        metric,
        skipped: false,
        parse,
    })
}

/// Mean of case metrics at one context count.
pub fn mean_at(metrics: &[CaseMetric], n: usize) -> Option<f64> {
    let v: Vec<f64> = metrics.iter().filter(|m| m.n_context == n).map(|m| m.value).collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}
