//! Metrics, prediction harness and report aggregation.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Real;
use crate::model::{class_scores, greedy_decode, Session};
use crate::templating::RenderedSample;
use crate::tokenization::TokenizerSpec;

/// Area under the ROC curve in Mann-Whitney form: the probability that a
/// random positive outscores a random negative, ties counting one half.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Shape(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::SingleClass);
    }
    if let Some(&bad) = scores.iter().find(|s| s.is_nan()) {
        return Err(Error::NonFiniteValue(bad));
    }
    // midranks over the sorted scores
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let midrank = (i + j) as f64 / 2.0 + 1.0;
        rank_sum_pos += midrank * order[i..=j].iter().filter(|&&k| labels[k]).count() as f64;
        i = j + 1;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos * n_neg) as f64)
}

/// Macro one-vs-rest AUROC over the classes that occur among the labels
/// (a class needs at least one positive and one negative to count).
pub fn auroc_multiclass(probs: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    if probs.len() != labels.len() {
        return Err(Error::Shape(format!("{} predictions for {} labels", probs.len(), labels.len())));
    }
    let n_classes = probs.first().map_or(0, Vec::len);
    if probs.iter().any(|p| p.len() != n_classes) {
        return Err(Error::Shape("ragged probability vectors".into()));
    }
    if n_classes == 2 {
        let scores: Vec<f64> = probs.iter().map(|p| p[1]).collect();
        let pos: Vec<bool> = labels.iter().map(|&l| l == 1).collect();
        return auroc(&scores, &pos);
    }
    let mut total = 0.0;
    let mut counted = 0;
    for c in 0..n_classes {
        let pos: Vec<bool> = labels.iter().map(|&l| l == c).collect();
        let n_pos = pos.iter().filter(|&&p| p).count();
        if n_pos == 0 || n_pos == pos.len() {
            continue;
        }
        let scores: Vec<f64> = probs.iter().map(|p| p[c]).collect();
        total += auroc(&scores, &pos)?;
        counted += 1;
    }
    if counted == 0 {
        return Err(Error::SingleClass);
    }
    Ok(total / counted as f64)
}

/// How absolute errors are normalized.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NmaeNormalizer {
    /// max - min of the ground truth
    #[default]
    Range,
    /// population standard deviation of the ground truth
    Std,
    /// mean absolute value of the ground truth
    MeanAbs,
}

pub fn normalizer(truths: &[f64], kind: NmaeNormalizer) -> Result<f64> {
    if truths.is_empty() {
        return Err(Error::Empty("ground truth"));
    }
    let n = truths.len() as f64;
    let value = match kind {
        NmaeNormalizer::Range => {
            let max = truths.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let min = truths.iter().copied().fold(f64::INFINITY, f64::min);
            max - min
        }
        NmaeNormalizer::Std => {
            let mean = truths.iter().sum::<f64>() / n;
            (truths.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / n).sqrt()
        }
        NmaeNormalizer::MeanAbs => truths.iter().map(|t| t.abs()).sum::<f64>() / n,
    };
    if value > 0.0 && value.is_finite() {
        Ok(value)
    } else {
        Err(Error::DegenerateRange(truths[0]))
    }
}

/// Mean over queries of `min(1, |pred - truth| / scale)`; a missing
/// prediction (parse failure) contributes 1.
pub fn nmae_scaled(preds: &[Option<f64>], truths: &[f64], scale: f64) -> Result<f64> {
    if preds.len() != truths.len() {
        return Err(Error::Shape(format!("{} predictions for {} truths", preds.len(), truths.len())));
    }
    if truths.is_empty() {
        return Err(Error::Empty("predictions"));
    }
    if !(scale > 0.0) {
        return Err(Error::DegenerateRange(scale));
    }
    let total: f64 = preds
        .iter()
        .zip(truths)
        .map(|(p, t)| match p {
            Some(p) if p.is_finite() => ((p - t).abs() / scale).min(1.0),
            _ => 1.0,
        })
        .sum();
    Ok(total / truths.len() as f64)
}

/// NMAE normalized by `max - min` of the supplied label range.
pub fn nmae(preds: &[Option<f64>], truths: &[f64], label_range: (f64, f64)) -> Result<f64> {
    let (lo, hi) = label_range;
    if !(hi > lo) {
        return Err(Error::DegenerateRange(lo));
    }
    nmae_scaled(preds, truths, hi - lo)
}

/// Parse a decoded number: optional sign, digits with optional comma
/// thousands grouping, optional fraction, optional exponent. Surrounding
/// whitespace is ignored; anything else fails.
pub fn parse_numeric(text: &str) -> Option<f64> {
    let s = text.trim();
    let b = s.as_bytes();
    let mut i = 0;
    let mut clean = String::with_capacity(s.len());
    if i < b.len() && (b[i] == b'+' || b[i] == b'-') {
        clean.push(b[i] as char);
        i += 1;
    }
    let int_start = i;
    while i < b.len() && (b[i].is_ascii_digit() || b[i] == b',') {
        i += 1;
    }
    let int_part = &s[int_start..i];
    if int_part.contains(',') {
        let groups: Vec<&str> = int_part.split(',').collect();
        let first_ok = (1..=3).contains(&groups[0].len());
        if !first_ok || groups[1..].iter().any(|g| g.len() != 3) {
            return None;
        }
    }
    let int_digits: String = int_part.chars().filter(|c| *c != ',').collect();
    clean.push_str(&int_digits);
    let mut frac_digits = 0;
    if i < b.len() && b[i] == b'.' {
        clean.push('.');
        i += 1;
        while i < b.len() && b[i].is_ascii_digit() {
            clean.push(b[i] as char);
            frac_digits += 1;
            i += 1;
        }
    }
    if int_digits.is_empty() && frac_digits == 0 {
        return None;
    }
    if i < b.len() && (b[i] == b'e' || b[i] == b'E') {
        clean.push('e');
        i += 1;
        if i < b.len() && (b[i] == b'+' || b[i] == b'-') {
            clean.push(b[i] as char);
            i += 1;
        }
        let start = i;
        while i < b.len() && b[i].is_ascii_digit() {
            clean.push(b[i] as char);
            i += 1;
        }
        if i == start {
            return None;
        }
    }
    if i != b.len() {
        return None;
    }
    clean.parse::<f64>().ok().filter(|v| v.is_finite())
}

/// Per-query model output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Probs(Vec<f64>),
    Prediction(f64),
    /// Decoded text that did not parse as a number.
    ParseFail(String),
}

impl Outcome {
    pub fn value(&self) -> Option<f64> {
        match self {
            Outcome::Prediction(v) => Some(*v),
            _ => None,
        }
    }
}

/// One line of a predictions file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub case_id: String,
    pub seed: u64,
    pub query_index: usize,
    #[serde(flatten)]
    pub outcome: Outcome,
    pub truth: f64,
}

/// Token ids of a prompt up to the answer slot, with the begin token.
pub fn prompt_ids(sample: &RenderedSample, tok: &TokenizerSpec) -> Result<Vec<u32>> {
    let mut ids = vec![tok.begin()];
    ids.extend(tok.encode(&sample.prompt_prefix())?);
    Ok(ids)
}

/// Class verbalizations: the decimal class index followed by end-of-answer.
pub fn class_verbalizations(n_classes: usize, tok: &TokenizerSpec) -> Result<Vec<Vec<u32>>> {
    (0..n_classes)
        .map(|c| {
            let mut ids = tok.encode(&c.to_string())?;
            ids.push(tok.end_of_answer());
            Ok(ids)
        })
        .collect()
}

/// Class probabilities for an inference-mode prompt.
pub fn predict_classification<F: Real>(
    session: &mut Session<'_, F>,
    sample: &RenderedSample,
    n_classes: usize,
    tok: &TokenizerSpec,
) -> Result<Vec<f64>> {
    let prefix = prompt_ids(sample, tok)?;
    class_scores(session, &prefix, &class_verbalizations(n_classes, tok)?)
}

/// Greedy-decode an answer and parse it as a number.
pub fn predict_regression<F: Real>(
    session: &mut Session<'_, F>,
    sample: &RenderedSample,
    decode_steps: usize,
    tok: &TokenizerSpec,
) -> Result<Outcome> {
    let prefix = prompt_ids(sample, tok)?;
    let out = greedy_decode(session, &prefix, decode_steps, tok.end_of_answer())?;
    let text = tok.decode(&out);
    Ok(match parse_numeric(&text) {
        Some(v) => Outcome::Prediction(v),
        None => Outcome::ParseFail(text),
    })
}

/// Linear-interpolation percentile of sorted data, `q` in [0, 1].
pub fn percentile(sorted: &[f64], q: f64) -> Result<f64> {
    if sorted.is_empty() {
        return Err(Error::Empty("percentile input"));
    }
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    Ok(sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64))
}

/// Average ranks (1 = best) with ties sharing the mean of their positions.
pub fn average_ranks(values: &[f64], higher_is_better: bool) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| {
        let c = values[a].total_cmp(&values[b]);
        if higher_is_better {
            c.reverse()
        } else {
            c
        }
    });
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Metric of one evaluated case (one task, context count and seed).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseMetric {
    pub method: String,
    pub dataset: String,
    pub n_context: usize,
    pub seed: u64,
    pub value: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub mean: f64,
    pub p25: f64,
    pub p75: f64,
    pub n_datasets: usize,
}

impl Cell {
    pub fn from_values(values: &[f64]) -> Result<Cell> {
        if values.is_empty() {
            return Err(Error::EmptyCell("no datasets".into()));
        }
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        Ok(Cell {
            mean: values.iter().sum::<f64>() / values.len() as f64,
            p25: percentile(&sorted, 0.25)?,
            p75: percentile(&sorted, 0.75)?,
            n_datasets: values.len(),
        })
    }

    /// `mean_[p25, p75]` with three decimals.
    pub fn format(&self) -> String {
        format!("{:.3}_[{:.3}, {:.3}]", self.mean, self.p25, self.p75)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub metric: String,
    pub higher_is_better: bool,
    pub context_counts: Vec<usize>,
    /// (method, n_context) -> cell
    pub cells: BTreeMap<String, BTreeMap<usize, Cell>>,
    /// Average rank over datasets at n_context = 0.
    pub rank_zero_shot: BTreeMap<String, f64>,
    /// Average rank over (dataset, n_context > 0).
    pub rank_in_context: BTreeMap<String, f64>,
}

/// Per-dataset means over seeds: (method, n_context) -> dataset -> value.
pub fn dataset_means(metrics: &[CaseMetric]) -> BTreeMap<(String, usize), BTreeMap<String, f64>> {
    let mut sums: BTreeMap<(String, usize), BTreeMap<String, (f64, usize)>> = BTreeMap::new();
    for m in metrics {
        let e = sums
            .entry((m.method.clone(), m.n_context))
            .or_default()
            .entry(m.dataset.clone())
            .or_default();
        e.0 += m.value;
        e.1 += 1;
    }
    sums.into_iter()
        .map(|(k, ds)| (k, ds.into_iter().map(|(d, (s, n))| (d, s / n as f64)).collect()))
        .collect()
}

pub fn aggregate(metric: &str, metrics: &[CaseMetric], higher_is_better: bool) -> Result<EvalReport> {
    if metrics.is_empty() {
        return Err(Error::EmptyCell(metric.to_string()));
    }
    let per_dataset = dataset_means(metrics);
    let mut cells: BTreeMap<String, BTreeMap<usize, Cell>> = BTreeMap::new();
    for ((method, n), ds) in &per_dataset {
        let values: Vec<f64> = ds.values().copied().collect();
        cells.entry(method.clone()).or_default().insert(*n, Cell::from_values(&values)?);
    }
    let context_counts: Vec<usize> = per_dataset.keys().map(|(_, n)| *n).collect::<BTreeSet<_>>().into_iter().collect();
    let datasets: BTreeSet<&String> = metrics.iter().map(|m| &m.dataset).collect();
    let methods: Vec<&String> = cells.keys().collect();

    let rank_over = |ns: &[usize]| -> BTreeMap<String, f64> {
        // methods covering every (dataset, n) in the compared cells
        let complete: Vec<&String> = methods
            .iter()
            .copied()
            .filter(|m| {
                ns.iter().all(|n| {
                    per_dataset
                        .get(&((*m).clone(), *n))
                        .is_some_and(|ds| datasets.iter().all(|d| ds.contains_key(*d)))
                })
            })
            .collect();
        let mut sums: BTreeMap<String, (f64, usize)> = BTreeMap::new();
        if complete.is_empty() || ns.is_empty() {
            return BTreeMap::new();
        }
        for n in ns {
            for d in &datasets {
                let values: Vec<f64> = complete.iter().map(|m| per_dataset[&((*m).clone(), *n)][*d]).collect();
                for (m, r) in complete.iter().zip(average_ranks(&values, higher_is_better)) {
                    let e = sums.entry((*m).clone()).or_default();
                    e.0 += r;
                    e.1 += 1;
                }
            }
        }
        sums.into_iter().map(|(m, (s, c))| (m, s / c as f64)).collect()
    };
    let zero: Vec<usize> = context_counts.iter().copied().filter(|&n| n == 0).collect();
    let icl: Vec<usize> = context_counts.iter().copied().filter(|&n| n > 0).collect();
    Ok(EvalReport {
        metric: metric.to_string(),
        higher_is_better,
        context_counts,
        rank_zero_shot: rank_over(&zero),
        rank_in_context: rank_over(&icl),
        cells,
    })
}

/// Placeholder for a missing Markdown cell.
pub const MISSING_CELL: &str = "\u{2212}";

impl EvalReport {
    /// Tab-separated table, one row per method; missing cells are empty.
    pub fn to_tsv(&self) -> String {
        self.table(false)
    }

    pub fn to_markdown(&self) -> String {
        self.table(true)
    }

    fn table(&self, markdown: bool) -> String {
        let mut header = vec!["method".to_string()];
        header.extend(self.context_counts.iter().map(|n| format!("n={n}")));
        header.push("Rank_z".into());
        header.push("Rank_i".into());
        let mut out = String::new();
        let write_row = |out: &mut String, fields: &[String]| {
            if markdown {
                let _ = writeln!(out, "| {} |", fields.join(" | "));
            } else {
                let _ = writeln!(out, "{}", fields.join("\t"));
            }
        };
        write_row(&mut out, &header);
        if markdown {
            write_row(&mut out, &vec!["---".to_string(); header.len()]);
        }
        let missing = || if markdown { MISSING_CELL.to_string() } else { String::new() };
        for (method, row) in &self.cells {
            let mut fields = vec![method.clone()];
            for n in &self.context_counts {
                fields.push(row.get(n).map_or_else(missing, Cell::format));
            }
            for ranks in [&self.rank_zero_shot, &self.rank_in_context] {
                fields.push(ranks.get(method).map_or_else(missing, |r| format!("{r:.2}")));
            }
            write_row(&mut out, &fields);
        }
        out
    }
}
