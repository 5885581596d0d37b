//! Acceptance suite. Runs criteria 1-11, prints one PASS/FAIL line per
//! criterion and exits non-zero if any of them fails.
//!
//! `GTL_ACCEPTANCE_ONLY=1,2,7` restricts the run to the listed criteria.
//! The in-context learning criteria (7 and 8) cache their run directories
//! under the cargo target tmp dir; a rerun reuses the trained checkpoint.

use std::collections::BTreeSet;
use std::fs;
use std::panic::{self, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::sync::OnceLock;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;

use gtl_core::evaluation::{auroc, auroc_multiclass, nmae};
use gtl_core::model::{self, ModelConfig, Params, SeqRef};
use gtl_core::objective::{build_loss_mask, CorpusRecord, MaskOptions};
use gtl_core::rng::rng_for;
use gtl_core::sampler::{enumerate_cases, DemoOrder, Split, CONTEXT_COUNTS};
use gtl_core::synthbench::{build_suite, SuiteConfig};
use gtl_core::tabular::{derive_tasks, Cell, FeatureKind, FeatureSpec, Label, Row, TabularTask, TaskKind, TaskMeta};
use gtl_core::templating::{answer_text, format_value, render, RenderMode, RenderedSample, Role, Template, TemplateResource};
use gtl_core::tokenization::{tokenize_with_spans, TokenizerSpec};
use gtl_core::trainer::{train, EvalPoint, Precision, TrainConfig};

use gtl_forge::commands::{cmd_build_corpus, cmd_evaluate, cmd_train, EvalSummary, TrainTiming, CORPUS_FILE, SUMMARY_FILE};
use gtl_forge::config::{BuildCorpusConfig, DataSource, EvaluateConfig, ModelSource, RunConfig, TrainRunConfig};
use gtl_forge::pipeline::{build_corpus, CorpusSpec, EvalSpec};

struct Verdict {
    pass: bool,
    detail: String,
}

impl Verdict {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Verdict {
            pass,
            detail: detail.into(),
        }
    }
}

const RENDER_SAMPLES: usize = 1000;

const WORDS: [&str; 12] = [
    "red", "light blue", "oak", "café", "north-east", "x", "Grade A", "n/a value", "über", "yes", "no", "42nd street",
];

fn random_cell(kind: FeatureKind, rng: &mut impl Rng) -> Cell {
    if rng.random_bool(0.05) {
        return Cell::Missing;
    }
    match kind {
        FeatureKind::Categorical => Cell::Cat(WORDS[rng.random_range(0..WORDS.len())].to_string()),
        FeatureKind::Numerical => Cell::Num(match rng.random_range(0..5) {
            0 => rng.random_range(-1000..1000) as f64,
            1 => rng.random_range(-50.0..50.0),
            2 => rng.random_range(-1.0..1.0) * 1e-5,
            3 => rng.random_range(1.0..9.0) * 1e8,
            _ => rng.random_range(0..5) as f64,
        }),
    }
}

/// A task with mixed feature kinds, missing cells and either label kind.
fn random_task(id: usize, n_rows: usize, rng: &mut impl Rng) -> TabularTask {
    let m = rng.random_range(1..=6);
    let features: Vec<FeatureSpec> = (0..m)
        .map(|j| {
            let kind = if rng.random_bool(0.5) {
                FeatureKind::Numerical
            } else {
                FeatureKind::Categorical
            };
            let desc = rng.random_bool(0.5).then(|| format!("measured quantity {j}"));
            FeatureSpec::new(format!("col_{j}"), kind, desc.as_deref())
        })
        .collect();
    let classes = rng.random_range(2..=4);
    let kind = if rng.random_bool(0.5) {
        TaskKind::Classification { classes }
    } else {
        TaskKind::Regression
    };
    let rows = (0..n_rows)
        .map(|_| Row {
            values: features.iter().map(|f| random_cell(f.kind, rng)).collect(),
            label: match kind {
                TaskKind::Classification { classes } => Label::Class(rng.random_range(0..classes)),
                TaskKind::Regression => Label::Value(rng.random_range(-100.0..100.0_f64).round() / 4.0),
            },
        })
        .collect();
    TabularTask {
        id: format!("random-{id}"),
        features,
        rows,
        kind,
        meta: TaskMeta {
            background: rng.random_bool(0.5).then(|| format!("Records of experiment {id}.")),
            label_description: rng.random_bool(0.5).then(|| "the outcome".to_string()),
            class_names: match kind {
                TaskKind::Classification { classes } => (0..classes).map(|c| format!("kind {c}")).collect(),
                TaskKind::Regression => Vec::new(),
            },
            label_name: "outcome".into(),
        },
    }
}

/// Rendered samples for criteria 1 and 2, with the expected value strings
/// of every supervised span in document order.
fn render_fixtures() -> &'static Vec<(RenderedSample, Vec<String>)> {
    static FIXTURES: OnceLock<Vec<(RenderedSample, Vec<String>)>> = OnceLock::new();
    FIXTURES.get_or_init(|| {
        let res = TemplateResource::builtin();
        let mut rng = rng_for(7, &["acceptance", "render"]);
        (0..RENDER_SAMPLES)
            .map(|i| {
                let template = Template::ALL[i % 3];
                let n = CONTEXT_COUNTS[(i / 3) % CONTEXT_COUNTS.len()];
                let task = random_task(i, n + 1, &mut rng);
                let mut order: Vec<usize> = (0..=n).collect();
                order.shuffle(&mut rng);
                let (query, demos) = (order[0], &order[1..]);
                let demo_rows: Vec<&Row> = demos.iter().map(|&d| &task.rows[d]).collect();
                let mode = if rng.random_bool(0.75) {
                    RenderMode::Train
                } else {
                    RenderMode::Inference
                };
                let sample = render(template, &task, &demo_rows, &task.rows[query], mode, &res).unwrap();
                let mut expected = Vec::new();
                for (k, row) in demo_rows.iter().copied().chain([&task.rows[query]]).enumerate() {
                    expected.extend(row.values.iter().map(|c| format_value(c).unwrap()));
                    if k < n || mode == RenderMode::Train {
                        expected.push(answer_text(&row.label).unwrap());
                    }
                }
                (sample, expected)
            })
            .collect()
    })
}

fn criterion_1() -> Verdict {
    let tok = TokenizerSpec::ByteLevel;
    let mut violations = 0usize;
    let mut positions = 0usize;
    for (sample, _) in render_fixtures() {
        let text = sample.text();
        let mut byte_role = vec![Role::Meta; text.len()];
        let mut byte_query = vec![false; text.len()];
        for s in sample.spans() {
            byte_role[s.start..s.end].fill(s.role);
            byte_query[s.start..s.end].fill(s.in_query);
        }
        // Byte-level ids: begin token, one id per byte, then end-of-answer
        // in training mode, which belongs to the query target.
        let mut role = vec![Role::Meta];
        let mut in_query = vec![false];
        role.extend(&byte_role);
        in_query.extend(&byte_query);
        if sample.mode == RenderMode::Train {
            role.push(Role::Target);
            in_query.push(true);
        }
        let tokenized = tokenize_with_spans(sample, &tok).unwrap();
        if tokenized.len() != role.len() {
            violations += 1;
            continue;
        }
        for (opts, query_only) in [(MaskOptions::default(), false), (MaskOptions { supervise_demonstrations: false }, true)] {
            let mask = build_loss_mask(&tokenized, opts);
            for p in 0..role.len() {
                let expected =
                    p + 1 < role.len() && matches!(role[p + 1], Role::FeatureValue | Role::Target) && (!query_only || in_query[p + 1]);
                positions += 1;
                if mask.0.get(p) != Some(&expected) {
                    violations += 1;
                }
            }
            if mask.len() != role.len() {
                violations += 1;
            }
        }
    }
    Verdict::new(
        violations == 0,
        format!("{violations} violations over {} samples ({positions} positions)", render_fixtures().len()),
    )
}

fn criterion_2() -> Verdict {
    let tok = TokenizerSpec::ByteLevel;
    let mut violations = 0usize;
    let mut spans_checked = 0usize;
    for (sample, expected) in render_fixtures() {
        let text = sample.text();
        let char_spans: Vec<_> = sample.spans().into_iter().filter(|s| s.role.is_supervised()).collect();
        let tokenized = tokenize_with_spans(sample, &tok).unwrap();
        let token_spans: Vec<_> = tokenized.spans.iter().filter(|s| s.role.is_supervised()).collect();
        if char_spans.len() != expected.len() || token_spans.len() != expected.len() {
            violations += 1;
            continue;
        }
        for ((c, t), want) in char_spans.iter().zip(&token_spans).zip(expected) {
            spans_checked += 1;
            if &text[c.start..c.end] != want {
                violations += 1;
            }
            if tok.decode(&tokenized.token_ids[t.start..t.end]) != *want {
                violations += 1;
            }
        }
    }
    Verdict::new(violations == 0, format!("{violations} violations over {spans_checked} spans"))
}

/// Pairwise AUROC with ties counted one half.
fn brute_auroc(scores: &[f64], labels: &[bool]) -> f64 {
    let mut wins = 0.0;
    let mut pairs = 0.0;
    for (i, &si) in scores.iter().enumerate() {
        for (j, &sj) in scores.iter().enumerate() {
            if labels[i] && !labels[j] {
                pairs += 1.0;
                if si > sj {
                    wins += 1.0;
                } else if si == sj {
                    wins += 0.5;
                }
            }
        }
    }
    wins / pairs
}

fn criterion_3() -> Verdict {
    let mut rng = rng_for(3, &["acceptance", "metrics"]);
    let mut auroc_err = 0.0f64;
    for i in 0..1000 {
        let n = rng.random_range(2..=50);
        let mut labels: Vec<bool> = (0..n).map(|_| rng.random_bool(0.5)).collect();
        labels[0] = true;
        labels[1] = false;
        labels.shuffle(&mut rng);
        // Coarse scores force ties on half of the instances.
        let scores: Vec<f64> = (0..n)
            .map(|_| if i % 2 == 0 { rng.random_range(0..4) as f64 } else { rng.random::<f64>() })
            .collect();
        auroc_err = auroc_err.max((auroc(&scores, &labels).unwrap() - brute_auroc(&scores, &labels)).abs());

        let k = rng.random_range(3..=5);
        let mut classes: Vec<usize> = (0..n.max(k)).map(|j| if j < k { j } else { rng.random_range(0..k) }).collect();
        classes.shuffle(&mut rng);
        let probs: Vec<Vec<f64>> = classes
            .iter()
            .map(|_| (0..k).map(|_| rng.random_range(0..3) as f64 / 2.0).collect())
            .collect();
        let macro_ovr: f64 = (0..k)
            .map(|c| {
                let s: Vec<f64> = probs.iter().map(|p| p[c]).collect();
                let l: Vec<bool> = classes.iter().map(|&y| y == c).collect();
                brute_auroc(&s, &l)
            })
            .sum::<f64>()
            / k as f64;
        auroc_err = auroc_err.max((auroc_multiclass(&probs, &classes).unwrap() - macro_ovr).abs());
    }

    let mut nmae_err = 0.0f64;
    for _ in 0..1000 {
        let n = rng.random_range(2..=50);
        let truths: Vec<f64> = (0..n).map(|_| rng.random_range(-10.0..10.0)).collect();
        let preds: Vec<Option<f64>> = truths
            .iter()
            .map(|t| rng.random_bool(0.9).then(|| t + rng.random_range(-30.0..30.0)))
            .collect();
        let lo = truths.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = truths.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let by_hand: f64 = preds
            .iter()
            .zip(&truths)
            .map(|(p, t)| match p {
                Some(p) => {
                    let e = (p - t).abs() / (hi - lo);
                    if e > 1.0 {
                        1.0
                    } else {
                        e
                    }
                }
                None => 1.0,
            })
            .sum::<f64>()
            / n as f64;
        nmae_err = nmae_err.max((nmae(&preds, &truths, (lo, hi)).unwrap() - by_hand).abs());
    }

    let truths = [0.0, 1.0, 2.0, 3.0];
    let adversarial = [Some(1e300), Some(-1e300), Some(f64::INFINITY), Some(f64::NEG_INFINITY)];
    let capped = nmae(&adversarial, &truths, (0.0, 3.0)).unwrap();
    let half = nmae(&[Some(1e12), Some(1.0), Some(2.0), Some(3.0)], &truths, (0.0, 3.0)).unwrap();
    let pass = auroc_err <= 1e-12 && nmae_err <= 1e-12 && capped == 1.0 && half == 0.25;
    Verdict::new(
        pass,
        format!("max |auroc - brute| {auroc_err:.1e}, max |nmae - hand| {nmae_err:.1e}, adversarial nmae {capped} and {half}"),
    )
}

fn random_batch(cfg: &ModelConfig, rng: &mut impl Rng) -> (Vec<Vec<u32>>, Vec<Vec<bool>>) {
    let b = rng.random_range(1..=3);
    (0..b)
        .map(|_| {
            let len = rng.random_range(8..=48);
            let ids: Vec<u32> = (0..len).map(|_| rng.random_range(0..cfg.vocab as u32)).collect();
            let mut mask: Vec<bool> = (0..len).map(|p| p + 1 < len && rng.random_bool(0.6)).collect();
            mask[0] = true;
            (ids, mask)
        })
        .unzip()
}

fn criterion_4() -> Verdict {
    let started = Instant::now();
    let cfg = ModelConfig::default();
    let mut params = Params::init(&cfg).unwrap();
    let mut rng = rng_for(4, &["acceptance", "gradcheck"]);
    // Move layer-norm gains and biases off their initial constants so every
    // parameter group carries a generic gradient.
    for w in params.data.iter_mut() {
        *w += rng.random_range(-0.02..0.02);
    }
    let loss_at = |w: &[f64], ids: &[Vec<u32>], masks: &[Vec<bool>]| -> f64 {
        let batch: Vec<SeqRef> = ids.iter().zip(masks).map(|(i, m)| SeqRef { ids: i, mask: m }).collect();
        model::batch_loss::<f64>(&cfg, w, &batch).unwrap()
    };
    let mut worst = 0.0f64;
    let mut checked = 0;
    for _ in 0..5 {
        let (ids, masks) = random_batch(&cfg, &mut rng);
        let batch: Vec<SeqRef> = ids.iter().zip(&masks).map(|(i, m)| SeqRef { ids: i, mask: m }).collect();
        let (_, grad) = model::grad(&params, &batch).unwrap();
        for _ in 0..50 {
            let k = rng.random_range(0..params.data.len());
            // Richardson-extrapolated central differences, fourth order in h.
            let central = |h: f64, w: &mut Vec<f64>| {
                let orig = w[k];
                w[k] = orig + h;
                let up = loss_at(w, &ids, &masks);
                w[k] = orig - h;
                let down = loss_at(w, &ids, &masks);
                w[k] = orig;
                (up - down) / (2.0 * h)
            };
            let h = 1e-3;
            let numeric = (4.0 * central(h / 2.0, &mut params.data) - central(h, &mut params.data)) / 3.0;
            let denom = grad[k].abs().max(numeric.abs()).max(1e-6);
            worst = worst.max((grad[k] - numeric).abs() / denom);
            checked += 1;
        }
    }
    let secs = started.elapsed().as_secs_f64();
    Verdict::new(
        worst < 1e-4 && secs < 120.0,
        format!("max relative error {worst:.2e} over {checked} coordinates in {secs:.1}s"),
    )
}

fn criterion_5() -> Verdict {
    let cfg = ModelConfig::default();
    let params = Params::init(&cfg).unwrap();
    let w32: Vec<f32> = params.cast();
    let mut rng = rng_for(5, &["acceptance", "causality"]);
    let v = cfg.vocab;
    let mut broken = 0;
    for trial in 0..100 {
        let len = rng.random_range(2..=160);
        let ids: Vec<u32> = (0..len).map(|_| rng.random_range(0..v as u32)).collect();
        let j = rng.random_range(0..len);
        let mut changed = ids.clone();
        changed[j] = (ids[j] + rng.random_range(1..v as u32)) % v as u32;
        let same = if trial % 2 == 0 {
            let a = model::forward::<f64>(&cfg, &params.data, &ids).unwrap();
            let b = model::forward::<f64>(&cfg, &params.data, &changed).unwrap();
            a[..j * v].iter().zip(&b[..j * v]).all(|(x, y)| x.to_bits() == y.to_bits())
        } else {
            let a = model::forward::<f32>(&cfg, &w32, &ids).unwrap();
            let b = model::forward::<f32>(&cfg, &w32, &changed).unwrap();
            a[..j * v].iter().zip(&b[..j * v]).all(|(x, y)| x.to_bits() == y.to_bits())
        };
        if !same {
            broken += 1;
        }
    }
    Verdict::new(broken == 0, format!("{broken} of 100 trials changed a prefix logit"))
}

fn criterion_6() -> Verdict {
    let started = Instant::now();
    let res = TemplateResource::builtin();
    let tok = TokenizerSpec::ByteLevel;
    let mut rng = rng_for(6, &["acceptance", "overfit"]);
    // Eight zero-shot samples whose headers differ in width, so every
    // supervised token is determined by its prefix.
    let records: Vec<CorpusRecord> = (0..8)
        .map(|i| {
            let mut task = random_task(i, 1, &mut rng);
            task.features = (0..=i).map(|j| FeatureSpec::new(format!("c{j}"), FeatureKind::Numerical, None)).collect();
            task.rows[0].values = (0..=i).map(|_| Cell::Num(rng.random_range(0..100) as f64)).collect();
            let sample = render(Template::Anony, &task, &[], &task.rows[0], RenderMode::Train, &res).unwrap();
            CorpusRecord::new(tokenize_with_spans(&sample, &tok).unwrap(), MaskOptions::default())
        })
        .collect();
    let cfg = TrainConfig {
        learning_rate: 1e-3,
        batch_size: 8,
        max_steps: 500,
        eval_every: 1000,
        precision: Precision::F32,
        checkpoint_every: 0,
        ..TrainConfig::desk()
    };
    let init = Params::init(&ModelConfig::default()).unwrap();
    let outcome = train(&records, init, &cfg, None, &mut |_, _| Ok(Vec::<EvalPoint>::new())).unwrap();
    let batch: Vec<SeqRef> = records.iter().map(|r| SeqRef { ids: &r.token_ids, mask: &r.loss_mask }).collect();
    let loss = model::batch_loss::<f64>(&outcome.params.config, &outcome.params.data, &batch).unwrap();
    let secs = started.elapsed().as_secs_f64();
    Verdict::new(
        loss < 0.05 && secs < 300.0 && outcome.step == 500,
        format!("loss {loss:.4} after {} steps in {secs:.0}s", outcome.step),
    )
}

// Configuration of the in-context learning run behind criteria 7 and 8.
const ICL_TEMPLATE: Template = Template::Anony;
const ICL_TRAIN_COUNTS: [usize; 5] = [0, 4, 8, 16, 32];
const ICL_EVAL_COUNTS: [usize; 4] = [0, 4, 16, 32];
const ICL_SAMPLES_PER_CELL: usize = 64;
const ICL_MAX_LEN: usize = 2048;
const ICL_STEPS: u64 = 6000;
const ICL_BATCH: usize = 8;
const ICL_LR: f64 = 1e-3;
const TRAIN_BUDGET_SECS: f64 = 7200.0;

struct IclRun {
    trained: EvalSummary,
    untrained: EvalSummary,
    train_seconds: f64,
}

fn acceptance_root() -> PathBuf {
    PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance")
}

fn read_summary(dir: &Path) -> Option<EvalSummary> {
    let text = fs::read_to_string(dir.join(SUMMARY_FILE)).ok()?;
    serde_json::from_str(&text).ok()
}

fn icl_run() -> &'static Result<IclRun, String> {
    static RUN: OnceLock<Result<IclRun, String>> = OnceLock::new();
    RUN.get_or_init(|| {
        let root = acceptance_root();
        let run = || -> gtl_forge::Result<IclRun> {
            let build = RunConfig::BuildCorpus(BuildCorpusConfig {
                source: DataSource::Synthetic {
                    suite: SuiteConfig::default(),
                },
                corpus: CorpusSpec {
                    templates: vec![ICL_TEMPLATE],
                    context_counts: ICL_TRAIN_COUNTS.to_vec(),
                    samples_per_cell: ICL_SAMPLES_PER_CELL,
                    max_len: ICL_MAX_LEN,
                    demo_order: DemoOrder::Shuffled,
                    permute_features: true,
                    reflect_numeric: true,
                    ..CorpusSpec::default()
                },
                tokenizer: TokenizerSpec::ByteLevel,
                template_resource: None,
                oracle_draws: 100_000,
            });
            let corpus_dir = build.run_dir(&root)?;
            if !corpus_dir.join(CORPUS_FILE).exists() {
                let RunConfig::BuildCorpus(c) = &build else { unreachable!() };
                cmd_build_corpus(c, &build.prepare(&root)?)?;
            }
            let model = ModelConfig::default();
            let train_cfg = RunConfig::Train(TrainRunConfig {
                corpus_dir: corpus_dir.clone(),
                model: model.clone(),
                train: TrainConfig {
                    learning_rate: ICL_LR,
                    batch_size: ICL_BATCH,
                    max_steps: ICL_STEPS,
                    eval_every: ICL_STEPS,
                    precision: Precision::F32,
                    warmup_steps: 200,
                    grad_clip: Some(1.0),
                    checkpoint_every: 250,
                    ..TrainConfig::desk()
                },
                curve: None,
            });
            let RunConfig::Train(t) = &train_cfg else { unreachable!() };
            let train_dir = train_cfg.prepare(&root)?;
            cmd_train(t, &train_dir)?;
            let train_seconds = TrainTiming::read(&train_dir)?.seconds;

            let eval = EvalSpec {
                templates: vec![ICL_TEMPLATE],
                context_counts: ICL_EVAL_COUNTS.to_vec(),
                ..EvalSpec::holdout()
            };
            let mut summaries = Vec::new();
            for (label, source) in [
                ("trained", ModelSource::Checkpoint { path: train_dir.clone() }),
                ("untrained", ModelSource::Untrained { model: model.clone() }),
            ] {
                let cfg = RunConfig::Evaluate(EvaluateConfig {
                    corpus_dir: corpus_dir.clone(),
                    model: source,
                    split: Split::Holdout,
                    eval: eval.clone(),
                    knn: false,
                    label: label.into(),
                });
                let dir = cfg.run_dir(&root)?;
                let summary = match read_summary(&dir) {
                    Some(s) => s,
                    None => {
                        let RunConfig::Evaluate(e) = &cfg else { unreachable!() };
                        cmd_evaluate(e, &cfg.prepare(&root)?)?
                    }
                };
                summaries.push(summary);
            }
            let untrained = summaries.pop().unwrap();
            let trained = summaries.pop().unwrap();
            Ok(IclRun {
                trained,
                untrained,
                train_seconds,
            })
        };
        run().map_err(|e| e.to_string())
    })
}

fn series(summary: &EvalSummary, metric: &str) -> Vec<f64> {
    let key = format!("{}/{}", summary.label, ICL_TEMPLATE);
    let table = if metric == "auroc" { &summary.auroc } else { &summary.nmae };
    ICL_EVAL_COUNTS
        .iter()
        .map(|n| table.get(&key).and_then(|m| m.get(n)).copied().unwrap_or(f64::NAN))
        .collect()
}

fn fmt_series(v: &[f64]) -> String {
    let cells: Vec<String> = ICL_EVAL_COUNTS.iter().zip(v).map(|(n, x)| format!("n{n} {x:.3}")).collect();
    cells.join(", ")
}

fn criterion_7() -> Verdict {
    let run = match icl_run() {
        Ok(r) => r,
        Err(e) => return Verdict::new(false, format!("pipeline error: {e}")),
    };
    let trained = series(&run.trained, "auroc");
    let untrained = series(&run.untrained, "auroc");
    let oracle = run.trained.oracle_auroc.unwrap_or(f64::NAN);
    let at32 = trained[3];
    let lift = at32 - untrained[3];
    let monotone = trained.windows(2).all(|w| w[1] >= w[0] - 0.02);
    let gap_share = (at32 - 0.5) / (oracle - 0.5);
    let a = lift >= 0.15;
    let c = gap_share >= 0.7;
    let budget = run.train_seconds <= TRAIN_BUDGET_SECS;
    Verdict::new(
        a && monotone && c && budget,
        format!(
            "(a) {} lift {lift:.3} over untrained; (b) {} trained [{}]; (c) {} {:.0}% of the gap to oracle {oracle:.3}; training {:.0}s",
            if a { "ok" } else { "FAIL" },
            if monotone { "ok" } else { "FAIL" },
            fmt_series(&trained),
            if c { "ok" } else { "FAIL" },
            100.0 * gap_share,
            run.train_seconds
        ),
    )
}

fn criterion_8() -> Verdict {
    let run = match icl_run() {
        Ok(r) => r,
        Err(e) => return Verdict::new(false, format!("pipeline error: {e}")),
    };
    let trained = series(&run.trained, "nmae");
    let drop = trained[0] - trained[3];
    let worst_parse = run.trained.parse_failure_rate.values().cloned().fold(0.0, f64::max);
    Verdict::new(
        drop >= 0.10 && worst_parse < 0.10,
        format!("nmae [{}], drop {drop:.3}; max parse-failure rate {worst_parse:.3}", fmt_series(&trained)),
    )
}

fn criterion_9() -> Verdict {
    let res = TemplateResource::builtin();
    let tok = TokenizerSpec::ByteLevel;
    let (pretrain, holdout) = build_suite(&SuiteConfig::default()).unwrap();
    let tasks: Vec<TabularTask> = pretrain.into_iter().chain(holdout).map(|t| t.task).collect();

    let mut longer = Vec::new();
    let mut rng = rng_for(9, &["acceptance", "lengths"]);
    for task in &tasks {
        for _ in 0..3 {
            let mut rows: Vec<usize> = (0..task.rows.len()).collect();
            rows.shuffle(&mut rng);
            let demos: Vec<&Row> = rows[1..=16].iter().map(|&i| &task.rows[i]).collect();
            let query = &task.rows[rows[0]];
            let len = |t: Template| {
                let s = render(t, task, &demos, query, RenderMode::Train, &res).unwrap();
                tokenize_with_spans(&s, &tok).unwrap().len()
            };
            let (lang, table) = (len(Template::Lang), len(Template::Table));
            if table >= lang {
                longer.push(format!("{} ({table} >= {lang})", task.id));
            }
        }
    }

    let spec = CorpusSpec {
        templates: vec![Template::Lang, Template::Table],
        samples_per_cell: 4,
        ..CorpusSpec::default()
    };
    let (_, report) = build_corpus(&tasks, &spec, &res, &tok).unwrap();
    let discards = |t: Template| report.per_template.get(t.name()).map_or(0, |c| c.discarded);
    let (lang_d, table_d) = (discards(Template::Lang), discards(Template::Table));
    Verdict::new(
        longer.is_empty() && lang_d >= table_d,
        format!(
            "T-table shorter than T-lang in {} of {} n=16 cases; discards at 4096: T-lang {lang_d}, T-table {table_d}",
            3 * tasks.len() - longer.len(),
            3 * tasks.len()
        ),
    )
}

/// A stand-in dataset with `eligible` numerical columns that can serve as
/// labels and two free-text columns that cannot.
fn stand_in_dataset(i: usize, eligible: usize) -> TabularTask {
    let n_rows = 12;
    let mut features: Vec<FeatureSpec> = (0..eligible - 1)
        .map(|j| FeatureSpec::new(format!("x{j}"), FeatureKind::Numerical, None))
        .collect();
    features.push(FeatureSpec::new("name", FeatureKind::Categorical, None));
    features.push(FeatureSpec::new("note", FeatureKind::Categorical, None));
    let rows = (0..n_rows)
        .map(|r| {
            let mut values: Vec<Cell> = (0..eligible - 1).map(|j| Cell::Num(((r * (j + 2)) % 7) as f64)).collect();
            values.push(Cell::Cat(format!("item {i}-{r}")));
            values.push(Cell::Cat(format!("remark {r}")));
            Row {
                values,
                label: Label::Value((r % 5) as f64),
            }
        })
        .collect();
    TabularTask {
        id: format!("dataset-{i:03}"),
        features,
        rows,
        kind: TaskKind::Regression,
        meta: TaskMeta {
            label_name: "y".into(),
            ..TaskMeta::default()
        },
    }
}

fn criterion_10() -> Verdict {
    const DATASETS: usize = 340;
    const MAX_DERIVED: usize = 4;
    const AVERAGE_MULTIPLICITY: f64 = 2.3;
    const REPORTED_CASES: f64 = 14_000.0;
    // Eligible label columns per dataset, cycling; six is capped at four.
    const ELIGIBLE: [usize; 10] = [1, 1, 2, 2, 2, 3, 3, 3, 2, 6];

    let mut derived: Vec<(String, Split)> = Vec::new();
    for i in 0..DATASETS {
        let ds = stand_in_dataset(i, ELIGIBLE[i % ELIGIBLE.len()]);
        for t in derive_tasks(&ds, MAX_DERIVED).unwrap() {
            derived.push((t.id, Split::Pretrain));
        }
    }
    let unique: BTreeSet<&str> = derived.iter().map(|(id, _)| id.as_str()).collect();
    let cases = enumerate_cases(&derived, &Template::ALL, &CONTEXT_COUNTS, &[0]).unwrap().len();
    let multiplicity = derived.len() as f64 / DATASETS as f64;
    let formula = derived.len() * CONTEXT_COUNTS.len() * Template::ALL.len();
    let instantiated = DATASETS as f64 * AVERAGE_MULTIPLICITY * (CONTEXT_COUNTS.len() * Template::ALL.len()) as f64;
    let rel = (instantiated - REPORTED_CASES).abs() / REPORTED_CASES;
    let pass = unique.len() == derived.len() && cases == formula && rel <= 0.10 && (multiplicity - AVERAGE_MULTIPLICITY).abs() < 1e-9;
    Verdict::new(
        pass,
        format!(
            "{cases} cases from {} derived tasks (multiplicity {multiplicity:.2}); formula at 2.3 gives {instantiated:.0}, {:.1}% from 14k",
            derived.len(),
            100.0 * rel
        ),
    )
}

fn differing_files(a: &Path, b: &Path, names: &[String]) -> Vec<String> {
    names
        .iter()
        .filter(|n| fs::read(a.join(n)).ok() != fs::read(b.join(n)).ok() || !a.join(n).exists())
        .cloned()
        .collect()
}

fn criterion_11() -> Verdict {
    let roots = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    let mut corpus_dirs = Vec::new();
    let mut train_dirs = Vec::new();
    for root in &roots {
        let build = RunConfig::BuildCorpus(BuildCorpusConfig {
            source: DataSource::Synthetic {
                suite: SuiteConfig {
                    n_pretrain: 4,
                    n_holdout: 2,
                    rows_per_task: 96,
                    ..SuiteConfig::default()
                },
            },
            corpus: CorpusSpec {
                templates: vec![Template::Anony, Template::Table],
                context_counts: vec![0, 4],
                samples_per_cell: 4,
                max_len: 1024,
                ..CorpusSpec::default()
            },
            tokenizer: TokenizerSpec::ByteLevel,
            template_resource: None,
            oracle_draws: 2000,
        });
        let corpus_dir = gtl_forge::commands::execute(&build, root.path()).unwrap();
        let model = ModelConfig {
            n_layers: 1,
            n_heads: 2,
            d_model: 16,
            d_ff: 32,
            max_positions: 1024,
            ..ModelConfig::default()
        };
        let train_cfg = RunConfig::Train(TrainRunConfig {
            corpus_dir: corpus_dir.clone(),
            model,
            train: TrainConfig {
                batch_size: 4,
                max_steps: 6,
                eval_every: 3,
                checkpoint_every: 3,
                ..TrainConfig::desk()
            },
            curve: None,
        });
        train_dirs.push(gtl_forge::commands::execute(&train_cfg, root.path()).unwrap());
        corpus_dirs.push(corpus_dir);
    }
    let corpus_files: Vec<String> = ["corpus.jsonl", "build_report.json", "oracle.json", "templates.toml", "tokenizer.json"]
        .map(String::from)
        .to_vec();
    let train_files: Vec<String> = ["ckpt-00000003.bin", "ckpt-00000006.bin", "train_log.jsonl"].map(String::from).to_vec();
    let mut diff = differing_files(&corpus_dirs[0], &corpus_dirs[1], &corpus_files);
    diff.extend(differing_files(&train_dirs[0], &train_dirs[1], &train_files));
    Verdict::new(
        diff.is_empty(),
        if diff.is_empty() {
            format!("{} corpus files and {} training files identical across two roots", corpus_files.len(), train_files.len())
        } else {
            format!("differing files: {}", diff.join(", "))
        },
    )
}

fn main() {
    let criteria: [(usize, &str, fn() -> Verdict); 11] = [
        (1, "mask correctness", criterion_1),
        (2, "span fidelity", criterion_2),
        (3, "metric oracles", criterion_3),
        (4, "gradient check", criterion_4),
        (5, "causality", criterion_5),
        (6, "overfit smoke", criterion_6),
        (7, "in-context learning emergence", criterion_7),
        (8, "regression counterpart", criterion_8),
        (9, "template efficiency", criterion_9),
        (10, "combinatorics consistency", criterion_10),
        (11, "end-to-end determinism", criterion_11),
    ];
    let only: Option<BTreeSet<usize>> = std::env::var("GTL_ACCEPTANCE_ONLY")
        .ok()
        .map(|v| v.split(',').filter_map(|s| s.trim().parse().ok()).collect());
    let mut failed = 0;
    for (id, name, run) in criteria {
        if only.as_ref().is_some_and(|o| !o.contains(&id)) {
            continue;
        }
        let started = Instant::now();
        let verdict = panic::catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Verdict::new(false, format!("panicked: {msg}"))
        });
        if !verdict.pass {
            failed += 1;
        }
        println!(
            "criterion {id:>2} {:<30} {} [{:.1}s] {}",
            name,
            if verdict.pass { "PASS" } else { "FAIL" },
            started.elapsed().as_secs_f64(),
            verdict.detail
        );
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
