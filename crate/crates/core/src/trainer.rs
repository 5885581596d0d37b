//! Training loop: seeded shuffling, AdamW or SGD updates, periodic
//! evaluation, checkpoints, resume and a stop file.

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Real;
use crate::model::{accumulate_grad, AdamState, Checkpoint, Layout, Params, SeqRef};
use crate::objective::CorpusRecord;
use crate::rng::rng_for;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    AdamwLikeDecoupledDecay,
    PlainSgd,
}

/// Arithmetic used for forward and backward passes. Parameters and
/// optimizer state are always kept in f64.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    #[default]
    F64,
    F32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub grad_accum_steps: usize,
    pub max_steps: u64,
    /// Fixed evaluation cadence; evaluation also runs at every power of two.
    pub eval_every: u64,
    pub weight_decay: f64,
    pub seed: u64,
    pub optimizer: Optimizer,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    #[serde(default)]
    pub precision: Precision,
    /// Linear warmup length in steps; 0 keeps the rate constant.
    #[serde(default)]
    pub warmup_steps: u64,
    /// Clip the global gradient norm to this value.
    #[serde(default)]
    pub grad_clip: Option<f64>,
    /// Checkpoint cadence in steps; 0 means only the final checkpoint.
    #[serde(default)]
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl TrainConfig {
    /// Settings sized for the default toy model.
    pub fn desk() -> Self {
        TrainConfig {
            learning_rate: 3e-4,
            batch_size: 64,
            grad_accum_steps: 1,
            max_steps: 8192,
            eval_every: 1024,
            weight_decay: 0.0,
            seed: 0,
            optimizer: Optimizer::AdamwLikeDecoupledDecay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            precision: Precision::F64,
            warmup_steps: 0,
            grad_clip: None,
            checkpoint_every: 1024,
        }
    }

    /// Learning rate and batch size of large-scale pretraining.
    pub fn large_scale() -> Self {
        TrainConfig {
            learning_rate: 1e-5,
            batch_size: 512,
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidTrainConfig(m.to_string()));
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return bad("learning_rate must be positive");
        }
        if self.max_steps == 0 {
            return bad("max_steps must be at least 1");
        }
        if self.batch_size == 0 || self.grad_accum_steps == 0 {
            return bad("batch_size and grad_accum_steps must be at least 1");
        }
        if !self.batch_size.is_multiple_of(self.grad_accum_steps) {
            return bad("batch_size must equal micro-batch size times grad_accum_steps");
        }
        if self.weight_decay < 0.0 || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("weight_decay must be non-negative and betas in [0, 1)");
        }
        if self.grad_clip.is_some_and(|c| !(c > 0.0)) {
            return bad("grad_clip must be positive");
        }
        Ok(())
    }

    pub fn micro_batch(&self) -> usize {
        self.batch_size / self.grad_accum_steps
    }

    fn lr_at(&self, step: u64) -> f64 {
        if self.warmup_steps > 0 && step < self.warmup_steps {
            self.learning_rate * (step + 1) as f64 / self.warmup_steps as f64
        } else {
            self.learning_rate
        }
    }
}

/// Powers of two up to `max_steps`, multiples of `every`, and the last step.
pub fn eval_steps(max_steps: u64, every: u64) -> Vec<u64> {
    let mut steps = std::collections::BTreeSet::new();
    let mut p = 1;
    while p <= max_steps {
        steps.insert(p);
        p *= 2;
    }
    if every > 0 {
        let mut s = every;
        while s <= max_steps {
            steps.insert(s);
            s += every;
        }
    }
    steps.insert(max_steps);
    steps.into_iter().collect()
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: u64,
    /// Training loss of the batch that produced this step.
    pub loss: f64,
    pub split: String,
    pub metric_name: String,
    pub value: f64,
}

/// A metric produced by an evaluation callback.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalPoint {
    pub split: String,
    pub metric_name: String,
    pub value: f64,
}

/// Optimizer with its moment buffers.
#[derive(Clone, Debug)]
pub struct OptimizerState {
    pub t: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    decay_mask: Vec<bool>,
}

impl OptimizerState {
    pub fn new(params: &Params) -> Self {
        let n = params.data.len();
        OptimizerState {
            t: 0,
            m: vec![0.0; n],
            v: vec![0.0; n],
            decay_mask: Layout::new(&params.config).decay_mask(&params.config),
        }
    }

    /// Apply one update with gradient `g` at learning rate `lr`. Decoupled
    /// decay multiplies decayed parameters by `1 - lr * weight_decay` before
    /// the gradient step.
    pub fn step(&mut self, cfg: &TrainConfig, lr: f64, params: &mut [f64], g: &[f64]) {
        self.t += 1;
        let decay = 1.0 - lr * cfg.weight_decay;
        match cfg.optimizer {
            Optimizer::AdamwLikeDecoupledDecay => {
                let bc1 = 1.0 - cfg.beta1.powi(self.t as i32);
                let bc2 = 1.0 - cfg.beta2.powi(self.t as i32);
                for i in 0..params.len() {
                    self.m[i] = cfg.beta1 * self.m[i] + (1.0 - cfg.beta1) * g[i];
                    self.v[i] = cfg.beta2 * self.v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
                    if self.decay_mask[i] && cfg.weight_decay != 0.0 {
                        params[i] *= decay;
                    }
                    let mhat = self.m[i] / bc1;
                    let vhat = self.v[i] / bc2;
                    params[i] -= lr * mhat / (vhat.sqrt() + cfg.eps);
                }
            }
            Optimizer::PlainSgd => {
                for i in 0..params.len() {
                    if self.decay_mask[i] && cfg.weight_decay != 0.0 {
                        params[i] *= decay;
                    }
                    params[i] -= lr * g[i];
                }
            }
        }
    }
}

/// Final state of a run.
#[derive(Debug)]
pub struct TrainOutcome {
    pub params: Params,
    pub step: u64,
    /// True when the stop file ended the run early.
    pub stopped: bool,
    pub log: Vec<LogRecord>,
}

/// Where a run keeps its log, checkpoints and stop file.
#[derive(Clone, Debug)]
pub struct RunFiles {
    pub dir: PathBuf,
}

impl RunFiles {
    pub const STOP_FILE: &'static str = "STOP";
    pub const LOG_FILE: &'static str = "train_log.jsonl";

    pub fn new(dir: impl Into<PathBuf>) -> Self {
        RunFiles { dir: dir.into() }
    }

    pub fn log_path(&self) -> PathBuf {
        self.dir.join(Self::LOG_FILE)
    }

    pub fn stop_path(&self) -> PathBuf {
        self.dir.join(Self::STOP_FILE)
    }

    pub fn checkpoint_path(&self, step: u64) -> PathBuf {
        self.dir.join(format!("ckpt-{step:08}.bin"))
    }

    /// Highest-step checkpoint in the directory, if any.
    pub fn latest_checkpoint(&self) -> Result<Option<(u64, PathBuf)>> {
        let entries = match fs::read_dir(&self.dir) {
            Ok(e) => e,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
            Err(e) => return Err(Error::io(&self.dir, e)),
        };
        let mut best = None;
        for entry in entries {
            let entry = entry.map_err(|e| Error::io(&self.dir, e))?;
            let name = entry.file_name().to_string_lossy().into_owned();
            let Some(step) = name
                .strip_prefix("ckpt-")
                .and_then(|s| s.strip_suffix(".bin"))
                .and_then(|s| s.parse::<u64>().ok())
            else {
                continue;
            };
            if best.as_ref().is_none_or(|(b, _)| step > *b) {
                best = Some((step, entry.path()));
            }
        }
        Ok(best)
    }
}

fn read_log(path: &Path) -> Result<Vec<LogRecord>> {
    let file = match File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(Error::io(path, e)),
    };
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

fn write_log(path: &Path, records: &[LogRecord]) -> Result<()> {
    let mut text = String::new();
    for r in records {
        text.push_str(&serde_json::to_string(r)?);
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Dataset position -> corpus index, one seeded permutation per epoch.
struct Order {
    seed: u64,
    n: usize,
    epoch: Option<(u64, Vec<usize>)>,
}

impl Order {
    fn index(&mut self, pos: u64) -> usize {
        let epoch = pos / self.n as u64;
        if self.epoch.as_ref().is_none_or(|(e, _)| *e != epoch) {
            let mut perm: Vec<usize> = (0..self.n).collect();
            perm.shuffle(&mut rng_for(self.seed, &["epoch", &epoch.to_string()]));
            self.epoch = Some((epoch, perm));
        }
        let (_, perm) = self.epoch.as_ref().expect("epoch permutation");
        perm[(pos % self.n as u64) as usize]
    }
}

fn batch_grad<F: Real>(params: &Params, batch: &[SeqRef<'_>], micro: usize) -> Result<(f64, Vec<f64>)> {
    let w: Vec<F> = params.cast();
    let mut g = vec![F::zero(); w.len()];
    let mut loss = 0.0;
    for chunk in batch.chunks(micro) {
        // accumulate_grad weights by 1/len(chunk); rescale to 1/len(batch)
        let mut part = vec![F::zero(); w.len()];
        loss += accumulate_grad(&params.config, &w, chunk, &mut part)? * chunk.len() as f64;
        let s = F::of(chunk.len() as f64 / batch.len() as f64);
        for (gi, pi) in g.iter_mut().zip(&part) {
            *gi += *pi * s;
        }
    }
    Ok((loss / batch.len() as f64, g.into_iter().map(Real::f64).collect()))
}

/// Callback run at evaluation steps with the current parameters.
pub type EvalFn<'a> = dyn FnMut(u64, &Params) -> Result<Vec<EvalPoint>> + 'a;

/// Train from `init` (or the latest checkpoint in `files`, when present).
///
/// Runs until `max_steps` updates were applied or the stop file appears.
/// Every update logs one `train/loss` record; evaluation steps add the
/// callback's metrics.
pub fn train(
    corpus: &[CorpusRecord],
    init: Params,
    cfg: &TrainConfig,
    files: Option<&RunFiles>,
    eval: &mut EvalFn<'_>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    init.config.validate()?;
    if corpus.is_empty() {
        return Err(Error::Empty("corpus"));
    }
    for r in corpus {
        if r.token_ids.len() > init.config.max_positions {
            return Err(Error::TooLong {
                len: r.token_ids.len(),
                max: init.config.max_positions,
            });
        }
        if !r.loss_mask.iter().any(|&f| f) {
            return Err(Error::NoSupervision);
        }
    }

    let mut params = init;
    let mut opt = OptimizerState::new(&params);
    let mut step = 0u64;
    let mut log = Vec::new();
    if let Some(f) = files {
        fs::create_dir_all(&f.dir).map_err(|e| Error::io(&f.dir, e))?;
        if let Some((_, path)) = f.latest_checkpoint()? {
            let ck = Checkpoint::load(&path)?;
            if ck.params.config != params.config {
                return Err(Error::Checkpoint("checkpoint model config differs from the requested one".into()));
            }
            step = ck.step;
            params = ck.params;
            if let Some(state) = ck.optimizer {
                opt.m = state.m;
                opt.v = state.v;
            }
            opt.t = step;
            log = read_log(&f.log_path())?;
            log.retain(|r| r.step <= step);
            log::info!("resuming from step {step}");
        }
        write_log(&f.log_path(), &log)?;
    }
    let mut log_file = match files {
        Some(f) => Some(
            OpenOptions::new()
                .append(true)
                .open(f.log_path())
                .map_err(|e| Error::io(f.log_path(), e))?,
        ),
        None => None,
    };
    let mut emit = |rec: LogRecord, log: &mut Vec<LogRecord>| -> Result<()> {
        if let (Some(file), Some(f)) = (log_file.as_mut(), files) {
            let line = serde_json::to_string(&rec)?;
            writeln!(file, "{line}").map_err(|e| Error::io(f.log_path(), e))?;
        }
        log.push(rec);
        Ok(())
    };

    let evals = eval_steps(cfg.max_steps, cfg.eval_every);
    let mut order = Order {
        seed: cfg.seed,
        n: corpus.len(),
        epoch: None,
    };
    let mut stopped = false;
    while step < cfg.max_steps {
        let batch: Vec<SeqRef<'_>> = (0..cfg.batch_size as u64)
            .map(|k| {
                let r = &corpus[order.index(step * cfg.batch_size as u64 + k)];
                SeqRef {
                    ids: &r.token_ids,
                    mask: &r.loss_mask,
                }
            })
            .collect();
        let (loss, mut g) = match cfg.precision {
            Precision::F64 => batch_grad::<f64>(&params, &batch, cfg.micro_batch())?,
            Precision::F32 => batch_grad::<f32>(&params, &batch, cfg.micro_batch())?,
        };
        if !loss.is_finite() || g.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFiniteLoss {
                step: step as usize,
                detail: format!("loss {loss}"),
            });
        }
        if let Some(clip) = cfg.grad_clip {
            let norm = g.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > clip {
                let s = clip / norm;
                g.iter_mut().for_each(|x| *x *= s);
            }
        }
        let lr = cfg.lr_at(step);
        opt.step(cfg, lr, &mut params.data, &g);
        step += 1;
        emit(
            LogRecord {
                step,
                loss,
                split: "train".into(),
                metric_name: "loss".into(),
                value: loss,
            },
            &mut log,
        )?;
        if evals.binary_search(&step).is_ok() {
            for p in eval(step, &params)? {
                emit(
                    LogRecord {
                        step,
                        loss,
                        split: p.split,
                        metric_name: p.metric_name,
                        value: p.value,
                    },
                    &mut log,
                )?;
            }
        }
        let stop_now = files.is_some_and(|f| f.stop_path().exists());
        let periodic = cfg.checkpoint_every > 0 && step.is_multiple_of(cfg.checkpoint_every);
        if let Some(f) = files {
            if periodic || stop_now || step == cfg.max_steps {
                Checkpoint {
                    params: params.clone(),
                    step,
                    optimizer: Some(AdamState {
                        m: opt.m.clone(),
                        v: opt.v.clone(),
                    }),
                    meta: Default::default(),
                }
                .save(&f.checkpoint_path(step))?;
            }
        }
        if stop_now {
            stopped = true;
            break;
        }
    }
    Ok(TrainOutcome {
        params,
        step,
        stopped,
        log,
    })
}

/// Axis of a scaling sweep and its settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "axis", content = "settings")]
pub enum SweepAxis {
    SamplesPerTask(Vec<usize>),
    TaskFraction(Vec<f64>),
    ModelSize(Vec<String>),
}

impl SweepAxis {
    pub fn name(&self) -> &'static str {
        match self {
            SweepAxis::SamplesPerTask(_) => "samples_per_task",
            SweepAxis::TaskFraction(_) => "task_fraction",
            SweepAxis::ModelSize(_) => "model_size",
        }
    }

    pub fn labels(&self) -> Vec<String> {
        match self {
            SweepAxis::SamplesPerTask(v) => v.iter().map(|x| x.to_string()).collect(),
            SweepAxis::TaskFraction(v) => v.iter().map(|x| x.to_string()).collect(),
            SweepAxis::ModelSize(v) => v.clone(),
        }
    }
}

/// One setting of one axis, handed to the sweep runner.
#[derive(Clone, Debug, PartialEq)]
pub enum SweepSetting {
    SamplesPerTask(usize),
    TaskFraction(f64),
    ModelSize(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub axis: String,
    pub setting: String,
    pub metric_name: String,
    pub value: f64,
}

/// Run one training per setting of each axis, other knobs held at their
/// base values. `run` trains and evaluates a single setting and returns
/// (metric name, holdout value).
pub fn scaling_sweep(axes: &[SweepAxis], run: &mut dyn FnMut(&SweepSetting) -> Result<(String, f64)>) -> Result<Vec<SweepRow>> {
    if axes.is_empty() {
        return Err(Error::EmptyAxis("sweep axes"));
    }
    let mut rows = Vec::new();
    for axis in axes {
        let settings: Vec<SweepSetting> = match axis {
            SweepAxis::SamplesPerTask(v) => v.iter().map(|&x| SweepSetting::SamplesPerTask(x)).collect(),
            SweepAxis::TaskFraction(v) => v.iter().map(|&x| SweepSetting::TaskFraction(x)).collect(),
            SweepAxis::ModelSize(v) => v.iter().map(|x| SweepSetting::ModelSize(x.clone())).collect(),
        };
        if settings.len() < 2 {
            return Err(Error::InvalidTrainConfig(format!("sweep axis {} needs at least two settings", axis.name())));
        }
        for (setting, label) in settings.iter().zip(axis.labels()) {
            let (metric_name, value) = run(setting)?;
            rows.push(SweepRow {
                axis: axis.name().to_string(),
                setting: label,
                metric_name,
                value,
            });
        }
    }
    Ok(rows)
}
