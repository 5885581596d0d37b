use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use gtl_core::model::ModelConfig;
use gtl_core::sampler::{DemoOrder, QueryCounts, Split};
use gtl_core::synthbench::SuiteConfig;
use gtl_core::templating::Template;
use gtl_core::tokenization::TokenizerSpec;
use gtl_core::trainer::{Optimizer, Precision, SweepAxis, TrainConfig};
use gtl_forge::commands::execute;
use gtl_forge::config::{
    worker_count, worker_pool, BuildCorpusConfig, CurveSpec, DataSource, EvaluateConfig, ModelSource, ReportConfig,
    RunConfig, SweepConfig, TrainRunConfig,
};
use gtl_forge::pipeline::{CorpusSpec, EvalSpec};
use gtl_forge::{CliError, Result};

#[derive(Parser)]
#[command(name = "gtl-forge", version, about = "Generative tabular learning pipeline")]
struct Cli {
    /// Root directory for run outputs.
    #[arg(long, global = true, default_value = "runs")]
    out: PathBuf,
    /// Worker threads (0 = one per core); GTL_FORGE_WORKERS overrides.
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render, tokenize, mask and length-filter a training corpus.
    BuildCorpus(BuildArgs),
    /// Train the toy model on a corpus.
    Train(TrainArgs),
    /// Score a checkpoint on holdout or in-domain cases.
    Evaluate(EvalArgs),
    /// Merge run outputs into plot-ready tables.
    Report(ReportArgs),
    /// Retrain along scaling axes and record the holdout metric.
    Sweep(SweepArgs),
}

#[derive(Args, Clone)]
struct GridArgs {
    /// Comma-separated templates (T-lang, T-table, T-anony).
    #[arg(long, value_delimiter = ',', default_value = "T-lang,T-table,T-anony")]
    templates: Vec<Template>,
    /// Comma-separated context counts.
    #[arg(long, value_delimiter = ',', default_value = "0,4,8,16,32,64")]
    context_counts: Vec<usize>,
    #[arg(long, value_enum, default_value_t = OrderArg::RoundRobin)]
    demo_order: OrderArg,
}

#[derive(Clone, Copy, ValueEnum)]
enum OrderArg {
    RoundRobin,
    Shuffled,
}

impl From<OrderArg> for DemoOrder {
    fn from(o: OrderArg) -> Self {
        match o {
            OrderArg::RoundRobin => DemoOrder::RoundRobin,
            OrderArg::Shuffled => DemoOrder::Shuffled,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum PrecisionArg {
    F32,
    F64,
}

impl From<PrecisionArg> for Precision {
    fn from(p: PrecisionArg) -> Self {
        match p {
            PrecisionArg::F32 => Precision::F32,
            PrecisionArg::F64 => Precision::F64,
        }
    }
}

#[derive(Args)]
struct BuildArgs {
    #[command(flatten)]
    grid: GridArgs,
    /// Directory with `pretrain/` and `holdout/` task folders; the
    /// synthetic suite is generated when absent.
    #[arg(long)]
    data_dir: Option<PathBuf>,
    /// JSON file overriding the synthetic suite settings.
    #[arg(long)]
    suite_config: Option<PathBuf>,
    #[arg(long, default_value_t = 64)]
    samples_per_cell: usize,
    #[arg(long, default_value_t = 4096)]
    max_len: usize,
    /// Supervise only the query row, not the demonstrations.
    #[arg(long)]
    query_only_loss: bool,
    /// Shuffle feature columns per sample.
    #[arg(long)]
    permute_features: bool,
    /// Mirror numeric columns inside their range at random, per sample.
    #[arg(long)]
    reflect_numeric: bool,
    /// TOML file with template wording.
    #[arg(long)]
    template_resource: Option<PathBuf>,
    #[arg(long, default_value_t = 100_000)]
    oracle_draws: usize,
}

#[derive(Args, Clone)]
struct ModelArgs {
    /// Model size preset: small, medium or default.
    #[arg(long, default_value = "default")]
    model: String,
    #[arg(long, default_value_t = 0)]
    model_seed: u64,
    #[arg(long)]
    max_positions: Option<usize>,
}

impl ModelArgs {
    fn config(&self) -> Result<ModelConfig> {
        let mut m = ModelConfig::preset(&self.model)
            .ok_or_else(|| CliError::Config(format!("unknown model preset `{}`", self.model)))?;
        m.seed = self.model_seed;
        if let Some(p) = self.max_positions {
            m.max_positions = p;
        }
        Ok(m)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum PresetArg {
    Desk,
    Large,
}

#[derive(Clone, Copy, ValueEnum)]
enum OptimizerArg {
    Adamw,
    Sgd,
}

#[derive(Args, Clone)]
struct OptimArgs {
    #[arg(long, value_enum, default_value_t = PresetArg::Desk)]
    preset: PresetArg,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long, default_value_t = 1)]
    grad_accum: usize,
    #[arg(long, default_value_t = 8192)]
    max_steps: u64,
    #[arg(long, default_value_t = 1024)]
    eval_every: u64,
    #[arg(long, default_value_t = 0.0)]
    weight_decay: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = OptimizerArg::Adamw)]
    optimizer: OptimizerArg,
    #[arg(long, value_enum, default_value_t = PrecisionArg::F64)]
    precision: PrecisionArg,
    #[arg(long, default_value_t = 0)]
    warmup_steps: u64,
    #[arg(long)]
    grad_clip: Option<f64>,
    #[arg(long, default_value_t = 1024)]
    checkpoint_every: u64,
}

impl OptimArgs {
    fn config(&self) -> TrainConfig {
        let base = match self.preset {
            PresetArg::Desk => TrainConfig::desk(),
            PresetArg::Large => TrainConfig::large_scale(),
        };
        TrainConfig {
            learning_rate: self.lr.unwrap_or(base.learning_rate),
            batch_size: self.batch_size.unwrap_or(base.batch_size),
            grad_accum_steps: self.grad_accum,
            max_steps: self.max_steps,
            eval_every: self.eval_every,
            weight_decay: self.weight_decay,
            seed: self.seed,
            optimizer: match self.optimizer {
                OptimizerArg::Adamw => Optimizer::AdamwLikeDecoupledDecay,
                OptimizerArg::Sgd => Optimizer::PlainSgd,
            },
            precision: self.precision.into(),
            warmup_steps: self.warmup_steps,
            grad_clip: self.grad_clip,
            checkpoint_every: self.checkpoint_every,
            ..base
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    /// Corpus run directory produced by build-corpus.
    #[arg(long)]
    corpus: PathBuf,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    optim: OptimArgs,
    /// Templates evaluated during training.
    #[arg(long, value_delimiter = ',', default_value = "T-table")]
    curve_templates: Vec<Template>,
    /// Context counts evaluated during training.
    #[arg(long, value_delimiter = ',', default_value = "0,16")]
    curve_context_counts: Vec<usize>,
    /// Skip evaluation during training.
    #[arg(long)]
    no_curve: bool,
    #[arg(long, default_value_t = 8)]
    curve_pretrain_tasks: usize,
    #[arg(long, default_value_t = 10)]
    decode_steps: usize,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    corpus: PathBuf,
    /// Checkpoint file or training run directory.
    #[arg(long, conflicts_with = "untrained")]
    checkpoint: Option<PathBuf>,
    /// Evaluate a freshly initialized model.
    #[arg(long)]
    untrained: bool,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    grid: GridArgs,
    #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
    seeds: Vec<u64>,
    #[arg(long, default_value_t = 10)]
    decode_steps: usize,
    /// Evaluate pretraining tasks on their held-out rows instead of holdout tasks.
    #[arg(long)]
    in_domain: bool,
    #[arg(long, value_enum, default_value_t = PrecisionArg::F32)]
    precision: PrecisionArg,
    /// Also score the nearest-neighbour reference.
    #[arg(long)]
    knn: bool,
    #[arg(long, default_value = "model")]
    label: String,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long = "train-run")]
    train_runs: Vec<PathBuf>,
    #[arg(long = "eval-run")]
    eval_runs: Vec<PathBuf>,
    #[arg(long = "sweep-run")]
    sweep_runs: Vec<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, value_delimiter = ',')]
    samples_per_task: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    task_fractions: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    model_sizes: Option<Vec<String>>,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    optim: OptimArgs,
    #[command(flatten)]
    grid: GridArgs,
    #[arg(long, value_delimiter = ',', default_value = "0")]
    seeds: Vec<u64>,
    #[arg(long, default_value_t = 10)]
    decode_steps: usize,
}

fn eval_spec(grid: &GridArgs, seeds: &[u64], decode_steps: usize, precision: Precision) -> EvalSpec {
    EvalSpec {
        templates: grid.templates.clone(),
        context_counts: grid.context_counts.clone(),
        seeds: seeds.to_vec(),
        decode_steps,
        queries: QueryCounts::HOLDOUT,
        demo_order: grid.demo_order.into(),
        precision,
    }
}

fn absolute(p: &PathBuf) -> PathBuf {
    std::path::absolute(p).unwrap_or_else(|_| p.clone())
}

fn run_config(command: &Command) -> Result<RunConfig> {
    Ok(match command {
        Command::BuildCorpus(a) => {
            let source = match (&a.data_dir, &a.suite_config) {
                (Some(_), Some(_)) => return Err(CliError::Config("--data-dir and --suite-config are exclusive".into())),
                (Some(d), None) => DataSource::Directories {
                    pretrain: absolute(&d.join("pretrain")),
                    holdout: absolute(&d.join("holdout")),
                },
                (None, Some(p)) => {
                    let text = std::fs::read_to_string(p).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
                    let suite: SuiteConfig =
                        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
                    DataSource::Synthetic { suite }
                }
                (None, None) => DataSource::Synthetic {
                    suite: SuiteConfig::default(),
                },
            };
            RunConfig::BuildCorpus(BuildCorpusConfig {
                source,
                corpus: CorpusSpec {
                    templates: a.grid.templates.clone(),
                    context_counts: a.grid.context_counts.clone(),
                    samples_per_cell: a.samples_per_cell,
                    max_len: a.max_len,
                    demo_order: a.grid.demo_order.into(),
                    supervise_demonstrations: !a.query_only_loss,
                    eval_queries: QueryCounts::PRETRAIN_TEST,
                    permute_features: a.permute_features,
                    reflect_numeric: a.reflect_numeric,
                },
                tokenizer: TokenizerSpec::ByteLevel,
                template_resource: a.template_resource.as_ref().map(absolute),
                oracle_draws: a.oracle_draws,
            })
        }
        Command::Train(a) => {
            let train = a.optim.config();
            RunConfig::Train(TrainRunConfig {
                corpus_dir: absolute(&a.corpus),
                model: a.model.config()?,
                curve: (!a.no_curve).then(|| CurveSpec {
                    eval: EvalSpec {
                        templates: a.curve_templates.clone(),
                        context_counts: a.curve_context_counts.clone(),
                        seeds: vec![0],
                        decode_steps: a.decode_steps,
                        queries: QueryCounts::HOLDOUT,
                        demo_order: DemoOrder::RoundRobin,
                        precision: train.precision,
                    },
                    max_pretrain_tasks: a.curve_pretrain_tasks,
                }),
                train,
            })
        }
        Command::Evaluate(a) => {
            let model = match (&a.checkpoint, a.untrained) {
                (Some(p), false) => ModelSource::Checkpoint { path: absolute(p) },
                (None, true) => ModelSource::Untrained {
                    model: a.model.config()?,
                },
                _ => return Err(CliError::Config("pass exactly one of --checkpoint or --untrained".into())),
            };
            RunConfig::Evaluate(EvaluateConfig {
                corpus_dir: absolute(&a.corpus),
                model,
                split: if a.in_domain { Split::Pretrain } else { Split::Holdout },
                eval: eval_spec(&a.grid, &a.seeds, a.decode_steps, a.precision.into()),
                knn: a.knn,
                label: a.label.clone(),
            })
        }
        Command::Report(a) => RunConfig::Report(ReportConfig {
            train_runs: a.train_runs.iter().map(absolute).collect(),
            eval_runs: a.eval_runs.iter().map(absolute).collect(),
            sweep_runs: a.sweep_runs.iter().map(absolute).collect(),
        }),
        Command::Sweep(a) => {
            let mut axes = Vec::new();
            if let Some(v) = &a.samples_per_task {
                axes.push(SweepAxis::SamplesPerTask(v.clone()));
            }
            if let Some(v) = &a.task_fractions {
                axes.push(SweepAxis::TaskFraction(v.clone()));
            }
            if let Some(v) = &a.model_sizes {
                axes.push(SweepAxis::ModelSize(v.clone()));
            }
            let train = a.optim.config();
            RunConfig::Sweep(SweepConfig {
                corpus_dir: absolute(&a.corpus),
                axes,
                model: a.model.config()?,
                eval: eval_spec(&a.grid, &a.seeds, a.decode_steps, train.precision),
                train,
            })
        }
    })
}

fn run(cli: &Cli) -> Result<PathBuf> {
    let cfg = run_config(&cli.command)?;
    let pool = worker_pool(worker_count(cli.workers)?)?;
    pool.install(|| execute(&cfg, &cli.out))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(dir) => {
            println!("{}", dir.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
