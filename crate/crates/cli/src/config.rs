//! Effective run configurations, content-hashed run directories and the
//! worker pool.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use gtl_core::model::ModelConfig;
use gtl_core::sampler::Split;
use gtl_core::synthbench::SuiteConfig;
use gtl_core::tokenization::TokenizerSpec;
use gtl_core::trainer::{SweepAxis, TrainConfig};

use crate::error::{CliError, Result};
use crate::pipeline::{CorpusSpec, EvalSpec};

/// Environment variable overriding the worker count.
pub const WORKERS_ENV: &str = "GTL_FORGE_WORKERS";

/// Name of the frozen configuration copy inside a run directory.
pub const FROZEN_CONFIG: &str = "config.json";

/// Where tasks come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataSource {
    /// Generated synthetic suite.
    Synthetic { suite: SuiteConfig },
    /// Directories of `<stem>.csv` + `<stem>.meta.json` pairs.
    Directories { pretrain: PathBuf, holdout: PathBuf },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BuildCorpusConfig {
    pub source: DataSource,
    pub corpus: CorpusSpec,
    pub tokenizer: TokenizerSpec,
    /// Template wording file; the built-in resource when absent.
    pub template_resource: Option<PathBuf>,
    /// Monte Carlo draws for the Bayes oracle of synthetic holdout tasks.
    pub oracle_draws: usize,
}

/// Periodic evaluation during training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveSpec {
    pub eval: EvalSpec,
    /// Evaluate at most this many pretraining tasks in-domain.
    pub max_pretrain_tasks: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainRunConfig {
    pub corpus_dir: PathBuf,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub curve: Option<CurveSpec>,
}

/// What to evaluate: a checkpoint, or a freshly initialized model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelSource {
    Checkpoint { path: PathBuf },
    Untrained { model: ModelConfig },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluateConfig {
    pub corpus_dir: PathBuf,
    pub model: ModelSource,
    pub split: Split,
    pub eval: EvalSpec,
    /// Also score the nearest-neighbour reference.
    pub knn: bool,
    pub label: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportConfig {
    pub train_runs: Vec<PathBuf>,
    pub eval_runs: Vec<PathBuf>,
    pub sweep_runs: Vec<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub corpus_dir: PathBuf,
    pub axes: Vec<SweepAxis>,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "subcommand", rename_all = "kebab-case")]
pub enum RunConfig {
    BuildCorpus(BuildCorpusConfig),
    Train(TrainRunConfig),
    Evaluate(EvaluateConfig),
    Report(ReportConfig),
    Sweep(SweepConfig),
}

impl RunConfig {
    pub fn name(&self) -> &'static str {
        match self {
            RunConfig::BuildCorpus(_) => "build-corpus",
            RunConfig::Train(_) => "train",
            RunConfig::Evaluate(_) => "evaluate",
            RunConfig::Report(_) => "report",
            RunConfig::Sweep(_) => "sweep",
        }
    }

    /// Hex SHA-256 of the canonical JSON encoding.
    pub fn content_hash(&self) -> Result<String> {
        let bytes = serde_json::to_vec(self)?;
        let digest = Sha256::digest(&bytes);
        Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
    }

    /// `<root>/<subcommand>-<first 16 hex digits of the hash>`.
    pub fn run_dir(&self, root: &Path) -> Result<PathBuf> {
        Ok(root.join(format!("{}-{}", self.name(), &self.content_hash()?[..16])))
    }

    /// Check that every input path exists before any work starts.
    pub fn validate_paths(&self) -> Result<()> {
        let need = |p: &Path, what: &str| -> Result<()> {
            if p.exists() {
                Ok(())
            } else {
                Err(CliError::Config(format!("{what} `{}` does not exist", p.display())))
            }
        };
        match self {
            RunConfig::BuildCorpus(c) => {
                if let DataSource::Directories { pretrain, holdout } = &c.source {
                    need(pretrain, "pretrain directory")?;
                    need(holdout, "holdout directory")?;
                }
                if let Some(p) = &c.template_resource {
                    need(p, "template resource")?;
                }
                Ok(())
            }
            RunConfig::Train(c) => need(&c.corpus_dir, "corpus directory"),
            RunConfig::Evaluate(c) => {
                need(&c.corpus_dir, "corpus directory")?;
                if let ModelSource::Checkpoint { path } = &c.model {
                    need(path, "checkpoint")?;
                }
                Ok(())
            }
            RunConfig::Report(c) => {
                if c.train_runs.is_empty() && c.eval_runs.is_empty() && c.sweep_runs.is_empty() {
                    return Err(CliError::Config("report needs at least one input run".into()));
                }
                for p in c.train_runs.iter().chain(&c.eval_runs).chain(&c.sweep_runs) {
                    need(p, "input run")?;
                }
                Ok(())
            }
            RunConfig::Sweep(c) => need(&c.corpus_dir, "corpus directory"),
        }
    }

    /// Create the run directory and write the frozen configuration.
    pub fn prepare(&self, root: &Path) -> Result<PathBuf> {
        self.validate_paths()?;
        let dir = self.run_dir(root)?;
        fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
        let path = dir.join(FROZEN_CONFIG);
        let text = serde_json::to_string_pretty(self)? + "\n";
        fs::write(&path, text).map_err(|e| CliError::io(&path, e))?;
        Ok(dir)
    }
}

/// Read the frozen configuration of an earlier run.
pub fn read_frozen(dir: &Path) -> Result<RunConfig> {
    let path = dir.join(FROZEN_CONFIG);
    let text = fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Worker count: the environment variable wins over the flag; 0 or unset
/// means one worker per core.
pub fn worker_count(flag: Option<usize>) -> Result<usize> {
    let from_env = match std::env::var(WORKERS_ENV) {
        Ok(v) => Some(
            v.trim()
                .parse::<usize>()
                .map_err(|_| CliError::Config(format!("{WORKERS_ENV} must be a non-negative integer, got `{v}`")))?,
        ),
        Err(_) => None,
    };
    let n = from_env.or(flag).unwrap_or(0);
    Ok(if n == 0 {
        std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
    } else {
        n
    })
}

pub fn worker_pool(workers: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| CliError::Config(format!("cannot start worker pool: {e}")))
}
