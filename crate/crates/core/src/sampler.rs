//! Row splitting, demonstration sampling and case-grid enumeration.

use std::collections::BTreeSet;
use std::fmt;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::rng_for;
use crate::tabular::{TabularTask, TaskKind};
use crate::templating::Template;

/// Allowed numbers of in-context demonstrations.
pub const CONTEXT_COUNTS: [usize; 6] = [0, 4, 8, 16, 32, 64];

/// Seeds used for each holdout case.
pub const DEFAULT_SEEDS: [u64; 3] = [0, 1, 2];

/// Default number of query rows per case.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryCounts {
    pub classification: usize,
    pub regression: usize,
}

impl QueryCounts {
    pub const PRETRAIN_TEST: QueryCounts = QueryCounts {
        classification: 16,
        regression: 4,
    };
    pub const HOLDOUT: QueryCounts = QueryCounts {
        classification: 64,
        regression: 16,
    };

    pub fn for_kind(&self, kind: TaskKind) -> usize {
        match kind {
            TaskKind::Classification { .. } => self.classification,
            TaskKind::Regression => self.regression,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Pretrain,
    Holdout,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Pretrain => "pretrain",
            Split::Holdout => "holdout",
        })
    }
}

/// One (task, template, context count, seed) combination.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaseSpec {
    pub case_id: String,
    pub task_id: String,
    pub template: Template,
    pub n_context: usize,
    pub seed: u64,
    pub split: Split,
}

impl CaseSpec {
    pub fn new(task_id: &str, template: Template, n_context: usize, seed: u64, split: Split) -> Result<Self> {
        if !CONTEXT_COUNTS.contains(&n_context) {
            return Err(Error::InvalidContextCount(n_context));
        }
        Ok(Self {
            case_id: format!("{task_id}/{template}/n{n_context}/s{seed}"),
            task_id: task_id.to_string(),
            template,
            n_context,
            seed,
            split,
        })
    }
}

/// Demonstrations and the query rows they accompany.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ContextSet {
    pub examples: Vec<usize>,
    pub query_rows: Vec<usize>,
    pub seed: u64,
}

/// Order in which sampled demonstrations appear in the prompt.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DemoOrder {
    /// Interleave classes round by round, in class-index order.
    #[default]
    RoundRobin,
    /// Seeded permutation of the balanced selection.
    Shuffled,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum SampleWarning {
    /// A class had too few pool members for its quota; the shortfall was
    /// taken from the remaining classes.
    DegradedBalance { class: usize, wanted: usize, available: usize },
}

/// Disjoint (pool, eval) row-index sets, both sorted ascending.
pub fn split_rows(task: &TabularTask, seed: u64, eval_count: usize) -> Result<(Vec<usize>, Vec<usize>)> {
    let rows = task.rows.len();
    if eval_count >= rows {
        return Err(Error::EvalCountTooLarge { eval_count, rows });
    }
    let mut idx: Vec<usize> = (0..rows).collect();
    idx.shuffle(&mut rng_for(seed, &["split", &task.id]));
    let mut eval = idx[..eval_count].to_vec();
    let mut pool = idx[eval_count..].to_vec();
    eval.sort_unstable();
    pool.sort_unstable();
    Ok((pool, eval))
}

/// Sample `n_context` demonstrations from `pool`.
///
/// Classification draws are category balanced: every class gets
/// `n / C` demonstrations and the remainder goes to the classes with the
/// most pool members (ties by lower index). Regression draws are uniform
/// without replacement.
pub fn sample_context(
    task: &TabularTask,
    pool: &[usize],
    n_context: usize,
    seed: u64,
    order: DemoOrder,
) -> Result<(Vec<usize>, Vec<SampleWarning>)> {
    if pool.len() < n_context {
        return Err(Error::PoolTooSmall {
            pool: pool.len(),
            requested: n_context,
        });
    }
    if n_context == 0 {
        return Ok((Vec::new(), Vec::new()));
    }
    let mut rng = rng_for(seed, &["context", &task.id]);
    let classes = match task.kind {
        TaskKind::Regression => {
            let mut p = pool.to_vec();
            p.shuffle(&mut rng);
            p.truncate(n_context);
            return Ok((p, Vec::new()));
        }
        TaskKind::Classification { classes } => classes,
    };

    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for &i in pool {
        if let Some(c) = task.rows[i].label.class() {
            if c < classes {
                by_class[c].push(i);
            }
        }
    }
    for members in &mut by_class {
        members.shuffle(&mut rng);
    }
    let (quota, warnings) = class_quotas(&by_class.iter().map(Vec::len).collect::<Vec<_>>(), n_context);

    let picked: Vec<Vec<usize>> = by_class
        .iter()
        .zip(&quota)
        .map(|(members, &q)| members[..q].to_vec())
        .collect();
    let mut out = Vec::with_capacity(n_context);
    let rounds = quota.iter().copied().max().unwrap_or(0);
    for r in 0..rounds {
        for p in &picked {
            if let Some(&i) = p.get(r) {
                out.push(i);
            }
        }
    }
    if order == DemoOrder::Shuffled {
        out.shuffle(&mut rng);
    }
    Ok((out, warnings))
}

/// Per-class demonstration counts given per-class availability.
fn class_quotas(available: &[usize], n: usize) -> (Vec<usize>, Vec<SampleWarning>) {
    let c = available.len();
    let mut quota = vec![n / c; c];
    // classes by decreasing availability, ties by index
    let mut by_freq: Vec<usize> = (0..c).collect();
    by_freq.sort_by(|&a, &b| available[b].cmp(&available[a]).then(a.cmp(&b)));
    for &k in by_freq.iter().take(n % c) {
        quota[k] += 1;
    }
    let mut warnings = Vec::new();
    let mut shortfall = 0;
    for k in 0..c {
        if quota[k] > available[k] {
            warnings.push(SampleWarning::DegradedBalance {
                class: k,
                wanted: quota[k],
                available: available[k],
            });
            shortfall += quota[k] - available[k];
            quota[k] = available[k];
        }
    }
    // refill one at a time from the class with the most spare members
    while shortfall > 0 {
        let k = by_freq
            .iter()
            .copied()
            .filter(|&k| quota[k] < available[k])
            .max_by(|&a, &b| (available[a] - quota[a]).cmp(&(available[b] - quota[b])).then(b.cmp(&a)))
            .expect("pool size checked against n_context");
        quota[k] += 1;
        shortfall -= 1;
    }
    (quota, warnings)
}

/// Full Cartesian product in (task, template, n_context, seed) order.
pub fn enumerate_cases(
    tasks: &[(String, Split)],
    templates: &[Template],
    context_counts: &[usize],
    seeds: &[u64],
) -> Result<Vec<CaseSpec>> {
    if tasks.is_empty() {
        return Err(Error::EmptyAxis("tasks"));
    }
    if templates.is_empty() {
        return Err(Error::EmptyAxis("templates"));
    }
    if context_counts.is_empty() {
        return Err(Error::EmptyAxis("context counts"));
    }
    if seeds.is_empty() {
        return Err(Error::EmptyAxis("seeds"));
    }
    let mut out = Vec::with_capacity(tasks.len() * templates.len() * context_counts.len() * seeds.len());
    for (task_id, split) in tasks {
        for &template in templates {
            for &n in context_counts {
                for &seed in seeds {
                    out.push(CaseSpec::new(task_id, template, n, seed, *split)?);
                }
            }
        }
    }
    Ok(out)
}

/// Sample the demonstrations for a case. `pool` and `query_rows` must be
/// disjoint; the returned set never overlaps the queries.
pub fn context_for_case(
    task: &TabularTask,
    case: &CaseSpec,
    pool: &[usize],
    query_rows: Vec<usize>,
    order: DemoOrder,
) -> Result<(ContextSet, Vec<SampleWarning>)> {
    let queries: BTreeSet<usize> = query_rows.iter().copied().collect();
    let eligible: Vec<usize> = pool.iter().copied().filter(|i| !queries.contains(i)).collect();
    let seed = crate::rng::derive_seed(case.seed, &[&case.case_id]);
    let (examples, warnings) = sample_context(task, &eligible, case.n_context, seed, order)?;
    Ok((
        ContextSet {
            examples,
            query_rows,
            seed: case.seed,
        },
        warnings,
    ))
}
