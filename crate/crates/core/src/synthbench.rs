//! Synthetic tabular tasks with known generators.
//!
//! Features are small integers drawn uniformly from `0..levels`, so every
//! cell renders as a single digit. Labels come from a hidden linear or
//! piecewise score; the true conditional probability (classification) or
//! mean (regression) is kept so oracle metrics can be computed.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluation::{auroc_multiclass, nmae_scaled};
use crate::rng::{derive_seed, rng_for};
use crate::tabular::{Cell, FeatureKind, FeatureSpec, Label, Row, TabularTask, TaskKind, TaskMeta};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Generator {
    /// Bernoulli label with logit `w . z`.
    LinearLogit,
    /// Like `LinearLogit` with only two nonzero weights.
    SparseLinear,
    /// Logit is a weighted sum of per-feature threshold steps.
    Piecewise,
    /// `offset + scale * (w . z) + gaussian noise`, rounded to an integer.
    LinearRegressionGaussianNoise,
}

impl Generator {
    pub fn is_classification(&self) -> bool {
        !matches!(self, Generator::LinearRegressionGaussianNoise)
    }
}

/// Which part of the metadata vocabulary a task draws names from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VocabSlice {
    Pretrain,
    Holdout,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthTaskSpec {
    pub id: String,
    pub seed: u64,
    pub n_features: usize,
    pub generator: Generator,
    /// Logistic temperature for classification, noise standard deviation in
    /// units of the signal for regression.
    pub noise: f64,
    /// Euclidean norm of the hidden weight vector.
    pub weight_norm: f64,
    /// Number of distinct feature values.
    pub levels: usize,
    pub vocab: VocabSlice,
}

impl SynthTaskSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidTask(format!("{}: {m}", self.id)));
        if self.n_features == 0 {
            return bad("needs at least one feature".into());
        }
        if !(self.noise >= 0.0) || !self.noise.is_finite() {
            return bad(format!("noise {} must be finite and non-negative", self.noise));
        }
        if !(self.weight_norm > 0.0) || !self.weight_norm.is_finite() {
            return bad(format!("weight norm {} must be positive", self.weight_norm));
        }
        if !(2..=10).contains(&self.levels) {
            return bad(format!("levels {} outside 2..=10", self.levels));
        }
        Ok(())
    }
}

/// Generator parameters, hidden from the model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HiddenParams {
    pub weights: Vec<f64>,
    pub bias: f64,
    /// Step locations for the piecewise generator, in standardized units.
    pub thresholds: Vec<f64>,
    /// Regression label = offset + scale * score + noise.
    pub offset: f64,
    pub scale: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthTask {
    pub spec: SynthTaskSpec,
    pub hidden: HiddenParams,
    pub task: TabularTask,
}

struct Names {
    features: &'static [(&'static str, &'static str)],
    domains: &'static [&'static str],
    class_labels: &'static [(&'static str, &'static str, [&'static str; 2])],
    value_labels: &'static [(&'static str, &'static str)],
}

const PRETRAIN_NAMES: Names = Names {
    features: &[
        ("soil_ph", "acidity of the soil sample"),
        ("leaf_area", "surface area of a leaf"),
        ("rainfall", "weekly rainfall level"),
        ("sun_hours", "hours of direct sunlight"),
        ("wind_speed", "average wind speed"),
        ("humidity", "relative air humidity"),
        ("altitude", "elevation of the field"),
        ("seed_mass", "mass of a single seed"),
        ("root_depth", "depth of the main root"),
        ("nitrogen", "nitrogen content of the soil"),
        ("age_group", "age bracket of the customer"),
        ("visits", "store visits in the last month"),
        ("basket_size", "items per purchase"),
        ("coupon_use", "coupons redeemed"),
        ("tenure", "years as a member"),
        ("region_code", "sales region of the account"),
        ("engine_load", "relative engine load"),
        ("oil_temp", "oil temperature band"),
        ("vibration", "vibration intensity"),
        ("pressure", "hydraulic pressure level"),
        ("rpm_band", "rotation speed band"),
        ("fuel_rate", "fuel consumption rate"),
        ("blood_sugar", "fasting blood sugar level"),
        ("heart_rate", "resting heart rate band"),
        ("bmi_band", "body mass index bracket"),
        ("sleep_hours", "average nightly sleep"),
        ("steps", "daily step count band"),
        ("stress", "self reported stress level"),
        ("room_count", "number of rooms"),
        ("floor", "floor of the apartment"),
        ("distance", "distance to the city center"),
        ("noise_level", "street noise level"),
    ],
    domains: &["crop", "retail", "machinery", "clinical", "housing", "logistics", "energy", "education"],
    class_labels: &[
        ("harvest_ok", "whether the harvest met its target", ["no", "yes"]),
        ("churned", "whether the customer left", ["stayed", "left"]),
        ("failure", "whether the machine failed", ["healthy", "failed"]),
        ("at_risk", "whether the patient is at risk", ["low", "high"]),
        ("sold", "whether the listing sold", ["unsold", "sold"]),
        ("delayed", "whether the shipment was late", ["on time", "late"]),
    ],
    value_labels: &[
        ("yield", "crop yield per plot"),
        ("spend", "monthly spend of the customer"),
        ("lifetime", "remaining service hours"),
        ("score", "overall health score"),
        ("price", "asking price in thousands"),
        ("transit_days", "days in transit"),
    ],
};

const HOLDOUT_NAMES: Names = Names {
    features: &[
        ("salinity", "salt content of the water"),
        ("turbidity", "cloudiness of the water"),
        ("depth_band", "sampling depth band"),
        ("algae", "algae concentration"),
        ("current", "water current strength"),
        ("oxygen", "dissolved oxygen level"),
        ("clicks", "ad clicks per session"),
        ("dwell", "time spent on the page"),
        ("scroll", "scroll depth band"),
        ("referrals", "referral count"),
        ("latency", "page load latency band"),
        ("device", "device class code"),
        ("voltage", "cell voltage band"),
        ("charge_cycles", "completed charge cycles"),
        ("cell_temp", "cell temperature band"),
        ("impedance", "internal impedance level"),
    ],
    domains: &["marine", "web analytics", "battery", "survey"],
    class_labels: &[
        ("bloom", "whether an algae bloom occurred", ["absent", "present"]),
        ("converted", "whether the visitor converted", ["no", "yes"]),
        ("degraded", "whether the cell degraded", ["intact", "degraded"]),
    ],
    value_labels: &[
        ("fish_count", "fish counted per survey"),
        ("revenue", "revenue per visit"),
        ("capacity", "remaining capacity"),
    ],
};

fn names(slice: VocabSlice) -> &'static Names {
    match slice {
        VocabSlice::Pretrain => &PRETRAIN_NAMES,
        VocabSlice::Holdout => &HOLDOUT_NAMES,
    }
}

fn level_stats(levels: usize) -> (f64, f64) {
    let l = levels as f64;
    ((l - 1.0) / 2.0, ((l * l - 1.0) / 12.0).sqrt())
}

fn standardize(x: &[f64], levels: usize) -> Vec<f64> {
    let (mean, sd) = level_stats(levels);
    x.iter().map(|v| (v - mean) / sd).collect()
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Hidden score `w . z` (or the step-sum for the piecewise generator).
fn score(spec: &SynthTaskSpec, hidden: &HiddenParams, x: &[f64]) -> f64 {
    let z = standardize(x, spec.levels);
    let dot: f64 = match spec.generator {
        Generator::Piecewise => z
            .iter()
            .zip(&hidden.thresholds)
            .zip(&hidden.weights)
            .map(|((zi, t), w)| if zi > t { *w } else { -*w })
            .sum(),
        _ => z.iter().zip(&hidden.weights).map(|(a, b)| a * b).sum(),
    };
    dot + hidden.bias
}

/// P(label = 1 | x) for classification, E[label | x] for regression.
pub fn conditional(spec: &SynthTaskSpec, hidden: &HiddenParams, x: &[f64]) -> f64 {
    let s = score(spec, hidden, x);
    if spec.generator.is_classification() {
        if spec.noise == 0.0 {
            if s > 0.0 {
                1.0
            } else {
                0.0
            }
        } else {
            sigmoid(s / spec.noise)
        }
    } else {
        hidden.offset + hidden.scale * s
    }
}

fn hidden_params(spec: &SynthTaskSpec) -> HiddenParams {
    let mut rng = rng_for(spec.seed, &["synth-params"]);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let m = spec.n_features;
    let mut w: Vec<f64> = (0..m).map(|_| normal.sample(&mut rng)).collect();
    if spec.generator == Generator::SparseLinear && m > 2 {
        let a = rng.random_range(0..m);
        let b = (a + 1 + rng.random_range(0..m - 1)) % m;
        for (i, wi) in w.iter_mut().enumerate() {
            if i != a && i != b {
                *wi = 0.0;
            }
        }
    }
    let norm = w.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
    for wi in &mut w {
        *wi *= spec.weight_norm / norm;
    }
    let thresholds = (0..m).map(|_| rng.random_range(-0.8..0.8)).collect();
    HiddenParams {
        weights: w,
        bias: 0.0,
        thresholds,
        offset: rng.random_range(10.0..90.0),
        scale: rng.random_range(3.0..10.0),
    }
}

fn meta_for(spec: &SynthTaskSpec) -> (Vec<FeatureSpec>, TaskMeta) {
    let pool = names(spec.vocab);
    let mut rng = rng_for(spec.seed, &["synth-meta"]);
    let mut idx: Vec<usize> = (0..pool.features.len()).collect();
    // partial Fisher-Yates for a distinct feature subset
    for i in 0..spec.n_features.min(idx.len()) {
        let j = rng.random_range(i..idx.len());
        idx.swap(i, j);
    }
    let features = (0..spec.n_features)
        .map(|i| {
            let (name, desc) = pool.features[idx[i % idx.len()]];
            // repeat a name only when the vocabulary runs out
            let name = if i < idx.len() { name.to_string() } else { format!("{name}_{i}") };
            FeatureSpec::new(name, FeatureKind::Numerical, Some(desc))
        })
        .collect();
    let domain = pool.domains[rng.random_range(0..pool.domains.len())];
    let background = format!("Each row is a record from a {domain} study.");
    let meta = if spec.generator.is_classification() {
        let (name, desc, classes) = pool.class_labels[rng.random_range(0..pool.class_labels.len())];
        TaskMeta {
            background: Some(background),
            label_description: Some(desc.to_string()),
            class_names: classes.iter().map(|c| c.to_string()).collect(),
            label_name: name.to_string(),
        }
    } else {
        let (name, desc) = pool.value_labels[rng.random_range(0..pool.value_labels.len())];
        TaskMeta {
            background: Some(background),
            label_description: Some(desc.to_string()),
            class_names: Vec::new(),
            label_name: name.to_string(),
        }
    };
    (features, meta)
}

fn draw_rows(spec: &SynthTaskSpec, hidden: &HiddenParams, n: usize, rng: &mut impl Rng) -> Vec<Row> {
    let noise = Normal::new(0.0, 1.0).expect("unit normal");
    (0..n)
        .map(|_| {
            let x: Vec<f64> = (0..spec.n_features).map(|_| rng.random_range(0..spec.levels) as f64).collect();
            let c = conditional(spec, hidden, &x);
            let label = if spec.generator.is_classification() {
                Label::Class(usize::from(rng.random::<f64>() < c))
            } else {
                let eps = noise.sample(rng) * spec.noise * hidden.scale;
                Label::Value((c + eps).round())
            };
            Row {
                values: x.into_iter().map(Cell::Num).collect(),
                label,
            }
        })
        .collect()
}

/// Draw `n_rows` rows. The task and its hidden parameters depend only on
/// the spec.
pub fn gen_task(spec: &SynthTaskSpec, n_rows: usize) -> Result<SynthTask> {
    spec.validate()?;
    if n_rows < 4 {
        return Err(Error::InvalidTask(format!("{}: needs at least 4 rows, got {n_rows}", spec.id)));
    }
    let hidden = hidden_params(spec);
    let (features, meta) = meta_for(spec);
    let mut rng = rng_for(spec.seed, &["synth-rows"]);
    let rows = draw_rows(spec, &hidden, n_rows, &mut rng);
    let kind = if spec.generator.is_classification() {
        TaskKind::Classification { classes: 2 }
    } else {
        TaskKind::Regression
    };
    Ok(SynthTask {
        spec: spec.clone(),
        hidden,
        task: TabularTask {
            id: spec.id.clone(),
            features,
            rows,
            kind,
            meta,
        },
    })
}

fn row_x(row: &Row) -> Vec<f64> {
    row.values
        .iter()
        .map(|c| match c {
            Cell::Num(v) => *v,
            _ => f64::NAN,
        })
        .collect()
}

/// Oracle metric on `rows`: AUROC of the true conditional probability, or
/// range-normalized NMAE of the true conditional mean.
pub fn bayes_metric(task: &SynthTask, rows: &[Row]) -> Result<f64> {
    if task.spec.generator.is_classification() {
        let probs: Vec<Vec<f64>> = rows
            .iter()
            .map(|r| {
                let p = conditional(&task.spec, &task.hidden, &row_x(r));
                vec![1.0 - p, p]
            })
            .collect();
        let labels: Vec<usize> = rows.iter().map(|r| r.label.class().unwrap_or(0)).collect();
        auroc_multiclass(&probs, &labels)
    } else {
        let truths: Vec<f64> = rows.iter().map(|r| r.label.as_f64()).collect();
        let preds: Vec<Option<f64>> = rows
            .iter()
            .map(|r| Some(conditional(&task.spec, &task.hidden, &row_x(r))))
            .collect();
        let scale = crate::evaluation::normalizer(&truths, crate::evaluation::NmaeNormalizer::Range)?;
        nmae_scaled(&preds, &truths, scale)
    }
}

/// Oracle metric estimated on `draws` fresh rows from the generator.
pub fn monte_carlo_bayes(spec: &SynthTaskSpec, draws: usize) -> Result<f64> {
    let mut t = gen_task(spec, 4)?;
    // an independent stream, so these rows differ from the task's own
    let mut rng = rng_for(spec.seed, &["synth-monte-carlo"]);
    t.task.rows = draw_rows(spec, &t.hidden, draws, &mut rng);
    bayes_metric(&t, &t.task.rows)
}

/// Knobs of a synthetic suite.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteConfig {
    pub n_pretrain: usize,
    pub n_holdout: usize,
    pub seed: u64,
    pub rows_per_task: usize,
    pub min_features: usize,
    pub max_features: usize,
    pub levels: usize,
    /// Weight norms of pretraining tasks are drawn from this interval.
    pub pretrain_norm: (f64, f64),
    /// Holdout weight norms come from a disjoint interval.
    pub holdout_norm: (f64, f64),
    pub class_noise: f64,
    pub regression_noise: f64,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        SuiteConfig {
            n_pretrain: 40,
            n_holdout: 8,
            seed: 0,
            rows_per_task: 512,
            min_features: 4,
            max_features: 8,
            levels: 5,
            pretrain_norm: (1.5, 3.0),
            holdout_norm: (3.0, 4.0),
            class_noise: 1.0,
            regression_noise: 0.3,
        }
    }
}

const CLASS_GENERATORS: [Generator; 3] = [Generator::LinearLogit, Generator::SparseLinear, Generator::Piecewise];

/// Specs of a suite: tasks alternate classification and regression, and
/// the two splits draw seeds, weight norms and names from disjoint ranges.
pub fn suite_specs(cfg: &SuiteConfig) -> Result<(Vec<SynthTaskSpec>, Vec<SynthTaskSpec>)> {
    if cfg.n_pretrain == 0 || cfg.n_holdout == 0 {
        return Err(Error::InvalidTask("suite needs at least one task per split".into()));
    }
    if cfg.min_features == 0 || cfg.min_features > cfg.max_features {
        return Err(Error::InvalidTask("invalid feature-count range".into()));
    }
    let (p, h) = (cfg.pretrain_norm, cfg.holdout_norm);
    let overlap = p.0 < h.1 && h.0 < p.1;
    if !(p.0 < p.1 && h.0 < h.1) || overlap {
        return Err(Error::InvalidTask("weight-norm intervals must be proper and disjoint".into()));
    }
    let make = |split: VocabSlice, i: usize, norms: (f64, f64)| -> SynthTaskSpec {
        let tag = match split {
            VocabSlice::Pretrain => "pretrain",
            VocabSlice::Holdout => "holdout",
        };
        let seed = derive_seed(cfg.seed, &["suite", tag, &i.to_string()]);
        let mut rng = rng_for(seed, &["suite-shape"]);
        let generator = if i.is_multiple_of(2) {
            CLASS_GENERATORS[(i / 2) % CLASS_GENERATORS.len()]
        } else {
            Generator::LinearRegressionGaussianNoise
        };
        let noise = if generator.is_classification() {
            cfg.class_noise
        } else {
            cfg.regression_noise
        };
        SynthTaskSpec {
            id: format!("synth-{}{:03}", &tag[..1], i),
            seed,
            n_features: rng.random_range(cfg.min_features..=cfg.max_features),
            generator,
            noise,
            // half-open draw keeps the two intervals disjoint at the shared end
            weight_norm: norms.0 + (norms.1 - norms.0) * rng.random::<f64>(),
            levels: cfg.levels,
            vocab: split,
        }
    };
    let pre = (0..cfg.n_pretrain).map(|i| make(VocabSlice::Pretrain, i, p)).collect();
    let hold = (0..cfg.n_holdout).map(|i| make(VocabSlice::Holdout, i, h)).collect();
    Ok((pre, hold))
}

/// Generate both splits of a suite.
pub fn build_suite(cfg: &SuiteConfig) -> Result<(Vec<SynthTask>, Vec<SynthTask>)> {
    let (pre, hold) = suite_specs(cfg)?;
    let gen = |specs: Vec<SynthTaskSpec>| -> Result<Vec<SynthTask>> {
        specs.iter().map(|s| gen_task(s, cfg.rows_per_task)).collect()
    };
    let pre = gen(pre)?;
    let hold = gen(hold)?;
    if pre.iter().any(|a| hold.iter().any(|b| a.hidden == b.hidden)) {
        return Err(Error::InvalidTask("holdout task duplicates a pretraining task".into()));
    }
    Ok((pre, hold))
}
