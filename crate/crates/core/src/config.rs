//! Run configuration files.
//!
//! A config is a flat TOML table of `key = value` pairs. Any value may be
//! replaced by a list, which turns that key into a sweep axis; a file with
//! several list-valued keys expands to their cartesian product. Unknown keys
//! are rejected. See [`KEYS`] for the accepted keys and their defaults.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use toml::Value;

use crate::datagen::{generate_classification_federation, generate_federation, PartitionPattern};
use crate::error::{Error, Result};
use crate::models::LossModel;
use crate::types::{ExperimentConfig, FederationDataset, Sampling, Seeds, SolverKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    Fedsoft,
    Ifca,
    Fedem,
    /// Fixed true-mixture weights, full participation, exact solves and
    /// importance-weighted center updates; records the joint objective.
    Theorem5,
}

impl Algorithm {
    pub fn name(self) -> &'static str {
        match self {
            Algorithm::Fedsoft => "fedsoft",
            Algorithm::Ifca => "ifca",
            Algorithm::Fedem => "fedem",
            Algorithm::Theorem5 => "theorem5",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TaskSpec {
    Regression,
    Classification { classes: usize, separation: f64 },
}

/// Everything needed to generate data and execute one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSpec {
    pub algorithm: Algorithm,
    pub experiment: ExperimentConfig,
    /// Spread of the true cluster parameters (regression).
    pub sigma0: f64,
    pub partition: PartitionPattern,
    pub task: TaskSpec,
}

impl Default for RunSpec {
    fn default() -> Self {
        RunSpec {
            algorithm: Algorithm::Fedsoft,
            experiment: ExperimentConfig::default(),
            sigma0: 10.0,
            partition: PartitionPattern::FixedRatio { a: 10, b: 90 },
            task: TaskSpec::Regression,
        }
    }
}

impl RunSpec {
    pub fn model(&self) -> LossModel {
        match self.task {
            TaskSpec::Regression => LossModel::linear_regression(self.experiment.dim),
            TaskSpec::Classification { classes, .. } => {
                LossModel::multinomial_logistic(self.experiment.dim + 1, classes)
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        let e = &self.experiment;
        e.validate()?;
        self.partition.validate(e.clients, e.clusters)?;
        if !(self.sigma0 > 0.0 && self.sigma0.is_finite()) {
            return Err(Error::config("sigma0", "σ₀ > 0"));
        }
        if let TaskSpec::Classification { classes, separation } = self.task {
            if classes < 2 {
                return Err(Error::config("classes", "classes ≥ 2"));
            }
            if !(separation >= 0.0 && separation.is_finite()) {
                return Err(Error::config("separation", "separation ≥ 0"));
            }
            if e.solver.kind == SolverKind::ClosedForm {
                return Err(Error::config("solver", "closed_form needs the regression task"));
            }
            if self.algorithm == Algorithm::Theorem5 {
                return Err(Error::config("algorithm", "theorem5 needs the regression task"));
            }
        }
        Ok(())
    }

    pub fn generate(&self) -> Result<FederationDataset> {
        match self.task {
            TaskSpec::Regression => generate_federation(&self.experiment, self.sigma0, self.partition),
            TaskSpec::Classification { classes, separation } => {
                generate_classification_federation(&self.experiment, self.partition, classes, separation)
            }
        }
    }

    /// The fully defaulted config in file syntax; parsing it yields `self`.
    pub fn echo(&self) -> String {
        let e = &self.experiment;
        let (task, classes, separation) = match self.task {
            TaskSpec::Regression => ("regression", 2, 1.0),
            TaskSpec::Classification { classes, separation } => ("classification", classes, separation),
        };
        let mut out = String::new();
        let mut line = |k: &str, v: Value| {
            let _ = writeln!(out, "{k} = {v}");
        };
        line("algorithm", self.algorithm.name().into());
        line("task", task.into());
        line("classes", (classes as i64).into());
        line("separation", separation.into());
        line("clusters", (e.clusters as i64).into());
        line("clients", (e.clients as i64).into());
        line("selection_size", (e.selection_size as i64).into());
        line("tau", (e.estimation_interval as i64).into());
        line("sigma", e.smoothing.into());
        line("lambda", e.lambda.into());
        line("rounds", (e.rounds as i64).into());
        line("sampling", sampling_name(e.sampling).into());
        line("solver", solver_name(e.solver.kind).into());
        line("local_epochs", (e.solver.local_epochs as i64).into());
        line("batch_size", (e.solver.batch_size as i64).into());
        line("step_size", e.solver.step_size.into());
        line("adaptive", e.solver.adaptive.into());
        line("data_seed", seed_value(e.seeds.data));
        line("init_seed", seed_value(e.seeds.init));
        line("selection_seed", seed_value(e.seeds.selection));
        line("holdout_size", (e.holdout_size as i64).into());
        line("dim", (e.dim as i64).into());
        line("shard_size_min", (e.shard_size_min as i64).into());
        line("shard_size_max", (e.shard_size_max as i64).into());
        line("noise_std", e.noise_std.into());
        line("sigma0", self.sigma0.into());
        line("partition", partition_name(self.partition).into());
        out
    }
}

fn seed_value(seed: u64) -> Value {
    Value::Integer(seed as i64)
}

fn sampling_name(s: Sampling) -> &'static str {
    match s {
        Sampling::WithReplacement => "with_replacement",
        Sampling::WithoutReplacement => "without_replacement",
    }
}

fn solver_name(k: SolverKind) -> &'static str {
    match k {
        SolverKind::ClosedForm => "closed_form",
        SolverKind::GradientIterative => "gradient_iterative",
    }
}

fn partition_name(p: PartitionPattern) -> String {
    match p {
        PartitionPattern::FixedRatio { a, b } => format!("{a}:{b}"),
        PartitionPattern::Linear => "linear".into(),
        PartitionPattern::Random => "random".into(),
    }
}

/// Accepted keys with a short description of their default.
pub const KEYS: &[(&str, &str)] = &[
    ("algorithm", "fedsoft | ifca | fedem | theorem5 (default fedsoft)"),
    ("task", "regression | classification (default regression)"),
    ("classes", "class count for classification (default 2)"),
    ("separation", "cluster separation for classification (default 1.0)"),
    ("clusters", "S (default 2)"),
    ("clients", "N (default 100)"),
    ("selection_size", "K (default 60)"),
    ("tau", "importance estimation interval (default 2)"),
    ("sigma", "importance floor (default 1e-4)"),
    ("lambda", "proximal weight (default 1.0)"),
    ("rounds", "T (default 50)"),
    ("sampling", "with_replacement | without_replacement (default with_replacement)"),
    ("solver", "closed_form | gradient_iterative (default gradient_iterative)"),
    ("local_epochs", "default 10"),
    ("batch_size", "default 10"),
    ("step_size", "default 5e-3"),
    ("adaptive", "Adam-style updates (default true)"),
    ("seed", "sets data_seed = seed, init_seed = seed + 1, selection_seed = seed + 2 (default 0)"),
    ("data_seed", "overrides the data seed"),
    ("init_seed", "overrides the center initialization seed"),
    ("selection_seed", "overrides the selection and local-solver seed"),
    ("holdout_size", "points per distribution (default 1000)"),
    ("dim", "feature dimension d (default 10)"),
    ("shard_size_min", "default 100"),
    ("shard_size_max", "default 200"),
    ("noise_std", "label noise std (default 1.0)"),
    ("sigma0", "spread of the true parameters (default 10)"),
    ("partition", "\"a:b\" | linear | random (default \"10:90\")"),
];

/// One expanded run of a (possibly swept) config.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepPoint {
    /// Values of the swept keys at this point, in key order.
    pub overrides: Vec<(String, Value)>,
    pub spec: RunSpec,
}

impl SweepPoint {
    /// `key=value` pairs joined by commas; empty for an unswept config.
    pub fn label(&self) -> String {
        self.overrides
            .iter()
            .map(|(k, v)| format!("{k}={}", plain(v)))
            .collect::<Vec<_>>()
            .join(",")
    }
}

fn plain(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParsedConfig {
    /// Swept keys in the order their values vary (last key fastest).
    pub axes: Vec<String>,
    pub points: Vec<SweepPoint>,
}

pub fn parse_config(path: &Path) -> Result<ParsedConfig> {
    let text = std::fs::read_to_string(path)?;
    parse_config_str(&text)
}

pub fn parse_config_str(text: &str) -> Result<ParsedConfig> {
    let table: toml::Table = text
        .parse()
        .map_err(|e: toml::de::Error| Error::config("file", e.message().to_string()))?;
    let mut fixed = BTreeMap::new();
    let mut axes: Vec<(String, Vec<Value>)> = vec![];
    for (key, value) in table {
        if !KEYS.iter().any(|(k, _)| *k == key) {
            return Err(Error::config(key, "unknown key"));
        }
        match value {
            Value::Array(values) => {
                if values.is_empty() {
                    return Err(Error::config(key, "sweep list must not be empty"));
                }
                axes.push((key, values));
            }
            Value::Table(_) => return Err(Error::config(key, "nested tables are not allowed")),
            v => {
                fixed.insert(key, v);
            }
        }
    }

    let mut points = vec![];
    let total: usize = axes.iter().map(|(_, v)| v.len()).product();
    for idx in 0..total {
        let mut rem = idx;
        let mut chosen = vec![];
        for (key, values) in axes.iter().rev() {
            chosen.push((key.clone(), values[rem % values.len()].clone()));
            rem /= values.len();
        }
        chosen.reverse();
        let mut all = fixed.clone();
        all.extend(chosen.iter().cloned());
        let spec = build(&all)?;
        points.push(SweepPoint { overrides: chosen, spec });
    }
    Ok(ParsedConfig {
        axes: axes.into_iter().map(|(k, _)| k).collect(),
        points,
    })
}

fn as_usize(key: &str, v: &Value) -> Result<usize> {
    match v {
        Value::Integer(i) if *i >= 0 => Ok(*i as usize),
        _ => Err(Error::config(key, "expected a non-negative integer")),
    }
}

fn as_u64(key: &str, v: &Value) -> Result<u64> {
    match v {
        Value::Integer(i) if *i >= 0 => Ok(*i as u64),
        _ => Err(Error::config(key, "expected a non-negative integer")),
    }
}

fn as_f64(key: &str, v: &Value) -> Result<f64> {
    match v {
        Value::Float(f) => Ok(*f),
        Value::Integer(i) => Ok(*i as f64),
        _ => Err(Error::config(key, "expected a number")),
    }
}

fn as_bool(key: &str, v: &Value) -> Result<bool> {
    v.as_bool().ok_or_else(|| Error::config(key, "expected true or false"))
}

fn as_str<'v>(key: &str, v: &'v Value) -> Result<&'v str> {
    v.as_str().ok_or_else(|| Error::config(key, "expected a string"))
}

fn parse_partition(v: &Value) -> Result<PartitionPattern> {
    let s = as_str("partition", v)?;
    match s {
        "linear" => Ok(PartitionPattern::Linear),
        "random" => Ok(PartitionPattern::Random),
        _ => {
            let bad = || Error::config("partition", format!("expected \"a:b\", linear or random, got {s:?}"));
            let (a, b) = s.split_once(':').ok_or_else(bad)?;
            Ok(PartitionPattern::FixedRatio {
                a: a.trim().parse().map_err(|_| bad())?,
                b: b.trim().parse().map_err(|_| bad())?,
            })
        }
    }
}

fn build(values: &BTreeMap<String, Value>) -> Result<RunSpec> {
    let mut spec = RunSpec::default();
    let mut classes = 2;
    let mut separation = 1.0;
    let mut classification = false;
    if let Some(v) = values.get("seed") {
        spec.experiment.seeds = Seeds::all(as_u64("seed", v)?);
    }
    for (key, v) in values {
        let k = key.as_str();
        let e = &mut spec.experiment;
        match k {
            "algorithm" => {
                spec.algorithm = match as_str(k, v)? {
                    "fedsoft" => Algorithm::Fedsoft,
                    "ifca" => Algorithm::Ifca,
                    "fedem" => Algorithm::Fedem,
                    "theorem5" => Algorithm::Theorem5,
                    other => return Err(Error::config(k, format!("unknown algorithm {other:?}"))),
                }
            }
            "task" => {
                classification = match as_str(k, v)? {
                    "regression" => false,
                    "classification" => true,
                    other => return Err(Error::config(k, format!("unknown task {other:?}"))),
                }
            }
            "classes" => classes = as_usize(k, v)?,
            "separation" => separation = as_f64(k, v)?,
            "clusters" => e.clusters = as_usize(k, v)?,
            "clients" => e.clients = as_usize(k, v)?,
            "selection_size" => e.selection_size = as_usize(k, v)?,
            "tau" => e.estimation_interval = as_usize(k, v)?,
            "sigma" => e.smoothing = as_f64(k, v)?,
            "lambda" => e.lambda = as_f64(k, v)?,
            "rounds" => e.rounds = as_usize(k, v)?,
            "sampling" => {
                e.sampling = match as_str(k, v)? {
                    "with_replacement" => Sampling::WithReplacement,
                    "without_replacement" => Sampling::WithoutReplacement,
                    other => return Err(Error::config(k, format!("unknown sampling {other:?}"))),
                }
            }
            "solver" => {
                e.solver.kind = match as_str(k, v)? {
                    "closed_form" => SolverKind::ClosedForm,
                    "gradient_iterative" => SolverKind::GradientIterative,
                    other => return Err(Error::config(k, format!("unknown solver {other:?}"))),
                }
            }
            "local_epochs" => e.solver.local_epochs = as_usize(k, v)?,
            "batch_size" => e.solver.batch_size = as_usize(k, v)?,
            "step_size" => e.solver.step_size = as_f64(k, v)?,
            "adaptive" => e.solver.adaptive = as_bool(k, v)?,
            "seed" => {}
            "data_seed" => e.seeds.data = as_u64(k, v)?,
            "init_seed" => e.seeds.init = as_u64(k, v)?,
            "selection_seed" => e.seeds.selection = as_u64(k, v)?,
            "holdout_size" => e.holdout_size = as_usize(k, v)?,
            "dim" => e.dim = as_usize(k, v)?,
            "shard_size_min" => e.shard_size_min = as_usize(k, v)?,
            "shard_size_max" => e.shard_size_max = as_usize(k, v)?,
            "noise_std" => e.noise_std = as_f64(k, v)?,
            "sigma0" => spec.sigma0 = as_f64(k, v)?,
            "partition" => spec.partition = parse_partition(v)?,
            _ => return Err(Error::config(k, "unknown key")),
        }
    }
    if classification {
        spec.task = TaskSpec::Classification { classes, separation };
    }
    spec.validate()?;
    Ok(spec)
}
