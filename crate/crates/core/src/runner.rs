//! Executes configured runs and writes their outputs: a per-round CSV
//! trace and a JSON summary per run, plus an index for sweeps.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{run_baseline, BaselineKind};
use crate::config::{Algorithm, ParsedConfig, RunSpec, SweepPoint};
use crate::error::Result;
use crate::fedsoft::{run_experiment, run_fixed_weight_descent, ExperimentOutcome};
use crate::metrics::{association, cluster_divergence, Association};
use crate::types::{FederationDataset, ModelVector, RoundTrace, Seeds};

/// Result of one run, successful or interrupted.
#[derive(Debug, Clone)]
pub struct RunRecord {
    pub spec: RunSpec,
    pub outcome: ExperimentOutcome,
    pub error: Option<String>,
}

/// Generates the dataset and runs the configured algorithm.
pub fn execute(spec: &RunSpec) -> Result<RunRecord> {
    let dataset = spec.generate()?;
    Ok(execute_on(spec, &dataset))
}

pub fn execute_on(spec: &RunSpec, dataset: &FederationDataset) -> RunRecord {
    let model = spec.model();
    let cfg = &spec.experiment;
    let result = match spec.algorithm {
        Algorithm::Fedsoft => run_experiment(cfg, dataset, &model),
        Algorithm::Ifca => run_baseline(BaselineKind::Ifca, cfg, dataset, &model),
        Algorithm::Fedem => run_baseline(BaselineKind::Fedem, cfg, dataset, &model),
        Algorithm::Theorem5 => run_fixed_weight_descent(cfg, dataset, &model, &dataset.true_mixture),
    };
    match result {
        Ok(outcome) => RunRecord { spec: spec.clone(), outcome, error: None },
        Err(interrupted) => RunRecord {
            spec: spec.clone(),
            outcome: interrupted.partial,
            error: Some(interrupted.error.to_string()),
        },
    }
}

/// CSV header for S clusters.
pub fn csv_header(clusters: usize) -> String {
    let mut cols = vec!["round".to_string()];
    for i in 0..clusters {
        for s in 0..clusters {
            cols.push(format!("holdout_{i}_{s}"));
        }
    }
    cols.extend(
        [
            "mean_local_loss",
            "importance_error",
            "unique_selected",
            "joint_objective",
            "local_solves",
            "solves_per_participant",
            "center_values_sent",
        ]
        .map(String::from),
    );
    cols.join(",")
}

/// Per-round trace as CSV. Floats use the shortest representation that
/// parses back to the same value.
pub fn trace_csv(traces: &[RoundTrace], clusters: usize) -> String {
    let mut out = csv_header(clusters);
    out.push('\n');
    for t in traces {
        let _ = write!(out, "{}", t.round);
        for row in &t.holdout_loss {
            for v in row {
                let _ = write!(out, ",{v}");
            }
        }
        let joint = t.joint_objective.map(|v| v.to_string()).unwrap_or_default();
        let _ = writeln!(
            out,
            ",{},{},{},{},{},{},{}",
            t.mean_local_loss,
            t.importance_error,
            t.unique_selected,
            joint,
            t.local_solves,
            t.solves_per_participant,
            t.center_values_sent
        );
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub algorithm: Algorithm,
    pub config: RunSpec,
    pub seeds: Seeds,
    pub rounds_completed: usize,
    pub error: Option<String>,
    pub final_holdout_loss: Option<Vec<Vec<f64>>>,
    pub association: Option<Association>,
    /// (δ, Δ) over the final centers; absent for S = 1.
    pub center_divergence: Option<(f64, f64)>,
    pub final_mean_local_loss: Option<f64>,
    pub final_importance_error: Option<f64>,
    pub total_local_solves: usize,
    /// Clients whose local model was never updated.
    pub never_selected: Vec<usize>,
    pub centers: Vec<ModelVector>,
}

impl Summary {
    pub fn from_record(record: &RunRecord) -> Self {
        let out = &record.outcome;
        let last = out.traces.last();
        Summary {
            algorithm: record.spec.algorithm,
            config: record.spec.clone(),
            seeds: record.spec.experiment.seeds,
            rounds_completed: out.traces.len(),
            error: record.error.clone(),
            final_holdout_loss: last.map(|t| t.holdout_loss.clone()),
            association: last.map(|t| association(&t.holdout_loss)),
            center_divergence: cluster_divergence(out.centers.as_slice()).ok(),
            final_mean_local_loss: last.map(|t| t.mean_local_loss),
            final_importance_error: last.map(|t| t.importance_error),
            total_local_solves: out.traces.iter().map(|t| t.local_solves).sum(),
            never_selected: out.clients.iter().filter(|c| c.never_selected()).map(|c| c.id).collect(),
            centers: out.centers.as_slice().to_vec(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

/// Writes `contents` to a temporary sibling and renames it into place.
pub fn write_atomic(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, contents)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Writes `trace.csv` and `summary.json` for one run into `dir`.
pub fn write_run(dir: &Path, record: &RunRecord) -> Result<Summary> {
    let summary = Summary::from_record(record);
    write_atomic(
        &dir.join("trace.csv"),
        &trace_csv(&record.outcome.traces, record.spec.experiment.clusters),
    )?;
    write_atomic(&dir.join("summary.json"), &summary.to_json()?)?;
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub dir: String,
    pub label: String,
    pub error: Option<String>,
    pub final_mean_local_loss: Option<f64>,
    pub final_importance_error: Option<f64>,
}

/// Runs every sweep point (in parallel) and writes its outputs. A single
/// unswept run writes straight into `out`; sweeps get one subdirectory per
/// point plus `index.json` and `index.csv`.
pub fn run_all(parsed: &ParsedConfig, out: &Path) -> Result<Vec<Summary>> {
    let single = parsed.points.len() == 1;
    let results: Vec<Result<(IndexEntry, Summary)>> = parsed
        .points
        .par_iter()
        .enumerate()
        .map(|(i, point)| {
            let dir_name = if single { String::new() } else { format!("run-{i:03}") };
            let record = execute(&point.spec)?;
            let summary = write_run(&out.join(&dir_name), &record)?;
            Ok((index_entry(dir_name, point, &summary), summary))
        })
        .collect();
    let results: Vec<(IndexEntry, Summary)> = results.into_iter().collect::<Result<_>>()?;
    if !single {
        let entries: Vec<&IndexEntry> = results.iter().map(|r| &r.0).collect();
        let mut json = serde_json::to_string_pretty(&entries)?;
        json.push('\n');
        write_atomic(&out.join("index.json"), &json)?;
        let mut csv = String::from("dir,label,error,final_mean_local_loss,final_importance_error\n");
        for e in entries {
            let opt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
            let _ = writeln!(
                csv,
                "{},\"{}\",{},{},{}",
                e.dir,
                e.label,
                if e.error.is_some() { "yes" } else { "" },
                opt(e.final_mean_local_loss),
                opt(e.final_importance_error)
            );
        }
        write_atomic(&out.join("index.csv"), &csv)?;
    }
    Ok(results.into_iter().map(|r| r.1).collect())
}

fn index_entry(dir: String, point: &SweepPoint, summary: &Summary) -> IndexEntry {
    IndexEntry {
        dir,
        label: point.label(),
        error: summary.error.clone(),
        final_mean_local_loss: summary.final_mean_local_loss,
        final_importance_error: summary.final_importance_error,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::parse_config_str;

    #[test]
    fn header_lists_holdouts_row_major() {
        assert_eq!(
            csv_header(2),
            "round,holdout_0_0,holdout_0_1,holdout_1_0,holdout_1_1,mean_local_loss,importance_error,\
             unique_selected,joint_objective,local_solves,solves_per_participant,center_values_sent"
        );
    }

    #[test]
    fn csv_floats_round_trip() {
        let t = RoundTrace {
            round: 3,
            holdout_loss: vec![vec![0.1 + 0.2]],
            mean_local_loss: 1.0 / 3.0,
            importance_error: 0.0,
            unique_selected: 4,
            joint_objective: None,
            local_solves: 4,
            solves_per_participant: 1,
            center_values_sent: 0,
        };
        let csv = trace_csv(&[t], 1);
        let row: Vec<&str> = csv.lines().nth(1).unwrap().split(',').collect();
        assert_eq!(row[1].parse::<f64>().unwrap(), 0.1 + 0.2);
        assert_eq!(row[2].parse::<f64>().unwrap(), 1.0 / 3.0);
        assert_eq!(row[5], "");
    }

    #[test]
    fn summary_round_trips() {
        let spec = parse_config_str("rounds = 2\nclients = 10\nselection_size = 4\nholdout_size = 20\nshard_size_max = 120\npartition = \"random\"\nsolver = \"closed_form\"")
            .unwrap()
            .points[0]
            .spec
            .clone();
        let summary = Summary::from_record(&execute(&spec).unwrap());
        let text = summary.to_json().unwrap();
        let back = Summary::from_json(&text).unwrap();
        assert_eq!(back, summary);
        assert_eq!(back.to_json().unwrap(), text);
    }
}
