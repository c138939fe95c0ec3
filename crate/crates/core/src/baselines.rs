//! IFCA (hard assignment to the lowest-loss center) and FedEM (per-point
//! EM responsibilities, one weighted solve per cluster) on the same data,
//! models, solvers and traces as FedSoft.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fedsoft::{initial_state, ExperimentOutcome, Interrupted, RunResult};
use crate::metrics::{self, Evaluator};
use crate::models::{argmin_by, log_sum_exp, LossModel};
use crate::proximal::ProximalProblem;
use crate::rng::{stream, Purpose};
use crate::types::{
    CenterSet, ClientState, ExperimentConfig, FederationDataset, ModelVector, RoundTrace, Sample,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BaselineKind {
    Ifca,
    Fedem,
}

/// Server-side baseline state. `assignment` is IFCA's cluster per client;
/// `mixture` is FedEM's `π` per client (rows on the simplex).
#[derive(Debug, Clone)]
pub struct BaselineState {
    pub kind: BaselineKind,
    pub centers: CenterSet,
    pub round: usize,
    pub config: ExperimentConfig,
    pub assignment: Vec<usize>,
    pub mixture: Vec<Vec<f64>>,
}

/// Per-client view used to pick a baseline's local model.
#[derive(Debug, Clone, Copy)]
pub enum LocalChoice<'a> {
    Assignment(usize),
    Mixture(&'a [f64]),
}

/// IFCA: the assigned center. FedEM: the center with the largest `π_ks`
/// (ties to the lowest index).
pub fn baseline_local_model(centers: &CenterSet, choice: LocalChoice<'_>) -> ModelVector {
    let s = match choice {
        LocalChoice::Assignment(s) => s,
        LocalChoice::Mixture(pi) => argmin_by(pi, |p| -p),
    };
    centers.get(s).clone()
}

/// Index of the center with the lowest empirical loss on `shard`.
pub fn best_center(shard: &[Sample], centers: &CenterSet, model: &LossModel) -> usize {
    let losses: Vec<f64> = centers.iter().map(|c| model.batch_risk(c, shard)).collect();
    argmin_by(&losses, |l| l)
}

/// Uniform sample of `min(K·S, N)` distinct clients, sorted.
pub fn sample_participants(config: &ExperimentConfig, round: usize) -> Vec<usize> {
    let n = config.clients;
    let m = (config.selection_size * config.clusters).min(n);
    let mut rng = stream(config.seeds.selection, Purpose::Participation, round as u64, 0);
    let mut ids = rand::seq::index::sample(&mut rng, n, m).into_vec();
    ids.sort_unstable();
    ids
}

/// Weighted mean of `(weight, model)` pairs; `None` when the weights sum to 0.
fn weighted_mean(dim: usize, terms: &[(f64, &ModelVector)]) -> Option<ModelVector> {
    let total: f64 = terms.iter().map(|t| t.0).sum();
    (total > 0.0).then(|| ModelVector::weighted_sum(dim, terms.iter().map(|(w, m)| (w / total, *m))))
}

/// One IFCA round over `participants`. Returns the new centers.
pub fn ifca_round(
    state: &mut BaselineState,
    clients: &mut [ClientState],
    model: &LossModel,
    participants: &[usize],
) -> Result<CenterSet> {
    let cfg = &state.config;
    let centers = &state.centers;
    let t = state.round;
    let s_count = centers.len();
    let zero = vec![0.0; s_count];
    let mut chosen = vec![false; clients.len()];
    for &k in participants {
        chosen[k] = true;
    }
    let solved: Vec<Result<(usize, usize)>> = clients
        .par_iter_mut()
        .filter(|c| chosen[c.id])
        .map(|c| {
            let s = best_center(&c.shard, centers, model);
            let prob = ProximalProblem::new(&c.shard, centers, &zero, 0.0, *model);
            let mut rng = stream(cfg.seeds.selection, Purpose::LocalSolve, t as u64, c.id as u64);
            c.local_model = prob
                .solve(centers.get(s), &cfg.solver, &mut rng)
                .map_err(|e| e.in_round(t, c.id))?;
            c.times_selected += 1;
            Ok((c.id, s))
        })
        .collect();
    let mut members: Vec<Vec<(f64, &ModelVector)>> = vec![vec![]; s_count];
    for r in solved {
        let (k, s) = r?;
        state.assignment[k] = s;
    }
    for &k in participants {
        let c = &clients[k];
        members[state.assignment[k]].push((c.shard_size() as f64, &c.local_model));
    }
    let next = members
        .iter()
        .enumerate()
        .map(|(s, m)| weighted_mean(centers.dim(), m).unwrap_or_else(|| centers.get(s).clone()))
        .collect();
    CenterSet::new(next)
}

/// Per-point responsibilities `r_is ∝ π_s exp(−l(c_s; x_i, y_i))`,
/// normalized in the log domain.
pub fn responsibilities(
    shard: &[Sample],
    centers: &CenterSet,
    prior: &[f64],
    model: &LossModel,
) -> Vec<Vec<f64>> {
    shard
        .iter()
        .map(|p| {
            let z: Vec<f64> = centers
                .iter()
                .zip(prior)
                .map(|(c, pi)| pi.ln() - model.point_loss(c, p))
                .collect();
            let lse = log_sum_exp(&z);
            z.iter().map(|v| (v - lse).exp()).collect()
        })
        .collect()
}

struct FedemUpdate {
    id: usize,
    mixture: Vec<f64>,
    models: Vec<ModelVector>,
}

/// One FedEM round over `participants`: every participant runs S weighted
/// solves, one per center. Updates `state.mixture` and returns the new centers.
pub fn fedem_round(
    state: &mut BaselineState,
    clients: &mut [ClientState],
    model: &LossModel,
    participants: &[usize],
) -> Result<CenterSet> {
    let cfg = &state.config;
    let centers = &state.centers;
    let t = state.round;
    let s_count = centers.len();
    let zero = vec![0.0; s_count];
    let mixture = &state.mixture;
    let updates: Vec<Result<FedemUpdate>> = participants
        .par_iter()
        .map(|&k| {
            let c = &clients[k];
            let resp = responsibilities(&c.shard, centers, &mixture[k], model);
            let n = c.shard_size() as f64;
            let pi: Vec<f64> = (0..s_count)
                .map(|s| resp.iter().map(|r| r[s]).sum::<f64>() / n)
                .collect();
            let mut models = Vec::with_capacity(s_count);
            for s in 0..s_count {
                let r: Vec<f64> = resp.iter().map(|row| row[s]).collect();
                let prob = ProximalProblem::new(&c.shard, centers, &zero, 0.0, *model).with_point_weights(&r);
                let mut rng = stream(
                    cfg.seeds.selection,
                    Purpose::LocalSolve,
                    (t * s_count + s) as u64,
                    k as u64,
                );
                let w = match prob.solve(centers.get(s), &cfg.solver, &mut rng) {
                    Ok(w) => w,
                    // no responsibility mass left for this center on this shard:
                    // the model carries zero aggregation weight anyway
                    Err(Error::Degenerate(_)) => centers.get(s).clone(),
                    Err(e) => return Err(e.in_round(t, k)),
                };
                models.push(w);
            }
            Ok(FedemUpdate { id: k, mixture: pi, models })
        })
        .collect();
    let updates: Vec<FedemUpdate> = updates.into_iter().collect::<Result<_>>()?;

    let mut next = Vec::with_capacity(s_count);
    for s in 0..s_count {
        let terms: Vec<(f64, &ModelVector)> = updates
            .iter()
            .map(|u| (clients[u.id].shard_size() as f64 * u.mixture[s], &u.models[s]))
            .collect();
        next.push(weighted_mean(centers.dim(), &terms).unwrap_or_else(|| centers.get(s).clone()));
    }
    for u in updates {
        let c = &mut clients[u.id];
        c.local_model = u.models[argmin_by(&u.mixture, |p| -p)].clone();
        c.times_selected += 1;
        state.mixture[u.id] = u.mixture;
    }
    CenterSet::new(next)
}

impl BaselineState {
    pub fn new(kind: BaselineKind, centers: CenterSet, config: ExperimentConfig) -> Self {
        let (n, s) = (config.clients, config.clusters);
        BaselineState {
            kind,
            centers,
            round: 0,
            config,
            assignment: vec![0; n],
            mixture: vec![vec![1.0 / s as f64; s]; n],
        }
    }

    /// Local model for every client against the current centers. IFCA
    /// clients pick their best center on their own shard.
    pub fn local_models(&self, clients: &[ClientState], model: &LossModel) -> Vec<ModelVector> {
        clients
            .iter()
            .map(|c| {
                let choice = match self.kind {
                    BaselineKind::Ifca => LocalChoice::Assignment(best_center(&c.shard, &self.centers, model)),
                    BaselineKind::Fedem => LocalChoice::Mixture(&self.mixture[c.id]),
                };
                baseline_local_model(&self.centers, choice)
            })
            .collect()
    }

    /// Importance-like estimate per client: one-hot assignment for IFCA, `π` for FedEM.
    pub fn importance_estimates(&self, clients: &[ClientState], model: &LossModel) -> Vec<Vec<f64>> {
        let s_count = self.centers.len();
        match self.kind {
            BaselineKind::Ifca => clients
                .iter()
                .map(|c| {
                    let mut row = vec![0.0; s_count];
                    row[best_center(&c.shard, &self.centers, model)] = 1.0;
                    row
                })
                .collect(),
            BaselineKind::Fedem => self.mixture.clone(),
        }
    }
}

/// One baseline round including participation and trace.
pub fn run_baseline_round(
    state: &mut BaselineState,
    clients: &mut [ClientState],
    model: &LossModel,
    eval: &Evaluator<'_>,
) -> Result<RoundTrace> {
    let t = state.round;
    let participants = sample_participants(&state.config, t);
    let centers = match state.kind {
        BaselineKind::Ifca => ifca_round(state, clients, model, &participants)?,
        BaselineKind::Fedem => fedem_round(state, clients, model, &participants)?,
    };
    state.centers = centers;
    state.round += 1;
    let s_count = state.centers.len();
    let per_participant = match state.kind {
        BaselineKind::Ifca => 1,
        BaselineKind::Fedem => s_count,
    };
    let locals = state.local_models(clients, model);
    Ok(RoundTrace {
        round: t,
        holdout_loss: eval.holdout_matrix(&state.centers),
        mean_local_loss: metrics::mean_loss_of(clients, &locals, model),
        importance_error: eval.importance_error(&state.importance_estimates(clients, model)),
        unique_selected: participants.len(),
        joint_objective: None,
        local_solves: participants.len() * per_participant,
        solves_per_participant: per_participant,
        center_values_sent: participants.len() * s_count * state.centers.dim(),
    })
}

/// Runs T rounds of a baseline from the same initial centers FedSoft uses.
/// The returned clients carry each baseline's local model in `local_model`.
pub fn run_baseline(
    kind: BaselineKind,
    config: &ExperimentConfig,
    dataset: &FederationDataset,
    model: &LossModel,
) -> RunResult {
    let (centers, mut clients) = match initial_state(config, dataset, model) {
        Ok(v) => v,
        Err(error) => {
            let centers = crate::fedsoft::initial_centers(config.clusters.max(1), model.param_dim(), config.seeds.init);
            return Err(Box::new(Interrupted {
                error,
                partial: ExperimentOutcome { centers, clients: vec![], traces: vec![] },
            }));
        }
    };
    let eval = Evaluator {
        model: *model,
        holdouts: &dataset.holdouts,
        true_mixture: &dataset.true_mixture,
    };
    let mut state = BaselineState::new(kind, centers, config.clone());
    let mut traces = Vec::with_capacity(config.rounds);
    for _ in 0..config.rounds {
        match run_baseline_round(&mut state, &mut clients, model, &eval) {
            Ok(trace) => traces.push(trace),
            Err(error) => {
                return Err(Box::new(Interrupted {
                    error,
                    partial: ExperimentOutcome { centers: state.centers, clients, traces },
                }))
            }
        }
    }
    let locals = state.local_models(&clients, model);
    for (c, w) in clients.iter_mut().zip(locals) {
        c.local_model = w;
    }
    Ok(ExperimentOutcome {
        centers: state.centers,
        clients,
        traces,
    })
}
