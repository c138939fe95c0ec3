//! The FedSoft round loop: importance estimation every τ rounds,
//! importance-proportional client selection per cluster, one proximal solve
//! per selected client, and 1/K averaging into the next centers.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{self, Evaluator};
use crate::models::LossModel;
use crate::proximal::ProximalProblem;
use crate::rng::{stream, Purpose, SimRng};
use crate::types::{
    CenterSet, ClientState, ExperimentConfig, FederationDataset, ModelVector, RoundTrace, Sample,
    Sampling, SolverKind,
};

/// Matches every point to its lowest-loss center (ties to the lowest index)
/// and returns `(n_ks, max(n_ks / n_k, σ))`.
pub fn estimate_weights(
    shard: &[Sample],
    centers: &CenterSet,
    model: &LossModel,
    sigma: f64,
) -> (Vec<usize>, Vec<f64>) {
    let mut counts = vec![0usize; centers.len()];
    for p in shard {
        let mut best = 0;
        let mut best_loss = f64::INFINITY;
        for (s, c) in centers.iter().enumerate() {
            let l = model.point_loss(c, p);
            if l < best_loss {
                best = s;
                best_loss = l;
            }
        }
        counts[best] += 1;
    }
    let n = shard.len() as f64;
    let importance = counts.iter().map(|&c| (c as f64 / n).max(sigma)).collect();
    (counts, importance)
}

/// Runs [`estimate_weights`] on a client and stores the result.
pub fn estimate_importance(
    client: &mut ClientState,
    centers: &CenterSet,
    model: &LossModel,
    sigma: f64,
    round: usize,
) {
    let (counts, importance) = estimate_weights(&client.shard, centers, model, sigma);
    client.match_counts = counts;
    client.importance = importance;
    client.last_estimated_round = Some(round);
}

/// `v_sk = u_ks n_k / Σ_{k' ∈ selected} u_k's n_k'` over the selected clients.
pub fn aggregation_weights(
    importances: &[Vec<f64>],
    shard_sizes: &[usize],
    selected: &[usize],
    s: usize,
) -> Result<Vec<f64>> {
    if selected.is_empty() {
        return Err(Error::Contract("aggregation weights of an empty selection".into()));
    }
    let raw: Vec<f64> = selected
        .iter()
        .map(|&k| importances[k][s] * shard_sizes[k] as f64)
        .collect();
    let total: f64 = raw.iter().sum();
    if !(total > 0.0) {
        return Err(Error::Contract("importance weights must be positive".into()));
    }
    Ok(raw.into_iter().map(|r| r / total).collect())
}

/// Selection probabilities for cluster `s` over all N clients.
pub fn sampling_distribution(importances: &[Vec<f64>], shard_sizes: &[usize], s: usize) -> Vec<f64> {
    let all: Vec<usize> = (0..importances.len()).collect();
    aggregation_weights(importances, shard_sizes, &all, s)
        .expect("σ floor keeps every importance weight positive")
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SelectionOutcome {
    /// `Sel_s`: K client ids per cluster, possibly repeated.
    pub per_cluster: Vec<Vec<usize>>,
    /// Sorted union of all selected ids.
    pub unique_clients: Vec<usize>,
}

/// Draws K clients per cluster from that cluster's distribution.
pub fn select_clients(
    distributions: &[Vec<f64>],
    k: usize,
    sampling: Sampling,
    rng: &mut SimRng,
) -> Result<SelectionOutcome> {
    let mut per_cluster = Vec::with_capacity(distributions.len());
    for dist in distributions {
        let picks = match sampling {
            Sampling::WithReplacement => {
                let index = WeightedIndex::new(dist)
                    .map_err(|e| Error::Contract(format!("invalid sampling distribution: {e}")))?;
                (0..k).map(|_| index.sample(rng)).collect()
            }
            Sampling::WithoutReplacement => {
                rand::seq::index::sample_weighted(rng, dist.len(), |i| dist[i], k)
                    .map_err(|e| Error::Contract(format!("cannot draw {k} distinct clients: {e}")))?
                    .into_vec()
            }
        };
        per_cluster.push(picks);
    }
    let mut unique_clients: Vec<usize> = per_cluster.iter().flatten().copied().collect();
    unique_clients.sort_unstable();
    unique_clients.dedup();
    Ok(SelectionOutcome {
        per_cluster,
        unique_clients,
    })
}

/// `c_s = (1/K) Σ_{k ∈ Sel_s} w_k`, counting repeated draws with multiplicity.
pub fn aggregate_centers(per_cluster: &[Vec<&ModelVector>], k: usize) -> Result<CenterSet> {
    let mut centers = Vec::with_capacity(per_cluster.len());
    for (s, models) in per_cluster.iter().enumerate() {
        if models.len() != k || k == 0 {
            return Err(Error::Contract(format!(
                "cluster {s} received {} models, expected K = {k}",
                models.len()
            )));
        }
        let w = 1.0 / k as f64;
        centers.push(ModelVector::weighted_sum(
            models[0].dim(),
            models.iter().map(|m| (w, *m)),
        ));
    }
    CenterSet::new(centers)
}

/// `c_s = Σ_k ũ_ks w_k / Σ_k ũ_ks`: the exact minimizer of the joint
/// objective over the centers with every local model fixed.
pub fn aggregate_by_importance(local_models: &[&ModelVector], weights: &[Vec<f64>]) -> Result<CenterSet> {
    let s_count = weights.first().map_or(0, Vec::len);
    let dim = local_models
        .first()
        .ok_or_else(|| Error::Contract("no local models".into()))?
        .dim();
    let mut centers = Vec::with_capacity(s_count);
    for s in 0..s_count {
        let total: f64 = weights.iter().map(|u| u[s]).sum();
        if !(total > 0.0) {
            return Err(Error::Contract(format!("cluster {s} has zero total weight")));
        }
        centers.push(ModelVector::weighted_sum(
            dim,
            local_models.iter().zip(weights).map(|(w, u)| (u[s] / total, *w)),
        ));
    }
    CenterSet::new(centers)
}

/// Initial centers: i.i.d. `N(0, 1/d)` coordinates from the init seed.
pub fn initial_centers(clusters: usize, dim: usize, seed: u64) -> CenterSet {
    let mut rng = stream(seed, Purpose::Init, 0, 0);
    let std = 1.0 / (dim as f64).sqrt();
    let centers = (0..clusters)
        .map(|_| {
            ModelVector::from_vec(
                (0..dim)
                    .map(|_| std * rng.sample::<f64, _>(StandardNormal))
                    .collect(),
            )
        })
        .collect();
    CenterSet::new(centers).expect("clusters ≥ 1")
}

#[derive(Debug, Clone)]
pub struct ServerState {
    pub centers: CenterSet,
    pub round: usize,
    pub config: ExperimentConfig,
}

impl ServerState {
    pub fn new(centers: CenterSet, config: ExperimentConfig) -> Self {
        ServerState {
            centers,
            round: 0,
            config,
        }
    }

    pub fn selection_rng(&self) -> SimRng {
        stream(self.config.seeds.selection, Purpose::Selection, self.round as u64, 0)
    }

    pub fn solve_rng(&self, client: usize) -> SimRng {
        stream(
            self.config.seeds.selection,
            Purpose::LocalSolve,
            self.round as u64,
            client as u64,
        )
    }
}

/// Runs one local proximal solve per listed client (in parallel) and stores
/// the new local models. Each client uses its own `(round, id)` stream.
pub(crate) fn solve_clients(
    server: &ServerState,
    clients: &mut [ClientState],
    chosen: &[bool],
    model: &LossModel,
    weights_of: impl Fn(&ClientState) -> Vec<f64> + Sync,
) -> Result<()> {
    let cfg = &server.config;
    let results: Vec<Result<()>> = clients
        .par_iter_mut()
        .filter(|c| chosen[c.id])
        .map(|c| {
            let weights = weights_of(c);
            let prob = ProximalProblem::new(&c.shard, &server.centers, &weights, cfg.lambda, *model);
            let mut rng = server.solve_rng(c.id);
            let w = prob
                .solve(&c.local_model, &cfg.solver, &mut rng)
                .map_err(|e| e.in_round(server.round, c.id))?;
            c.local_model = w;
            c.times_selected += 1;
            Ok(())
        })
        .collect();
    results.into_iter().collect()
}

/// One FedSoft round. Advances `server.round` and replaces its centers.
pub fn run_round(
    server: &mut ServerState,
    clients: &mut [ClientState],
    model: &LossModel,
    eval: &Evaluator<'_>,
) -> Result<(SelectionOutcome, RoundTrace)> {
    let cfg = server.config.clone();
    let t = server.round;
    let s_count = server.centers.len();

    let estimated = t % cfg.estimation_interval == 0;
    if estimated {
        let centers = &server.centers;
        clients
            .par_iter_mut()
            .for_each(|c| estimate_importance(c, centers, model, cfg.smoothing, t));
    }

    let importances: Vec<Vec<f64>> = clients.iter().map(|c| c.importance.clone()).collect();
    let sizes: Vec<usize> = clients.iter().map(ClientState::shard_size).collect();
    let dists: Vec<Vec<f64>> = (0..s_count)
        .map(|s| sampling_distribution(&importances, &sizes, s))
        .collect();
    let selection = select_clients(&dists, cfg.selection_size, cfg.sampling, &mut server.selection_rng())?;

    let mut chosen = vec![false; clients.len()];
    for &k in &selection.unique_clients {
        chosen[k] = true;
    }
    solve_clients(server, clients, &chosen, model, |c| c.importance.clone())?;

    let per_cluster: Vec<Vec<&ModelVector>> = selection
        .per_cluster
        .iter()
        .map(|ids| ids.iter().map(|&k| &clients[k].local_model).collect())
        .collect();
    server.centers = aggregate_centers(&per_cluster, cfg.selection_size)?;
    server.round += 1;

    let trace = RoundTrace {
        round: t,
        holdout_loss: eval.holdout_matrix(&server.centers),
        mean_local_loss: metrics::mean_local_loss(clients, model),
        importance_error: eval.importance_error(&importances),
        unique_selected: selection.unique_clients.len(),
        joint_objective: None,
        local_solves: selection.unique_clients.len(),
        solves_per_participant: 1,
        center_values_sent: if estimated {
            clients.len() * s_count * server.centers.dim()
        } else {
            0
        },
    };
    Ok((selection, trace))
}

/// Final state of a run.
#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub centers: CenterSet,
    pub clients: Vec<ClientState>,
    pub traces: Vec<RoundTrace>,
}

impl ExperimentOutcome {
    pub fn local_models(&self) -> Vec<ModelVector> {
        self.clients.iter().map(|c| c.local_model.clone()).collect()
    }
}

/// A run that stopped early; `partial` holds the state and trace so far.
#[derive(Debug)]
pub struct Interrupted {
    pub error: Error,
    pub partial: ExperimentOutcome,
}

pub type RunResult = std::result::Result<ExperimentOutcome, Box<Interrupted>>;

/// Fresh client states: every local model starts at the mean of the initial centers.
pub fn initial_state(
    config: &ExperimentConfig,
    dataset: &FederationDataset,
    model: &LossModel,
) -> Result<(CenterSet, Vec<ClientState>)> {
    config.validate()?;
    if dataset.clients() != config.clients || dataset.clusters() != config.clusters {
        return Err(Error::Contract(format!(
            "dataset has N = {}, S = {} but config says N = {}, S = {}",
            dataset.clients(),
            dataset.clusters(),
            config.clients,
            config.clusters
        )));
    }
    if dataset.feature_dim() != model.input_dim {
        return Err(Error::Contract("dataset feature dimension does not match the model".into()));
    }
    if config.solver.kind == SolverKind::ClosedForm && !model.is_linear_regression() {
        return Err(Error::config("solver", "closed_form needs the linear-regression model"));
    }
    let centers = initial_centers(config.clusters, model.param_dim(), config.seeds.init);
    let clients = dataset.client_states(&centers.mean());
    Ok((centers, clients))
}

/// Runs T FedSoft rounds.
pub fn run_experiment(
    config: &ExperimentConfig,
    dataset: &FederationDataset,
    model: &LossModel,
) -> RunResult {
    let (centers, mut clients) = match initial_state(config, dataset, model) {
        Ok(v) => v,
        Err(error) => {
            let centers = initial_centers(config.clusters.max(1), model.param_dim(), config.seeds.init);
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
    let mut server = ServerState::new(centers, config.clone());
    let mut traces = Vec::with_capacity(config.rounds);
    for _ in 0..config.rounds {
        match run_round(&mut server, &mut clients, model, &eval) {
            Ok((_, trace)) => traces.push(trace),
            Err(error) => {
                return Err(Box::new(Interrupted {
                    error,
                    partial: ExperimentOutcome { centers: server.centers, clients, traces },
                }))
            }
        }
    }
    Ok(ExperimentOutcome {
        centers: server.centers,
        clients,
        traces,
    })
}

/// Block-coordinate descent on the joint objective with frozen importance
/// weights: every client solves its proximal problem exactly against the
/// current centers, then every center is set to the `ũ`-weighted mean of
/// the local models. Each trace records the joint objective after the round.
pub fn run_fixed_weight_descent(
    config: &ExperimentConfig,
    dataset: &FederationDataset,
    model: &LossModel,
    fixed_weights: &[Vec<f64>],
) -> RunResult {
    let mut cfg = config.clone();
    cfg.solver.kind = SolverKind::ClosedForm;
    let (centers, mut clients) = match initial_state(&cfg, dataset, model) {
        Ok(v) => v,
        Err(error) => {
            let centers = initial_centers(cfg.clusters.max(1), model.param_dim(), cfg.seeds.init);
            return Err(Box::new(Interrupted {
                error,
                partial: ExperimentOutcome { centers, clients: vec![], traces: vec![] },
            }));
        }
    };
    for c in &mut clients {
        c.importance = fixed_weights[c.id].clone();
    }
    let eval = Evaluator {
        model: *model,
        holdouts: &dataset.holdouts,
        true_mixture: &dataset.true_mixture,
    };
    let mut server = ServerState::new(centers, cfg.clone());
    let mut traces = Vec::with_capacity(cfg.rounds);
    let everyone = vec![true; clients.len()];
    for _ in 0..cfg.rounds {
        let t = server.round;
        let step = solve_clients(&server, &mut clients, &everyone, model, |c| fixed_weights[c.id].clone())
            .and_then(|()| {
                let locals: Vec<&ModelVector> = clients.iter().map(|c| &c.local_model).collect();
                aggregate_by_importance(&locals, fixed_weights)
            });
        match step {
            Ok(centers) => server.centers = centers,
            Err(error) => {
                return Err(Box::new(Interrupted {
                    error,
                    partial: ExperimentOutcome { centers: server.centers, clients, traces },
                }))
            }
        }
        server.round += 1;
        traces.push(RoundTrace {
            round: t,
            holdout_loss: eval.holdout_matrix(&server.centers),
            mean_local_loss: metrics::mean_local_loss(&clients, model),
            importance_error: eval.importance_error(fixed_weights),
            unique_selected: clients.len(),
            joint_objective: Some(metrics::joint_objective(
                &clients,
                &server.centers,
                fixed_weights,
                cfg.lambda,
                model,
            )),
            local_solves: clients.len(),
            solves_per_participant: 1,
            center_values_sent: 0,
        });
    }
    Ok(ExperimentOutcome {
        centers: server.centers,
        clients,
        traces,
    })
}
