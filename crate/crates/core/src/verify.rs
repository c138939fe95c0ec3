//! Built-in property checks, run by `softcluster --verify`. Each check is
//! small enough to finish in seconds and exercises one contract of the
//! simulator end to end.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::config::RunSpec;
use crate::datagen::{generate_federation, PartitionPattern};
use crate::fedsoft::{aggregate_centers, run_experiment, run_fixed_weight_descent, sampling_distribution, select_clients};
use crate::models::LossModel;
use crate::proximal::ProximalProblem;
use crate::rng::{stream, Purpose, SimRng};
use crate::runner::{execute, trace_csv};
use crate::types::{CenterSet, ClientState, ExperimentConfig, ModelVector, Sample, Sampling, Seeds, SolverConfig};

#[derive(Debug, Clone)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn normal(rng: &mut SimRng) -> f64 {
    rng.sample(StandardNormal)
}

fn random_vec(rng: &mut SimRng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| scale * normal(rng)).collect()
}

struct Instance {
    shard: Vec<Sample>,
    centers: CenterSet,
    weights: Vec<f64>,
    lambda: f64,
    model: LossModel,
}

impl Instance {
    fn problem(&self) -> ProximalProblem<'_> {
        ProximalProblem::new(&self.shard, &self.centers, &self.weights, self.lambda, self.model)
    }
}

fn random_instance(rng: &mut SimRng, model: LossModel) -> Instance {
    let d_in = model.input_dim;
    let n = rng.random_range(5..40);
    let shard = (0..n)
        .map(|_| {
            let x = random_vec(rng, d_in, 1.0);
            let y = match model.kind {
                crate::models::LossKind::LinearRegression => normal(rng) * 3.0,
                crate::models::LossKind::MultinomialLogistic { classes } => rng.random_range(0..classes) as f64,
            };
            Sample { x, y }
        })
        .collect();
    let s = rng.random_range(1..4);
    let centers = CenterSet::new(
        (0..s)
            .map(|_| ModelVector::from_vec(random_vec(rng, model.param_dim(), 1.0)))
            .collect(),
    )
    .expect("s ≥ 1");
    let weights = (0..s).map(|_| rng.random_range(0.01..1.0)).collect();
    Instance { shard, centers, weights, lambda: rng.random_range(0.0..2.0), model }
}

fn finite_differences() -> Check {
    let mut rng = stream(11, Purpose::Init, 0, 0);
    let mut worst: f64 = 0.0;
    for model in [LossModel::linear_regression(4), LossModel::multinomial_logistic(3, 3)] {
        for _ in 0..20 {
            let inst = random_instance(&mut rng, model);
            let prob = inst.problem();
            let w = random_vec(&mut rng, model.param_dim(), 1.0);
            let g = prob.gradient(&w);
            let h = 1e-6;
            for j in 0..w.len() {
                let (mut plus, mut minus) = (w.clone(), w.clone());
                plus[j] += h;
                minus[j] -= h;
                let fd = (prob.value(&plus) - prob.value(&minus)) / (2.0 * h);
                worst = worst.max((fd - g[j]).abs() / fd.abs().max(g[j].abs()).max(1e-2));
            }
        }
    }
    Check { name: "gradient matches finite differences", passed: worst <= 1e-4, detail: format!("worst relative error {worst:.2e}") }
}

fn closed_form_stationarity() -> Check {
    let mut rng = stream(12, Purpose::Init, 0, 0);
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let mut inst = random_instance(&mut rng, LossModel::linear_regression(4));
        inst.lambda = inst.lambda.max(0.1);
        let prob = inst.problem();
        let w = prob.solve_closed_form().expect("λ > 0 keeps the system definite");
        worst = worst.max(prob.gradient(&w).norm());
    }
    Check { name: "closed-form solution is stationary", passed: worst <= 1e-8, detail: format!("largest gradient norm {worst:.2e}") }
}

fn sampling_normalization() -> Check {
    let mut rng = stream(13, Purpose::Init, 0, 0);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let n = rng.random_range(1..60);
        let u: Vec<Vec<f64>> = (0..n).map(|_| vec![rng.random_range(1e-4..1.0), rng.random_range(1e-4..1.0)]).collect();
        let sizes: Vec<usize> = (0..n).map(|_| rng.random_range(1..500)).collect();
        for s in 0..2 {
            worst = worst.max((sampling_distribution(&u, &sizes, s).iter().sum::<f64>() - 1.0).abs());
        }
    }
    Check { name: "sampling distributions sum to one", passed: worst <= 1e-12, detail: format!("largest deviation {worst:.2e}") }
}

/// Mean number of distinct clients over `rounds` uniform selections.
fn mean_unique(n: usize, k: usize, clusters: usize, sampling: Sampling, rounds: usize) -> (f64, f64) {
    let uniform = vec![vec![1.0 / n as f64; n]; clusters];
    let counts: Vec<f64> = (0..rounds)
        .map(|t| {
            let mut rng = stream(14, Purpose::Selection, t as u64, clusters as u64);
            let out = select_clients(&uniform, k, sampling, &mut rng).expect("valid distribution");
            out.unique_clients.len() as f64
        })
        .collect();
    let mean = counts.iter().sum::<f64>() / rounds as f64;
    let var = counts.iter().map(|c| (c - mean).powi(2)).sum::<f64>() / (rounds - 1) as f64;
    (mean, (var / rounds as f64).sqrt())
}

fn selection_count() -> Check {
    let (n, k) = (100usize, 60usize);
    // K distinct clients per cluster: each client joins a cluster w.p. K/N
    let (distinct, se_a) = mean_unique(n, k, 2, Sampling::WithoutReplacement, 400);
    let want_distinct = (2 * k) as f64 - (k * k) as f64 / n as f64;
    // K independent draws per cluster: each draw misses a client w.p. 1 − 1/N
    let (drawn, se_b) = mean_unique(n, k, 2, Sampling::WithReplacement, 400);
    let want_drawn = n as f64 * (1.0 - (1.0 - 1.0 / n as f64).powi(2 * k as i32));
    Check {
        name: "unique selections match the coverage formulas",
        passed: (distinct - want_distinct).abs() <= 3.0 * se_a && (drawn - want_drawn).abs() <= 3.0 * se_b,
        detail: format!(
            "without replacement {distinct:.2} vs {want_distinct:.2}, with replacement {drawn:.2} vs {want_drawn:.2}"
        ),
    }
}

fn aggregation_unbiased() -> Check {
    let mut rng = stream(15, Purpose::Init, 0, 0);
    let (n, d, k, draws) = (20, 10, 5, 4000);
    let models: Vec<ModelVector> = (0..n).map(|_| ModelVector::from_vec(random_vec(&mut rng, d, 1.0))).collect();
    let raw: Vec<f64> = (0..n).map(|_| rng.random_range(0.1..1.0)).collect();
    let total: f64 = raw.iter().sum();
    let v: Vec<f64> = raw.iter().map(|r| r / total).collect();
    let mut sum = vec![0.0; d];
    let mut sum_sq = vec![0.0; d];
    for i in 0..draws {
        let mut sel_rng = stream(15, Purpose::Selection, i as u64, 0);
        let sel = select_clients(std::slice::from_ref(&v), k, Sampling::WithReplacement, &mut sel_rng).expect("valid distribution");
        let picked: Vec<&ModelVector> = sel.per_cluster[0].iter().map(|&j| &models[j]).collect();
        let c = aggregate_centers(&[picked], k).expect("K models");
        for (j, x) in c.get(0).iter().enumerate() {
            sum[j] += x;
            sum_sq[j] += x * x;
        }
    }
    let truth = ModelVector::weighted_sum(d, v.iter().copied().zip(&models));
    let within = (0..d)
        .filter(|&j| {
            let mean = sum[j] / draws as f64;
            let var = (sum_sq[j] / draws as f64 - mean * mean) * draws as f64 / (draws - 1) as f64;
            (mean - truth[j]).abs() <= 3.0 * (var / draws as f64).sqrt()
        })
        .count();
    Check {
        name: "aggregated centers are unbiased",
        passed: within + 1 >= d,
        detail: format!("{within}/{d} coordinates within 3 SE"),
    }
}

fn small_config() -> ExperimentConfig {
    ExperimentConfig {
        clients: 20,
        selection_size: 8,
        rounds: 8,
        holdout_size: 100,
        shard_size_min: 30,
        shard_size_max: 60,
        seeds: Seeds::all(16),
        solver: SolverConfig { local_epochs: 2, ..SolverConfig::default() },
        ..ExperimentConfig::default()
    }
}

fn determinism() -> Check {
    let spec = RunSpec { experiment: small_config(), partition: PartitionPattern::Random, ..RunSpec::default() };
    let csv = || execute(&spec).map(|r| trace_csv(&r.outcome.traces, 2));
    let (a, b) = (csv(), csv());
    let passed = matches!((&a, &b), (Ok(x), Ok(y)) if x == y);
    Check { name: "identical seeds give identical traces", passed, detail: if passed { "byte-identical CSV".into() } else { "traces differ".into() } }
}

fn joint_descent() -> Check {
    let cfg = ExperimentConfig { rounds: 20, solver: SolverConfig::closed_form(), ..small_config() };
    let result = generate_federation(&cfg, 10.0, PartitionPattern::Random).and_then(|ds| {
        run_fixed_weight_descent(&cfg, &ds, &LossModel::linear_regression(cfg.dim), &ds.true_mixture)
            .map_err(|e| e.error)
    });
    match result {
        Ok(out) => {
            let values: Vec<f64> = out.traces.iter().filter_map(|t| t.joint_objective).collect();
            let worst = values.windows(2).map(|w| w[1] - w[0]).fold(f64::NEG_INFINITY, f64::max);
            Check { name: "joint objective never increases", passed: worst <= 1e-9, detail: format!("largest step {worst:.2e}") }
        }
        Err(e) => Check { name: "joint objective never increases", passed: false, detail: e.to_string() },
    }
}

fn importance_floor() -> Check {
    let cfg = ExperimentConfig { solver: SolverConfig::closed_form(), ..small_config() };
    let result = generate_federation(&cfg, 10.0, PartitionPattern::Random)
        .and_then(|ds| run_experiment(&cfg, &ds, &LossModel::linear_regression(cfg.dim)).map_err(|e| e.error));
    match result {
        Ok(out) => {
            let ok = out.clients.iter().all(|c| {
                c.importance.iter().all(|&u| u >= cfg.smoothing) && c.match_counts.iter().sum::<usize>() == c.shard_size()
            });
            Check { name: "importance floor and match counts hold", passed: ok, detail: String::new() }
        }
        Err(e) => Check { name: "importance floor and match counts hold", passed: false, detail: e.to_string() },
    }
}

fn client_round_trip() -> Check {
    let mut rng = stream(17, Purpose::Init, 0, 0);
    let shard = (0..5).map(|_| Sample { x: random_vec(&mut rng, 3, 1e-3), y: normal(&mut rng) / 7.0 }).collect();
    let mut client = ClientState::new(4, shard, ModelVector::from_vec(random_vec(&mut rng, 3, 1.0)), 2);
    client.importance = vec![0.1 + 0.2, 1e-4];
    let passed = serde_json::to_string(&client)
        .ok()
        .and_then(|s| serde_json::from_str::<ClientState>(&s).ok())
        .is_some_and(|back| back == client);
    Check { name: "client state survives JSON round trip", passed, detail: String::new() }
}

pub fn run_checks() -> Vec<Check> {
    vec![
        finite_differences(),
        closed_form_stationarity(),
        sampling_normalization(),
        selection_count(),
        aggregation_unbiased(),
        determinism(),
        joint_descent(),
        importance_floor(),
        client_round_trip(),
    ]
}

#[cfg(test)]
mod tests {
    #[test]
    fn built_in_checks_pass() {
        for c in super::run_checks() {
            assert!(c.passed, "{}: {}", c.name, c.detail);
        }
    }
}
