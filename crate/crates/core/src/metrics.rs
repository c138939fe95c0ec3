//! Evaluation and diagnostics: holdout loss matrices, center/distribution
//! association, importance-weight error, divergence between cluster optima
//! and the joint proximal objective.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{argmin_by, LossModel};
use crate::proximal::ProximalProblem;
use crate::types::{CenterSet, ClientState, LabeledPoint, ModelVector};

/// Entry `(i, s)` is the risk of center s on holdout distribution i.
pub fn holdout_matrix(
    centers: &CenterSet,
    holdouts: &[Vec<LabeledPoint>],
    model: &LossModel,
) -> Vec<Vec<f64>> {
    holdouts
        .iter()
        .map(|h| centers.iter().map(|c| model.batch_risk(c, h)).collect())
        .collect()
}

/// Same layout as [`holdout_matrix`], holding classification accuracy.
pub fn accuracy_matrix(
    centers: &CenterSet,
    holdouts: &[Vec<LabeledPoint>],
    model: &LossModel,
) -> Vec<Vec<f64>> {
    holdouts
        .iter()
        .map(|h| centers.iter().map(|c| model.accuracy(c, h)).collect())
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Association {
    /// `mapping[i]` is the best center for distribution i.
    pub mapping: Vec<usize>,
    /// True iff no two distributions share a best center.
    pub distinct: bool,
}

/// Row-wise argmin of a loss matrix, ties to the lowest column.
pub fn association(matrix: &[Vec<f64>]) -> Association {
    let mapping: Vec<usize> = matrix.iter().map(|row| argmin_by(row, |v| v)).collect();
    let mut seen = vec![false; matrix.first().map_or(0, Vec::len)];
    let mut distinct = true;
    for &m in &mapping {
        if seen[m] {
            distinct = false;
        }
        seen[m] = true;
    }
    Association { mapping, distinct }
}

/// Largest S for which the label alignment is searched exhaustively.
const EXHAUSTIVE_ALIGNMENT_MAX: usize = 8;

/// Mean over clients of `Σ_s |û_ks − u_ks|`, comparing stored (floored,
/// unnormalized) estimates with the true mixture.
///
/// Center indices are arbitrary labels, so the estimate columns are first
/// matched to distributions by the permutation with the smallest total error
/// (exhaustive up to S = 8, identity beyond).
pub fn importance_error(estimates: &[Vec<f64>], truth: &[Vec<f64>]) -> f64 {
    let perm = best_alignment(estimates, truth);
    importance_error_aligned(estimates, truth, &perm)
}

/// `perm[i]` is the estimate column compared against true column i.
pub fn importance_error_aligned(estimates: &[Vec<f64>], truth: &[Vec<f64>], perm: &[usize]) -> f64 {
    assert_eq!(estimates.len(), truth.len(), "one estimate per client");
    assert!(!truth.is_empty());
    let total: f64 = estimates
        .iter()
        .zip(truth)
        .map(|(est, tru)| {
            tru.iter()
                .enumerate()
                .map(|(i, t)| (est[perm[i]] - t).abs())
                .sum::<f64>()
        })
        .sum();
    total / truth.len() as f64
}

/// Permutation of estimate columns that minimizes the total L1 error.
pub fn best_alignment(estimates: &[Vec<f64>], truth: &[Vec<f64>]) -> Vec<usize> {
    let s = truth.first().map_or(0, Vec::len);
    let identity: Vec<usize> = (0..s).collect();
    if s > EXHAUSTIVE_ALIGNMENT_MAX {
        return identity;
    }
    // cost[j][i]: error of estimate column j against true column i
    let mut cost = vec![vec![0.0; s]; s];
    for (est, tru) in estimates.iter().zip(truth) {
        for j in 0..s {
            for i in 0..s {
                cost[j][i] += (est[j] - tru[i]).abs();
            }
        }
    }
    let mut best = identity.clone();
    let mut best_cost = f64::INFINITY;
    let mut perm = identity;
    permutations(&mut perm, 0, &mut |p| {
        let c: f64 = p.iter().enumerate().map(|(i, &j)| cost[j][i]).sum();
        if c < best_cost {
            best_cost = c;
            best = p.to_vec();
        }
    });
    best
}

fn permutations(p: &mut Vec<usize>, start: usize, visit: &mut impl FnMut(&[usize])) {
    if start == p.len() {
        visit(p);
        return;
    }
    for i in start..p.len() {
        p.swap(start, i);
        permutations(p, start + 1, visit);
        p.swap(start, i);
    }
}

/// `(δ, Δ)`: smallest and largest pairwise Euclidean distance.
pub fn cluster_divergence(vectors: &[ModelVector]) -> Result<(f64, f64)> {
    if vectors.len() < 2 {
        return Err(Error::UndefinedDivergence(vectors.len()));
    }
    let mut lo = f64::INFINITY;
    let mut hi: f64 = 0.0;
    for i in 0..vectors.len() {
        for j in i + 1..vectors.len() {
            let d = vectors[i].dist_sq(&vectors[j]).sqrt();
            lo = lo.min(d);
            hi = hi.max(d);
        }
    }
    Ok((lo, hi))
}

/// `Σ_k h_k(w_k; c, ũ_k)` with the clients' current local models.
pub fn joint_objective(
    clients: &[ClientState],
    centers: &CenterSet,
    fixed_weights: &[Vec<f64>],
    lambda: f64,
    model: &LossModel,
) -> f64 {
    assert_eq!(clients.len(), fixed_weights.len(), "one weight row per client");
    let mut terms: Vec<f64> = clients
        .iter()
        .map(|c| {
            ProximalProblem::new(&c.shard, centers, &fixed_weights[c.id], lambda, *model)
                .value(&c.local_model)
        })
        .collect();
    // order-independent reduction
    terms.sort_by(f64::total_cmp);
    terms.iter().sum()
}

/// Mean over clients of the local training risk `f_k(w_k)`.
pub fn mean_local_loss(clients: &[ClientState], model: &LossModel) -> f64 {
    clients
        .iter()
        .map(|c| model.batch_risk(&c.local_model, &c.shard))
        .sum::<f64>()
        / clients.len() as f64
}

/// Mean over clients of `f_k` evaluated at an arbitrary per-client model.
pub fn mean_loss_of(clients: &[ClientState], models: &[ModelVector], model: &LossModel) -> f64 {
    clients
        .iter()
        .zip(models)
        .map(|(c, w)| model.batch_risk(w, &c.shard))
        .sum::<f64>()
        / clients.len() as f64
}

/// For each distribution, the loss of its best center.
pub fn best_center_losses(matrix: &[Vec<f64>]) -> Vec<f64> {
    matrix
        .iter()
        .map(|row| row.iter().copied().fold(f64::INFINITY, f64::min))
        .collect()
}

/// Ground-truth view used to fill round traces.
#[derive(Debug, Clone, Copy)]
pub struct Evaluator<'a> {
    pub model: LossModel,
    pub holdouts: &'a [Vec<LabeledPoint>],
    pub true_mixture: &'a [Vec<f64>],
}

impl Evaluator<'_> {
    pub fn holdout_matrix(&self, centers: &CenterSet) -> Vec<Vec<f64>> {
        holdout_matrix(centers, self.holdouts, &self.model)
    }

    pub fn importance_error(&self, estimates: &[Vec<f64>]) -> f64 {
        importance_error(estimates, self.true_mixture)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate_cluster_params, generate_federation, PartitionPattern};
    use crate::types::{ExperimentConfig, Sample, Seeds};

    #[test]
    fn association_examples() {
        let a = association(&[vec![1.0, 5.0], vec![4.0, 2.0]]);
        assert_eq!(a, Association { mapping: vec![0, 1], distinct: true });
        let table = association(&[vec![68.4, 29.5], vec![21.8, 58.6]]);
        assert_eq!(table, Association { mapping: vec![1, 0], distinct: true });
        let flat = association(&[vec![3.0, 3.0], vec![3.0, 3.0]]);
        assert_eq!(flat, Association { mapping: vec![0, 0], distinct: false });
    }

    #[test]
    fn importance_error_examples() {
        let truth = vec![vec![0.1, 0.9]];
        assert_eq!(importance_error(&truth, &truth), 0.0);
        let half = vec![vec![0.5, 0.5]];
        assert!((importance_error(&half, &truth) - 0.8).abs() < 1e-12);
        // swapped labels are aligned before comparing
        let swapped = vec![vec![0.9, 0.1], vec![0.2, 0.8]];
        let truth2 = vec![vec![0.1, 0.9], vec![0.8, 0.2]];
        assert_eq!(importance_error(&swapped, &truth2), 0.0);
        assert!((importance_error_aligned(&swapped, &truth2, &[0, 1]) - 1.4).abs() < 1e-12);
    }

    #[test]
    fn divergence_examples() {
        let v = ModelVector::from_vec(vec![1.0, 2.0]);
        assert_eq!(cluster_divergence(&[v.clone(), v.clone()]).unwrap(), (0.0, 0.0));
        let w = ModelVector::from_vec(vec![4.0, 6.0]);
        assert_eq!(cluster_divergence(&[v.clone(), w]).unwrap(), (5.0, 5.0));
        assert!(matches!(cluster_divergence(&[v]), Err(Error::UndefinedDivergence(1))));
    }

    #[test]
    fn divergence_bounds_hold() {
        for seed in 0..50 {
            let thetas = generate_cluster_params(4, 3, 1.0, seed).unwrap();
            let (lo, hi) = cluster_divergence(&thetas).unwrap();
            assert!(lo <= hi);
        }
    }

    #[test]
    fn squared_max_divergence_tracks_its_expectation() {
        // E‖θ_i − θ_j‖² = 2 d σ₀² = 2000 for d = 10, σ₀ = 10
        let seeds = 400;
        let mean: f64 = (0..seeds)
            .map(|seed| {
                let t = generate_cluster_params(2, 10, 10.0, seed).unwrap();
                cluster_divergence(&t).unwrap().1.powi(2)
            })
            .sum::<f64>()
            / seeds as f64;
        // ‖θ_0 − θ_1‖² / 200 ~ χ²₁₀ has sd √20; 3 standard errors of the mean
        let se = 200.0 * 20f64.sqrt() / (seeds as f64).sqrt();
        assert!((mean - 2000.0).abs() < 3.0 * se, "mean {mean}");
    }

    #[test]
    fn holdout_matrix_matches_analytic_expectation() {
        // E[(<x, θ_i − θ_s> + ε)²] = ‖θ_i − θ_s‖² + 1
        let cfg = ExperimentConfig { clients: 2, holdout_size: 20_000, seeds: Seeds::all(5), ..Default::default() };
        let ds = generate_federation(&cfg, 3.0, PartitionPattern::Random).unwrap();
        let centers = CenterSet::new(ds.cluster_params.clone()).unwrap();
        let model = LossModel::linear_regression(10);
        let m = holdout_matrix(&centers, &ds.holdouts, &model);
        for i in 0..2 {
            for s in 0..2 {
                let expected = ds.cluster_params[i].dist_sq(&ds.cluster_params[s]) + 1.0;
                // per-point loss is σ²χ²₁-like with variance 2·expected²
                let se = (2.0f64).sqrt() * expected / (20_000f64).sqrt();
                assert!((m[i][s] - expected).abs() < 4.0 * se, "({i},{s}): {} vs {expected}", m[i][s]);
            }
        }
        let swapped = CenterSet::new(vec![ds.cluster_params[1].clone(), ds.cluster_params[0].clone()]).unwrap();
        let m2 = holdout_matrix(&swapped, &ds.holdouts, &model);
        for i in 0..2 {
            assert_eq!(m2[i][0], m[i][1]);
            assert_eq!(m2[i][1], m[i][0]);
        }
        let single = CenterSet::new(vec![ds.cluster_params[0].clone()]).unwrap();
        let m1 = holdout_matrix(&single, &ds.holdouts[..1], &model);
        assert_eq!(m1, vec![vec![model.batch_risk(&ds.cluster_params[0], &ds.holdouts[0])]]);
    }

    fn toy_clients() -> (Vec<ClientState>, CenterSet, Vec<Vec<f64>>) {
        let clients: Vec<ClientState> = (0..5)
            .map(|k| {
                let shard = (0..8)
                    .map(|i| Sample { x: vec![(i + k) as f64 * 0.3, 1.0 - i as f64 * 0.1], y: (i * k) as f64 * 0.05 })
                    .collect();
                ClientState::new(k, shard, ModelVector::from_vec(vec![k as f64 * 0.1, -0.2]), 2)
            })
            .collect();
        let centers = CenterSet::new(vec![ModelVector::from_vec(vec![1.0, 0.0]), ModelVector::from_vec(vec![0.0, 1.0])]).unwrap();
        let u = (0..5).map(|k| vec![k as f64 / 4.0, 1.0 - k as f64 / 4.0]).collect();
        (clients, centers, u)
    }

    #[test]
    fn joint_objective_zero_lambda_is_sum_of_local_risks() {
        let (clients, centers, u) = toy_clients();
        let model = LossModel::linear_regression(2);
        let expected: f64 = clients.iter().map(|c| model.batch_risk(&c.local_model, &c.shard)).sum();
        assert!((joint_objective(&clients, &centers, &u, 0.0, &model) - expected).abs() < 1e-12);
    }

    #[test]
    fn joint_objective_is_order_independent() {
        let (clients, centers, u) = toy_clients();
        let model = LossModel::linear_regression(2);
        let a = joint_objective(&clients, &centers, &u, 0.8, &model);
        let mut rev = clients.clone();
        rev.reverse();
        assert_eq!(joint_objective(&rev, &centers, &u, 0.8, &model), a);
    }
}
