//! The client-side proximal objective
//!
//! `h_k(w) = f_k(w) + (λ/2) Σ_s u_s ‖w − c_s‖²`
//!
//! with an exact solver for the quadratic (linear-regression) case, a
//! mini-batch first-order solver for any loss model, and measurements of
//! how inexact a solve is and how similar a client's sub-problems are.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::models::LossModel;
use crate::rng::SimRng;
use crate::types::{CenterSet, LabeledPoint, ModelVector, Sample, SolverConfig, SolverKind};

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Immutable snapshot of one client's local problem in one round.
#[derive(Debug, Clone, Copy)]
pub struct ProximalProblem<'a> {
    pub shard: &'a [Sample],
    pub centers: &'a CenterSet,
    /// `u_s` per center; need not sum to one.
    pub weights: &'a [f64],
    pub lambda: f64,
    pub model: LossModel,
    /// Optional per-point weights `r_i`; the data term becomes `(1/n) Σ r_i l_i`.
    pub point_weights: Option<&'a [f64]>,
}

impl<'a> ProximalProblem<'a> {
    pub fn new(
        shard: &'a [Sample],
        centers: &'a CenterSet,
        weights: &'a [f64],
        lambda: f64,
        model: LossModel,
    ) -> Self {
        assert!(!shard.is_empty(), "proximal problem needs a nonempty shard");
        assert_eq!(weights.len(), centers.len(), "one weight per center");
        assert!(lambda >= 0.0, "λ must be non-negative");
        assert_eq!(centers.dim(), model.param_dim(), "center dimension mismatch");
        ProximalProblem {
            shard,
            centers,
            weights,
            lambda,
            model,
            point_weights: None,
        }
    }

    pub fn with_point_weights(mut self, r: &'a [f64]) -> Self {
        assert_eq!(r.len(), self.shard.len(), "one weight per point");
        self.point_weights = Some(r);
        self
    }

    fn point_weight(&self, i: usize) -> f64 {
        self.point_weights.map_or(1.0, |r| r[i])
    }

    /// `f_k(w)`: the (optionally weighted) mean loss over the shard.
    pub fn data_risk(&self, w: &[f64]) -> f64 {
        let n = self.shard.len() as f64;
        self.shard
            .iter()
            .enumerate()
            .map(|(i, p)| self.point_weight(i) * self.model.point_loss(w, p))
            .sum::<f64>()
            / n
    }

    pub fn value(&self, w: &[f64]) -> f64 {
        let w = ModelVector::from_vec(w.to_vec());
        let penalty: f64 = self
            .weights
            .iter()
            .zip(self.centers.iter())
            .map(|(u, c)| u * w.dist_sq(c))
            .sum();
        self.data_risk(&w) + 0.5 * self.lambda * penalty
    }

    /// Adds `λ Σ_s u_s (w − c_s)` into `out`.
    fn add_penalty_gradient(&self, w: &[f64], out: &mut [f64]) {
        if self.lambda == 0.0 {
            return;
        }
        for (u, c) in self.weights.iter().zip(self.centers.iter()) {
            let a = self.lambda * u;
            for ((o, wi), ci) in out.iter_mut().zip(w).zip(c.iter()) {
                *o += a * (wi - ci);
            }
        }
    }

    pub fn gradient(&self, w: &[f64]) -> ModelVector {
        let mut g = ModelVector::zeros(self.model.param_dim());
        let inv_n = 1.0 / self.shard.len() as f64;
        for (i, p) in self.shard.iter().enumerate() {
            self.model
                .accumulate_gradient(w, p, self.point_weight(i) * inv_n, &mut g);
        }
        self.add_penalty_gradient(w, &mut g);
        g
    }

    /// Exact minimizer for linear regression: solves
    /// `(2/n) Σ r_i x_i (x_iᵀw − y_i) + λ Σ_s u_s (w − c_s) = 0`.
    pub fn solve_closed_form(&self) -> Result<ModelVector> {
        if !self.model.is_linear_regression() {
            return Err(Error::Contract(
                "closed-form solve needs the linear-regression model".into(),
            ));
        }
        let d = self.model.param_dim();
        let n = self.shard.len() as f64;
        let mut a = DMatrix::<f64>::zeros(d, d);
        let mut b = DVector::<f64>::zeros(d);
        for (i, p) in self.shard.iter().enumerate() {
            let r = 2.0 * self.point_weight(i) / n;
            let x = DVector::from_column_slice(&p.x);
            a.ger(r, &x, &x, 1.0);
            b.axpy(r * p.y, &x, 1.0);
        }
        let total_u: f64 = self.weights.iter().sum();
        for j in 0..d {
            a[(j, j)] += self.lambda * total_u;
        }
        for (u, c) in self.weights.iter().zip(self.centers.iter()) {
            b.axpy(self.lambda * u, &DVector::from_column_slice(c), 1.0);
        }
        let chol = a.cholesky().ok_or_else(|| {
            Error::Degenerate("stationarity system is singular (λ·Σu = 0 and rank-deficient data?)".into())
        })?;
        let w = chol.solve(&b);
        let w = ModelVector::from_vec(w.as_slice().to_vec());
        if !w.is_finite() {
            return Err(Error::Degenerate("closed-form solution is not finite".into()));
        }
        Ok(w)
    }

    /// Mini-batch first-order descent from `start`, reshuffling the shard
    /// once per epoch with `rng`.
    pub fn solve_iterative(
        &self,
        start: &ModelVector,
        solver: &SolverConfig,
        rng: &mut SimRng,
    ) -> Result<ModelVector> {
        let n = self.shard.len();
        let mut order: Vec<usize> = (0..n).collect();
        self.descend(start, solver, |_| {
            order.shuffle(rng);
            order.clone()
        })
    }

    /// First-order descent with an explicit visiting order per epoch.
    pub fn descend(
        &self,
        start: &ModelVector,
        solver: &SolverConfig,
        mut epoch_order: impl FnMut(usize) -> Vec<usize>,
    ) -> Result<ModelVector> {
        let d = self.model.param_dim();
        assert_eq!(start.dim(), d, "start dimension mismatch");
        let batch = solver.batch_size.max(1);
        let mut w = start.clone();
        let mut m = vec![0.0; d];
        let mut v = vec![0.0; d];
        let mut step = 0i32;
        let mut g = vec![0.0; d];
        for epoch in 0..solver.local_epochs {
            let order = epoch_order(epoch);
            for chunk in order.chunks(batch) {
                g.iter_mut().for_each(|x| *x = 0.0);
                let scale = 1.0 / chunk.len() as f64;
                for &i in chunk {
                    self.model
                        .accumulate_gradient(&w, &self.shard[i], self.point_weight(i) * scale, &mut g);
                }
                self.add_penalty_gradient(&w, &mut g);

                let previous = w.clone();
                step += 1;
                if solver.adaptive {
                    let bc1 = 1.0 - ADAM_BETA1.powi(step);
                    let bc2 = 1.0 - ADAM_BETA2.powi(step);
                    for j in 0..d {
                        m[j] = ADAM_BETA1 * m[j] + (1.0 - ADAM_BETA1) * g[j];
                        v[j] = ADAM_BETA2 * v[j] + (1.0 - ADAM_BETA2) * g[j] * g[j];
                        let mhat = m[j] / bc1;
                        let vhat = v[j] / bc2;
                        w[j] -= solver.step_size * mhat / (vhat.sqrt() + ADAM_EPS);
                    }
                } else {
                    w.axpy(-solver.step_size, &g);
                }
                if !w.is_finite() {
                    return Err(Error::SolverDivergence {
                        message: format!("non-finite iterate at epoch {epoch}, step {step}"),
                        round: None,
                        client: None,
                        last_finite: previous,
                    });
                }
            }
        }
        Ok(w)
    }

    /// Dispatches on `solver.kind`; the closed form ignores `start` and `rng`.
    pub fn solve(
        &self,
        start: &ModelVector,
        solver: &SolverConfig,
        rng: &mut SimRng,
    ) -> Result<ModelVector> {
        match solver.kind {
            SolverKind::ClosedForm => self.solve_closed_form(),
            SolverKind::GradientIterative => self.solve_iterative(start, solver, rng),
        }
    }
}

/// Empirical gradient of a cluster risk from that distribution's holdout.
fn holdout_gradient(model: &LossModel, w: &[f64], holdout: &[LabeledPoint]) -> ModelVector {
    model.batch_gradient(w, holdout)
}

/// γ₀ estimate: `‖∇h_k(w_out)‖ / min_s ‖∇F̂_s(c_s)‖`, with `F̂_s` the holdout
/// risk of distribution s. Returns +∞ when the denominator is below 1e-12.
pub fn measure_inexactness(
    prob: &ProximalProblem<'_>,
    w_out: &ModelVector,
    holdouts: &[Vec<LabeledPoint>],
) -> f64 {
    assert_eq!(holdouts.len(), prob.centers.len(), "one holdout per center");
    let numerator = prob.gradient(w_out).norm();
    let denominator = prob
        .centers
        .iter()
        .zip(holdouts)
        .map(|(c, h)| holdout_gradient(&prob.model, c, h).norm())
        .fold(f64::INFINITY, f64::min);
    if denominator < 1e-12 {
        f64::INFINITY
    } else {
        numerator / denominator
    }
}

/// β estimate for linear regression: the smallest β with
/// `Σ_{s'} u_{s'} ‖∇h_{s'}(w_s*; c_s)‖² ≤ β ‖∇h_s(c_s; c_s)‖²` for every s,
/// where `h_s(w; c) = F̂_s(w) + (λ/2)‖w − c‖²` and `w_s* = argmin h_s(·; c_s)`.
/// `prob.weights` must hold the true mixture; clusters with zero weight are
/// skipped. Returns +∞ when a denominator vanishes.
pub fn measure_subproblem_similarity(
    prob: &ProximalProblem<'_>,
    holdouts: &[Vec<LabeledPoint>],
) -> Result<f64> {
    if !prob.model.is_linear_regression() {
        return Err(Error::Contract(
            "sub-problem similarity needs the linear-regression model".into(),
        ));
    }
    assert_eq!(holdouts.len(), prob.centers.len(), "one holdout per center");
    let samples: Vec<Vec<Sample>> = holdouts
        .iter()
        .map(|h| h.iter().map(|p| p.sample.clone()).collect())
        .collect();
    let sub_gradient = |s: usize, w: &[f64], anchor: &ModelVector| -> ModelVector {
        let mut g = holdout_gradient(&prob.model, w, &holdouts[s]);
        for ((gi, wi), ci) in g.iter_mut().zip(w).zip(anchor.iter()) {
            *gi += prob.lambda * (wi - ci);
        }
        g
    };

    let mut beta: f64 = 0.0;
    for s in 0..prob.centers.len() {
        if prob.weights[s] == 0.0 {
            continue;
        }
        let anchor = prob.centers.get(s);
        let single = CenterSet::new(vec![anchor.clone()])?;
        let minimizer = ProximalProblem::new(&samples[s], &single, &[1.0], prob.lambda, prob.model)
            .solve_closed_form()?;
        let numerator: f64 = (0..prob.centers.len())
            .filter(|&t| prob.weights[t] != 0.0)
            .map(|t| prob.weights[t] * sub_gradient(t, &minimizer, anchor).norm_sq())
            .sum();
        let denominator = sub_gradient(s, anchor, anchor).norm_sq();
        if denominator == 0.0 {
            return Ok(f64::INFINITY);
        }
        beta = beta.max(numerator / denominator);
    }
    Ok(beta)
}
