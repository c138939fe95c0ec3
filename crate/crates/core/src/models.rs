//! Per-point loss models `l(w; x, y)` and their batch averages.
//!
//! Dimension mismatches and empty batches are programming errors and panic.

use serde::{Deserialize, Serialize};

use crate::types::{dot, ModelVector, Sample};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LossKind {
    /// Squared error of `<x, w>` against `y`, no intercept.
    LinearRegression,
    /// Softmax cross-entropy; `w` is a `classes × d_in` row-major weight matrix.
    MultinomialLogistic { classes: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LossModel {
    pub kind: LossKind,
    pub input_dim: usize,
}

impl LossModel {
    pub fn linear_regression(input_dim: usize) -> Self {
        LossModel {
            kind: LossKind::LinearRegression,
            input_dim,
        }
    }

    pub fn multinomial_logistic(input_dim: usize, classes: usize) -> Self {
        assert!(classes >= 2, "need at least two classes");
        LossModel {
            kind: LossKind::MultinomialLogistic { classes },
            input_dim,
        }
    }

    pub fn is_linear_regression(&self) -> bool {
        self.kind == LossKind::LinearRegression
    }

    /// Length of the flattened parameter vector.
    pub fn param_dim(&self) -> usize {
        match self.kind {
            LossKind::LinearRegression => self.input_dim,
            LossKind::MultinomialLogistic { classes } => classes * self.input_dim,
        }
    }

    fn check(&self, w: &[f64], p: &Sample) {
        assert_eq!(w.len(), self.param_dim(), "parameter dimension mismatch");
        assert_eq!(p.x.len(), self.input_dim, "feature dimension mismatch");
    }

    fn logits(&self, classes: usize, w: &[f64], x: &[f64]) -> Vec<f64> {
        (0..classes)
            .map(|c| dot(&w[c * self.input_dim..(c + 1) * self.input_dim], x))
            .collect()
    }

    pub fn point_loss(&self, w: &[f64], p: &Sample) -> f64 {
        self.check(w, p);
        match self.kind {
            LossKind::LinearRegression => {
                let r = dot(&p.x, w) - p.y;
                r * r
            }
            LossKind::MultinomialLogistic { classes } => {
                let z = self.logits(classes, w, &p.x);
                log_sum_exp(&z) - z[p.class()]
            }
        }
    }

    /// Adds `scale * ∇l(w; p)` into `out`.
    pub fn accumulate_gradient(&self, w: &[f64], p: &Sample, scale: f64, out: &mut [f64]) {
        self.check(w, p);
        match self.kind {
            LossKind::LinearRegression => {
                let g = 2.0 * (dot(&p.x, w) - p.y) * scale;
                for (o, xi) in out.iter_mut().zip(&p.x) {
                    *o += g * xi;
                }
            }
            LossKind::MultinomialLogistic { classes } => {
                let z = self.logits(classes, w, &p.x);
                let lse = log_sum_exp(&z);
                let y = p.class();
                for c in 0..classes {
                    let coef = ((z[c] - lse).exp() - if c == y { 1.0 } else { 0.0 }) * scale;
                    let row = &mut out[c * self.input_dim..(c + 1) * self.input_dim];
                    for (o, xi) in row.iter_mut().zip(&p.x) {
                        *o += coef * xi;
                    }
                }
            }
        }
    }

    pub fn point_gradient(&self, w: &[f64], p: &Sample) -> ModelVector {
        let mut g = ModelVector::zeros(self.param_dim());
        self.accumulate_gradient(w, p, 1.0, &mut g);
        g
    }

    pub fn batch_risk<P: AsRef<Sample>>(&self, w: &[f64], points: &[P]) -> f64 {
        assert!(!points.is_empty(), "batch_risk of an empty batch");
        points
            .iter()
            .map(|p| self.point_loss(w, p.as_ref()))
            .sum::<f64>()
            / points.len() as f64
    }

    pub fn batch_gradient<P: AsRef<Sample>>(&self, w: &[f64], points: &[P]) -> ModelVector {
        assert!(!points.is_empty(), "batch_gradient of an empty batch");
        let mut g = ModelVector::zeros(self.param_dim());
        let scale = 1.0 / points.len() as f64;
        for p in points {
            self.accumulate_gradient(w, p.as_ref(), scale, &mut g);
        }
        g
    }

    /// Predicted class (argmax logit, ties to the lowest index).
    pub fn predict_class(&self, w: &[f64], x: &[f64]) -> usize {
        match self.kind {
            LossKind::MultinomialLogistic { classes } => {
                argmin_by(&self.logits(classes, w, x), |v| -v)
            }
            LossKind::LinearRegression => panic!("predict_class needs a classification model"),
        }
    }

    /// Fraction of points whose predicted class equals the label.
    pub fn accuracy<P: AsRef<Sample>>(&self, w: &[f64], points: &[P]) -> f64 {
        assert!(!points.is_empty());
        let hits = points
            .iter()
            .filter(|p| {
                let p = p.as_ref();
                self.predict_class(w, &p.x) == p.class()
            })
            .count();
        hits as f64 / points.len() as f64
    }
}

pub(crate) fn log_sum_exp(z: &[f64]) -> f64 {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// Index of the smallest `key(v)`; ties go to the lowest index.
pub(crate) fn argmin_by(values: &[f64], key: impl Fn(f64) -> f64) -> usize {
    let mut best = 0;
    let mut best_key = key(values[0]);
    for (i, &v) in values.iter().enumerate().skip(1) {
        let k = key(v);
        if k < best_key {
            best = i;
            best_key = k;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Purpose};
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn gauss(rng: &mut impl Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.sample(StandardNormal)).collect()
    }

    fn random_batch(model: &LossModel, rng: &mut impl Rng, n: usize) -> Vec<Sample> {
        (0..n)
            .map(|_| {
                let x = gauss(rng, model.input_dim);
                let y = match model.kind {
                    LossKind::LinearRegression => rng.sample::<f64, _>(StandardNormal) * 3.0,
                    LossKind::MultinomialLogistic { classes } => rng.random_range(0..classes) as f64,
                };
                Sample { x, y }
            })
            .collect()
    }

    fn models() -> [LossModel; 2] {
        [LossModel::linear_regression(5), LossModel::multinomial_logistic(4, 3)]
    }

    // Central differences, independent of the analytic gradient code.
    fn fd_directional(f: impl Fn(&[f64]) -> f64, w: &[f64], dir: &[f64], h: f64) -> f64 {
        let plus: Vec<f64> = w.iter().zip(dir).map(|(a, d)| a + h * d).collect();
        let minus: Vec<f64> = w.iter().zip(dir).map(|(a, d)| a - h * d).collect();
        (f(&plus) - f(&minus)) / (2.0 * h)
    }

    #[test]
    fn linear_regression_trivial_values() {
        let m = LossModel::linear_regression(3);
        let theta = [1.0, -2.0, 0.5];
        let x = vec![0.3, 0.7, -1.1];
        let p = Sample { x: x.clone(), y: dot(&x, &theta) };
        assert_eq!(m.point_loss(&theta, &p), 0.0);
        assert!(m.point_gradient(&theta, &p).iter().all(|g| *g == 0.0));
        let q = Sample { x: x.clone(), y: 2.5 };
        assert_eq!(m.point_loss(&[0.0; 3], &q), 6.25);
        let g = m.point_gradient(&[0.0; 3], &q);
        for (gi, xi) in g.iter().zip(&x) {
            assert_eq!(*gi, 2.0 * (0.0 - 2.5) * xi);
        }
    }

    #[test]
    fn logistic_uniform_logits_give_log_classes() {
        let m = LossModel::multinomial_logistic(4, 5);
        let p = Sample { x: vec![0.2, -1.0, 3.0, 0.1], y: 2.0 };
        let loss = m.point_loss(&vec![0.0; 20], &p);
        assert!((loss - 5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn point_gradient_matches_central_differences() {
        let mut rng = stream(11, Purpose::Shard, 0, 0);
        for m in models() {
            for _ in 0..20 {
                let w = gauss(&mut rng, m.param_dim());
                let p = &random_batch(&m, &mut rng, 1)[0];
                let g = m.point_gradient(&w, p);
                for j in 0..m.param_dim() {
                    let mut e = vec![0.0; m.param_dim()];
                    e[j] = 1.0;
                    let fd = fd_directional(|v| m.point_loss(v, p), &w, &e, 1e-5);
                    let rel = (fd - g[j]).abs() / g[j].abs().max(1e-6);
                    assert!(rel <= 1e-4 || (fd - g[j]).abs() < 1e-7, "{m:?} coord {j}: fd {fd} vs {}", g[j]);
                }
            }
        }
    }

    #[test]
    fn batch_gradient_directional_derivatives_match_on_100_probes() {
        let mut rng = stream(12, Purpose::Shard, 0, 0);
        for m in models() {
            let batch = random_batch(&m, &mut rng, 30);
            for _ in 0..100 {
                let w = gauss(&mut rng, m.param_dim());
                let dir = gauss(&mut rng, m.param_dim());
                let analytic = dot(&m.batch_gradient(&w, &batch), &dir);
                let fd = fd_directional(|v| m.batch_risk(v, &batch), &w, &dir, 1e-5);
                let rel = (fd - analytic).abs() / analytic.abs().max(1e-6);
                assert!(rel <= 1e-4, "{m:?}: fd {fd} vs analytic {analytic}");
            }
        }
    }

    #[test]
    fn batch_means_singletons_and_duplicates() {
        let mut rng = stream(13, Purpose::Shard, 0, 0);
        for m in models() {
            let batch = random_batch(&m, &mut rng, 17);
            let w = gauss(&mut rng, m.param_dim());
            let single = &batch[..1];
            assert_eq!(m.batch_risk(&w, single), m.point_loss(&w, &batch[0]));
            assert_eq!(m.batch_gradient(&w, single), m.point_gradient(&w, &batch[0]));

            let doubled: Vec<Sample> = batch.iter().flat_map(|p| [p.clone(), p.clone()]).collect();
            assert!((m.batch_risk(&w, &doubled) - m.batch_risk(&w, &batch)).abs() < 1e-12);

            // summation oracle: plain mean of per-point gradients
            let mut mean = vec![0.0; m.param_dim()];
            for p in &batch {
                for (a, g) in mean.iter_mut().zip(m.point_gradient(&w, p).iter()) {
                    *a += g;
                }
            }
            let bg = m.batch_gradient(&w, &batch);
            for (a, b) in mean.iter().zip(bg.iter()) {
                assert!((a / batch.len() as f64 - b).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn convexity_witness() {
        let mut rng = stream(14, Purpose::Shard, 0, 0);
        for m in models() {
            let batch = random_batch(&m, &mut rng, 25);
            for _ in 0..200 {
                let w1 = gauss(&mut rng, m.param_dim());
                let w2 = gauss(&mut rng, m.param_dim());
                let t: f64 = rng.random_range(0.01..0.99);
                let mid: Vec<f64> = w1.iter().zip(&w2).map(|(a, b)| t * a + (1.0 - t) * b).collect();
                let lhs = m.batch_risk(&mid, &batch);
                let rhs = t * m.batch_risk(&w1, &batch) + (1.0 - t) * m.batch_risk(&w2, &batch);
                assert!(lhs <= rhs + 1e-9);
            }
        }
    }

    #[test]
    #[should_panic(expected = "empty batch")]
    fn empty_batch_panics() {
        LossModel::linear_regression(2).batch_risk::<Sample>(&[0.0, 0.0], &[]);
    }

    #[test]
    #[should_panic(expected = "dimension mismatch")]
    fn dimension_mismatch_panics() {
        let p = Sample { x: vec![1.0], y: 0.0 };
        LossModel::linear_regression(2).point_loss(&[0.0, 0.0], &p);
    }
}
