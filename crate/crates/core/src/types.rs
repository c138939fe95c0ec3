//! Domain types shared by every module.

use std::ops::{Deref, DerefMut};

use serde::{Deserialize, Serialize};

use crate::datagen::PartitionPattern;
use crate::error::{Error, Result};

/// Dense parameter vector: a local model, a center, or a true cluster parameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ModelVector(Vec<f64>);

impl ModelVector {
    pub fn zeros(dim: usize) -> Self {
        ModelVector(vec![0.0; dim])
    }

    pub fn from_vec(values: Vec<f64>) -> Self {
        ModelVector(values)
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    pub fn dot(&self, other: &[f64]) -> f64 {
        dot(&self.0, other)
    }

    pub fn norm_sq(&self) -> f64 {
        dot(&self.0, &self.0)
    }

    pub fn norm(&self) -> f64 {
        self.norm_sq().sqrt()
    }

    pub fn dist_sq(&self, other: &ModelVector) -> f64 {
        assert_eq!(self.dim(), other.dim(), "dimension mismatch");
        self.0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| (a - b) * (a - b))
            .sum()
    }

    /// `self += alpha * x`
    pub fn axpy(&mut self, alpha: f64, x: &[f64]) {
        assert_eq!(self.dim(), x.len(), "dimension mismatch");
        for (s, v) in self.0.iter_mut().zip(x) {
            *s += alpha * v;
        }
    }

    pub fn scale(&mut self, alpha: f64) {
        for v in &mut self.0 {
            *v *= alpha;
        }
    }

    /// Weighted sum `Σ weights[i] * vectors[i]`.
    pub fn weighted_sum<'a, I>(dim: usize, terms: I) -> ModelVector
    where
        I: IntoIterator<Item = (f64, &'a ModelVector)>,
    {
        let mut out = ModelVector::zeros(dim);
        for (w, v) in terms {
            out.axpy(w, v);
        }
        out
    }
}

impl Deref for ModelVector {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl DerefMut for ModelVector {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

impl From<Vec<f64>> for ModelVector {
    fn from(v: Vec<f64>) -> Self {
        ModelVector(v)
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "dimension mismatch");
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// The S cluster models kept by the server. Index is the cluster id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<ModelVector>", into = "Vec<ModelVector>")]
pub struct CenterSet {
    centers: Vec<ModelVector>,
}

impl CenterSet {
    pub fn new(centers: Vec<ModelVector>) -> Result<Self> {
        if centers.is_empty() {
            return Err(Error::Contract("a center set needs at least one center".into()));
        }
        let dim = centers[0].dim();
        if centers.iter().any(|c| c.dim() != dim) {
            return Err(Error::Contract("centers must share one dimension".into()));
        }
        Ok(CenterSet { centers })
    }

    pub fn len(&self) -> usize {
        self.centers.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn dim(&self) -> usize {
        self.centers[0].dim()
    }

    pub fn get(&self, s: usize) -> &ModelVector {
        &self.centers[s]
    }

    pub fn iter(&self) -> std::slice::Iter<'_, ModelVector> {
        self.centers.iter()
    }

    pub fn as_slice(&self) -> &[ModelVector] {
        &self.centers
    }

    /// Unweighted mean of all centers.
    pub fn mean(&self) -> ModelVector {
        let w = 1.0 / self.len() as f64;
        ModelVector::weighted_sum(self.dim(), self.centers.iter().map(|c| (w, c)))
    }
}

impl TryFrom<Vec<ModelVector>> for CenterSet {
    type Error = Error;
    fn try_from(v: Vec<ModelVector>) -> Result<Self> {
        CenterSet::new(v)
    }
}

impl From<CenterSet> for Vec<ModelVector> {
    fn from(c: CenterSet) -> Self {
        c.centers
    }
}

/// One observation as the learning algorithms see it: features and target.
///
/// For classification the target holds the class index as an integral value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub x: Vec<f64>,
    pub y: f64,
}

impl Sample {
    pub fn class(&self) -> usize {
        self.y as usize
    }
}

impl AsRef<Sample> for Sample {
    fn as_ref(&self) -> &Sample {
        self
    }
}

/// A sample together with the distribution that generated it.
///
/// The source label is ground truth: only data generation and metrics read it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledPoint {
    #[serde(flatten)]
    pub sample: Sample,
    pub source: usize,
}

impl AsRef<Sample> for LabeledPoint {
    fn as_ref(&self) -> &Sample {
        &self.sample
    }
}

/// One client's view: its shard (without source labels), its personalized
/// model, and its latest importance estimate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientState {
    pub id: usize,
    pub shard: Vec<Sample>,
    pub local_model: ModelVector,
    /// `u_ks^t`, floored at σ per cluster and not renormalized.
    pub importance: Vec<f64>,
    /// `n_ks^t`, points matched to each center at the last estimation.
    pub match_counts: Vec<usize>,
    pub last_estimated_round: Option<usize>,
    pub times_selected: usize,
}

impl ClientState {
    pub fn new(id: usize, shard: Vec<Sample>, local_model: ModelVector, clusters: usize) -> Self {
        assert!(!shard.is_empty(), "client {id} has an empty shard");
        ClientState {
            id,
            shard,
            local_model,
            importance: vec![1.0 / clusters as f64; clusters],
            match_counts: vec![0; clusters],
            last_estimated_round: None,
            times_selected: 0,
        }
    }

    pub fn shard_size(&self) -> usize {
        self.shard.len()
    }

    pub fn never_selected(&self) -> bool {
        self.times_selected == 0
    }
}

/// Which synthetic task a dataset holds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Task {
    Regression,
    Classification { classes: usize, separation: f64 },
}

/// Everything needed to regenerate a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorSpec {
    pub clusters: usize,
    pub dim: usize,
    pub sigma0: f64,
    pub partition: PartitionPattern,
    pub seed: u64,
    pub noise_std: f64,
    pub task: Task,
}

/// All client shards, per-distribution holdouts and the ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FederationDataset {
    pub generator_spec: GeneratorSpec,
    pub shards: Vec<Vec<LabeledPoint>>,
    pub holdouts: Vec<Vec<LabeledPoint>>,
    /// Row k is client k's realized mixture `n_ks / n_k`.
    pub true_mixture: Vec<Vec<f64>>,
    /// θ_s for regression; flattened class means for classification.
    pub cluster_params: Vec<ModelVector>,
}

impl FederationDataset {
    pub fn clients(&self) -> usize {
        self.shards.len()
    }

    pub fn clusters(&self) -> usize {
        self.holdouts.len()
    }

    pub fn shard_sizes(&self) -> Vec<usize> {
        self.shards.iter().map(Vec::len).collect()
    }

    pub fn total_points(&self) -> usize {
        self.shards.iter().map(Vec::len).sum()
    }

    /// Feature dimension of the stored samples.
    pub fn feature_dim(&self) -> usize {
        self.holdouts
            .iter()
            .chain(&self.shards)
            .find_map(|v| v.first())
            .map(|p| p.sample.x.len())
            .unwrap_or(self.generator_spec.dim)
    }

    /// Client views with source labels stripped, all starting from `initial`.
    pub fn client_states(&self, initial: &ModelVector) -> Vec<ClientState> {
        self.shards
            .iter()
            .enumerate()
            .map(|(k, shard)| {
                let samples = shard.iter().map(|p| p.sample.clone()).collect();
                ClientState::new(k, samples, initial.clone(), self.clusters())
            })
            .collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ds: FederationDataset = serde_json::from_str(text)?;
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.clusters();
        if s == 0 || self.shards.is_empty() {
            return Err(Error::Contract("dataset needs clusters and clients".into()));
        }
        if self.true_mixture.len() != self.shards.len() {
            return Err(Error::Contract("true_mixture must have one row per client".into()));
        }
        for (k, (row, shard)) in self.true_mixture.iter().zip(&self.shards).enumerate() {
            if shard.is_empty() {
                return Err(Error::Contract(format!("client {k} has an empty shard")));
            }
            if row.len() != s {
                return Err(Error::Contract(format!("true_mixture row {k} has wrong length")));
            }
            if (row.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                return Err(Error::Contract(format!("true_mixture row {k} does not sum to 1")));
            }
            if shard.iter().any(|p| p.source >= s) {
                return Err(Error::Contract(format!("client {k} has a point with invalid source")));
            }
        }
        Ok(())
    }
}

/// Local solver choice.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolverKind {
    /// Direct linear solve of the stationarity system (linear regression only).
    ClosedForm,
    /// Mini-batch first-order updates.
    GradientIterative,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    pub kind: SolverKind,
    pub local_epochs: usize,
    pub batch_size: usize,
    pub step_size: f64,
    /// Adam-style first/second moment scaling.
    pub adaptive: bool,
}

impl SolverConfig {
    pub fn closed_form() -> Self {
        SolverConfig {
            kind: SolverKind::ClosedForm,
            ..SolverConfig::default()
        }
    }
}

impl Default for SolverConfig {
    /// Adam, 10 local epochs, batch 10, learning rate 5e-3.
    fn default() -> Self {
        SolverConfig {
            kind: SolverKind::GradientIterative,
            local_epochs: 10,
            batch_size: 10,
            step_size: 5e-3,
            adaptive: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Seeds {
    pub data: u64,
    pub init: u64,
    pub selection: u64,
}

impl Seeds {
    pub fn all(seed: u64) -> Self {
        Seeds {
            data: seed,
            init: seed.wrapping_add(1),
            selection: seed.wrapping_add(2),
        }
    }
}

/// How each cluster draws its K clients.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sampling {
    #[default]
    WithReplacement,
    WithoutReplacement,
}

/// Every knob of the federated procedure and its local solver.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    /// S
    pub clusters: usize,
    /// N
    pub clients: usize,
    /// K
    pub selection_size: usize,
    /// τ
    pub estimation_interval: usize,
    /// σ
    pub smoothing: f64,
    /// λ
    pub lambda: f64,
    /// T
    pub rounds: usize,
    pub solver: SolverConfig,
    pub seeds: Seeds,
    pub holdout_size: usize,
    /// Feature dimension of generated data.
    pub dim: usize,
    pub shard_size_min: usize,
    pub shard_size_max: usize,
    /// Std of the label noise ε (regression).
    pub noise_std: f64,
    pub sampling: Sampling,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            clusters: 2,
            clients: 100,
            selection_size: 60,
            estimation_interval: 2,
            smoothing: 1e-4,
            lambda: 1.0,
            rounds: 50,
            solver: SolverConfig::default(),
            seeds: Seeds::all(0),
            holdout_size: 1000,
            dim: 10,
            shard_size_min: 100,
            shard_size_max: 200,
            noise_std: 1.0,
            sampling: Sampling::WithReplacement,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        let c = self;
        if c.clusters < 1 {
            return Err(Error::config("clusters", "S ≥ 1"));
        }
        if c.clients < 1 {
            return Err(Error::config("clients", "N ≥ 1"));
        }
        if c.selection_size < 1 {
            return Err(Error::config("selection_size", "K ≥ 1"));
        }
        if c.sampling == Sampling::WithoutReplacement && c.selection_size > c.clients {
            return Err(Error::config(
                "selection_size",
                "K ≤ N when sampling without replacement",
            ));
        }
        if c.estimation_interval < 1 {
            return Err(Error::config("tau", "τ ≥ 1"));
        }
        if !(c.smoothing > 0.0 && c.smoothing < 1.0) {
            return Err(Error::config("sigma", "0 < σ < 1"));
        }
        if !(c.lambda >= 0.0 && c.lambda.is_finite()) {
            return Err(Error::config("lambda", "λ ≥ 0"));
        }
        if c.rounds < 1 {
            return Err(Error::config("rounds", "T ≥ 1"));
        }
        if c.holdout_size < 1 {
            return Err(Error::config("holdout_size", "holdout_size ≥ 1"));
        }
        if c.dim < 1 {
            return Err(Error::config("dim", "d ≥ 1"));
        }
        if c.shard_size_min < 1 || c.shard_size_min > c.shard_size_max {
            return Err(Error::config(
                "shard_size_min",
                "1 ≤ shard_size_min ≤ shard_size_max",
            ));
        }
        if !(c.noise_std >= 0.0 && c.noise_std.is_finite()) {
            return Err(Error::config("noise_std", "noise_std ≥ 0"));
        }
        let s = &c.solver;
        if s.kind == SolverKind::GradientIterative {
            if s.batch_size < 1 {
                return Err(Error::config("batch_size", "batch_size ≥ 1"));
            }
            if !(s.step_size > 0.0 && s.step_size.is_finite()) {
                return Err(Error::config("step_size", "step_size > 0"));
            }
        }
        Ok(())
    }
}

/// Per-round metrics record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundTrace {
    pub round: usize,
    /// Row = holdout distribution, column = center.
    pub holdout_loss: Vec<Vec<f64>>,
    pub mean_local_loss: f64,
    pub importance_error: f64,
    pub unique_selected: usize,
    pub joint_objective: Option<f64>,
    /// Local optimization problems solved this round, over all clients.
    pub local_solves: usize,
    /// Solves performed by each participating client.
    pub solves_per_participant: usize,
    /// Model coordinates the server broadcast for importance estimation.
    pub center_values_sent: usize,
}
