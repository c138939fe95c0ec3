//! Synthetic federations: mixtures of linear regressions (and a Gaussian
//! classification analogue) split across clients by a partition pattern.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{stream, Purpose, SimRng};
use crate::types::{
    dot, ExperimentConfig, FederationDataset, GeneratorSpec, LabeledPoint, ModelVector, Sample,
    Task,
};

/// How each client's data is split among the S source distributions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PartitionPattern {
    /// First half of the clients hold `a:b`, the second half `b:a` (S = 2).
    FixedRatio { a: u32, b: u32 },
    /// Client k holds `(0.5 + k)%` of distribution 0 (N = 100, S = 2).
    Linear,
    /// S − 1 uniform cut points per client split `[0, 1]` into the mixture.
    Random,
}

impl PartitionPattern {
    pub fn validate(&self, clients: usize, clusters: usize) -> Result<()> {
        match *self {
            PartitionPattern::FixedRatio { a, b } => {
                if a + b != 100 {
                    return Err(Error::config("partition", "fixed ratio needs a + b = 100"));
                }
                if clusters != 2 {
                    return Err(Error::config("partition", "fixed ratio needs S = 2"));
                }
            }
            PartitionPattern::Linear => {
                if clients != 100 || clusters != 2 {
                    return Err(Error::config("partition", "linear partition needs N = 100 and S = 2"));
                }
            }
            PartitionPattern::Random => {}
        }
        Ok(())
    }
}

fn normal_vec(rng: &mut SimRng, n: usize, std: f64) -> Vec<f64> {
    (0..n).map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect()
}

/// Draws θ_1..θ_S i.i.d. from `N(0, σ₀² I_d)`.
pub fn generate_cluster_params(
    clusters: usize,
    dim: usize,
    sigma0: f64,
    seed: u64,
) -> Result<Vec<ModelVector>> {
    if clusters < 1 || dim < 1 {
        return Err(Error::config("clusters", "S ≥ 1 and d ≥ 1"));
    }
    if !(sigma0 > 0.0 && sigma0.is_finite()) {
        return Err(Error::config("sigma0", "σ₀ > 0"));
    }
    let mut rng = stream(seed, Purpose::ClusterParams, 0, 0);
    Ok((0..clusters)
        .map(|_| ModelVector::from_vec(normal_vec(&mut rng, dim, sigma0)))
        .collect())
}

/// Target mixture `u_k` for client `k` under `pattern`.
pub fn mixture_for_client(
    k: usize,
    clients: usize,
    clusters: usize,
    pattern: PartitionPattern,
    rng: &mut SimRng,
) -> Result<Vec<f64>> {
    pattern.validate(clients, clusters)?;
    Ok(match pattern {
        PartitionPattern::FixedRatio { a, b } => {
            let (a, b) = (f64::from(a) / 100.0, f64::from(b) / 100.0);
            if k < clients / 2 {
                vec![a, b]
            } else {
                vec![b, a]
            }
        }
        PartitionPattern::Linear => {
            let k = k as f64;
            vec![(0.5 + k) / 100.0, (99.5 - k) / 100.0]
        }
        PartitionPattern::Random => {
            let mut cuts: Vec<f64> = (0..clusters - 1).map(|_| rng.random::<f64>()).collect();
            cuts.sort_by(f64::total_cmp);
            let mut prev = 0.0;
            let mut out = Vec::with_capacity(clusters);
            for c in cuts {
                out.push(c - prev);
                prev = c;
            }
            out.push(1.0 - prev);
            out
        }
    })
}

/// Integer counts summing exactly to `total`, rounding `weights * total` by
/// largest remainder (ties to the lower index).
pub fn largest_remainder(weights: &[f64], total: usize) -> Vec<usize> {
    let sum: f64 = weights.iter().sum();
    let exact: Vec<f64> = weights.iter().map(|w| w / sum * total as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&i, &j| {
        let fi = exact[i] - exact[i].floor();
        let fj = exact[j] - exact[j].floor();
        fj.total_cmp(&fi).then(i.cmp(&j))
    });
    for &i in order.iter().take(total.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

/// Shared shard/partition mechanics; `draw` produces one sample of a source.
fn assemble<F>(
    config: &ExperimentConfig,
    pattern: PartitionPattern,
    spec: GeneratorSpec,
    cluster_params: Vec<ModelVector>,
    draw: F,
) -> Result<FederationDataset>
where
    F: Fn(usize, &mut SimRng) -> Sample,
{
    config.validate()?;
    let (n, s) = (config.clients, config.clusters);
    pattern.validate(n, s)?;
    let seed = config.seeds.data;

    let mut size_rng = stream(seed, Purpose::ShardSizes, 0, 0);
    let mut shards = Vec::with_capacity(n);
    let mut true_mixture = Vec::with_capacity(n);
    for k in 0..n {
        let n_k = size_rng.random_range(config.shard_size_min..=config.shard_size_max);
        let mut mix_rng = stream(seed, Purpose::Mixture, k as u64, 0);
        let target = mixture_for_client(k, n, s, pattern, &mut mix_rng)?;
        let counts = largest_remainder(&target, n_k);

        let mut rng = stream(seed, Purpose::Shard, k as u64, 0);
        let mut sources: Vec<usize> = counts
            .iter()
            .enumerate()
            .flat_map(|(src, &c)| std::iter::repeat_n(src, c))
            .collect();
        sources.shuffle(&mut rng);
        let shard: Vec<LabeledPoint> = sources
            .into_iter()
            .map(|source| LabeledPoint {
                sample: draw(source, &mut rng),
                source,
            })
            .collect();
        true_mixture.push(counts.iter().map(|&c| c as f64 / n_k as f64).collect());
        shards.push(shard);
    }

    let holdouts = (0..s)
        .map(|src| {
            let mut rng = stream(seed, Purpose::Holdout, src as u64, 0);
            (0..config.holdout_size)
                .map(|_| LabeledPoint {
                    sample: draw(src, &mut rng),
                    source: src,
                })
                .collect()
        })
        .collect();

    Ok(FederationDataset {
        generator_spec: spec,
        shards,
        holdouts,
        true_mixture,
        cluster_params,
    })
}

/// Mixture-of-linear-regressions federation:
/// `x ~ N(0, I_d)`, `y = <x, θ_source> + ε`, `ε ~ N(0, noise_std²)`.
pub fn generate_federation(
    config: &ExperimentConfig,
    sigma0: f64,
    pattern: PartitionPattern,
) -> Result<FederationDataset> {
    let thetas = generate_cluster_params(config.clusters, config.dim, sigma0, config.seeds.data)?;
    let spec = GeneratorSpec {
        clusters: config.clusters,
        dim: config.dim,
        sigma0,
        partition: pattern,
        seed: config.seeds.data,
        noise_std: config.noise_std,
        task: Task::Regression,
    };
    let (dim, noise) = (config.dim, config.noise_std);
    let params = thetas.clone();
    assemble(config, pattern, spec, params, move |src, rng| {
        let x = normal_vec(rng, dim, 1.0);
        let eps: f64 = rng.sample(StandardNormal);
        let y = dot(&x, &thetas[src]) + noise * eps;
        Sample { x, y }
    })
}

/// Spread of the shared class means in the classification generator.
const CLASS_SPREAD: f64 = 3.0;

/// Gaussian class-conditional federation. Every cluster starts from one
/// shared set of class means; each (cluster, class) mean is then moved by
/// `separation` along its own random unit direction. A constant 1 is
/// appended to each feature vector as the bias input. `separation = 0`
/// makes all clusters identical.
pub fn generate_classification_federation(
    config: &ExperimentConfig,
    pattern: PartitionPattern,
    classes: usize,
    separation: f64,
) -> Result<FederationDataset> {
    if classes < 2 {
        return Err(Error::config("classes", "class_count ≥ 2"));
    }
    if !(separation >= 0.0 && separation.is_finite()) {
        return Err(Error::config("separation", "separation must be non-negative and finite"));
    }
    let d = config.dim;
    let mut mean_rng = stream(config.seeds.data, Purpose::ClassMeans, 0, 0);
    let base: Vec<Vec<f64>> = (0..classes)
        .map(|_| normal_vec(&mut mean_rng, d, CLASS_SPREAD))
        .collect();
    let means: Vec<Vec<Vec<f64>>> = (0..config.clusters)
        .map(|_| {
            base.iter()
                .map(|b| {
                    let g = normal_vec(&mut mean_rng, d, 1.0);
                    let norm = dot(&g, &g).sqrt().max(f64::MIN_POSITIVE);
                    b.iter().zip(&g).map(|(bi, gi)| bi + separation * gi / norm).collect()
                })
                .collect()
        })
        .collect();
    let params = means
        .iter()
        .map(|m| ModelVector::from_vec(m.concat()))
        .collect();
    let spec = GeneratorSpec {
        clusters: config.clusters,
        dim: d,
        sigma0: separation,
        partition: pattern,
        seed: config.seeds.data,
        noise_std: 1.0,
        task: Task::Classification { classes, separation },
    };
    assemble(config, pattern, spec, params, move |src, rng| {
        let c = rng.random_range(0..classes);
        let mut x: Vec<f64> = means[src][c]
            .iter()
            .map(|m| m + rng.sample::<f64, _>(StandardNormal))
            .collect();
        x.push(1.0);
        Sample { x, y: c as f64 }
    })
}
