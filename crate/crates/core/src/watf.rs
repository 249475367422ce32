//! Weighted adaptive threshold filtering.
//!
//! Each descriptor gets a softmax-over-descriptors weight per class from its
//! cosine similarity to that class's prototype. Weights are averaged over
//! classes, pooled across all samples of a stage, and every descriptor whose
//! averaged weight does not exceed `mean - std` of the pool is discarded.
//! Support is filtered first; prototypes are then rebuilt from the surviving
//! support descriptors and used to filter the queries.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, Array3, ArrayView2, ArrayView3, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{prototype_matrix, unit_rows, DescriptorSet, Episode, Prototype};

/// Which samples contribute to the mean/std pool behind the query threshold.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PoolingMode {
    /// Support and query are thresholded against their own pools.
    #[default]
    PerStage,
    /// The query threshold pools the support weights together with the
    /// query weights. The support stage is unchanged.
    Global,
}

impl fmt::Display for PoolingMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PoolingMode::PerStage => "per-stage",
            PoolingMode::Global => "global",
        })
    }
}

impl FromStr for PoolingMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "per-stage" => Ok(PoolingMode::PerStage),
            "global" => Ok(PoolingMode::Global),
            other => Err(Error::Config(format!("unknown pooling mode `{other}` (expected per-stage or global)"))),
        }
    }
}

/// Per-sample, per-class, per-descriptor weights and their class average.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightMatrix {
    /// `[L, N, M]`; each `(sample, class)` row sums to one.
    pub w: Array3<f64>,
    /// `[L, M]` class-averaged weights.
    pub w_bar: Array2<f64>,
}

impl WeightMatrix {
    pub fn n_samples(&self) -> usize {
        self.w.shape()[0]
    }

    /// All class-averaged weights, sample-major.
    pub fn pool(&self) -> Vec<f64> {
        self.w_bar.iter().copied().collect()
    }
}

/// Mean and population standard deviation of a weight pool.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PooledStats {
    pub mu: f64,
    pub sigma: f64,
}

/// Outcome of thresholding one stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterResult {
    /// Retained descriptor indices per sample, ascending. Never empty.
    pub retained: Vec<Vec<usize>>,
    pub tau: f64,
    pub mu: f64,
    pub sigma: f64,
    /// Retained descriptors (after fallback) over all `L * M` descriptors.
    pub retention_fraction: f64,
    /// Samples that would have lost every descriptor and kept them all instead.
    pub fallback_samples: Vec<String>,
}

/// Both filtering stages for one episode.
#[derive(Debug, Clone, PartialEq)]
pub struct FilteredEpisode {
    pub initial_prototypes: Vec<Prototype>,
    pub updated_prototypes: Vec<Prototype>,
    pub support_weights: WeightMatrix,
    pub query_weights: WeightMatrix,
    pub support: FilterResult,
    pub query: FilterResult,
}

/// Class prototypes as the mean of every (retained) descriptor of every
/// support sample of that class.
pub fn compute_prototypes(
    support: &[DescriptorSet],
    n_way: usize,
    retained: Option<&[Vec<usize>]>,
) -> Result<Vec<Prototype>> {
    if let Some(r) = retained {
        if r.len() != support.len() {
            return Err(Error::invalid(format!(
                "{} retained index sets for {} support samples",
                r.len(),
                support.len()
            )));
        }
    }
    let c = support.first().map_or(0, DescriptorSet::dim);
    let mut sums = vec![vec![0.0f64; c]; n_way];
    let mut counts = vec![0usize; n_way];

    for (j, set) in support.iter().enumerate() {
        let class = set
            .label()
            .filter(|&l| l < n_way)
            .ok_or_else(|| Error::invalid(format!("support sample {} has no valid label", set.sample_id())))?;
        let mut add = |i: usize| {
            for (acc, x) in sums[class].iter_mut().zip(set.descriptor(i)) {
                *acc += x;
            }
            counts[class] += 1;
        };
        match retained {
            Some(r) => r[j].iter().for_each(|&i| add(i)),
            None => (0..set.len()).for_each(add),
        }
    }

    sums.into_iter()
        .zip(counts)
        .enumerate()
        .map(|(class_index, (sum, count))| {
            if count == 0 {
                return Err(Error::Computation(format!("class {class_index} has no descriptors to average")));
            }
            let vector = sum.into_iter().map(|s| s / count as f64).collect();
            Ok(Prototype { class_index, vector })
        })
        .collect()
}

/// Softmax-cosine weights of every descriptor of every sample against every
/// prototype, plus their class average.
pub fn compute_weight_matrix(samples: &[DescriptorSet], prototypes: &[Prototype]) -> Result<WeightMatrix> {
    let l = samples.len();
    let n = prototypes.len();
    if l == 0 || n == 0 {
        return Err(Error::invalid("weight matrix needs at least one sample and one prototype"));
    }
    let m = samples[0].len();
    let c = prototypes[0].vector.len();
    if let Some(bad) = samples.iter().find(|s| s.len() != m || s.dim() != c) {
        return Err(Error::invalid(format!(
            "sample {} is {}x{}, expected {m}x{c}",
            bad.sample_id(),
            bad.len(),
            bad.dim()
        )));
    }

    let protos = unit_rows(prototype_matrix(prototypes).view());
    let mut w = Array3::<f64>::zeros((l, n, m));
    for (set, mut per_sample) in samples.iter().zip(w.axis_iter_mut(Axis(0))) {
        // [M, N] cosines
        let cos = unit_rows(set.descriptors()).dot(&protos.t()).mapv(|x| x.clamp(-1.0, 1.0));
        for (class, mut row) in per_sample.axis_iter_mut(Axis(0)).enumerate() {
            let column = cos.column(class);
            let max = column.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            if !max.is_finite() {
                return Err(Error::Computation(format!(
                    "non-finite cosine for sample {} against class {class}",
                    set.sample_id()
                )));
            }
            // Shifting by the max leaves the softmax unchanged and makes equal
            // cosines produce exactly 1/M.
            let mut total = 0.0;
            for (dst, &x) in row.iter_mut().zip(column) {
                *dst = (x - max).exp();
                total += *dst;
            }
            row.mapv_inplace(|e| e / total);
        }
    }
    let w_bar = aggregate_weights(w.view())?;
    Ok(WeightMatrix { w, w_bar })
}

/// Average `[L, N, M]` weights over the class axis.
pub fn aggregate_weights(w: ArrayView3<f64>) -> Result<Array2<f64>> {
    let n = w.shape()[1];
    if n == 0 {
        return Err(Error::invalid("cannot average weights over zero classes"));
    }
    Ok(w.sum_axis(Axis(1)) / n as f64)
}

/// Mean and population standard deviation of `pool`.
///
/// A pool whose values are all equal yields exactly its value and zero.
pub fn pooled_stats(pool: &[f64]) -> Result<PooledStats> {
    let first = *pool.first().ok_or_else(|| Error::invalid("pooled statistics of an empty pool"))?;
    if pool.iter().all(|&x| x == first) {
        return Ok(PooledStats { mu: first, sigma: 0.0 });
    }
    let count = pool.len() as f64;
    let mu = pool.iter().sum::<f64>() / count;
    let var = pool.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / count;
    Ok(PooledStats { mu, sigma: var.sqrt() })
}

/// `mu - sigma`.
pub fn adaptive_threshold(mu: f64, sigma: f64) -> f64 {
    debug_assert!(sigma >= 0.0, "negative standard deviation {sigma}");
    mu - sigma
}

/// Indices whose weight is strictly greater than `tau`. No fallback.
pub fn retain_above(weights: &[f64], tau: f64) -> Vec<usize> {
    weights.iter().enumerate().filter(|(_, &w)| w > tau).map(|(i, _)| i).collect()
}

/// Threshold every sample's class-averaged weights at `mu - sigma`.
pub fn filter_descriptors(samples: &[DescriptorSet], w_bar: ArrayView2<f64>, stats: PooledStats) -> Result<FilterResult> {
    if w_bar.nrows() != samples.len() {
        return Err(Error::invalid(format!(
            "{} weight rows for {} samples",
            w_bar.nrows(),
            samples.len()
        )));
    }
    let tau = adaptive_threshold(stats.mu, stats.sigma);
    let mut retained = Vec::with_capacity(samples.len());
    let mut fallback_samples = Vec::new();
    let mut kept = 0usize;
    for (set, row) in samples.iter().zip(w_bar.axis_iter(Axis(0))) {
        let row = row.to_vec();
        let mut indices = retain_above(&row, tau);
        if indices.is_empty() {
            indices = (0..row.len()).collect();
            fallback_samples.push(set.sample_id().to_owned());
        }
        kept += indices.len();
        retained.push(indices);
    }
    let total = w_bar.len();
    Ok(FilterResult {
        retained,
        tau,
        mu: stats.mu,
        sigma: stats.sigma,
        retention_fraction: kept as f64 / total as f64,
        fallback_samples,
    })
}

fn filter_stage(samples: &[DescriptorSet], weights: &WeightMatrix, pool: &[f64]) -> Result<FilterResult> {
    let stats = pooled_stats(pool)?;
    filter_descriptors(samples, weights.w_bar.view(), stats)
}

/// Run both filtering stages over `episode`.
pub fn watf_pipeline(episode: &Episode, pooling: PoolingMode) -> Result<FilteredEpisode> {
    let n_way = episode.n_way();

    let initial_prototypes = compute_prototypes(episode.support(), n_way, None)?;
    let support_weights = compute_weight_matrix(episode.support(), &initial_prototypes)?;
    let support_pool = support_weights.pool();
    let support = filter_stage(episode.support(), &support_weights, &support_pool)?;

    let updated_prototypes = compute_prototypes(episode.support(), n_way, Some(&support.retained))?;
    let query_weights = compute_weight_matrix(episode.query(), &updated_prototypes)?;
    let query_pool = match pooling {
        PoolingMode::PerStage => query_weights.pool(),
        PoolingMode::Global => support_pool.iter().copied().chain(query_weights.w_bar.iter().copied()).collect(),
    };
    let query = filter_stage(episode.query(), &query_weights, &query_pool)?;

    Ok(FilteredEpisode {
        initial_prototypes,
        updated_prototypes,
        support_weights,
        query_weights,
        support,
        query,
    })
}
