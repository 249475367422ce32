//! Weight-distribution and cluster-compactness diagnostics.

use ndarray::{Array2, Axis};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::filter::Selection;
use crate::types::{unit_rows, Episode};
use crate::watf::{adaptive_threshold, pooled_stats};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WeightHistogram {
    /// `n_bins + 1` equal-width edges from the pool minimum to its maximum.
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
    pub mu: f64,
    pub sigma: f64,
    /// Fisher-Pearson coefficient `m3 / m2^1.5`; zero for a constant pool.
    pub skewness: f64,
}

impl WeightHistogram {
    pub const CSV_HEADER: &'static str = "bin,lower,upper,count";

    pub fn csv_lines(&self) -> impl Iterator<Item = String> + '_ {
        self.counts
            .iter()
            .enumerate()
            .map(|(i, count)| format!("{i},{},{},{count}", self.edges[i], self.edges[i + 1]))
    }
}

pub fn weight_histogram(pool: &[f64], n_bins: usize) -> Result<WeightHistogram> {
    if n_bins < 2 {
        return Err(Error::invalid("a histogram needs at least 2 bins"));
    }
    let stats = pooled_stats(pool)?;
    let min = pool.iter().copied().fold(f64::INFINITY, f64::min);
    let max = pool.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let width = (max - min) / n_bins as f64;
    let edges: Vec<f64> = (0..=n_bins).map(|i| if i == n_bins { max } else { min + width * i as f64 }).collect();
    let mut counts = vec![0usize; n_bins];
    for &x in pool {
        let bin = if width > 0.0 { (((x - min) / width) as usize).min(n_bins - 1) } else { 0 };
        counts[bin] += 1;
    }
    let n = pool.len() as f64;
    let m2 = pool.iter().map(|x| (x - stats.mu).powi(2)).sum::<f64>() / n;
    let m3 = pool.iter().map(|x| (x - stats.mu).powi(3)).sum::<f64>() / n;
    let skewness = if m2 > 0.0 { m3 / m2.powf(1.5) } else { 0.0 };
    Ok(WeightHistogram { edges, counts, mu: stats.mu, sigma: stats.sigma, skewness })
}

/// Fraction of `pool` strictly above its own `mean - std`.
pub fn threshold_retention(pool: &[f64]) -> Result<f64> {
    let stats = pooled_stats(pool)?;
    let tau = adaptive_threshold(stats.mu, stats.sigma);
    Ok(pool.iter().filter(|&&x| x > tau).count() as f64 / pool.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Compactness {
    /// Mean silhouette under cosine distance `1 - cos`.
    pub silhouette: f64,
    /// Mean within-class pairwise distance over mean cross-class pairwise distance.
    pub intra_inter_ratio: f64,
}

/// Silhouette and intra/inter distance ratio of labelled descriptor pools.
/// A point alone in its class scores a silhouette of zero.
pub fn compactness_metrics(pools: &[Array2<f64>]) -> Result<Compactness> {
    if pools.len() < 2 {
        return Err(Error::invalid("compactness needs at least two classes"));
    }
    if pools.iter().any(|p| p.nrows() == 0) {
        return Err(Error::invalid("compactness of an empty class pool"));
    }
    let units: Vec<Array2<f64>> = pools.iter().map(|p| unit_rows(p.view())).collect();
    let classes = units.len();

    let (mut intra_sum, mut intra_pairs) = (0.0, 0usize);
    let (mut inter_sum, mut inter_pairs) = (0.0, 0usize);
    let mut silhouette_sum = 0.0;
    let mut points = 0usize;

    // [a][b] holds the cosine distances between rows of pool a and rows of pool b
    let mut distances: Vec<Vec<Array2<f64>>> = Vec::with_capacity(classes);
    for a in &units {
        distances.push(units.iter().map(|b| a.dot(&b.t()).mapv(|c| 1.0 - c.clamp(-1.0, 1.0))).collect());
    }

    for a in 0..classes {
        let own = &distances[a][a];
        let n_a = own.nrows();
        for i in 0..n_a {
            for j in (i + 1)..n_a {
                intra_sum += own[[i, j]];
                intra_pairs += 1;
            }
        }
        for b in (a + 1)..classes {
            inter_sum += distances[a][b].sum();
            inter_pairs += distances[a][b].len();
        }
        for (i, row) in own.axis_iter(Axis(0)).enumerate() {
            points += 1;
            if n_a == 1 {
                continue;
            }
            let within = (row.sum() - row[i]) / (n_a - 1) as f64;
            let nearest = (0..classes)
                .filter(|&b| b != a)
                .map(|b| distances[a][b].row(i).mean().expect("non-empty pool"))
                .fold(f64::INFINITY, f64::min);
            let denom = within.max(nearest);
            if denom > 0.0 {
                silhouette_sum += (nearest - within) / denom;
            }
        }
    }

    let intra = if intra_pairs == 0 { 0.0 } else { intra_sum / intra_pairs as f64 };
    let inter = inter_sum / inter_pairs as f64;
    let intra_inter_ratio = match (intra == 0.0, inter == 0.0) {
        (true, _) => 0.0,
        (false, true) => f64::INFINITY,
        (false, false) => intra / inter,
    };
    Ok(Compactness { silhouette: silhouette_sum / points as f64, intra_inter_ratio })
}

/// Per-class pools of support descriptors. With `retained`, only those
/// indices of each sample are used.
pub fn support_pools(episode: &Episode, retained: Option<&[Vec<usize>]>) -> Vec<Array2<f64>> {
    let c = episode.c_dim();
    let mut flat: Vec<Vec<f64>> = vec![Vec::new(); episode.n_way()];
    for (j, set) in episode.support().iter().enumerate() {
        let rows = match retained {
            Some(r) => set.select(&r[j]),
            None => set.descriptors().to_owned(),
        };
        flat[episode.support_label(j)].extend(rows.iter().copied());
    }
    flat.into_iter()
        .map(|v| {
            let n = v.len() / c;
            Array2::from_shape_vec((n, c), v).expect("whole rows")
        })
        .collect()
}

/// Support-set compactness with every descriptor, then with the selection.
pub fn compactness_before_after(episode: &Episode, selection: &Selection) -> Result<(Compactness, Compactness)> {
    let before = compactness_metrics(&support_pools(episode, None))?;
    let after = compactness_metrics(&support_pools(episode, Some(&selection.support)))?;
    Ok((before, after))
}
