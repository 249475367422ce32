//! Image-to-class scoring over local descriptors.
//!
//! Every query descriptor contributes the sum of its `k` largest cosine
//! similarities against a class's descriptor pool; the class score is the sum
//! of those contributions and class probabilities are a softmax over scores.

use ndarray::{Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::unit_rows;

/// Descriptors scaled to unit length, ready for cosine lookups by dot product.
#[derive(Debug, Clone, PartialEq)]
pub struct UnitPool(Array2<f64>);

impl UnitPool {
    pub fn new(rows: ArrayView2<f64>) -> Self {
        UnitPool(unit_rows(rows))
    }

    pub fn len(&self) -> usize {
        self.0.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.0.nrows() == 0
    }

    pub fn rows(&self) -> ArrayView2<'_, f64> {
        self.0.view()
    }
}

/// Scores, probabilities and prediction for one query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassScore {
    pub scores: Vec<f64>,
    pub probabilities: Vec<f64>,
    pub predicted: usize,
}

impl ClassScore {
    pub fn from_scores(scores: Vec<f64>) -> Result<Self> {
        if scores.is_empty() {
            return Err(Error::invalid("no class scores"));
        }
        if let Some(bad) = scores.iter().find(|s| !s.is_finite()) {
            return Err(Error::Computation(format!("non-finite class score {bad}")));
        }
        let probabilities = softmax(&scores);
        // first index wins ties
        let predicted = probabilities
            .iter()
            .enumerate()
            .fold(0, |best, (i, &p)| if p > probabilities[best] { i } else { best });
        Ok(ClassScore { scores, probabilities, predicted })
    }

    /// `ln p(class)`, computed from scores so it stays finite when the
    /// probability underflows.
    pub fn log_probability(&self, class: usize) -> f64 {
        let max = self.scores.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let lse = max + self.scores.iter().map(|s| (s - max).exp()).sum::<f64>().ln();
        self.scores[class] - lse
    }
}

pub fn softmax(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Sum over query descriptors of the `k` largest cosines against `pool`.
/// A pool with fewer than `k` descriptors contributes all of them.
pub fn class_score_unit(query: &UnitPool, pool: &UnitPool, k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::invalid("k must be at least 1"));
    }
    if pool.is_empty() {
        return Err(Error::invalid("empty class pool"));
    }
    if query.is_empty() {
        return Err(Error::invalid("query has no descriptors"));
    }
    if query.0.ncols() != pool.0.ncols() {
        return Err(Error::invalid(format!(
            "query dimension {} does not match pool dimension {}",
            query.0.ncols(),
            pool.0.ncols()
        )));
    }
    let sims = query.0.dot(&pool.0.t());
    let take = k.min(pool.len());
    let mut buf = Vec::with_capacity(pool.len());
    let mut score = 0.0;
    for row in sims.axis_iter(Axis(0)) {
        buf.clear();
        buf.extend(row.iter().map(|x| x.clamp(-1.0, 1.0)));
        if take < buf.len() {
            buf.select_nth_unstable_by(take - 1, |a, b| b.total_cmp(a));
        }
        let mut top = buf[..take].to_vec();
        top.sort_by(|a, b| b.total_cmp(a));
        score += top.iter().sum::<f64>();
    }
    Ok(score)
}

/// [`class_score_unit`] on raw descriptor rows.
pub fn class_score(query: ArrayView2<f64>, pool: ArrayView2<f64>, k: usize) -> Result<f64> {
    class_score_unit(&UnitPool::new(query), &UnitPool::new(pool), k)
}

/// Score `query` against every class pool and softmax the scores.
pub fn classify(query: &UnitPool, pools: &[UnitPool], k: usize) -> Result<ClassScore> {
    let scores = pools
        .iter()
        .map(|pool| class_score_unit(query, pool, k))
        .collect::<Result<Vec<_>>>()?;
    ClassScore::from_scores(scores)
}

/// Mean negative log-probability of the true class.
pub fn episode_loss(scores: &[ClassScore], labels: &[usize]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::invalid(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    if scores.is_empty() {
        return Err(Error::invalid("loss of an empty query set"));
    }
    let total: f64 = scores.iter().zip(labels).map(|(s, &y)| -s.log_probability(y)).sum();
    Ok(total / scores.len() as f64)
}
