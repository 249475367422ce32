//! Episodic evaluation: filtering, classification and accuracy aggregation
//! over a stream of episodes.

mod diagnostics;
mod report;

pub use diagnostics::{
    compactness_before_after, compactness_metrics, support_pools, threshold_retention, weight_histogram,
    Compactness, WeightHistogram,
};
pub use report::{ci95_half_width, EvaluationReport, KSweepRow, Retention};

use std::collections::BTreeSet;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::classifier::{classify, episode_loss, ClassScore, UnitPool};
use crate::error::{Error, Result};
use crate::filter::{DescriptorFilter, FilterRegistry, KeepAll, Selection};
use crate::source::EpisodeSource;
use crate::types::Episode;
use crate::watf::PoolingMode;

/// Episodes in the standard test protocol.
pub const DEFAULT_EPISODES: usize = 600;
pub const DEFAULT_K: usize = 3;
pub const DEFAULT_KS: [usize; 4] = [1, 3, 5, 7];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunConfig {
    pub k_neighbors: usize,
    pub filtering_enabled: bool,
    /// Registered filter used when filtering is enabled.
    pub filter: String,
    pub pooling_mode: PoolingMode,
    pub n_episodes: usize,
    pub seed: u64,
    /// Worker threads; 0 lets the pool decide. Results do not depend on it.
    #[serde(skip)]
    pub workers: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            k_neighbors: DEFAULT_K,
            filtering_enabled: true,
            filter: "watf".into(),
            pooling_mode: PoolingMode::PerStage,
            n_episodes: DEFAULT_EPISODES,
            seed: 0,
            workers: 0,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k_neighbors < 1 {
            return Err(Error::Config("k_neighbors must be at least 1".into()));
        }
        if self.n_episodes < 1 {
            return Err(Error::Config("n_episodes must be at least 1".into()));
        }
        Ok(())
    }
}

/// Everything produced for one episode.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeOutcome {
    pub correct: usize,
    pub total: usize,
    pub accuracy: f64,
    pub loss: f64,
    pub scores: Vec<ClassScore>,
    pub selection: Selection,
    pub m_descriptors: usize,
    pub content_hash: String,
}

pub struct Harness {
    config: RunConfig,
    registry: FilterRegistry,
}

impl Harness {
    pub fn new(config: RunConfig) -> Result<Self> {
        Self::with_registry(config, FilterRegistry::with_defaults())
    }

    pub fn with_registry(config: RunConfig, registry: FilterRegistry) -> Result<Self> {
        config.validate()?;
        registry.get(&config.filter)?;
        Ok(Harness { config, registry })
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    fn filter(&self, config: &RunConfig) -> Result<&dyn DescriptorFilter> {
        if config.filtering_enabled {
            self.registry.get(&config.filter)
        } else {
            Ok(&KeepAll)
        }
    }

    pub fn run_episode(&self, episode: &Episode) -> Result<EpisodeOutcome> {
        self.run_episode_with(&self.config, episode)
    }

    fn run_episode_with(&self, config: &RunConfig, episode: &Episode) -> Result<EpisodeOutcome> {
        let selection = self.filter(config)?.select(episode, config.pooling_mode)?;
        classify_selection(episode, selection, config.k_neighbors)
    }

    /// Run the first `n_episodes` episodes of `source` and aggregate.
    pub fn evaluate(&self, source: &dyn EpisodeSource) -> Result<EvaluationReport> {
        self.evaluate_with(&self.config, source)
    }

    fn evaluate_with(&self, config: &RunConfig, source: &dyn EpisodeSource) -> Result<EvaluationReport> {
        config.validate()?;
        let n = config.n_episodes;
        if source.len() < n {
            return Err(Error::Config(format!(
                "episode stream has {} episodes, {n} requested",
                source.len()
            )));
        }
        let started = Instant::now();
        let run = || -> Vec<Result<EpisodeOutcome>> {
            (0..n)
                .into_par_iter()
                .map(|i| {
                    source
                        .episode(i)
                        .and_then(|ep| self.run_episode_with(config, &ep))
                        .map_err(|e| Error::Episode { index: i, source: Box::new(e) })
                })
                .collect()
        };
        let results = if config.workers > 0 {
            rayon::ThreadPoolBuilder::new()
                .num_threads(config.workers)
                .build()
                .map_err(|e| Error::Config(e.to_string()))?
                .install(run)
        } else {
            run()
        };
        // collect() keeps index order, so the first error is the lowest failing episode
        let outcomes = results.into_iter().collect::<Result<Vec<_>>>()?;
        let mut report = EvaluationReport::aggregate(config.clone(), &outcomes);
        report.wall_time_secs = started.elapsed().as_secs_f64();
        Ok(report)
    }

    /// One evaluation per `k` over the same episodes.
    pub fn k_sweep(&self, source: &dyn EpisodeSource, ks: &[usize]) -> Result<Vec<KSweepRow>> {
        if ks.is_empty() {
            return Err(Error::Config("k sweep needs at least one k".into()));
        }
        let mut seen = BTreeSet::new();
        if let Some(dup) = ks.iter().find(|&&k| !seen.insert(k)) {
            return Err(Error::Config(format!("duplicate k = {dup} in sweep")));
        }
        ks.iter()
            .map(|&k| {
                let config = RunConfig { k_neighbors: k, ..self.config.clone() };
                Ok(KSweepRow { k, report: self.evaluate_with(&config, source)? })
            })
            .collect()
    }
}

/// Classify every query of `episode` against the class pools left by `selection`.
pub fn classify_selection(episode: &Episode, selection: Selection, k: usize) -> Result<EpisodeOutcome> {
    if selection.support.len() != episode.support().len() || selection.query.len() != episode.query().len() {
        return Err(Error::invalid("selection does not match the episode's samples"));
    }
    let n_way = episode.n_way();
    let c = episode.c_dim();
    let mut pool_rows: Vec<Vec<f64>> = vec![Vec::new(); n_way];
    for (j, (set, retained)) in episode.support().iter().zip(&selection.support).enumerate() {
        let rows = set.select(retained);
        pool_rows[episode.support_label(j)].extend(rows.iter().copied());
    }
    let pools: Vec<UnitPool> = pool_rows
        .into_iter()
        .map(|flat| {
            let n = flat.len() / c;
            let rows = ndarray::Array2::from_shape_vec((n, c), flat).expect("whole rows");
            UnitPool::new(rows.view())
        })
        .collect();

    let scores = episode
        .query()
        .iter()
        .zip(&selection.query)
        .map(|(set, retained)| classify(&UnitPool::new(set.select(retained).view()), &pools, k))
        .collect::<Result<Vec<_>>>()?;

    let labels = episode.query_labels();
    let correct = scores.iter().zip(labels).filter(|(s, &y)| s.predicted == y).count();
    let total = labels.len();
    let loss = episode_loss(&scores, labels)?;
    Ok(EpisodeOutcome {
        correct,
        total,
        accuracy: correct as f64 / total as f64,
        loss,
        scores,
        selection,
        m_descriptors: episode.m_descriptors(),
        content_hash: episode.content_hash(),
    })
}

pub fn run_episode(episode: &Episode, config: &RunConfig) -> Result<EpisodeOutcome> {
    Harness::new(config.clone())?.run_episode(episode)
}

pub fn evaluate(source: &dyn EpisodeSource, config: &RunConfig) -> Result<EvaluationReport> {
    Harness::new(config.clone())?.evaluate(source)
}

pub fn k_sweep(source: &dyn EpisodeSource, config: &RunConfig, ks: &[usize]) -> Result<Vec<KSweepRow>> {
    Harness::new(config.clone())?.k_sweep(source, ks)
}

pub(crate) fn stream_digest<'a>(hashes: impl IntoIterator<Item = &'a str>) -> String {
    let mut h = Sha256::new();
    for hash in hashes {
        h.update(hash.as_bytes());
        h.update(b"\n");
    }
    hex::encode(h.finalize())
}
