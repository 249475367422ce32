//! Descriptor selection strategies, looked up by name at run time.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::types::Episode;
use crate::watf::{watf_pipeline, FilteredEpisode, PoolingMode};

/// Which descriptors of every support and query sample reach the classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    pub support: Vec<Vec<usize>>,
    pub query: Vec<Vec<usize>>,
    /// Weights, thresholds and prototypes, for strategies that compute them.
    pub detail: Option<FilteredEpisode>,
}

impl Selection {
    /// Every descriptor of every sample.
    pub fn all(episode: &Episode) -> Self {
        let all = |n: usize| vec![(0..episode.m_descriptors()).collect::<Vec<_>>(); n];
        Selection { support: all(episode.support().len()), query: all(episode.query().len()), detail: None }
    }
}

pub trait DescriptorFilter: Send + Sync {
    fn name(&self) -> &'static str;

    fn description(&self) -> &'static str;

    fn select(&self, episode: &Episode, pooling: PoolingMode) -> Result<Selection>;
}

/// Two-stage weighted adaptive threshold filtering.
#[derive(Debug, Default, Clone, Copy)]
pub struct Watf;

impl DescriptorFilter for Watf {
    fn name(&self) -> &'static str {
        "watf"
    }

    fn description(&self) -> &'static str {
        "softmax-cosine weights thresholded at mean minus one standard deviation"
    }

    fn select(&self, episode: &Episode, pooling: PoolingMode) -> Result<Selection> {
        let filtered = watf_pipeline(episode, pooling)?;
        Ok(Selection {
            support: filtered.support.retained.clone(),
            query: filtered.query.retained.clone(),
            detail: Some(filtered),
        })
    }
}

/// Keeps every descriptor; the unfiltered baseline.
#[derive(Debug, Default, Clone, Copy)]
pub struct KeepAll;

impl DescriptorFilter for KeepAll {
    fn name(&self) -> &'static str {
        "none"
    }

    fn description(&self) -> &'static str {
        "no filtering, every descriptor is kept"
    }

    fn select(&self, episode: &Episode, _pooling: PoolingMode) -> Result<Selection> {
        Ok(Selection::all(episode))
    }
}

pub struct FilterRegistry {
    filters: BTreeMap<&'static str, Box<dyn DescriptorFilter>>,
}

impl FilterRegistry {
    pub fn empty() -> Self {
        FilterRegistry { filters: BTreeMap::new() }
    }

    /// Registry holding `watf` and `none`.
    pub fn with_defaults() -> Self {
        let mut registry = Self::empty();
        registry.register(Box::new(Watf));
        registry.register(Box::new(KeepAll));
        registry
    }

    /// Adds `filter`, replacing any filter already registered under its name.
    pub fn register(&mut self, filter: Box<dyn DescriptorFilter>) {
        self.filters.insert(filter.name(), filter);
    }

    pub fn get(&self, name: &str) -> Result<&dyn DescriptorFilter> {
        self.filters.get(name).map(Box::as_ref).ok_or_else(|| {
            Error::Config(format!("unknown filter `{name}` (available: {})", self.names().join(", ")))
        })
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.filters.keys().copied().collect()
    }
}

impl Default for FilterRegistry {
    fn default() -> Self {
        Self::with_defaults()
    }
}
