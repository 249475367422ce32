//! Weighted adaptive threshold filtering of local descriptors for metric-based
//! few-shot classification.
//!
//! The pipeline, per episode:
//!
//! 1. [`watf`]: weight every descriptor by a softmax over its cosine
//!    similarity to each class prototype, average the weights over classes,
//!    and drop descriptors at or below `mean - std` of the pooled weights.
//!    Support is filtered first, prototypes are rebuilt from what survives,
//!    and queries are filtered against the rebuilt prototypes.
//! 2. [`classifier`]: score each query against each class by summing, over
//!    its retained descriptors, the top-k cosine similarities to the class's
//!    retained support descriptors, then softmax the scores.
//! 3. [`harness`]: run episode streams, aggregate accuracy with 95%
//!    confidence intervals and compute diagnostics.
//!
//! Descriptor selection is pluggable through [`filter::FilterRegistry`].
//! Episodes come from [`synth`] or from pack files ([`pack`]).

pub mod classifier;
pub mod cli;
pub mod error;
pub mod filter;
pub mod harness;
pub mod pack;
pub mod rng;
pub mod source;
pub mod synth;
pub mod types;
pub mod watf;

pub use error::{Error, Result};
pub use source::EpisodeSource;
pub use types::{cosine, validate_episode, DescriptorSet, Episode, Prototype, RawEpisode};
