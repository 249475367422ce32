//! Descriptor and episode data model shared by every stage of the pipeline.
//!
//! A [`DescriptorSet`] holds one image's local descriptors as a row-major
//! `M x C` matrix: each row is one C-dimensional descriptor taken from one
//! cell of a flattened `H x W` feature map. All arithmetic is `f64`.

use std::fmt;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Cosine similarity clamped to `[-1, 1]`.
///
/// Returns 0 when either vector has zero norm.
pub fn cosine(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::invalid(format!(
            "cosine of vectors with different dimensions ({} vs {})",
            u.len(),
            v.len()
        )));
    }
    Ok(cosine_view(ArrayView1::from(u), ArrayView1::from(v)))
}

pub(crate) fn cosine_view(u: ArrayView1<f64>, v: ArrayView1<f64>) -> f64 {
    let nu = u.dot(&u).sqrt();
    let nv = v.dot(&v).sqrt();
    if nu == 0.0 || nv == 0.0 {
        return 0.0;
    }
    (u.dot(&v) / (nu * nv)).clamp(-1.0, 1.0)
}

/// Rows of `rows` scaled to unit length; zero rows stay zero so that their
/// dot product with anything is the zero-vector cosine convention.
pub fn unit_rows(rows: ArrayView2<f64>) -> Array2<f64> {
    let mut out = rows.to_owned();
    for mut row in out.axis_iter_mut(Axis(0)) {
        let norm = row.dot(&row).sqrt();
        if norm > 0.0 {
            row.mapv_inplace(|x| x / norm);
        }
    }
    out
}

/// One image's local descriptors.
#[derive(Debug, Clone, PartialEq)]
pub struct DescriptorSet {
    descriptors: Array2<f64>,
    sample_id: String,
    label: Option<usize>,
}

impl DescriptorSet {
    /// Wraps an `M x C` descriptor matrix. Finiteness and shape are checked
    /// when the set becomes part of an [`Episode`].
    pub fn new(descriptors: Array2<f64>, sample_id: impl Into<String>, label: Option<usize>) -> Self {
        Self { descriptors, sample_id: sample_id.into(), label }
    }

    pub fn from_rows(rows: &[Vec<f64>], sample_id: impl Into<String>, label: Option<usize>) -> Result<Self> {
        let m = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != c) {
            return Err(Error::invalid("descriptor rows have unequal lengths"));
        }
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        let descriptors = Array2::from_shape_vec((m, c), flat)
            .map_err(|e| Error::invalid(e.to_string()))?;
        Ok(Self::new(descriptors, sample_id, label))
    }

    pub fn descriptors(&self) -> ArrayView2<'_, f64> {
        self.descriptors.view()
    }

    pub fn descriptor(&self, index: usize) -> ArrayView1<'_, f64> {
        self.descriptors.row(index)
    }

    pub fn sample_id(&self) -> &str {
        &self.sample_id
    }

    pub fn label(&self) -> Option<usize> {
        self.label
    }

    /// Number of descriptors, `M`.
    pub fn len(&self) -> usize {
        self.descriptors.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.descriptors.nrows() == 0
    }

    /// Descriptor dimension, `C`.
    pub fn dim(&self) -> usize {
        self.descriptors.ncols()
    }

    /// The descriptors at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Array2<f64> {
        self.descriptors.select(Axis(0), indices)
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            descriptors: &self.descriptors * factor,
            sample_id: self.sample_id.clone(),
            label: self.label,
        }
    }

    fn first_non_finite(&self) -> Option<(usize, usize)> {
        self.descriptors
            .indexed_iter()
            .find(|(_, v)| !v.is_finite())
            .map(|(idx, _)| idx)
    }
}

/// A class prototype: the mean descriptor of one support class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prototype {
    pub class_index: usize,
    pub vector: Vec<f64>,
}

impl Prototype {
    pub fn view(&self) -> ArrayView1<'_, f64> {
        ArrayView1::from(&self.vector[..])
    }
}

/// Stack prototypes as rows of an `N x C` matrix, ordered by class index.
pub(crate) fn prototype_matrix(prototypes: &[Prototype]) -> Array2<f64> {
    let c = prototypes.first().map_or(0, |p| p.vector.len());
    let mut out = Array2::zeros((prototypes.len(), c));
    for (mut row, p) in out.axis_iter_mut(Axis(0)).zip(prototypes) {
        row.assign(&Array1::from(p.vector.clone()));
    }
    out
}

/// A single broken invariant found by [`validate_episode`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    TooFewWays { n_way: usize },
    NoShots,
    NoQueries,
    EmptyDescriptors { sample_id: String },
    ShapeMismatch { sample_id: String, expected: (usize, usize), found: (usize, usize) },
    NonFiniteEntry { sample_id: String, row: usize, col: usize },
    MissingSupportLabel { sample_id: String },
    LabelOutOfRange { sample_id: String, label: usize, n_way: usize },
    ClassCoverage { class: usize, expected: usize, found: usize },
    QueryLabelCount { expected: usize, found: usize },
    QueryCount { expected: usize, found: usize },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::TooFewWays { n_way } => write!(f, "n_way must be at least 2, got {n_way}"),
            Violation::NoShots => write!(f, "k_shot must be at least 1"),
            Violation::NoQueries => write!(f, "n_query must be at least 1"),
            Violation::EmptyDescriptors { sample_id } => {
                write!(f, "empty descriptors: sample {sample_id} has M = 0 or C = 0")
            }
            Violation::ShapeMismatch { sample_id, expected, found } => write!(
                f,
                "shape mismatch: sample {sample_id} is {}x{}, episode is {}x{}",
                found.0, found.1, expected.0, expected.1
            ),
            Violation::NonFiniteEntry { sample_id, row, col } => {
                write!(f, "non-finite entry in sample {sample_id} at ({row}, {col})")
            }
            Violation::MissingSupportLabel { sample_id } => {
                write!(f, "support sample {sample_id} has no label")
            }
            Violation::LabelOutOfRange { sample_id, label, n_way } => {
                write!(f, "label {label} of sample {sample_id} is outside 0..{n_way}")
            }
            Violation::ClassCoverage { class, expected, found } => write!(
                f,
                "class coverage: class {class} has {found} support samples, expected {expected}"
            ),
            Violation::QueryLabelCount { expected, found } => {
                write!(f, "query label count {found} does not match {expected} queries")
            }
            Violation::QueryCount { expected, found } => {
                write!(f, "query count {found}, expected n_way * n_query = {expected}")
            }
        }
    }
}

/// Every invariant an episode candidate violates.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_empty(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn contains(&self, needle: &str) -> bool {
        self.violations.iter().any(|v| v.to_string().contains(needle))
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "episode failed validation ({} violations)", self.violations.len())?;
        for v in &self.violations {
            write!(f, "\n  - {v}")?;
        }
        Ok(())
    }
}

impl std::error::Error for ValidationReport {}

/// An unchecked episode. Turn it into an [`Episode`] with [`validate_episode`].
#[derive(Debug, Clone)]
pub struct RawEpisode {
    pub n_way: usize,
    pub k_shot: usize,
    pub n_query: usize,
    /// Labelled support sets, `n_way * k_shot` of them.
    pub support: Vec<DescriptorSet>,
    /// Query sets; their own `label` field is ignored.
    pub query: Vec<DescriptorSet>,
    /// Ground truth for `query`, index-aligned.
    pub query_labels: Vec<usize>,
}

/// A validated N-way K-shot episode.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    n_way: usize,
    k_shot: usize,
    n_query: usize,
    support: Vec<DescriptorSet>,
    query: Vec<DescriptorSet>,
    query_labels: Vec<usize>,
}

/// Check every episode invariant, returning the episode or the full list of
/// violations.
pub fn validate_episode(candidate: RawEpisode) -> std::result::Result<Episode, ValidationReport> {
    let mut violations = Vec::new();
    let RawEpisode { n_way, k_shot, n_query, support, mut query, query_labels } = candidate;

    if n_way < 2 {
        violations.push(Violation::TooFewWays { n_way });
    }
    if k_shot < 1 {
        violations.push(Violation::NoShots);
    }
    if n_query < 1 {
        violations.push(Violation::NoQueries);
    }

    let expected_shape = support.first().or(query.first()).map(|s| (s.len(), s.dim()));
    for set in support.iter().chain(query.iter()) {
        let shape = (set.len(), set.dim());
        if shape.0 == 0 || shape.1 == 0 {
            violations.push(Violation::EmptyDescriptors { sample_id: set.sample_id.clone() });
            continue;
        }
        if let Some(expected) = expected_shape {
            if shape != expected {
                violations.push(Violation::ShapeMismatch {
                    sample_id: set.sample_id.clone(),
                    expected,
                    found: shape,
                });
            }
        }
        if let Some((row, col)) = set.first_non_finite() {
            violations.push(Violation::NonFiniteEntry { sample_id: set.sample_id.clone(), row, col });
        }
    }

    let mut per_class = vec![0usize; n_way];
    for set in &support {
        match set.label {
            None => violations.push(Violation::MissingSupportLabel { sample_id: set.sample_id.clone() }),
            Some(label) if label >= n_way => violations.push(Violation::LabelOutOfRange {
                sample_id: set.sample_id.clone(),
                label,
                n_way,
            }),
            Some(label) => per_class[label] += 1,
        }
    }
    for (class, &found) in per_class.iter().enumerate() {
        if found != k_shot {
            violations.push(Violation::ClassCoverage { class, expected: k_shot, found });
        }
    }

    if query.len() != n_way * n_query {
        violations.push(Violation::QueryCount { expected: n_way * n_query, found: query.len() });
    }
    if query_labels.len() != query.len() {
        violations.push(Violation::QueryLabelCount { expected: query.len(), found: query_labels.len() });
    }
    for (set, &label) in query.iter().zip(&query_labels) {
        if label >= n_way {
            violations.push(Violation::LabelOutOfRange { sample_id: set.sample_id.clone(), label, n_way });
        }
    }

    if !violations.is_empty() {
        return Err(ValidationReport { violations });
    }
    // Query labels are held apart from the descriptors the pipeline sees.
    for set in &mut query {
        set.label = None;
    }
    Ok(Episode { n_way, k_shot, n_query, support, query, query_labels })
}

impl Episode {
    pub fn n_way(&self) -> usize {
        self.n_way
    }

    pub fn k_shot(&self) -> usize {
        self.k_shot
    }

    pub fn n_query(&self) -> usize {
        self.n_query
    }

    pub fn support(&self) -> &[DescriptorSet] {
        &self.support
    }

    pub fn query(&self) -> &[DescriptorSet] {
        &self.query
    }

    pub fn query_labels(&self) -> &[usize] {
        &self.query_labels
    }

    /// Descriptors per image, `M`.
    pub fn m_descriptors(&self) -> usize {
        self.support[0].len()
    }

    /// Descriptor dimension, `C`.
    pub fn c_dim(&self) -> usize {
        self.support[0].dim()
    }

    /// Label of support sample `index`. Always present after validation.
    pub fn support_label(&self, index: usize) -> usize {
        self.support[index].label.expect("validated support sample has a label")
    }

    /// The episode with every descriptor multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> Episode {
        Episode {
            support: self.support.iter().map(|s| s.scaled(factor)).collect(),
            query: self.query.iter().map(|s| s.scaled(factor)).collect(),
            ..self.clone()
        }
    }

    /// SHA-256 over shape, sample ids, labels and the little-endian `f64`
    /// payload. Identical for any two episodes with identical content.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for n in [self.n_way, self.k_shot, self.n_query, self.m_descriptors(), self.c_dim()] {
            h.update((n as u64).to_le_bytes());
        }
        let labelled = self
            .support
            .iter()
            .map(|s| (s, s.label.unwrap_or(usize::MAX)))
            .chain(self.query.iter().zip(self.query_labels.iter().copied()));
        for (set, label) in labelled {
            h.update((set.sample_id.len() as u64).to_le_bytes());
            h.update(set.sample_id.as_bytes());
            h.update((label as u64).to_le_bytes());
            for v in set.descriptors.iter() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}
