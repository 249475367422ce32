//! Seeded synthetic episodes with planted foreground and background
//! descriptors.
//!
//! Every class owns one unit direction; a small set of background motifs is
//! shared by all classes of an episode. An image's foreground descriptors are
//! its class direction plus isotropic Gaussian noise, its background
//! descriptors a randomly chosen motif plus the same noise, in shuffled order.
//! Which descriptor is which lives in [`GroundTruth`], kept apart from the
//! [`Episode`] the pipeline consumes.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{child_seed, PortableRng};
use crate::source::EpisodeSource;
use crate::types::{validate_episode, DescriptorSet, Episode, RawEpisode};
use crate::watf::WeightMatrix;

/// Minimum cosine distance between any two planted directions.
pub const MIN_DIRECTION_SEPARATION: f64 = 0.2;
/// Rejection-sampling budget for drawing the planted directions.
pub const MAX_DIRECTION_ATTEMPTS: usize = 10_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub n_way: usize,
    pub k_shot: usize,
    pub n_query: usize,
    pub m_descriptors: usize,
    pub c_dim: usize,
    /// Fraction of each image's descriptors drawn from background motifs.
    pub noise_fraction: f64,
    /// Standard deviation of the per-coordinate perturbation.
    pub foreground_spread: f64,
    pub n_background_motifs: usize,
    pub seed: u64,
    /// Scale every descriptor to unit length after perturbation.
    #[serde(default)]
    pub normalize: bool,
}

impl Default for SynthSpec {
    /// 5-way 1-shot, 15 queries, a 21x21x64 feature map.
    fn default() -> Self {
        SynthSpec {
            n_way: 5,
            k_shot: 1,
            n_query: 15,
            m_descriptors: 441,
            c_dim: 64,
            noise_fraction: 0.4,
            foreground_spread: 0.1,
            n_background_motifs: 3,
            seed: 0,
            normalize: false,
        }
    }
}

impl SynthSpec {
    /// Background descriptors per image, `floor(noise_fraction * M)`.
    pub fn background_count(&self) -> usize {
        (self.noise_fraction * self.m_descriptors as f64).floor() as usize
    }

    pub fn foreground_count(&self) -> usize {
        self.m_descriptors - self.background_count()
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.n_way < 2 {
            return fail(format!("n_way must be at least 2, got {}", self.n_way));
        }
        if self.k_shot < 1 || self.n_query < 1 {
            return fail("k_shot and n_query must be at least 1".into());
        }
        if self.m_descriptors < 1 || self.c_dim < 1 {
            return fail("m_descriptors and c_dim must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.noise_fraction) {
            return fail(format!("noise fraction must lie in [0, 1), got {}", self.noise_fraction));
        }
        if !(self.foreground_spread.is_finite() && self.foreground_spread >= 0.0) {
            return fail(format!("foreground spread must be finite and >= 0, got {}", self.foreground_spread));
        }
        if self.n_background_motifs < 1 {
            return fail("at least one background motif is required".into());
        }
        if self.background_count() >= self.m_descriptors {
            return fail("every image needs at least one foreground descriptor".into());
        }
        Ok(())
    }
}

/// Foreground (`true`) / background (`false`) flag per descriptor, aligned
/// with the episode's support and query samples.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub support: Vec<Vec<bool>>,
    pub query: Vec<Vec<bool>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticEpisode {
    pub episode: Episode,
    pub truth: GroundTruth,
}

fn unit_direction(rng: &mut PortableRng, dim: usize) -> Option<Vec<f64>> {
    let v: Vec<f64> = (0..dim).map(|_| rng.standard_normal()).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    (norm > 0.0).then(|| v.into_iter().map(|x| x / norm).collect())
}

fn draw_directions(rng: &mut PortableRng, count: usize, dim: usize) -> Result<Vec<Vec<f64>>> {
    let mut accepted: Vec<Vec<f64>> = Vec::with_capacity(count);
    let mut attempts = 0;
    while accepted.len() < count {
        attempts += 1;
        if attempts > MAX_DIRECTION_ATTEMPTS {
            return Err(Error::Generation(format!(
                "could not place {count} directions with cosine distance >= {MIN_DIRECTION_SEPARATION} \
                 in {dim} dimensions within {MAX_DIRECTION_ATTEMPTS} attempts"
            )));
        }
        let Some(candidate) = unit_direction(rng, dim) else { continue };
        let separated = accepted.iter().all(|d| {
            let cos: f64 = d.iter().zip(&candidate).map(|(a, b)| a * b).sum();
            1.0 - cos >= MIN_DIRECTION_SEPARATION
        });
        if separated {
            accepted.push(candidate);
        }
    }
    Ok(accepted)
}

fn draw_image(
    rng: &mut PortableRng,
    spec: &SynthSpec,
    class_direction: &[f64],
    motifs: &[Vec<f64>],
) -> (Array2<f64>, Vec<bool>) {
    let (m, c) = (spec.m_descriptors, spec.c_dim);
    let n_fg = spec.foreground_count();
    let mut rows = Vec::with_capacity(m);
    let mut mask = Vec::with_capacity(m);
    for slot in 0..m {
        let foreground = slot < n_fg;
        let base = if foreground { class_direction } else { &motifs[rng.below(motifs.len())] };
        let mut row: Vec<f64> = base.iter().map(|b| b + spec.foreground_spread * rng.standard_normal()).collect();
        if spec.normalize {
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 0.0 {
                row.iter_mut().for_each(|x| *x /= norm);
            }
        }
        rows.push(row);
        mask.push(foreground);
    }
    let order = rng.permutation(m);
    let mut data = Array2::zeros((m, c));
    let mut shuffled_mask = vec![false; m];
    for (dst, &src) in order.iter().enumerate() {
        for (k, v) in rows[src].iter().enumerate() {
            data[[dst, k]] = *v;
        }
        shuffled_mask[dst] = mask[src];
    }
    (data, shuffled_mask)
}

/// One episode drawn from `spec.seed`.
pub fn generate_episode(spec: &SynthSpec) -> Result<SyntheticEpisode> {
    spec.validate()?;
    let mut rng = PortableRng::new(spec.seed);
    let mut directions = draw_directions(&mut rng, spec.n_way + spec.n_background_motifs, spec.c_dim)?;
    let motifs = directions.split_off(spec.n_way);

    let mut support = Vec::with_capacity(spec.n_way * spec.k_shot);
    let mut support_mask = Vec::with_capacity(support.capacity());
    for (class, dir) in directions.iter().enumerate() {
        for shot in 0..spec.k_shot {
            let (data, mask) = draw_image(&mut rng, spec, dir, &motifs);
            support.push(DescriptorSet::new(data, format!("s{class}-{shot}"), Some(class)));
            support_mask.push(mask);
        }
    }

    let mut query = Vec::with_capacity(spec.n_way * spec.n_query);
    let mut query_mask = Vec::with_capacity(query.capacity());
    let mut query_labels = Vec::with_capacity(query.capacity());
    for (class, dir) in directions.iter().enumerate() {
        for q in 0..spec.n_query {
            let (data, mask) = draw_image(&mut rng, spec, dir, &motifs);
            query.push(DescriptorSet::new(data, format!("q{class}-{q}"), None));
            query_mask.push(mask);
            query_labels.push(class);
        }
    }

    let episode = validate_episode(RawEpisode {
        n_way: spec.n_way,
        k_shot: spec.k_shot,
        n_query: spec.n_query,
        support,
        query,
        query_labels,
    })?;
    Ok(SyntheticEpisode { episode, truth: GroundTruth { support: support_mask, query: query_mask } })
}

/// A deterministic stream of `n_episodes` synthetic episodes; episode `i` is
/// generated from `child_seed(spec.seed, i)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticBenchmark {
    spec: SynthSpec,
    n_episodes: usize,
}

pub fn generate_benchmark(spec: &SynthSpec, n_episodes: usize) -> Result<SyntheticBenchmark> {
    spec.validate()?;
    Ok(SyntheticBenchmark { spec: spec.clone(), n_episodes })
}

impl SyntheticBenchmark {
    pub fn spec(&self) -> &SynthSpec {
        &self.spec
    }

    pub fn synthetic(&self, index: usize) -> Result<SyntheticEpisode> {
        let spec = SynthSpec { seed: child_seed(self.spec.seed, index as u64), ..self.spec.clone() };
        generate_episode(&spec)
    }

    pub fn iter(&self) -> impl Iterator<Item = Result<SyntheticEpisode>> + '_ {
        (0..self.n_episodes).map(|i| self.synthetic(i))
    }
}

impl EpisodeSource for SyntheticBenchmark {
    fn len(&self) -> usize {
        self.n_episodes
    }

    fn episode(&self, index: usize) -> Result<Episode> {
        Ok(self.synthetic(index)?.episode)
    }
}

/// Mean class-averaged weight of foreground and of background descriptors.
/// `None` for a group with no members.
pub fn weight_by_ground_truth(weights: &WeightMatrix, mask: &[Vec<bool>]) -> (Option<f64>, Option<f64>) {
    let (mut fg, mut bg) = ((0.0, 0usize), (0.0, 0usize));
    for (row, flags) in weights.w_bar.rows().into_iter().zip(mask) {
        for (&w, &is_fg) in row.iter().zip(flags) {
            let acc = if is_fg { &mut fg } else { &mut bg };
            acc.0 += w;
            acc.1 += 1;
        }
    }
    let mean = |(sum, n): (f64, usize)| (n > 0).then(|| sum / n as f64);
    (mean(fg), mean(bg))
}
