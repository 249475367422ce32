//! Naive reference implementations and random episode builders shared by the
//! integration tests. Nothing here calls into the library's numerics.

#![allow(dead_code)]

use watf::rng::PortableRng;
use watf::{validate_episode, DescriptorSet, Episode, RawEpisode};

pub type Rows = Vec<Vec<f64>>;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        s += a[i] * b[i];
    }
    s
}

pub fn naive_cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = dot(a, a).sqrt();
    let nb = dot(b, b).sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot(a, b) / (na * nb)).clamp(-1.0, 1.0)
}

/// Class means of the listed descriptors; `keep[j]` = None means all of sample j.
pub fn naive_prototypes(support: &[Rows], labels: &[usize], n_way: usize, keep: Option<&[Vec<usize>]>) -> Rows {
    let c = support[0][0].len();
    let mut out = vec![vec![0.0; c]; n_way];
    let mut counts = vec![0.0; n_way];
    for (j, sample) in support.iter().enumerate() {
        for (i, d) in sample.iter().enumerate() {
            if let Some(k) = keep {
                if !k[j].contains(&i) {
                    continue;
                }
            }
            for t in 0..c {
                out[labels[j]][t] += d[t];
            }
            counts[labels[j]] += 1.0;
        }
    }
    for (p, n) in out.iter_mut().zip(counts) {
        for x in p.iter_mut() {
            *x /= n;
        }
    }
    out
}

/// w[j][n][i] by the textbook softmax, no shifting.
pub fn naive_weights(samples: &[Rows], protos: &Rows) -> Vec<Rows> {
    samples
        .iter()
        .map(|sample| {
            protos
                .iter()
                .map(|p| {
                    let e: Vec<f64> = sample.iter().map(|d| naive_cosine(d, p).exp()).collect();
                    let z: f64 = e.iter().sum();
                    e.iter().map(|x| x / z).collect()
                })
                .collect()
        })
        .collect()
}

pub fn naive_average(w: &[Rows]) -> Rows {
    w.iter()
        .map(|per_class| {
            let m = per_class[0].len();
            (0..m).map(|i| per_class.iter().map(|row| row[i]).sum::<f64>() / per_class.len() as f64).collect()
        })
        .collect()
}

pub fn naive_mean_std(pool: &[f64]) -> (f64, f64) {
    let n = pool.len() as f64;
    let mu = pool.iter().sum::<f64>() / n;
    let var = pool.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / n;
    (mu, var.sqrt())
}

pub fn naive_threshold(w_bar: &Rows, tau: f64) -> Vec<Vec<usize>> {
    w_bar
        .iter()
        .map(|row| {
            let kept: Vec<usize> = (0..row.len()).filter(|&i| row[i] > tau).collect();
            if kept.is_empty() {
                (0..row.len()).collect()
            } else {
                kept
            }
        })
        .collect()
}

pub struct NaiveFilter {
    pub support_w_bar: Rows,
    pub query_w_bar: Rows,
    pub support_tau: f64,
    pub query_tau: f64,
    pub support_keep: Vec<Vec<usize>>,
    pub query_keep: Vec<Vec<usize>>,
}

/// Both filtering stages with per-stage pooling.
pub fn naive_filter(support: &[Rows], labels: &[usize], query: &[Rows], n_way: usize) -> NaiveFilter {
    let protos = naive_prototypes(support, labels, n_way, None);
    let support_w_bar = naive_average(&naive_weights(support, &protos));
    let (mu, sd) = naive_mean_std(&support_w_bar.concat());
    let support_tau = mu - sd;
    let support_keep = naive_threshold(&support_w_bar, support_tau);

    let updated = naive_prototypes(support, labels, n_way, Some(&support_keep));
    let query_w_bar = naive_average(&naive_weights(query, &updated));
    let (mu, sd) = naive_mean_std(&query_w_bar.concat());
    let query_tau = mu - sd;
    let query_keep = naive_threshold(&query_w_bar, query_tau);
    NaiveFilter { support_w_bar, query_w_bar, support_tau, query_tau, support_keep, query_keep }
}

/// Sum over query descriptors of the k largest cosines to the pool, by full sort.
pub fn naive_class_score(query: &Rows, pool: &Rows, k: usize) -> f64 {
    let mut total = 0.0;
    for q in query {
        let mut sims: Vec<f64> = pool.iter().map(|p| naive_cosine(q, p)).collect();
        sims.sort_by(|a, b| b.partial_cmp(a).unwrap());
        total += sims.iter().take(k).sum::<f64>();
    }
    total
}

pub fn random_rows(rng: &mut PortableRng, m: usize, c: usize) -> Rows {
    (0..m).map(|_| (0..c).map(|_| rng.standard_normal()).collect()).collect()
}

/// Gaussian descriptors for an episode of the given shape, with rows kept
/// alongside so oracles can read them.
pub struct RandomEpisode {
    pub episode: Episode,
    pub support: Vec<Rows>,
    pub support_labels: Vec<usize>,
    pub query: Vec<Rows>,
}

pub fn random_episode(seed: u64, n_way: usize, k_shot: usize, n_query: usize, m: usize, c: usize) -> RandomEpisode {
    let mut rng = PortableRng::new(seed);
    let mut support = Vec::new();
    let mut support_labels = Vec::new();
    for class in 0..n_way {
        for _ in 0..k_shot {
            support.push(random_rows(&mut rng, m, c));
            support_labels.push(class);
        }
    }
    let mut query = Vec::new();
    for _ in 0..n_way {
        for _ in 0..n_query {
            query.push(random_rows(&mut rng, m, c));
        }
    }
    let episode = episode_from_rows(n_way, k_shot, n_query, &support, &support_labels, &query);
    RandomEpisode { episode, support, support_labels, query }
}

/// Validated episode from plain rows; queries are listed class-major.
pub fn episode_from_rows(
    n_way: usize,
    k_shot: usize,
    n_query: usize,
    support: &[Rows],
    support_labels: &[usize],
    query: &[Rows],
) -> Episode {
    let query_labels: Vec<usize> = (0..n_way).flat_map(|c| std::iter::repeat(c).take(n_query)).collect();
    let raw = RawEpisode {
        n_way,
        k_shot,
        n_query,
        support: support
            .iter()
            .enumerate()
            .map(|(j, r)| DescriptorSet::from_rows(r, format!("s{j}"), Some(support_labels[j])).unwrap())
            .collect(),
        query: query
            .iter()
            .enumerate()
            .map(|(j, r)| DescriptorSet::from_rows(r, format!("q{j}"), None).unwrap())
            .collect(),
        query_labels,
    };
    validate_episode(raw).expect("well-formed episode")
}

/// Random shape within the given bounds, each dimension at least 1
/// (C at least 2, N at least 2).
pub fn random_shape(rng: &mut PortableRng, max_n: usize, max_k: usize, max_q: usize, max_m: usize, max_c: usize) -> (usize, usize, usize, usize, usize) {
    (
        2 + rng.below(max_n - 1),
        1 + rng.below(max_k),
        1 + rng.below(max_q),
        1 + rng.below(max_m),
        2 + rng.below(max_c - 1),
    )
}

pub fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_watf")
}
