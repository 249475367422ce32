mod common;

use common::*;
use ndarray::Array2;
use watf::classifier::class_score;
use watf::rng::PortableRng;
use watf::watf::{watf_pipeline, PoolingMode};

const TOL: f64 = 1e-9;

fn to_array(rows: &Rows) -> Array2<f64> {
    let c = rows[0].len();
    Array2::from_shape_vec((rows.len(), c), rows.concat()).unwrap()
}

fn close_rows(a: &Rows, b: &Array2<f64>) -> bool {
    a.len() == b.nrows() && a.iter().zip(b.rows()).all(|(x, y)| x.iter().zip(y).all(|(p, q)| (p - q).abs() <= TOL))
}

#[test]
fn filtering_matches_oracle_on_500_instances() {
    let mut shapes = PortableRng::new(31);
    for seed in 0..500u64 {
        let (n, k, q, m, c) = random_shape(&mut shapes, 4, 3, 3, 6, 5);
        let ep = random_episode(seed, n, k, q, m, c);
        let got = watf_pipeline(&ep.episode, PoolingMode::PerStage).unwrap();
        let want = naive_filter(&ep.support, &ep.support_labels, &ep.query, n);

        assert!(close_rows(&want.support_w_bar, &got.support_weights.w_bar), "seed {seed}: support w_bar");
        assert!(close_rows(&want.query_w_bar, &got.query_weights.w_bar), "seed {seed}: query w_bar");
        assert!((want.support_tau - got.support.tau).abs() <= TOL, "seed {seed}");
        assert!((want.query_tau - got.query.tau).abs() <= TOL, "seed {seed}");
        assert_eq!(want.support_keep, got.support.retained, "seed {seed}");
        assert_eq!(want.query_keep, got.query.retained, "seed {seed}");
    }
}

#[test]
fn top_k_scoring_matches_oracle_on_500_instances() {
    let mut rng = PortableRng::new(77);
    for case in 0..500 {
        let c = 2 + rng.below(6);
        let (nq, np) = (1 + rng.below(6), 1 + rng.below(20));
        let query = random_rows(&mut rng, nq, c);
        let pool = random_rows(&mut rng, np, c);
        let k = 1 + rng.below(8);
        let got = class_score(to_array(&query).view(), to_array(&pool).view(), k).unwrap();
        let want = naive_class_score(&query, &pool, k);
        assert!((got - want).abs() <= TOL, "case {case}: {got} vs {want}");
    }
}

#[test]
fn oracle_handles_fallback_path() {
    // identical descriptors force sigma = 0 and the retain-all fallback
    let mut ep = random_episode(5, 3, 1, 2, 4, 3);
    let row = vec![0.3, -1.0, 2.0];
    for s in ep.support.iter_mut().chain(ep.query.iter_mut()) {
        for d in s.iter_mut() {
            d.clone_from(&row);
        }
    }
    let episode = episode_from_rows(3, 1, 2, &ep.support, &ep.support_labels, &ep.query);
    let got = watf_pipeline(&episode, PoolingMode::PerStage).unwrap();
    let want = naive_filter(&ep.support, &ep.support_labels, &ep.query, 3);
    assert!(want.support_keep.iter().all(|k| k.len() == 4));
    assert_eq!(want.support_keep, got.support.retained);
    assert_eq!(want.query_keep, got.query.retained);
    assert_eq!(got.support.fallback_samples.len(), 3);
    assert_eq!(got.query.fallback_samples.len(), 6);
}
