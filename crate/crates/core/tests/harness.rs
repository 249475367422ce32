mod common;

use common::*;
use proptest::prelude::*;
use watf::filter::{DescriptorFilter, FilterRegistry, KeepAll, Selection, Watf};
use watf::harness::{ci95_half_width, classify_selection, evaluate, k_sweep, run_episode, Harness, RunConfig};
use watf::synth::{generate_benchmark, SynthSpec};
use watf::watf::{watf_pipeline, PoolingMode};
use watf::Error;

fn small_spec(seed: u64) -> SynthSpec {
    SynthSpec { n_query: 4, m_descriptors: 12, c_dim: 8, seed, ..SynthSpec::default() }
}

fn config(n_episodes: usize) -> RunConfig {
    RunConfig { n_episodes, ..RunConfig::default() }
}

#[test]
fn queries_copied_from_support_are_all_correct() {
    let ep = random_episode(3, 5, 1, 1, 9, 6);
    // query j of class j is the support sample of class j
    let episode = episode_from_rows(5, 1, 1, &ep.support, &ep.support_labels, &ep.support);
    for filtering_enabled in [true, false] {
        let out = run_episode(&episode, &RunConfig { filtering_enabled, ..RunConfig::default() }).unwrap();
        assert_eq!(out.accuracy, 1.0);
        assert_eq!(out.correct, 5);
    }
}

#[test]
fn ci_of_two_episodes() {
    assert!((ci95_half_width(&[1.0, 0.5]) - 0.49).abs() < 0.005);
}

#[test]
fn report_aggregates_per_episode_accuracy() {
    let bench = generate_benchmark(&small_spec(1), 12).unwrap();
    let report = evaluate(&bench, &config(12)).unwrap();
    assert_eq!(report.per_episode_accuracy.len(), 12);
    let mean = report.per_episode_accuracy.iter().sum::<f64>() / 12.0;
    assert!((report.mean_accuracy - mean).abs() < 1e-15);
    assert!((report.ci95_half_width - ci95_half_width(&report.per_episode_accuracy)).abs() < 1e-15);
    assert!(report.retention.support > 0.0 && report.retention.support <= 1.0);
}

#[test]
fn evaluation_is_deterministic_across_worker_counts() {
    let bench = generate_benchmark(&small_spec(9), 16).unwrap();
    let reports: Vec<String> = [1usize, 2, 4, 1]
        .into_iter()
        .map(|workers| {
            let r = evaluate(&bench, &RunConfig { workers, ..config(16) }).unwrap();
            serde_json::to_string(&r).unwrap()
        })
        .collect();
    assert!(reports.windows(2).all(|w| w[0] == w[1]));
}

#[test]
fn disabling_filtering_keeps_every_descriptor() {
    let bench = generate_benchmark(&small_spec(4), 6).unwrap();
    let report = evaluate(&bench, &RunConfig { filtering_enabled: false, ..config(6) }).unwrap();
    assert_eq!(report.retention.support, 1.0);
    assert_eq!(report.retention.query, 1.0);
    assert_eq!(report.fallback_rate, 0.0);
}

#[test]
fn none_filter_matches_keep_all_selection() {
    let bench = generate_benchmark(&small_spec(2), 5).unwrap();
    let by_name = Harness::new(RunConfig { filter: "none".into(), ..config(5) }).unwrap();
    let disabled = Harness::new(RunConfig { filtering_enabled: false, ..config(5) }).unwrap();
    for i in 0..5 {
        let ep = watf::EpisodeSource::episode(&bench, i).unwrap();
        let a = by_name.run_episode(&ep).unwrap();
        let b = disabled.run_episode(&ep).unwrap();
        let c = classify_selection(&ep, Selection::all(&ep), 3).unwrap();
        assert_eq!(a.scores, b.scores);
        assert_eq!(a.scores, c.scores);
    }
}

#[test]
fn watf_filter_uses_the_pipeline_selection() {
    let bench = generate_benchmark(&small_spec(8), 3).unwrap();
    for i in 0..3 {
        let ep = watf::EpisodeSource::episode(&bench, i).unwrap();
        for pooling in [PoolingMode::PerStage, PoolingMode::Global] {
            let sel = Watf.select(&ep, pooling).unwrap();
            let detail = watf_pipeline(&ep, pooling).unwrap();
            assert_eq!(sel.support, detail.support.retained);
            assert_eq!(sel.query, detail.query.retained);
        }
    }
}

#[test]
fn unknown_filter_is_a_config_error() {
    let err = Harness::new(RunConfig { filter: "median".into(), ..RunConfig::default() }).err().unwrap();
    assert!(matches!(err, Error::Config(_)));
    assert_eq!(err.exit_code(), 4);
}

#[test]
fn custom_filters_can_be_registered() {
    struct FirstOnly;
    impl DescriptorFilter for FirstOnly {
        fn name(&self) -> &'static str {
            "first"
        }
        fn description(&self) -> &'static str {
            "keeps descriptor 0 of every sample"
        }
        fn select(&self, episode: &watf::Episode, _: PoolingMode) -> watf::Result<Selection> {
            Ok(Selection {
                support: vec![vec![0]; episode.support().len()],
                query: vec![vec![0]; episode.query().len()],
                detail: None,
            })
        }
    }
    let mut registry = FilterRegistry::with_defaults();
    registry.register(Box::new(FirstOnly));
    assert_eq!(registry.names(), vec!["first", "none", "watf"]);
    let bench = generate_benchmark(&small_spec(3), 2).unwrap();
    let h = Harness::with_registry(RunConfig { filter: "first".into(), ..config(2) }, registry).unwrap();
    let r = h.evaluate(&bench).unwrap();
    assert!((r.retention.support - 1.0 / 12.0).abs() < 1e-15);
    assert_eq!(KeepAll.name(), "none");
}

#[test]
fn k_sweep_rows_follow_requested_ks() {
    let bench = generate_benchmark(&small_spec(5), 8).unwrap();
    let rows = k_sweep(&bench, &config(8), &[1, 3, 5, 7]).unwrap();
    assert_eq!(rows.iter().map(|r| r.k).collect::<Vec<_>>(), vec![1, 3, 5, 7]);
    let digest = &rows[0].report.stream_digest;
    assert!(rows.iter().all(|r| &r.report.stream_digest == digest));
    for row in &rows {
        let single = evaluate(&bench, &RunConfig { k_neighbors: row.k, ..config(8) }).unwrap();
        assert_eq!(single.per_episode_accuracy, row.report.per_episode_accuracy);
    }
    assert_eq!(k_sweep(&bench, &config(8), &[1]).unwrap().len(), 1);
}

#[test]
fn k_sweep_rejects_bad_lists() {
    let bench = generate_benchmark(&small_spec(5), 2).unwrap();
    assert!(matches!(k_sweep(&bench, &config(2), &[]), Err(Error::Config(_))));
    assert!(matches!(k_sweep(&bench, &config(2), &[3, 1, 3]), Err(Error::Config(_))));
    assert!(matches!(k_sweep(&bench, &config(2), &[0]), Err(Error::Config(_))));
}

#[test]
fn short_stream_is_rejected() {
    let bench = generate_benchmark(&small_spec(5), 2).unwrap();
    assert!(matches!(evaluate(&bench, &config(3)), Err(Error::Config(_))));
}

#[test]
fn all_identical_episode_falls_back_and_ties_to_class_zero() {
    let row = vec![1.0, 2.0, -0.5, 0.25];
    let sample: Rows = vec![row; 7];
    let support = vec![sample.clone(); 5];
    let query = vec![sample; 10];
    let episode = episode_from_rows(5, 1, 2, &support, &[0, 1, 2, 3, 4], &query);
    let out = run_episode(&episode, &RunConfig::default()).unwrap();
    let detail = out.selection.detail.as_ref().unwrap();
    assert_eq!(detail.support.sigma, 0.0);
    assert_eq!(detail.support.fallback_samples.len(), 5);
    assert_eq!(detail.query.fallback_samples.len(), 10);
    for s in &out.scores {
        assert_eq!(s.predicted, 0);
        assert!(s.probabilities.iter().all(|&p| (p - 0.2).abs() < 1e-12));
    }
    assert!(out.loss.is_finite());
}

#[test]
fn scale_invariance_on_100_episodes() {
    let bench = generate_benchmark(&SynthSpec { m_descriptors: 16, c_dim: 8, n_query: 3, seed: 21, ..SynthSpec::default() }, 100).unwrap();
    let harness = Harness::new(config(100)).unwrap();
    for i in 0..100 {
        let ep = watf::EpisodeSource::episode(&bench, i).unwrap();
        let a = harness.run_episode(&ep).unwrap();
        let b = harness.run_episode(&ep.scaled(3.7)).unwrap();
        assert_eq!(a.selection.support, b.selection.support, "episode {i}");
        assert_eq!(a.selection.query, b.selection.query, "episode {i}");
        for (x, y) in a.scores.iter().zip(&b.scores) {
            assert_eq!(x.predicted, y.predicted);
            assert!(x.probabilities.iter().zip(&y.probabilities).all(|(p, q)| (p - q).abs() <= 1e-6));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn retained_sets_are_sorted_nonempty_and_in_range(seed in any::<u64>(), m in 1usize..10, c in 2usize..6) {
        let ep = random_episode(seed, 3, 2, 2, m, c);
        let f = watf_pipeline(&ep.episode, PoolingMode::PerStage).unwrap();
        for r in f.support.retained.iter().chain(&f.query.retained) {
            prop_assert!(!r.is_empty());
            prop_assert!(r.windows(2).all(|w| w[0] < w[1]));
            prop_assert!(r.iter().all(|&i| i < m));
        }
    }

    #[test]
    fn support_stage_ignores_pooling_mode(seed in any::<u64>()) {
        let ep = random_episode(seed, 4, 1, 2, 6, 4);
        let a = watf_pipeline(&ep.episode, PoolingMode::PerStage).unwrap();
        let b = watf_pipeline(&ep.episode, PoolingMode::Global).unwrap();
        prop_assert_eq!(a.support.retained, b.support.retained);
        prop_assert_eq!(a.updated_prototypes, b.updated_prototypes);
    }

    #[test]
    fn probabilities_form_a_distribution(seed in any::<u64>(), k in 1usize..6) {
        let ep = random_episode(seed, 3, 1, 2, 5, 4);
        let out = run_episode(&ep.episode, &RunConfig { k_neighbors: k, ..RunConfig::default() }).unwrap();
        for s in &out.scores {
            prop_assert!((s.probabilities.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            let best = s.scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            prop_assert_eq!(s.scores[s.predicted], best);
        }
    }
}
