mod common;

use std::collections::{BTreeMap, BTreeSet};

use proptest::prelude::*;
use vsalign::datasets::SplitKind;
use vsalign::episodes::{episode_stream, sample_episode, EpisodeSpec};
use vsalign::seed::{rng_for, Stream};
use vsalign::ClassId;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn episodes_are_well_formed(
        n_way in 1usize..6,
        k_shot in 1usize..4,
        q in 1usize..5,
        extra in 0usize..3,
        seed in any::<u64>(),
    ) {
        let ds = common::labeled_grid(6, 0, 0, k_shot + q + extra);
        let classes = ds.classes(SplitKind::Base);
        let ep = sample_episode(classes, &ds, EpisodeSpec::new(n_way, k_shot, q), &mut rng_for(seed, Stream::Episode, 0)).unwrap();

        prop_assert_eq!(ep.class_ids.len(), n_way);
        let distinct: BTreeSet<ClassId> = ep.class_ids.iter().copied().collect();
        prop_assert_eq!(distinct.len(), n_way);
        prop_assert!(distinct.is_subset(classes));

        prop_assert_eq!(ep.support.len(), n_way);
        prop_assert!(ep.support.iter().all(|s| s.len() == k_shot));
        prop_assert_eq!(ep.query.len(), n_way * q);

        let support: BTreeSet<usize> = ep.support_indices().into_iter().collect();
        let query: BTreeSet<usize> = ep.query_indices().into_iter().collect();
        prop_assert_eq!(support.len(), n_way * k_shot);
        prop_assert_eq!(query.len(), n_way * q);
        prop_assert!(support.is_disjoint(&query));

        // local label i <-> class_ids[i], for support and query alike
        for (label, members) in ep.support.iter().enumerate() {
            for &i in members {
                prop_assert_eq!(ds.examples()[i].class_id, ep.class_ids[label]);
            }
        }
        let mut per_label = vec![0usize; n_way];
        for &(i, label) in &ep.query {
            prop_assert!(label < n_way);
            prop_assert_eq!(ds.examples()[i].class_id, ep.class_ids[label]);
            per_label[label] += 1;
        }
        prop_assert!(per_label.iter().all(|&c| c == q));
    }
}

#[test]
fn class_selection_is_uniform() {
    let ds = common::labeled_grid(10, 0, 0, 4);
    let classes = ds.classes(SplitKind::Base);
    let spec = EpisodeSpec::new(3, 1, 1);
    let draws = 6000;
    let mut counts: BTreeMap<ClassId, usize> = BTreeMap::new();
    for ep in episode_stream(classes, &ds, spec, draws, 17).unwrap() {
        for c in ep.unwrap().class_ids {
            *counts.entry(c).or_default() += 1;
        }
    }
    // each class is included with p = 3/10 per episode
    let p = 0.3;
    let expected = draws as f64 * p;
    let se = (draws as f64 * p * (1.0 - p)).sqrt();
    assert_eq!(counts.len(), 10);
    for (c, n) in counts {
        let z = (n as f64 - expected).abs() / se;
        assert!(z < 3.0, "class {c}: {n} draws, expected {expected:.0} (z = {z:.2})");
    }
}

#[test]
fn example_selection_is_uniform_within_class() {
    let ds = common::labeled_grid(1, 0, 0, 8);
    let classes = ds.classes(SplitKind::Base);
    let draws = 4000;
    let mut support_counts = [0usize; 8];
    for ep in episode_stream(classes, &ds, EpisodeSpec::new(1, 1, 2), draws, 5).unwrap() {
        support_counts[ep.unwrap().support[0][0]] += 1;
    }
    let p = 1.0 / 8.0;
    let se = (draws as f64 * p * (1.0 - p)).sqrt();
    for (i, &n) in support_counts.iter().enumerate() {
        let z = (n as f64 - draws as f64 * p).abs() / se;
        assert!(z < 3.0, "example {i}: {n} support draws (z = {z:.2})");
    }
}

/// Probability that `draws` uniform picks among `m` outcomes hit every one,
/// by inclusion-exclusion.
fn coverage_probability(m: u32, draws: i32) -> f64 {
    let mut binom = 1.0;
    let mut total = 0.0;
    for j in 0..=m {
        if j > 0 {
            binom = binom * f64::from(m - j + 1) / f64::from(j);
        }
        let sign = if j % 2 == 0 { 1.0 } else { -1.0 };
        total += sign * binom * (1.0 - f64::from(j) / f64::from(m)).powi(draws);
    }
    total
}

#[test]
fn six_classes_five_way_covers_every_subset() {
    // 6 classes choose 5 = 6 equally likely subsets
    let oracle = coverage_probability(6, 600);
    assert!(oracle > 1.0 - 1e-9, "coverage probability {oracle}");
    assert!((coverage_probability(2, 1) - 0.0).abs() < 1e-15);
    assert!((coverage_probability(2, 2) - 0.5).abs() < 1e-15);

    let ds = common::labeled_grid(6, 0, 0, 2);
    let classes = ds.classes(SplitKind::Base);
    let seen: BTreeSet<BTreeSet<ClassId>> = episode_stream(classes, &ds, EpisodeSpec::new(5, 1, 1), 600, 2024)
        .unwrap()
        .map(|ep| ep.unwrap().class_ids.into_iter().collect())
        .collect();
    assert_eq!(seen.len(), 6);
}

#[test]
fn stream_episode_matches_isolated_derivation() {
    let ds = common::labeled_grid(7, 0, 0, 5);
    let classes = ds.classes(SplitKind::Base);
    let spec = EpisodeSpec::new(4, 2, 2);
    let stream: Vec<_> = episode_stream(classes, &ds, spec, 100, 9)
        .unwrap()
        .map(Result::unwrap)
        .collect();
    let again: Vec<_> = episode_stream(classes, &ds, spec, 100, 9)
        .unwrap()
        .map(Result::unwrap)
        .collect();
    assert_eq!(stream, again);
    for i in [0usize, 37, 99] {
        let direct = sample_episode(classes, &ds, spec, &mut rng_for(9, Stream::Episode, i as u64)).unwrap();
        assert_eq!(stream[i], direct);
    }
}
