use std::collections::HashSet;

use gpam::data::{generate_synthetic, nota_count, sample_episode, Split, SyntheticSpec};
use gpam::training::job_rng;
use gpam::{GpamError, InstancePool};
use proptest::prelude::*;

fn pool() -> InstancePool {
    let spec = SyntheticSpec {
        relations: 9,
        dim: 3,
        instances_per_relation: 8,
        validation_relations: 0,
        seed: 11,
        ..SyntheticSpec::default()
    };
    generate_synthetic(&spec)
        .unwrap()
        .dataset
        .pool(Split::Train)
}

#[test]
fn invariants_hold_over_many_seeds() {
    let pool = pool();
    for seed in 0..1000 {
        let ways = 1 + (seed % 5) as usize;
        let shots = 1 + (seed % 3) as usize;
        let rate = [0.0, 0.15, 0.3, 0.5][(seed % 4) as usize];
        let ep = sample_episode(&pool, ways, shots, 4, rate, &mut job_rng(seed, 0)).unwrap();
        ep.validate().unwrap();

        assert_eq!(ep.ways(), ways);
        assert!(ep.support.iter().all(|s| s.len() == shots));
        assert_eq!(ep.query_known.len(), 4);
        assert_eq!(ep.query_unknown.len(), nota_count(rate, 4));

        let known: HashSet<&str> = ep.known_relations.iter().map(String::as_str).collect();
        assert_eq!(known.len(), ways);
        assert!(ep
            .query_known
            .iter()
            .all(|q| known.contains(q.label.as_str())));
        assert!(ep
            .query_unknown
            .iter()
            .all(|q| !known.contains(q.label.as_str())));

        let ids: Vec<&str> = ep.all_instances().map(|i| i.id.as_str()).collect();
        let unique: HashSet<&str> = ids.iter().copied().collect();
        assert_eq!(ids.len(), unique.len(), "seed {seed} repeats an instance");
    }
}

#[test]
fn every_relation_eventually_appears() {
    let pool = pool();
    let mut seen = HashSet::new();
    for seed in 0..200 {
        let ep = sample_episode(&pool, 3, 1, 2, 0.5, &mut job_rng(seed, 1)).unwrap();
        seen.extend(ep.known_relations);
    }
    assert_eq!(seen.len(), pool.relation_count());
}

#[test]
fn too_few_relations_is_a_sampling_error() {
    let pool = pool();
    let err = sample_episode(&pool, 10, 1, 1, 0.0, &mut job_rng(0, 0)).unwrap_err();
    assert!(matches!(err, GpamError::Sampling(_)));
    // Nine relations: 5 known leave 4 * 8 = 32 outside, fewer than the 40 NOTA queries needed.
    let err = sample_episode(&pool, 5, 1, 10, 0.8, &mut job_rng(0, 0)).unwrap_err();
    assert!(matches!(err, GpamError::Sampling(_)));
}

#[test]
fn invalid_shape_is_a_config_error() {
    let pool = pool();
    assert!(matches!(
        sample_episode(&pool, 0, 1, 1, 0.0, &mut job_rng(0, 0)),
        Err(GpamError::Config(_))
    ));
    assert!(matches!(
        sample_episode(&pool, 2, 1, 1, 1.0, &mut job_rng(0, 0)),
        Err(GpamError::Config(_))
    ));
}

proptest! {
    #[test]
    fn nota_count_realises_the_rate(rate in 0.0f64..0.95, q in 1usize..60) {
        let u = nota_count(rate, q) as f64;
        let exact = rate / (1.0 - rate) * q as f64;
        prop_assert!((u - exact).abs() <= 0.5 + 1e-9);
    }

    #[test]
    fn same_seed_same_episode(seed in any::<u64>(), index in 0u64..1000) {
        let pool = pool();
        let a = sample_episode(&pool, 3, 2, 3, 0.3, &mut job_rng(seed, index)).unwrap();
        let b = sample_episode(&pool, 3, 2, 3, 0.3, &mut job_rng(seed, index)).unwrap();
        prop_assert_eq!(a, b);
    }
}
