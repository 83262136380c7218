use gpam::data::{generate_synthetic, load_embeddings, write_embeddings, Split, SyntheticSpec};
use gpam::{
    evaluate, run_ablation, sweep_nota, EvalConfig, GpamError, InstancePool, ModelParams,
    TrainConfig, Variant,
};

fn pools() -> (InstancePool, InstancePool) {
    let spec = SyntheticSpec {
        relations: 12,
        dim: 4,
        instances_per_relation: 12,
        validation_relations: 6,
        seed: 8,
        ..SyntheticSpec::default()
    };
    let ds = generate_synthetic(&spec).unwrap().dataset;
    (ds.pool(Split::Train), ds.pool(Split::Validation))
}

fn config() -> TrainConfig {
    TrainConfig {
        ways: 3,
        shots: 2,
        q_known: 3,
        episodes: 10,
        lr: 1e-3,
        ..TrainConfig::default()
    }
}

#[test]
fn embeddings_survive_a_file_round_trip() {
    let spec = SyntheticSpec {
        relations: 5,
        dim: 3,
        instances_per_relation: 4,
        validation_relations: 2,
        ..SyntheticSpec::default()
    };
    let ds = generate_synthetic(&spec).unwrap().dataset;
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("emb.tsv");
    write_embeddings(&path, &ds).unwrap();
    let back = load_embeddings(&path).unwrap();
    assert_eq!(back.instances, ds.instances);
    assert_eq!(back.manifest.relations_in(Split::Validation).len(), 2);
}

#[test]
fn checkpoint_file_round_trip_is_exact() {
    let params = config().init_params(4).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck.json");
    params.save(&path).unwrap();
    assert_eq!(ModelParams::load(&path).unwrap(), params);
}

#[test]
fn sweep_orders_rates_and_rejects_duplicates() {
    let (_, eval_pool) = pools();
    let params = config().init_params(4).unwrap();
    let base = EvalConfig::matching(&config(), 5, 1);
    let sweep = sweep_nota(&eval_pool, &params, &[0.5, 0.0, 0.3], &base).unwrap();
    let rates: Vec<f64> = sweep.points.iter().map(|(r, _)| *r).collect();
    assert_eq!(rates, [0.0, 0.3, 0.5]);
    assert_eq!(sweep.points[0].1.nota, None);
    assert!(sweep.points[2].1.nota.is_some());
    assert!(matches!(
        sweep_nota(&eval_pool, &params, &[0.3, 0.3], &base),
        Err(GpamError::Config(_))
    ));
}

#[test]
fn report_counts_add_up() {
    let (_, eval_pool) = pools();
    let params = config().init_params(4).unwrap();
    let r = evaluate(&eval_pool, &params, &EvalConfig::matching(&config(), 7, 2)).unwrap();
    let c = &r.counts;
    assert_eq!(c.known_count, 7 * 3);
    assert_eq!(c.nota_count, 7 * 3);
    let confusion_total: u64 = c.confusion.iter().flatten().sum();
    assert_eq!(confusion_total, c.known_count + c.nota_count);
    let expected_total =
        (c.known_correct + c.nota_correct) as f64 / (c.known_count + c.nota_count) as f64;
    assert_eq!(r.total, expected_total);
}

#[test]
fn ablation_table_lists_full_first_with_deltas() {
    let (train_pool, eval_pool) = pools();
    let base = config();
    let eval = EvalConfig::matching(&base, 4, 0);
    let variants = [
        Variant::NoMargin,
        Variant::FixedMargin(0.5),
        Variant::EqualWeights,
    ];
    let table = run_ablation(&train_pool, &eval_pool, &base, &eval, &variants, &[0, 1]).unwrap();
    let names: Vec<&str> = table.rows.iter().map(|r| r.variant.as_str()).collect();
    assert_eq!(
        names,
        ["full", "no-margin", "fixed-margin=0.5", "equal-weights"]
    );
    let full = table.row("full").unwrap();
    for row in &table.rows {
        assert_eq!(row.delta_total, full.total.mean - row.total.mean);
    }
    let rendered = table.render();
    assert_eq!(rendered.lines().count(), 5);
    assert!(rendered.contains('↓') || rendered.contains('↑'));
}

#[test]
fn ablation_needs_at_least_one_seed() {
    let (train_pool, eval_pool) = pools();
    let base = config();
    let eval = EvalConfig::matching(&base, 4, 0);
    assert!(run_ablation(&train_pool, &eval_pool, &base, &eval, &[], &[]).is_err());
}
