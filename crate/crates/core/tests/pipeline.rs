use fairpl::*;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const FILE: &str = "\
# name: toy
# max_label: 4
# groups: men, women
# minority: 2
4 qid:1 gid:1 1:0.5 2:1.0 # a
0 qid:1 gid:2 1:-0.25 2:0.0 # b
2 qid:1 gid:2 1:1.5 2:2.0 # c
3 qid:2 gid:1 1:0.0 2:0.5
1 qid:2 gid:2 1:0.75 2:-1.0
";

#[test]
fn file_round_trip_through_disk() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("toy.txt");
    std::fs::write(&path, FILE).unwrap();
    let d = parse_ranking_file(&path).unwrap();
    assert_eq!(d.name, "toy");
    assert_eq!(d.max_label, 4);
    assert_eq!(d.queries.len(), 2);
    assert_eq!(d.minority_group, 1);
    assert_eq!(d.queries[0].items[2].item_id, "c");
    assert_eq!(d.queries[0].items[2].relevance_true, 0.5);

    let again = dir.path().join("again.txt");
    std::fs::write(&again, serialize_dataset(&d)).unwrap();
    assert_eq!(parse_ranking_file(&again).unwrap(), d);
}

#[test]
fn synthetic_data_survives_serialization() {
    let d = synth_generate(&SynthSpec::new(5, 9, vec![0.6, 0.4], 4, 3)).unwrap();
    let back = parse_ranking_str(&serialize_dataset(&d), &ParseOptions::default()).unwrap();
    assert_eq!(back, d);
}

#[test]
fn training_is_bit_reproducible_and_checkpoints_round_trip() {
    let data = synth_generate(&SynthSpec::new(30, 12, vec![0.7, 0.3], 4, 6)).unwrap();
    let cs = data.derive_constraints(5, 0.1).unwrap();
    let mut cfg = TrainConfig::new(TrainMode::GroupFair, 6);
    cfg.epochs = 3;
    cfg.learning_rate = 0.05;
    cfg.batch_size = 64;
    cfg.log_samples = 10;
    let set = QuerySet::new(&data, &cs).unwrap();
    let a = train(set, &cfg, None).unwrap();
    let b = train(set, &cfg, None).unwrap();
    assert_eq!(a.params.flatten(), b.params.flatten());
    assert_eq!(a.log, b.log);
    assert_eq!(a.log.len(), 4);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.json");
    Checkpoint::new(a.params.clone(), TrainMode::GroupFair).save(&path).unwrap();
    let loaded = Checkpoint::load(&path).unwrap();
    loaded.check_dataset(&data).unwrap();
    assert_eq!(loaded.params.flatten(), a.params.flatten());
    assert_eq!(loaded.mode, TrainMode::GroupFair);
}

#[test]
fn trained_fair_model_evaluates_without_violations() {
    let data = synth_generate(&SynthSpec::new(20, 15, vec![0.7, 0.3], 4, 8)).unwrap();
    let cs = data.derive_constraints(6, 0.05).unwrap();
    let mut cfg = TrainConfig::new(TrainMode::GroupFair, 8);
    cfg.epochs = 2;
    cfg.log_every = 0;
    let out = train(QuerySet::new(&data, &cs).unwrap(), &cfg, None).unwrap();
    let s = evaluate(&out.params, &data, &cs, PolicyKind::GroupFair, 200, 1).unwrap();
    assert_eq!(s.violation_rate, 0.0);
    assert_eq!(s.n_samples, 20 * 200);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn bias_never_reaches_true_relevance(
        beta in 0.0f64..=1.0,
        seed in 0u64..500,
        perm_seed in 0u64..500,
    ) {
        let d = synth_generate(&SynthSpec::new(4, 8, vec![0.7, 0.3], 3, seed)).unwrap();
        let biased = inject_bias(&d, &BiasSpec::on_group(2, 1, beta).unwrap()).unwrap();
        let theta = PositionDiscounts::ndcg(5);
        let mut rng = ChaCha8Rng::seed_from_u64(perm_seed);
        for (q, qb) in d.queries.iter().zip(&biased.queries) {
            let pool: Vec<usize> = (0..q.len()).collect();
            let sigma = pl_sample(&pool, 5, &ScoreVector::zeros(q.len()), &mut rng).unwrap();
            let a = ndcg_of_ranking(&sigma, &q.relevance(RelevanceSource::True), &theta).unwrap();
            let b = ndcg_of_ranking(&sigma, &qb.relevance(RelevanceSource::True), &theta).unwrap();
            prop_assert_eq!(a, b);
        }
    }

    #[test]
    fn ndcg_stays_in_unit_interval(
        rel in proptest::collection::vec(0.0f64..1.0, 3..10),
        seed in 0u64..1000,
    ) {
        let n = rel.len();
        let k = n.min(5);
        let theta = PositionDiscounts::ndcg(k);
        let pool: Vec<usize> = (0..n).collect();
        let sigma = pl_sample(&pool, k, &ScoreVector::zeros(n), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let v = ndcg_of_ranking(&sigma, &rel, &theta).unwrap();
        prop_assert!((0.0..=1.0 + 1e-12).contains(&v));
    }

    #[test]
    fn per_rank_fractions_sum_to_one(
        scores in proptest::collection::vec(-2.0f64..2.0, 8),
        seed in 0u64..1000,
    ) {
        let groups = vec![0, 1, 2, 0, 1, 2, 0, 0];
        let c = FairnessConstraints::from_delta(&[0.5, 0.25, 0.25], 0.1, 4).unwrap();
        let policy = FairPolicy::new(ScoreVector::new(scores).unwrap(), groups, &c).unwrap();
        let mut total = vec![0.0; 4];
        for g in 0..3 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let f = per_rank_group_fraction(&policy, g, 100, &mut rng).unwrap();
            total.iter_mut().zip(f).for_each(|(t, x)| *t += x);
        }
        prop_assert!(total.iter().all(|t| (t - 1.0).abs() < 1e-12));
    }
}
