use fairpl::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn mean_gradient(policy: &FairPolicy, rel: &[f64], theta: &PositionDiscounts, runs: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut acc = vec![0.0; policy.n_items()];
    for _ in 0..runs {
        let g = algorithm1_gradient(policy, rel, theta, 1, &mut rng).unwrap();
        acc.iter_mut().zip(g.as_slice()).for_each(|(a, x)| *a += x);
    }
    acc.iter().map(|a| a / runs as f64).collect()
}

#[test]
fn twin_items_get_equal_expected_gradients() {
    // Items 1 and 2 share score, group and relevance.
    let c = FairnessConstraints::new(3, vec![1, 1], vec![2, 2]).unwrap();
    let groups = vec![0, 0, 0, 1, 1];
    let s = ScoreVector::new(vec![0.8, 0.1, 0.1, -0.5, 0.4]).unwrap();
    let rel = [0.9, 0.4, 0.4, 0.7, 0.2];
    let theta = PositionDiscounts::ndcg(3);
    let policy = FairPolicy::new(s, groups, &c).unwrap();
    let exact = policy.exact_relevance_gradient(&rel, &theta).unwrap();
    assert!((exact[1] - exact[2]).abs() < 1e-12);
    let est = mean_gradient(&policy, &rel, &theta, 40_000, 3);
    assert!((est[1] - est[2]).abs() < 0.05 * exact[1].abs().max(1e-3), "{} vs {}", est[1], est[2]);
}

#[test]
fn estimator_mean_matches_enumeration() {
    let c = FairnessConstraints::new(3, vec![1, 1], vec![2, 2]).unwrap();
    let groups = vec![0, 1, 0, 1, 0, 1];
    let s = ScoreVector::new(vec![0.2, -0.3, 1.1, 0.5, -0.9, 0.0]).unwrap();
    let rel = [0.1, 0.8, 0.6, 0.3, 0.9, 0.5];
    let theta = PositionDiscounts::ndcg(3);
    let policy = FairPolicy::new(s, groups, &c).unwrap();
    let exact = policy.exact_relevance_gradient(&rel, &theta).unwrap();
    let est = mean_gradient(&policy, &rel, &theta, 50_000, 5);
    let scale = exact.iter().fold(0.0f64, |m, g| m.max(g.abs()));
    for (e, x) in est.iter().zip(&exact) {
        assert!((e - x).abs() < 0.03 * scale, "{e} vs {x}");
    }
}

#[test]
fn plrank3_mean_matches_enumerated_pl_gradient() {
    // With one group and vacuous bounds the fair policy is plain PL, so its
    // enumeration oracle gives the exact PL gradient.
    let s = ScoreVector::new(vec![0.4, -0.2, 0.9, -1.0, 0.3]).unwrap();
    let rel = [0.2, 0.9, 0.5, 0.7, 0.0];
    let theta = PositionDiscounts::ndcg(3);
    let policy = FairPolicy::new(s.clone(), vec![0; 5], &FairnessConstraints::vacuous(3, 1)).unwrap();
    let exact = policy.exact_relevance_gradient(&rel, &theta).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let est = plrank3_gradient(&s, &rel, &theta, 3, 50_000, &mut rng).unwrap();
    let scale = exact.iter().fold(0.0f64, |m, g| m.max(g.abs()));
    for (e, x) in est.as_slice().iter().zip(&exact) {
        assert!((e - x).abs() < 0.03 * scale, "{e} vs {x}");
    }
}

#[test]
fn reinforce_and_algorithm1_agree_in_expectation() {
    let c = FairnessConstraints::new(2, vec![1, 0], vec![2, 1]).unwrap();
    let groups = vec![0, 0, 1, 1];
    let s = ScoreVector::new(vec![0.3, -0.6, 0.8, 0.0]).unwrap();
    let rel = [1.0, 0.2, 0.6, 0.4];
    let theta = PositionDiscounts::ndcg(2);
    let policy = FairPolicy::new(s, groups, &c).unwrap();
    let exact = policy.exact_relevance_gradient(&rel, &theta).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let rf = reinforce_gradient(&policy, &rel, &theta, 200_000, &mut rng).unwrap();
    let scale = exact.iter().fold(0.0f64, |m, g| m.max(g.abs()));
    for (e, x) in rf.as_slice().iter().zip(&exact) {
        assert!((e - x).abs() < 0.05 * scale, "{e} vs {x}");
    }
}

#[test]
fn small_ascent_step_increases_exact_relevance() {
    let c = FairnessConstraints::new(3, vec![1, 1], vec![2, 2]).unwrap();
    let groups = vec![0, 0, 0, 1, 1, 1];
    let rel = [0.9, 0.1, 0.5, 0.3, 0.8, 0.0];
    let theta = PositionDiscounts::ndcg(3);
    let s0 = vec![0.0, 0.5, -0.5, 0.2, -0.1, 0.4];
    let policy = FairPolicy::new(ScoreVector::new(s0.clone()).unwrap(), groups, &c).unwrap();
    let before = policy.exact_relevance(&rel, &theta).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let g = algorithm1_gradient(&policy, &rel, &theta, 200, &mut rng).unwrap();
    for eps in [1e-3, 1e-2] {
        let stepped: Vec<f64> = s0.iter().zip(g.as_slice()).map(|(s, d)| s + eps * d).collect();
        let after = policy
            .with_scores(ScoreVector::new(stepped).unwrap())
            .unwrap()
            .exact_relevance(&rel, &theta)
            .unwrap();
        assert!(after > before, "eps {eps}: {after} <= {before}");
    }
}

#[test]
fn full_network_gradient_matches_finite_differences_of_exact_objective() {
    // Chain the exact score gradient through the scorer and compare with
    // central differences of the enumerated objective in parameter space.
    let data = synth_generate(&SynthSpec::new(1, 6, vec![0.5, 0.5], 3, 17)).unwrap();
    let q = &data.queries[0];
    let c = FairnessConstraints::new(3, vec![1, 1], vec![2, 2]).unwrap();
    let theta = PositionDiscounts::ndcg(3);
    let rel = q.relevance(RelevanceSource::True);
    let params = MlpParams::init(3, &mut ChaCha8Rng::seed_from_u64(5));
    let objective = |p: &MlpParams| {
        FairPolicy::for_query(q, p.forward_scores(q).unwrap(), &c)
            .unwrap()
            .exact_relevance(&rel, &theta)
            .unwrap()
    };
    let upstream = FairPolicy::for_query(q, params.forward_scores(q).unwrap(), &c)
        .unwrap()
        .exact_relevance_gradient(&rel, &theta)
        .unwrap();
    let analytic = params.backward_chain(q, &upstream).unwrap().flatten();
    let flat = params.flatten();
    let h = 1e-4;
    let scale = analytic.iter().fold(0.0f64, |m, g| m.max(g.abs()));
    for i in 0..flat.len() {
        let at = |delta: f64| {
            let mut v = flat.clone();
            v[i] += delta;
            objective(&MlpParams::from_flat(3, &v).unwrap())
        };
        let fd = (at(h) - at(-h)) / (2.0 * h);
        let denom = analytic[i].abs().max(fd.abs()).max(1e-3 * scale);
        assert!((analytic[i] - fd).abs() / denom < 1e-4, "param {i}: {} vs {fd}", analytic[i]);
    }
}
