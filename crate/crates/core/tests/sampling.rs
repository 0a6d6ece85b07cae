use std::collections::HashMap;

use fairpl::assignment::CompositionTable;
use fairpl::*;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Direct product-of-softmax probability, independent of the library.
fn brute_pl_prob(sigma: &[usize], pool: &[usize], s: &[f64]) -> f64 {
    let mut remaining = pool.to_vec();
    let mut p = 1.0;
    for &d in sigma {
        let z: f64 = remaining.iter().map(|&e| s[e].exp()).sum();
        p *= s[d].exp() / z;
        remaining.retain(|&e| e != d);
    }
    p
}

fn ordered_pairs(n: usize) -> Vec<Vec<usize>> {
    (0..n)
        .flat_map(|a| (0..n).filter(move |&b| b != a).map(move |b| vec![a, b]))
        .collect()
}

fn within_3se(count: usize, n: usize, p: f64) -> bool {
    let f = count as f64 / n as f64;
    (f - p).abs() <= 3.0 * (p * (1.0 - p) / n as f64).sqrt()
}

#[test]
fn pl_frequencies_match_brute_force_on_four_items() {
    let s = ScoreVector::new(vec![0.3, -1.2, 1.1, 0.0]).unwrap();
    let pool = [0, 1, 2, 3];
    let n = 200_000;
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut freq: HashMap<Vec<usize>, usize> = HashMap::new();
    for _ in 0..n {
        *freq.entry(pl_sample(&pool, 2, &s, &mut rng).unwrap()).or_default() += 1;
    }
    for sigma in ordered_pairs(4) {
        let p = brute_pl_prob(&sigma, &pool, s.as_slice());
        assert!((pl_log_prob(&sigma, &pool, &s).unwrap().exp() - p).abs() < 1e-12);
        assert!(within_3se(freq.get(&sigma).copied().unwrap_or(0), n, p), "{sigma:?}");
    }
}

#[test]
fn pl_frequencies_are_shift_invariant() {
    let base = vec![0.5, -0.7, 1.4, 0.1];
    let shifted: Vec<f64> = base.iter().map(|x| x + 250.0).collect();
    let pool = [0, 1, 2, 3];
    let n = 100_000;
    let count = |scores: Vec<f64>, seed| {
        let s = ScoreVector::new(scores).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut freq: HashMap<Vec<usize>, usize> = HashMap::new();
        for _ in 0..n {
            *freq.entry(pl_sample(&pool, 2, &s, &mut rng).unwrap()).or_default() += 1;
        }
        freq
    };
    let (a, b) = (count(base, 1), count(shifted, 2));
    for sigma in ordered_pairs(4) {
        let (x, y) = (a.get(&sigma).copied().unwrap_or(0) as f64, b.get(&sigma).copied().unwrap_or(0) as f64);
        let (px, py) = (x / n as f64, y / n as f64);
        let pooled = (x + y) / (2.0 * n as f64);
        let se = (2.0 * pooled * (1.0 - pooled) / n as f64).sqrt();
        assert!((px - py).abs() <= 4.0 * se, "{sigma:?}: {px} vs {py}");
    }
}

#[test]
fn fair_sampler_matches_its_probabilities_on_eight_rankings() {
    // Two items per group, one slot each: 2 assignments x 2 x 2 items.
    let c = FairnessConstraints::new(2, vec![1, 1], vec![1, 1]).unwrap();
    let groups = vec![0, 0, 1, 1];
    let policy = FairPolicy::new(ScoreVector::new(vec![0.9, -0.4, 0.2, 1.3]).unwrap(), groups.clone(), &c).unwrap();
    let n = 200_000;
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut freq: HashMap<Vec<usize>, usize> = HashMap::new();
    for _ in 0..n {
        let o = policy.sample_ranking(&mut rng).unwrap();
        assert!(check_ex_post_fair(&o, &c).unwrap());
        *freq.entry(o.ranked_items).or_default() += 1;
    }
    assert_eq!(freq.len(), 8);
    let mut mass = 0.0;
    for (sigma, &cnt) in &freq {
        let p = policy
            .log_prob(&RankingOutcome::from_items(sigma.clone(), &groups).unwrap())
            .unwrap()
            .prob();
        mass += p;
        assert!(within_3se(cnt, n, p), "{sigma:?}");
    }
    assert!((mass - 1.0).abs() < 1e-12);
}

#[test]
fn rejection_baseline_returns_fair_rankings() {
    let c = FairnessConstraints::new(3, vec![1, 1], vec![2, 2]).unwrap();
    let groups = vec![0, 0, 0, 0, 1, 1];
    let s = ScoreVector::new(vec![2.0, 1.5, 1.0, 0.5, -1.0, -2.0]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..200 {
        let (o, trials) = rejection_sample_baseline(&s, &groups, &c, &mut rng, 10_000).unwrap();
        assert!(trials >= 1);
        assert!(check_ex_post_fair(&o, &c).unwrap());
    }
}

fn arb_constraints() -> impl Strategy<Value = FairnessConstraints> {
    (1usize..4, 1usize..7)
        .prop_flat_map(|(ell, k)| {
            (
                Just(k),
                proptest::collection::vec(0..=k, ell),
                proptest::collection::vec(0..=k, ell),
            )
        })
        .prop_filter_map("infeasible", |(k, a, b)| {
            let lower: Vec<usize> = a.iter().zip(&b).map(|(x, y)| *x.min(y)).collect();
            let upper: Vec<usize> = a.iter().zip(&b).map(|(x, y)| *x.max(y)).collect();
            FairnessConstraints::new(k, lower, upper).ok()
        })
}

fn all_sequences(k: usize, ell: usize) -> Vec<Vec<usize>> {
    (0..ell.pow(k as u32))
        .map(|mut code| {
            (0..k)
                .map(|_| {
                    let g = code % ell;
                    code /= ell;
                    g
                })
                .collect()
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn assignment_probabilities_sum_to_one(c in arb_constraints()) {
        let table = CompositionTable::build(&c).unwrap();
        let mass: f64 = all_sequences(c.k, c.n_groups())
            .into_iter()
            .filter_map(|g| table.log_prob(&GroupAssignment(g)))
            .map(f64::exp)
            .sum();
        prop_assert!((mass - 1.0).abs() < 1e-10, "mass {}", mass);
    }

    #[test]
    fn every_sampled_assignment_is_fair(c in arb_constraints(), seed in 0u64..1000) {
        let table = CompositionTable::build(&c).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..50 {
            let gamma = table.sample(&mut rng);
            prop_assert!(c.admits_counts(&gamma.counts(c.n_groups())));
            prop_assert!(table.log_prob(&gamma).is_some());
        }
    }

    #[test]
    fn fair_policy_rankings_always_pass(
        scores in proptest::collection::vec(-4.0f64..4.0, 12),
        groups in proptest::collection::vec(0usize..3, 12),
        delta in 0.0f64..0.2,
        k in 1usize..8,
        seed in 0u64..1000,
    ) {
        let mut sizes = [0usize; 3];
        groups.iter().for_each(|&g| sizes[g] += 1);
        let props: Vec<f64> = sizes.iter().map(|&x| x as f64 / 12.0).collect();
        let c = FairnessConstraints::from_delta(&props, delta, k).unwrap();
        let Ok(policy) = FairPolicy::new(ScoreVector::new(scores).unwrap(), groups, &c) else {
            return Ok(());
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..20 {
            let o = policy.sample_ranking(&mut rng).unwrap();
            prop_assert!(check_ex_post_fair(&o, policy.constraints()).unwrap());
            prop_assert!(check_ex_post_fair(&o, &c).unwrap());
        }
    }
}
