//! Uniform sampling of fair group assignments.
//!
//! A group assignment is drawn in two steps: a per-group count vector
//! `x` with `L_j <= x_j <= U_j` and `Σ x_j = k`, chosen uniformly among all
//! such vectors, followed by a uniformly random arrangement of the multiset
//! holding `x_j` copies of each label `j`.
//!
//! Counting uses exact big integers; the number of bounded compositions
//! outgrows `u64` for moderate `k` and `ℓ`.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use num_bigint::{BigUint, RandBigInt};
use num_traits::{ToPrimitive, Zero};
use rand::seq::SliceRandom;
use rand::Rng;

use crate::domain::{FairnessConstraints, GroupAssignment};
use crate::error::{Error, Result};

/// `counts[j][s]`: ways to pick `x_1..x_j` within bounds summing to `s`.
#[derive(Debug, Clone, PartialEq)]
pub struct CompositionTable {
    constraints: FairnessConstraints,
    counts: Vec<Vec<BigUint>>,
}

impl CompositionTable {
    /// Fill the table by `C[j][s] = Σ_{x=L_j}^{min(U_j, s)} C[j-1][s-x]`.
    pub fn build(c: &FairnessConstraints) -> Result<Self> {
        let k = c.k;
        let groups = c.n_groups();
        let mut counts = vec![vec![BigUint::zero(); k + 1]; groups + 1];
        counts[0][0] = BigUint::from(1u32);
        for j in 1..=groups {
            let (lo, hi) = (c.lower[j - 1], c.upper[j - 1]);
            for s in 0..=k {
                let mut acc = BigUint::zero();
                if lo <= s {
                    for x in lo..=hi.min(s) {
                        acc += &counts[j - 1][s - x];
                    }
                }
                counts[j][s] = acc;
            }
        }
        if counts[groups][k].is_zero() {
            return Err(Error::Infeasible(format!(
                "no composition of {k} satisfies L={:?}, U={:?}",
                c.lower, c.upper
            )));
        }
        Ok(Self {
            constraints: c.clone(),
            counts,
        })
    }

    pub fn constraints(&self) -> &FairnessConstraints {
        &self.constraints
    }

    pub fn count(&self, groups: usize, sum: usize) -> &BigUint {
        &self.counts[groups][sum]
    }

    /// Number of feasible count vectors.
    pub fn total(&self) -> &BigUint {
        &self.counts[self.constraints.n_groups()][self.constraints.k]
    }

    /// Uniform draw over feasible count vectors, last group first.
    pub fn sample_composition<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<usize> {
        let c = &self.constraints;
        let mut x = vec![0; c.n_groups()];
        let mut remaining = c.k;
        for j in (1..=c.n_groups()).rev() {
            let mut target = rng.gen_biguint_below(&self.counts[j][remaining]);
            let lo = c.lower[j - 1];
            let hi = c.upper[j - 1].min(remaining);
            let mut chosen = hi;
            for xj in lo..=hi {
                let w = &self.counts[j - 1][remaining - xj];
                if &target < w {
                    chosen = xj;
                    break;
                }
                target -= w;
            }
            x[j - 1] = chosen;
            remaining -= chosen;
        }
        debug_assert_eq!(remaining, 0);
        x
    }

    /// Full two-step draw of a fair group assignment.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> GroupAssignment {
        let x = self.sample_composition(rng);
        sample_group_assignment(&x, rng)
    }

    /// `log μ(γ)`, or `None` when γ lies outside the support.
    pub fn log_prob(&self, gamma: &GroupAssignment) -> Option<f64> {
        let c = &self.constraints;
        if gamma.len() != c.k || gamma.slots().iter().any(|&g| g >= c.n_groups()) {
            return None;
        }
        let x = gamma.counts(c.n_groups());
        if !c.admits_counts(&x) {
            return None;
        }
        let arrangements = ln_factorial(c.k) - x.iter().map(|&n| ln_factorial(n)).sum::<f64>();
        Some(-ln_big(self.total()) - arrangements)
    }
}

/// Uniform arrangement of `x_j` copies of each label `j` (Fisher-Yates).
pub fn sample_group_assignment<R: Rng + ?Sized>(x: &[usize], rng: &mut R) -> GroupAssignment {
    let mut slots: Vec<usize> = x
        .iter()
        .enumerate()
        .flat_map(|(j, &n)| std::iter::repeat(j).take(n))
        .collect();
    slots.shuffle(rng);
    GroupAssignment(slots)
}

fn ln_factorial(n: usize) -> f64 {
    (2..=n).map(|i| (i as f64).ln()).sum()
}

fn ln_big(v: &BigUint) -> f64 {
    let bits = v.bits();
    if bits <= 1000 {
        v.to_f64().map_or(f64::INFINITY, f64::ln)
    } else {
        let shift = bits - 64;
        let top = (v >> shift).to_f64().unwrap_or(f64::MAX);
        top.ln() + shift as f64 * std::f64::consts::LN_2
    }
}

/// Tables keyed by `(k, L, U)`, shared across threads.
#[derive(Debug, Default)]
pub struct TableCache {
    tables: Mutex<HashMap<FairnessConstraints, Arc<CompositionTable>>>,
}

impl TableCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, c: &FairnessConstraints) -> Result<Arc<CompositionTable>> {
        if let Some(t) = self.tables.lock().expect("table cache poisoned").get(c) {
            return Ok(Arc::clone(t));
        }
        let table = Arc::new(CompositionTable::build(c)?);
        self.tables
            .lock()
            .expect("table cache poisoned")
            .entry(c.clone())
            .or_insert_with(|| Arc::clone(&table));
        Ok(table)
    }

    pub fn len(&self) -> usize {
        self.tables.lock().expect("table cache poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[cfg(test)]
mod tests {
    use std::collections::HashMap;

    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn constraints(k: usize, l: &[usize], u: &[usize]) -> FairnessConstraints {
        FairnessConstraints {
            k,
            lower: l.to_vec(),
            upper: u.to_vec(),
        }
    }

    /// Brute-force count of bounded compositions.
    fn brute_count(c: &FairnessConstraints) -> usize {
        fn rec(c: &FairnessConstraints, j: usize, left: usize) -> usize {
            if j == c.n_groups() {
                return usize::from(left == 0);
            }
            (c.lower[j]..=c.upper[j].min(left)).map(|x| rec(c, j + 1, left - x)).sum()
        }
        rec(c, 0, c.k)
    }

    #[test]
    fn two_groups_three_slots() {
        let c = constraints(3, &[1, 1], &[2, 2]);
        let t = CompositionTable::build(&c).unwrap();
        assert_eq!(*t.total(), BigUint::from(2u32));
        assert_eq!(brute_count(&c), 2);
    }

    #[test]
    fn forced_single_group() {
        let t = CompositionTable::build(&constraints(5, &[5], &[5])).unwrap();
        assert_eq!(*t.total(), BigUint::from(1u32));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(t.sample_composition(&mut rng), vec![5]);
        assert_eq!(t.sample(&mut rng), GroupAssignment(vec![0; 5]));
        assert_eq!(t.log_prob(&GroupAssignment(vec![0; 5])), Some(0.0));
    }

    #[test]
    fn infeasible_table() {
        assert!(matches!(
            CompositionTable::build(&constraints(2, &[2, 2], &[2, 2])),
            Err(Error::Infeasible(_))
        ));
    }

    #[test]
    fn table_matches_brute_force() {
        for (k, l, u) in [
            (4, vec![0, 0, 0], vec![4, 4, 4]),
            (7, vec![1, 0, 2], vec![3, 5, 4]),
            (10, vec![2, 2, 1, 0], vec![5, 4, 3, 6]),
        ] {
            let c = constraints(k, &l, &u);
            let t = CompositionTable::build(&c).unwrap();
            assert_eq!(t.total().to_usize().unwrap(), brute_count(&c));
        }
        let t = CompositionTable::build(&constraints(4, &[0, 0, 0], &[4, 4, 4])).unwrap();
        assert_eq!(t.total().to_usize().unwrap(), 15);
    }

    #[test]
    fn large_counts_exceed_u64() {
        let c = constraints(400, &[0; 12], &[400; 12]);
        let t = CompositionTable::build(&c).unwrap();
        assert!(t.total().bits() > 64);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = t.sample_composition(&mut rng);
        assert_eq!(x.iter().sum::<usize>(), 400);
        let lp = t.log_prob(&sample_group_assignment(&x, &mut rng)).unwrap();
        assert!(lp.is_finite() && lp < 0.0);
    }

    #[test]
    fn composition_halves() {
        let t = CompositionTable::build(&constraints(3, &[1, 1], &[2, 2])).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 40_000;
        let hits = (0..n).filter(|_| t.sample_composition(&mut rng) == vec![1, 2]).count();
        let se = (0.25 / n as f64).sqrt();
        assert!((hits as f64 / n as f64 - 0.5).abs() <= 3.0 * se);
    }

    #[test]
    fn arrangement_frequencies() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let n = 120_000;
        let mut counts: HashMap<Vec<usize>, usize> = HashMap::new();
        for _ in 0..n {
            *counts.entry(sample_group_assignment(&[2, 2], &mut rng).0).or_insert(0) += 1;
        }
        assert_eq!(counts.len(), 6);
        let p = 1.0 / 6.0;
        let se = (p * (1.0 - p) / n as f64).sqrt();
        for c in counts.values() {
            assert!((*c as f64 / n as f64 - p).abs() <= 3.0 * se);
        }

        let mut counts: HashMap<Vec<usize>, usize> = HashMap::new();
        for _ in 0..30_000 {
            *counts.entry(sample_group_assignment(&[1, 2], &mut rng).0).or_insert(0) += 1;
        }
        assert_eq!(counts.len(), 3);
    }

    #[test]
    fn mu_log_prob_examples() {
        let t = CompositionTable::build(&constraints(3, &[1, 1], &[2, 2])).unwrap();
        let lp = t.log_prob(&GroupAssignment(vec![0, 1, 1])).unwrap();
        assert!((lp - (1.0f64 / 6.0).ln()).abs() < 1e-12);
        assert_eq!(t.log_prob(&GroupAssignment(vec![0, 0, 0])), None);
        let single = CompositionTable::build(&FairnessConstraints::vacuous(4, 1)).unwrap();
        assert_eq!(single.log_prob(&GroupAssignment(vec![0; 4])), Some(0.0));
    }

    #[test]
    fn cache_reuses_tables() {
        let cache = TableCache::new();
        let c = constraints(3, &[1, 1], &[2, 2]);
        let a = cache.get(&c).unwrap();
        let b = cache.get(&c).unwrap();
        assert!(Arc::ptr_eq(&a, &b));
        assert_eq!(cache.len(), 1);
    }

    proptest::proptest! {
        #[test]
        fn samples_respect_bounds(
            bounds in proptest::collection::vec((0usize..3, 0usize..5), 1..=4),
            k in 1usize..10,
            seed in 0u64..1000,
        ) {
            let lower: Vec<usize> = bounds.iter().map(|b| b.0).collect();
            let upper: Vec<usize> = bounds.iter().map(|b| (b.0 + b.1).min(k)).collect();
            if let Ok(c) = FairnessConstraints::new(k, lower, upper) {
                if let Ok(t) = CompositionTable::build(&c) {
                    let mut rng = ChaCha8Rng::seed_from_u64(seed);
                    for _ in 0..20 {
                        let g = t.sample(&mut rng);
                        proptest::prop_assert!(c.admits_counts(&g.counts(c.n_groups())));
                        proptest::prop_assert!(t.log_prob(&g).is_some());
                    }
                }
            }
        }
    }
}
