//! Plackett-Luce sampling and probabilities over an item pool.
//!
//! Exponentials are taken after subtracting the largest remaining score.
//! Normalisers are updated by subtraction and recomputed against a fresh
//! shift whenever they collapse, so they stay accurate for score gaps far
//! beyond the range of `f64::exp`. They are reported as logarithms.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Pools larger than this are refused by [`enumerate_rankings`].
pub const MAX_ENUM_POOL: usize = 8;
/// Slot counts larger than this are refused by [`enumerate_rankings`].
pub const MAX_ENUM_SLOTS: usize = 5;

/// A running normaliser that falls below this fraction of its starting value
/// is recomputed from the remaining weights.
const CANCELLATION_GUARD: f64 = 1e-6;

/// Log-scores `m(d)` indexed by item.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreVector(Vec<f64>);

impl ScoreVector {
    pub fn new(scores: Vec<f64>) -> Result<Self> {
        if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "score of item {i} is not finite"
            )));
        }
        Ok(Self(scores))
    }

    pub fn zeros(n: usize) -> Self {
        Self(vec![0.0; n])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn get(&self, item: usize) -> Result<f64> {
        self.0.get(item).copied().ok_or(Error::ItemNotInPool(item))
    }

    /// Largest score among `pool`.
    pub fn max_over(&self, pool: &[usize]) -> Result<f64> {
        pool.iter()
            .map(|&d| self.get(d))
            .try_fold(f64::NEG_INFINITY, |acc, s| Ok(acc.max(s?)))
    }
}

impl From<Vec<f64>> for ScoreVector {
    fn from(v: Vec<f64>) -> Self {
        Self(v)
    }
}

/// Log softmax normalisers `ln Z_1..ln Z_n` of a sampled prefix.
#[derive(Debug, Clone, PartialEq)]
pub struct Denominators {
    pub log_values: Vec<f64>,
}

impl Denominators {
    pub fn len(&self) -> usize {
        self.log_values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.log_values.is_empty()
    }

    pub fn absolute(&self) -> Vec<f64> {
        self.log_values.iter().map(|l| l.exp()).collect()
    }
}

/// Weights of `items` relative to their largest score.
fn rescale(items: &mut [(usize, f64)], scores: &[f64]) -> (f64, f64) {
    let shift = items.iter().map(|&(d, _)| scores[d]).fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (d, w) in items.iter_mut() {
        *w = (scores[*d] - shift).exp();
        total += *w;
    }
    (shift, total)
}

/// Draw an ordered selection of `slots` items from `pool`.
pub fn pl_sample<R: Rng + ?Sized>(
    pool: &[usize],
    slots: usize,
    scores: &ScoreVector,
    rng: &mut R,
) -> Result<Vec<usize>> {
    pl_sample_with_denominators(pool, slots, scores, rng).map(|(sigma, _)| sigma)
}

/// [`pl_sample`] that also returns the normaliser in force at each draw.
pub fn pl_sample_with_denominators<R: Rng + ?Sized>(
    pool: &[usize],
    slots: usize,
    scores: &ScoreVector,
    rng: &mut R,
) -> Result<(Vec<usize>, Denominators)> {
    if slots == 0 {
        return Ok((Vec::new(), Denominators { log_values: Vec::new() }));
    }
    if pool.is_empty() {
        return Err(Error::EmptyPool);
    }
    if slots > pool.len() {
        return Err(Error::SlotsExceedPool {
            slots,
            pool: pool.len(),
        });
    }
    let mut remaining: Vec<(usize, f64)> = pool.iter().map(|&d| (d, 0.0)).collect();
    let (mut shift, mut total) = rescale(&mut remaining, &scores.0);
    let mut reference = total;

    let mut sigma = Vec::with_capacity(slots);
    let mut log_values = Vec::with_capacity(slots);
    for _ in 0..slots {
        if total < CANCELLATION_GUARD * reference {
            (shift, total) = rescale(&mut remaining, &scores.0);
            reference = total;
        }
        log_values.push(shift + total.ln());
        let target = rng.gen::<f64>() * total;
        let mut acc = 0.0;
        // Rounding can leave `target` just past the final partial sum.
        let mut pick = remaining.len() - 1;
        for (pos, &(_, w)) in remaining.iter().enumerate() {
            acc += w;
            if target < acc {
                pick = pos;
                break;
            }
        }
        let (item, w) = remaining.swap_remove(pick);
        total -= w;
        sigma.push(item);
    }
    Ok((sigma, Denominators { log_values }))
}

fn check_prefix(sigma: &[usize], pool: &[usize]) -> Result<()> {
    let mut seen = Vec::with_capacity(sigma.len());
    for &d in sigma {
        if !pool.contains(&d) {
            return Err(Error::ItemNotInPool(d));
        }
        if seen.contains(&d) {
            return Err(Error::DuplicateItem(d));
        }
        seen.push(d);
    }
    Ok(())
}

/// Normalisers `Z_i = Σ_{d ∈ pool \ σ(1:i-1)} e^{m(d)}` for each position of
/// `sigma`, by one full sum and successive subtraction.
pub fn softmax_denominators(
    sigma: &[usize],
    pool: &[usize],
    scores: &ScoreVector,
) -> Result<Denominators> {
    check_prefix(sigma, pool)?;
    if pool.is_empty() {
        return Ok(Denominators { log_values: Vec::new() });
    }
    let sc = scores.as_slice();
    let mut remaining: Vec<(usize, f64)> = pool.iter().map(|&d| (d, 0.0)).collect();
    let (mut shift, mut total) = rescale(&mut remaining, sc);
    let mut reference = total;
    let mut log_values = Vec::with_capacity(sigma.len());
    for (i, &d) in sigma.iter().enumerate() {
        if total < CANCELLATION_GUARD * reference {
            let placed = &sigma[..i];
            remaining.retain(|(x, _)| !placed.contains(x));
            (shift, total) = rescale(&mut remaining, sc);
            reference = total;
        }
        log_values.push(shift + total.ln());
        total -= (sc[d] - shift).exp();
    }
    Ok(Denominators { log_values })
}

/// `log π^PL(σ)` for an ordered selection from `pool`.
pub fn pl_log_prob(sigma: &[usize], pool: &[usize], scores: &ScoreVector) -> Result<f64> {
    let z = softmax_denominators(sigma, pool, scores)?;
    Ok(sigma
        .iter()
        .zip(&z.log_values)
        .map(|(&d, lz)| scores.0[d] - lz)
        .sum())
}

/// Every ordered selection of `slots` items from `pool`, in lexicographic
/// order of pool position.
pub fn enumerate_rankings(pool: &[usize], slots: usize) -> Result<Vec<Vec<usize>>> {
    if pool.len() > MAX_ENUM_POOL || slots > MAX_ENUM_SLOTS {
        return Err(Error::TooLarge(format!(
            "pool {} / slots {slots} exceed {MAX_ENUM_POOL} / {MAX_ENUM_SLOTS}",
            pool.len()
        )));
    }
    if slots > pool.len() {
        return Err(Error::SlotsExceedPool {
            slots,
            pool: pool.len(),
        });
    }
    let mut out = Vec::new();
    let mut prefix = Vec::with_capacity(slots);
    let mut used = vec![false; pool.len()];
    fn rec(
        pool: &[usize],
        slots: usize,
        prefix: &mut Vec<usize>,
        used: &mut [bool],
        out: &mut Vec<Vec<usize>>,
    ) {
        if prefix.len() == slots {
            out.push(prefix.clone());
            return;
        }
        for i in 0..pool.len() {
            if !used[i] {
                used[i] = true;
                prefix.push(pool[i]);
                rec(pool, slots, prefix, used, out);
                prefix.pop();
                used[i] = false;
            }
        }
    }
    rec(pool, slots, &mut prefix, &mut used, &mut out);
    Ok(out)
}
