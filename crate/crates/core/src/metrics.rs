//! Ranking quality and fairness metrics over sampled rankings.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::domain::{check_ex_post_fair, FairnessConstraints, PositionDiscounts};
use crate::error::{Error, Result};
use crate::policy::{ranking_reward, RankingSampler};

/// NDCG of one ranking. The ideal DCG takes the best `len(ranking)` items of
/// the whole pool, fairness aside. Returns 1 when the ideal DCG is zero.
pub fn ndcg_of_ranking(ranking: &[usize], relevance: &[f64], theta: &PositionDiscounts) -> Result<f64> {
    if theta.len() != ranking.len() {
        return Err(Error::LengthMismatch {
            expected: theta.len(),
            found: ranking.len(),
        });
    }
    if let Some(&d) = ranking.iter().find(|&&d| d >= relevance.len()) {
        return Err(Error::ItemNotInPool(d));
    }
    let ideal = theta.ideal_dcg(relevance);
    if ideal <= 0.0 {
        return Ok(1.0);
    }
    Ok(ranking_reward(ranking, relevance, theta) / ideal)
}

/// Welford accumulator for a sample mean and its standard error.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct MeanAccumulator {
    n: usize,
    mean: f64,
    m2: f64,
}

impl MeanAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, x: f64) {
        self.n += 1;
        let delta = x - self.mean;
        self.mean += delta / self.n as f64;
        self.m2 += delta * (x - self.mean);
    }

    pub fn count(&self) -> usize {
        self.n
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    /// Unbiased sample variance; `None` below two observations.
    pub fn variance(&self) -> Option<f64> {
        (self.n > 1).then(|| self.m2 / (self.n - 1) as f64)
    }

    pub fn stderr(&self) -> Option<f64> {
        self.variance().map(|v| (v / self.n as f64).sqrt())
    }

    pub fn estimate(&self) -> Estimate {
        Estimate {
            mean: self.mean,
            stderr: self.stderr(),
            n: self.n,
        }
    }
}

impl Extend<f64> for MeanAccumulator {
    fn extend<I: IntoIterator<Item = f64>>(&mut self, iter: I) {
        for x in iter {
            self.push(x);
        }
    }
}

impl FromIterator<f64> for MeanAccumulator {
    fn from_iter<I: IntoIterator<Item = f64>>(iter: I) -> Self {
        let mut acc = Self::new();
        acc.extend(iter);
        acc
    }
}

/// A Monte Carlo mean. `stderr` is `None` for a single sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub mean: f64,
    pub stderr: Option<f64>,
    pub n: usize,
}

fn require_samples(n: usize) -> Result<()> {
    if n == 0 {
        return Err(Error::InvalidArgument("n_samples must be at least 1".into()));
    }
    Ok(())
}

/// Monte Carlo expected NDCG of a stochastic policy.
pub fn expected_ndcg<S: RankingSampler, R: Rng + ?Sized>(
    sampler: &S,
    relevance: &[f64],
    theta: &PositionDiscounts,
    n_samples: usize,
    rng: &mut R,
) -> Result<Estimate> {
    require_samples(n_samples)?;
    let mut acc = MeanAccumulator::new();
    for _ in 0..n_samples {
        let o = sampler.sample_ranking(rng)?;
        acc.push(ndcg_of_ranking(&o.ranked_items, relevance, theta)?);
    }
    Ok(acc.estimate())
}

/// Fraction of sampled rankings with a `group` item at each rank.
pub fn per_rank_group_fraction<S: RankingSampler, R: Rng + ?Sized>(
    sampler: &S,
    group: usize,
    n_samples: usize,
    rng: &mut R,
) -> Result<Vec<f64>> {
    require_samples(n_samples)?;
    let mut hits = vec![0usize; sampler.k()];
    for _ in 0..n_samples {
        let o = sampler.sample_ranking(rng)?;
        for (h, &g) in hits.iter_mut().zip(o.assignment.slots()) {
            if g == group {
                *h += 1;
            }
        }
    }
    Ok(hits.into_iter().map(|h| h as f64 / n_samples as f64).collect())
}

/// Fraction of sampled rankings that break `c`.
pub fn fairness_violation_rate<S: RankingSampler, R: Rng + ?Sized>(
    sampler: &S,
    c: &FairnessConstraints,
    n_samples: usize,
    rng: &mut R,
) -> Result<f64> {
    require_samples(n_samples)?;
    let mut bad = 0usize;
    for _ in 0..n_samples {
        let o = sampler.sample_ranking(rng)?;
        if !check_ex_post_fair(&o, c)? {
            bad += 1;
        }
    }
    Ok(bad as f64 / n_samples as f64)
}

/// One long-format metric record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub dataset: String,
    pub method: String,
    pub beta: f64,
    pub metric: String,
    pub rank_or_epoch: Option<usize>,
    pub value: f64,
    pub stderr: Option<f64>,
}
