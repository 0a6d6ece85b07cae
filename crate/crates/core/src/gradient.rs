//! Score gradients of the expected (fair) ranking reward.
//!
//! The main estimator draws `M` fair group assignments, one Plackett-Luce
//! ranking per group for each of them, and applies the PL-Rank-3 per-sample
//! formula to every group's sub-ranking over the ranks that group received.
//! Summing the group terms gives an unbiased estimate of `∂R^fair/∂m(d)`
//! because the assignment distribution does not depend on the scores.
//!
//! For item `d` of group `j`, placed at within-group step `t` (or unplaced):
//!
//! ```text
//! PR_t  = Σ_{s ≥ t} θ_{ψ(s)} ρ_{σ(s)}           reward from step t onward
//! DR_t  = Σ_{s ≤ t} θ_{ψ(s)} / Z_s
//! RI_t  = Σ_{s ≤ t} PR_s / Z_s
//! grad  = PR_{t+1} + e^{m(d)} (ρ_d DR_t − RI_t)   (placed)
//! grad  = e^{m(d)} (ρ_d DR_n − RI_n)              (unplaced, n = |ψ_j|)
//! ```

use rand::Rng;

use crate::domain::PositionDiscounts;
use crate::error::{Error, Result};
use crate::pl::{pl_sample_with_denominators, softmax_denominators, Denominators, ScoreVector};
use crate::policy::{ranking_reward, FairPolicy, RankingSampler};

/// Per-unit step for [`finite_difference_oracle`].
pub const DEFAULT_FD_STEP: f64 = 1e-5;

/// `∂R/∂m(d)` for every item of a query.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientVector(pub Vec<f64>);

impl GradientVector {
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
}

/// Running sums for one group's sub-ranking in one sample.
///
/// `DR_t` and `RI_t` are stored multiplied by `Z_t`: since `Z` only shrinks
/// along the ranking, `Z_t DR_t = Σ_{s ≤ t} θ_{ψ(s)} Z_t / Z_s` stays bounded,
/// and `e^{m(d)} / Z_t` is a probability for every item still in the pool at
/// step `t`. Neither product overflows however far apart the scores are.
#[derive(Debug, Clone, PartialEq)]
pub struct PerSampleStats {
    pub placed_reward: Vec<f64>,
    pub future_reward: Vec<f64>,
    pub log_denominators: Vec<f64>,
    /// `Z_t · DR_t`.
    pub discount_ratio: Vec<f64>,
    /// `Z_t · RI_t`.
    pub reward_ratio: Vec<f64>,
}

impl PerSampleStats {
    /// `sigma[t]` sits at global rank `positions[t]`; `z` holds the log
    /// normalisers in force at each within-group step.
    pub fn compute(
        sigma: &[usize],
        positions: &[usize],
        z: &Denominators,
        relevance: &[f64],
        theta: &PositionDiscounts,
    ) -> Result<Self> {
        let n = sigma.len();
        if positions.len() != n || z.len() != n {
            return Err(Error::ShapeMismatch(format!(
                "{n} items, {} ranks, {} denominators",
                positions.len(),
                z.len()
            )));
        }
        let th = theta.as_slice();
        let placed_reward: Vec<f64> = sigma
            .iter()
            .zip(positions)
            .map(|(&d, &r)| th[r] * relevance[d])
            .collect();
        let mut future_reward = vec![0.0; n];
        let mut acc = 0.0;
        for t in (0..n).rev() {
            acc += placed_reward[t];
            future_reward[t] = acc;
        }
        let lz = &z.log_values;
        let mut discount_ratio = Vec::with_capacity(n);
        let mut reward_ratio = Vec::with_capacity(n);
        let (mut dr, mut ri) = (0.0, 0.0);
        for t in 0..n {
            let shrink = if t == 0 { 1.0 } else { (lz[t] - lz[t - 1]).exp().min(1.0) };
            dr = dr * shrink + th[positions[t]];
            ri = ri * shrink + future_reward[t];
            discount_ratio.push(dr);
            reward_ratio.push(ri);
        }
        Ok(Self {
            placed_reward,
            future_reward,
            log_denominators: lz.clone(),
            discount_ratio,
            reward_ratio,
        })
    }
}

/// Adds one sample's contribution for every item of `pool` into `out`.
/// Runs in `O(|pool| + |sigma|)`. `placed` is an all-false scratch mask over
/// items and is left all-false.
#[allow(clippy::too_many_arguments)]
fn accumulate_group(
    sigma: &[usize],
    positions: &[usize],
    pool: &[usize],
    scores: &ScoreVector,
    z: &Denominators,
    relevance: &[f64],
    theta: &PositionDiscounts,
    placed: &mut [bool],
    out: &mut [f64],
) -> Result<()> {
    if sigma.is_empty() {
        return Ok(());
    }
    let st = PerSampleStats::compute(sigma, positions, z, relevance, theta)?;
    let s = scores.as_slice();
    let n = sigma.len();
    let lz = &st.log_denominators;
    for &d in sigma {
        placed[d] = true;
    }
    let (dr_end, ri_end, lz_end) = (st.discount_ratio[n - 1], st.reward_ratio[n - 1], lz[n - 1]);
    for &d in pool {
        if !placed[d] {
            let p = (s[d] - lz_end).exp();
            out[d] += p * (relevance[d] * dr_end - ri_end);
        }
    }
    for (t, &d) in sigma.iter().enumerate() {
        placed[d] = false;
        let p = (s[d] - lz[t]).exp();
        let after = if t + 1 < n { st.future_reward[t + 1] } else { 0.0 };
        out[d] += after + p * (relevance[d] * st.discount_ratio[t] - st.reward_ratio[t]);
    }
    Ok(())
}

/// Single-sample PL-Rank-3 contributions of one group. `sigma` was drawn
/// from `pool` for the ascending global ranks `positions`.
pub fn plrank3_group_gradient(
    sigma: &[usize],
    positions: &[usize],
    pool: &[usize],
    scores: &ScoreVector,
    relevance: &[f64],
    theta: &PositionDiscounts,
) -> Result<Vec<(usize, f64)>> {
    if positions.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::ShapeMismatch("ranks must be strictly ascending".into()));
    }
    if positions.iter().any(|&r| r >= theta.len()) {
        return Err(Error::ShapeMismatch("rank beyond the discount vector".into()));
    }
    if relevance.len() != scores.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} relevances for {} scores",
            relevance.len(),
            scores.len()
        )));
    }
    let z = softmax_denominators(sigma, pool, scores)?;
    let mut out = vec![0.0; scores.len()];
    let mut placed = vec![false; scores.len()];
    accumulate_group(sigma, positions, pool, scores, &z, relevance, theta, &mut placed, &mut out)?;
    Ok(pool.iter().map(|&d| (d, out[d])).collect())
}

fn check_inputs(n_items: usize, k: usize, relevance: &[f64], theta: &PositionDiscounts, samples: usize) -> Result<()> {
    if relevance.len() != n_items {
        return Err(Error::ShapeMismatch(format!(
            "{} relevances for {n_items} items",
            relevance.len()
        )));
    }
    if theta.len() < k {
        return Err(Error::ShapeMismatch(format!(
            "{} discounts for k = {k}",
            theta.len()
        )));
    }
    if samples == 0 {
        return Err(Error::InvalidArgument("need at least one sample".into()));
    }
    Ok(())
}

/// Estimate `∂R^fair/∂m` with `samples` assignment draws and one ranking
/// per group per draw.
pub fn algorithm1_gradient<R: Rng + ?Sized>(
    policy: &FairPolicy,
    relevance: &[f64],
    theta: &PositionDiscounts,
    samples: usize,
    rng: &mut R,
) -> Result<GradientVector> {
    check_inputs(policy.n_items(), policy.k(), relevance, theta, samples)?;
    let mut out = vec![0.0; policy.n_items()];
    let mut placed = vec![false; policy.n_items()];
    for _ in 0..samples {
        let draw = policy.sample_draw(rng)?;
        for (j, pool) in policy.pools().iter().enumerate() {
            accumulate_group(
                &draw.group_rankings[j],
                &draw.positions[j],
                pool,
                policy.scores(),
                &draw.denominators[j],
                relevance,
                theta,
                &mut placed,
                &mut out,
            )?;
        }
    }
    let inv = 1.0 / samples as f64;
    out.iter_mut().for_each(|g| *g *= inv);
    Ok(GradientVector(out))
}

/// PL-Rank-3 for unconstrained Plackett-Luce over all items with `k` slots.
pub fn plrank3_gradient<R: Rng + ?Sized>(
    scores: &ScoreVector,
    relevance: &[f64],
    theta: &PositionDiscounts,
    k: usize,
    samples: usize,
    rng: &mut R,
) -> Result<GradientVector> {
    check_inputs(scores.len(), k, relevance, theta, samples)?;
    let pool: Vec<usize> = (0..scores.len()).collect();
    let positions: Vec<usize> = (0..k).collect();
    let mut out = vec![0.0; scores.len()];
    let mut placed = vec![false; scores.len()];
    for _ in 0..samples {
        let (sigma, z) = pl_sample_with_denominators(&pool, k, scores, rng)?;
        accumulate_group(&sigma, &positions, &pool, scores, &z, relevance, theta, &mut placed, &mut out)?;
    }
    let inv = 1.0 / samples as f64;
    out.iter_mut().for_each(|g| *g *= inv);
    Ok(GradientVector(out))
}

/// Score-function estimator: mean of `R(σ) ∇_m log π^fair(σ)` over draws.
pub fn reinforce_gradient<R: Rng + ?Sized>(
    policy: &FairPolicy,
    relevance: &[f64],
    theta: &PositionDiscounts,
    samples: usize,
    rng: &mut R,
) -> Result<GradientVector> {
    check_inputs(policy.n_items(), policy.k(), relevance, theta, samples)?;
    let mut out = vec![0.0; policy.n_items()];
    for _ in 0..samples {
        let outcome = policy.sample_ranking(rng)?;
        let reward = ranking_reward(&outcome.ranked_items, relevance, theta);
        if reward == 0.0 {
            continue;
        }
        for (g, s) in out.iter_mut().zip(policy.log_prob_score_gradient(&outcome)?) {
            *g += reward * s;
        }
    }
    let inv = 1.0 / samples as f64;
    out.iter_mut().for_each(|g| *g *= inv);
    Ok(GradientVector(out))
}

/// Central differences of the enumerated `R^fair` in each score.
pub fn finite_difference_oracle(
    policy: &FairPolicy,
    relevance: &[f64],
    theta: &PositionDiscounts,
    h: f64,
) -> Result<GradientVector> {
    let base = policy.scores().as_slice().to_vec();
    let mut out = Vec::with_capacity(base.len());
    for d in 0..base.len() {
        let mut plus = base.clone();
        plus[d] += h;
        let mut minus = base.clone();
        minus[d] -= h;
        let up = policy
            .with_scores(ScoreVector::new(plus)?)?
            .exact_relevance(relevance, theta)?;
        let down = policy
            .with_scores(ScoreVector::new(minus)?)?
            .exact_relevance(relevance, theta)?;
        out.push((up - down) / (2.0 * h));
    }
    Ok(GradientVector(out))
}
