//! Stochastic ranking policies: plain Plackett-Luce and the group-fair
//! variant that first draws a fair group assignment and then fills each
//! group's ranks with a Plackett-Luce draw restricted to that group.

use std::sync::Arc;

use rand::Rng;

use crate::assignment::{CompositionTable, TableCache};
use crate::domain::{check_ex_post_fair, FairnessConstraints, GroupAssignment, PositionDiscounts, QueryInstance, RankingOutcome};
use crate::error::{Error, Result};
use crate::pl::{enumerate_rankings, pl_log_prob, pl_sample, pl_sample_with_denominators, Denominators, ScoreVector};

/// Enumeration oracles refuse queries with more items than this.
pub const MAX_EXACT_ITEMS: usize = 8;
/// Enumeration oracles refuse rankings longer than this.
pub const MAX_EXACT_K: usize = 4;

/// Log-probability of a ranking, with rankings the policy can never emit
/// kept apart from finite values.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LogProb {
    Finite(f64),
    OutsideSupport,
}

impl LogProb {
    pub fn finite(self) -> Option<f64> {
        match self {
            LogProb::Finite(v) => Some(v),
            LogProb::OutsideSupport => None,
        }
    }

    pub fn prob(self) -> f64 {
        self.finite().map_or(0.0, f64::exp)
    }
}

/// Anything that can draw top-k rankings of one query's items.
pub trait RankingSampler {
    fn k(&self) -> usize;
    fn item_groups(&self) -> &[usize];
    fn sample_ranking<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<RankingOutcome>;
}

/// Unconstrained Plackett-Luce over every item of a query.
#[derive(Debug, Clone)]
pub struct PlPolicy {
    scores: ScoreVector,
    item_groups: Vec<usize>,
    pool: Vec<usize>,
    k: usize,
}

impl PlPolicy {
    pub fn new(scores: ScoreVector, item_groups: Vec<usize>, k: usize) -> Result<Self> {
        if scores.len() != item_groups.len() {
            return Err(Error::LengthMismatch {
                expected: item_groups.len(),
                found: scores.len(),
            });
        }
        if k > scores.len() {
            return Err(Error::SlotsExceedPool {
                slots: k,
                pool: scores.len(),
            });
        }
        let pool = (0..scores.len()).collect();
        Ok(Self {
            scores,
            item_groups,
            pool,
            k,
        })
    }

    pub fn scores(&self) -> &ScoreVector {
        &self.scores
    }

    pub fn log_prob(&self, sigma: &[usize]) -> Result<f64> {
        pl_log_prob(sigma, &self.pool, &self.scores)
    }
}

impl RankingSampler for PlPolicy {
    fn k(&self) -> usize {
        self.k
    }

    fn item_groups(&self) -> &[usize] {
        &self.item_groups
    }

    fn sample_ranking<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<RankingOutcome> {
        let sigma = pl_sample(&self.pool, self.k, &self.scores, rng)?;
        RankingOutcome::from_items(sigma, &self.item_groups)
    }
}

/// One draw from [`FairPolicy`] with the per-group intermediate state the
/// gradient estimator consumes.
#[derive(Debug, Clone)]
pub struct FairDraw {
    pub assignment: GroupAssignment,
    /// Ranks given to each group, ascending.
    pub positions: Vec<Vec<usize>>,
    /// Items drawn for each group, in within-group order.
    pub group_rankings: Vec<Vec<usize>>,
    pub denominators: Vec<Denominators>,
}

impl FairDraw {
    /// Merge the group rankings: the t-th item drawn for group j occupies
    /// the t-th smallest rank assigned to j.
    pub fn outcome(&self) -> RankingOutcome {
        let mut ranked = vec![usize::MAX; self.assignment.len()];
        for (pos, items) in self.positions.iter().zip(&self.group_rankings) {
            for (&rank, &item) in pos.iter().zip(items) {
                ranked[rank] = item;
            }
        }
        RankingOutcome {
            ranked_items: ranked,
            assignment: self.assignment.clone(),
        }
    }
}

/// The group-fair Plackett-Luce policy for one query.
#[derive(Debug, Clone)]
pub struct FairPolicy {
    constraints: FairnessConstraints,
    table: Arc<CompositionTable>,
    scores: ScoreVector,
    pools: Vec<Vec<usize>>,
    item_groups: Vec<usize>,
}

impl FairPolicy {
    /// Validates `constraints` against the group sizes implied by
    /// `item_groups` (upper bounds are clamped) and builds the count table.
    pub fn new(scores: ScoreVector, item_groups: Vec<usize>, constraints: &FairnessConstraints) -> Result<Self> {
        let validated = validate_for_groups(constraints, &item_groups)?;
        let table = Arc::new(CompositionTable::build(&validated)?);
        Self::with_table(scores, item_groups, table)
    }

    /// Like [`FairPolicy::new`] but reuses tables from `cache`.
    pub fn cached(
        scores: ScoreVector,
        item_groups: Vec<usize>,
        constraints: &FairnessConstraints,
        cache: &TableCache,
    ) -> Result<Self> {
        let validated = validate_for_groups(constraints, &item_groups)?;
        let table = cache.get(&validated)?;
        Self::with_table(scores, item_groups, table)
    }

    pub fn for_query(q: &QueryInstance, scores: ScoreVector, constraints: &FairnessConstraints) -> Result<Self> {
        Self::new(scores, q.groups(), constraints)
    }

    /// Use a prebuilt table; its constraints must already be validated.
    pub fn with_table(scores: ScoreVector, item_groups: Vec<usize>, table: Arc<CompositionTable>) -> Result<Self> {
        if scores.len() != item_groups.len() {
            return Err(Error::LengthMismatch {
                expected: item_groups.len(),
                found: scores.len(),
            });
        }
        let constraints = table.constraints().clone();
        let n_groups = constraints.n_groups();
        let mut pools = vec![Vec::new(); n_groups];
        for (d, &g) in item_groups.iter().enumerate() {
            if g >= n_groups {
                return Err(Error::ShapeMismatch(format!(
                    "item {d} has group {g}, constraints cover {n_groups} groups"
                )));
            }
            pools[g].push(d);
        }
        for (j, pool) in pools.iter().enumerate() {
            if constraints.lower[j] > pool.len() {
                return Err(Error::GroupTooSmall {
                    group: j,
                    lower: constraints.lower[j],
                    size: pool.len(),
                });
            }
            if constraints.upper[j] > pool.len() {
                return Err(Error::InvalidArgument(format!(
                    "table allows {} items of group {j} but only {} exist; validate the constraints first",
                    constraints.upper[j],
                    pool.len()
                )));
            }
        }
        Ok(Self {
            constraints,
            table,
            scores,
            pools,
            item_groups,
        })
    }

    pub fn constraints(&self) -> &FairnessConstraints {
        &self.constraints
    }

    pub fn table(&self) -> &CompositionTable {
        &self.table
    }

    pub fn scores(&self) -> &ScoreVector {
        &self.scores
    }

    pub fn pools(&self) -> &[Vec<usize>] {
        &self.pools
    }

    pub fn n_items(&self) -> usize {
        self.item_groups.len()
    }

    /// Draw γ from the assignment distribution, then one Plackett-Luce
    /// ranking per group for that group's ranks.
    pub fn sample_draw<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<FairDraw> {
        let assignment = self.table.sample(rng);
        self.sample_given(assignment, rng)
    }

    /// Second step only, for a fixed assignment.
    pub fn sample_given<R: Rng + ?Sized>(&self, assignment: GroupAssignment, rng: &mut R) -> Result<FairDraw> {
        let positions = assignment.positions(self.constraints.n_groups());
        let mut group_rankings = Vec::with_capacity(positions.len());
        let mut denominators = Vec::with_capacity(positions.len());
        for (pool, pos) in self.pools.iter().zip(&positions) {
            let (sigma, z) = pl_sample_with_denominators(pool, pos.len(), &self.scores, rng)?;
            group_rankings.push(sigma);
            denominators.push(z);
        }
        Ok(FairDraw {
            assignment,
            positions,
            group_rankings,
            denominators,
        })
    }

    /// `log μ(g(σ)) + Σ_j log π_j^PL(σ_j)`.
    pub fn log_prob(&self, outcome: &RankingOutcome) -> Result<LogProb> {
        if outcome.len() != self.constraints.k {
            return Err(Error::LengthMismatch {
                expected: self.constraints.k,
                found: outcome.len(),
            });
        }
        let rebuilt = RankingOutcome::from_items(outcome.ranked_items.clone(), &self.item_groups)?;
        if rebuilt.assignment != outcome.assignment {
            return Err(Error::ShapeMismatch(
                "ranking's group assignment disagrees with item groups".into(),
            ));
        }
        let Some(mu) = self.table.log_prob(&outcome.assignment) else {
            return Ok(LogProb::OutsideSupport);
        };
        let mut total = mu;
        for (j, pool) in self.pools.iter().enumerate() {
            let sigma_j: Vec<usize> = outcome
                .ranked_items
                .iter()
                .copied()
                .filter(|&d| self.item_groups[d] == j)
                .collect();
            total += pl_log_prob(&sigma_j, pool, &self.scores)?;
        }
        Ok(LogProb::Finite(total))
    }

    /// `∂ log π^fair(σ) / ∂m(d)` for every item. The assignment term does not
    /// depend on the scores and contributes nothing.
    pub fn log_prob_score_gradient(&self, outcome: &RankingOutcome) -> Result<Vec<f64>> {
        let mut grad = vec![0.0; self.n_items()];
        for (j, pool) in self.pools.iter().enumerate() {
            let sigma_j: Vec<usize> = outcome
                .ranked_items
                .iter()
                .copied()
                .filter(|&d| self.item_groups[d] == j)
                .collect();
            accumulate_pl_score_gradient(&sigma_j, pool, &self.scores, &mut grad)?;
        }
        Ok(grad)
    }

    /// Every fair ranking with its probability. Only for tiny instances.
    pub fn enumerate_support(&self) -> Result<Vec<(RankingOutcome, f64)>> {
        let n = self.n_items();
        let k = self.constraints.k;
        if n > MAX_EXACT_ITEMS || k > MAX_EXACT_K {
            return Err(Error::TooLarge(format!(
                "{n} items / k = {k} exceed {MAX_EXACT_ITEMS} / {MAX_EXACT_K}"
            )));
        }
        let all: Vec<usize> = (0..n).collect();
        let mut out = Vec::new();
        for sigma in enumerate_rankings(&all, k)? {
            let outcome = RankingOutcome::from_items(sigma, &self.item_groups)?;
            if let LogProb::Finite(lp) = self.log_prob(&outcome)? {
                out.push((outcome, lp.exp()));
            }
        }
        Ok(out)
    }

    /// Exact `R^fair(π^fair) = Σ_σ π^fair(σ) Σ_i θ_i ρ_σ(i)` by enumeration.
    pub fn exact_relevance(&self, relevance: &[f64], theta: &PositionDiscounts) -> Result<f64> {
        self.check_metric_inputs(relevance, theta)?;
        Ok(self
            .enumerate_support()?
            .iter()
            .map(|(o, p)| p * ranking_reward(&o.ranked_items, relevance, theta))
            .sum())
    }

    /// Exact score gradient of [`FairPolicy::exact_relevance`], by
    /// differentiating each enumerated term's log-probability.
    pub fn exact_relevance_gradient(&self, relevance: &[f64], theta: &PositionDiscounts) -> Result<Vec<f64>> {
        self.check_metric_inputs(relevance, theta)?;
        let mut grad = vec![0.0; self.n_items()];
        for (o, p) in self.enumerate_support()? {
            let reward = ranking_reward(&o.ranked_items, relevance, theta);
            for (g, s) in grad.iter_mut().zip(self.log_prob_score_gradient(&o)?) {
                *g += p * reward * s;
            }
        }
        Ok(grad)
    }

    pub(crate) fn check_metric_inputs(&self, relevance: &[f64], theta: &PositionDiscounts) -> Result<()> {
        if relevance.len() != self.n_items() {
            return Err(Error::LengthMismatch {
                expected: self.n_items(),
                found: relevance.len(),
            });
        }
        if theta.len() < self.constraints.k {
            return Err(Error::LengthMismatch {
                expected: self.constraints.k,
                found: theta.len(),
            });
        }
        Ok(())
    }

    /// Same policy with different scores.
    pub fn with_scores(&self, scores: ScoreVector) -> Result<Self> {
        Self::with_table(scores, self.item_groups.clone(), Arc::clone(&self.table))
    }
}

impl RankingSampler for FairPolicy {
    fn k(&self) -> usize {
        self.constraints.k
    }

    fn item_groups(&self) -> &[usize] {
        &self.item_groups
    }

    fn sample_ranking<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<RankingOutcome> {
        Ok(self.sample_draw(rng)?.outcome())
    }
}

fn validate_for_groups(c: &FairnessConstraints, item_groups: &[usize]) -> Result<FairnessConstraints> {
    let mut sizes = vec![0; c.n_groups()];
    for (d, &g) in item_groups.iter().enumerate() {
        *sizes.get_mut(g).ok_or_else(|| {
            Error::ShapeMismatch(format!(
                "item {d} has group {g}, constraints cover {} groups",
                c.n_groups()
            ))
        })? += 1;
    }
    c.validate(&sizes)
}

/// `Σ_i θ_i ρ_σ(i)`.
pub fn ranking_reward(sigma: &[usize], relevance: &[f64], theta: &PositionDiscounts) -> f64 {
    sigma
        .iter()
        .zip(theta.as_slice())
        .map(|(&d, t)| t * relevance[d])
        .sum()
}

/// Adds `∂ log π^PL(σ)/∂m(d)` for an ordered selection from `pool`.
pub(crate) fn accumulate_pl_score_gradient(
    sigma: &[usize],
    pool: &[usize],
    scores: &ScoreVector,
    grad: &mut [f64],
) -> Result<()> {
    if sigma.is_empty() {
        return Ok(());
    }
    let z = crate::pl::softmax_denominators(sigma, pool, scores)?;
    let s = scores.as_slice();
    let lz = &z.log_values;
    // Z_t Σ_{s ≤ t} 1/Z_s, bounded because Z shrinks along the ranking.
    let mut scaled_cum = Vec::with_capacity(sigma.len());
    let mut acc = 0.0;
    for t in 0..lz.len() {
        let shrink = if t == 0 { 1.0 } else { (lz[t] - lz[t - 1]).exp().min(1.0) };
        acc = acc * shrink + 1.0;
        scaled_cum.push(acc);
    }
    let last = lz.len() - 1;
    for &d in pool {
        match sigma.iter().position(|&x| x == d) {
            Some(t) => grad[d] += 1.0 - (s[d] - lz[t]).exp() * scaled_cum[t],
            None => grad[d] -= (s[d] - lz[last]).exp() * scaled_cum[last],
        }
    }
    Ok(())
}

/// Draw from plain Plackett-Luce until a ranking satisfies `c`.
/// Returns the ranking and the number of draws used.
pub fn rejection_sample_baseline<R: Rng + ?Sized>(
    scores: &ScoreVector,
    item_groups: &[usize],
    c: &FairnessConstraints,
    rng: &mut R,
    max_trials: usize,
) -> Result<(RankingOutcome, usize)> {
    if max_trials == 0 {
        return Err(Error::InvalidArgument("max_trials must be at least 1".into()));
    }
    let pool: Vec<usize> = (0..scores.len()).collect();
    for trial in 1..=max_trials {
        let sigma = pl_sample(&pool, c.k, scores, rng)?;
        let outcome = RankingOutcome::from_items(sigma, item_groups)?;
        if check_ex_post_fair(&outcome, c)? {
            return Ok((outcome, trial));
        }
    }
    Err(Error::Exhausted(max_trials))
}
