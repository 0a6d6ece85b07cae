//! Shared domain types and the representation-constraint algebra.
//!
//! Groups are indexed from zero inside the library. Text formats that carry a
//! group id (the `gid:` token of ranking files) use one-based ids and are
//! translated at the I/O boundary.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which relevance column a metric or trainer reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RelevanceSource {
    True,
    Observed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Item {
    pub item_id: String,
    pub features: Vec<f64>,
    /// Raw label as read from disk; `relevance_true = label / max_label`.
    pub label: f64,
    pub relevance_true: f64,
    pub relevance_observed: f64,
    pub group: usize,
}

impl Item {
    pub fn relevance(&self, source: RelevanceSource) -> f64 {
        match source {
            RelevanceSource::True => self.relevance_true,
            RelevanceSource::Observed => self.relevance_observed,
        }
    }
}

/// One query's candidate set. Item positions in `items` double as the item
/// indices used by the samplers and gradient code.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryInstance {
    pub query_id: String,
    pub items: Vec<Item>,
    pub group_sizes: Vec<usize>,
}

impl QueryInstance {
    pub fn new(query_id: impl Into<String>, items: Vec<Item>, n_groups: usize) -> Result<Self> {
        let query_id = query_id.into();
        let mut group_sizes = vec![0; n_groups];
        let mut seen = HashSet::with_capacity(items.len());
        for item in &items {
            if item.group >= n_groups {
                return Err(Error::InvalidArgument(format!(
                    "query {query_id}: item {} has group {} but only {n_groups} groups exist",
                    item.item_id, item.group
                )));
            }
            if !seen.insert(item.item_id.as_str()) {
                return Err(Error::InvalidArgument(format!(
                    "query {query_id}: duplicate item id {}",
                    item.item_id
                )));
            }
            group_sizes[item.group] += 1;
        }
        Ok(Self {
            query_id,
            items,
            group_sizes,
        })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn n_groups(&self) -> usize {
        self.group_sizes.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.items.first().map_or(0, |it| it.features.len())
    }

    pub fn groups(&self) -> Vec<usize> {
        self.items.iter().map(|it| it.group).collect()
    }

    pub fn relevance(&self, source: RelevanceSource) -> Vec<f64> {
        self.items.iter().map(|it| it.relevance(source)).collect()
    }

    /// Item indices of each group, in item order.
    pub fn group_pools(&self) -> Vec<Vec<usize>> {
        let mut pools = vec![Vec::new(); self.n_groups()];
        for (idx, item) in self.items.iter().enumerate() {
            pools[item.group].push(idx);
        }
        pools
    }

    /// Per-group item-count fractions of this candidate set.
    pub fn proportions(&self) -> Vec<f64> {
        let n = self.len().max(1) as f64;
        self.group_sizes.iter().map(|&s| s as f64 / n).collect()
    }
}

/// Lower and upper bounds on how many items of each group appear in the top k.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FairnessConstraints {
    pub k: usize,
    pub lower: Vec<usize>,
    pub upper: Vec<usize>,
}

impl FairnessConstraints {
    pub fn new(k: usize, lower: Vec<usize>, upper: Vec<usize>) -> Result<Self> {
        if k == 0 {
            return Err(Error::InvalidArgument("ranking length k must be positive".into()));
        }
        if lower.len() != upper.len() || lower.is_empty() {
            return Err(Error::ShapeMismatch(format!(
                "{} lower bounds vs {} upper bounds",
                lower.len(),
                upper.len()
            )));
        }
        for (j, (&l, &u)) in lower.iter().zip(&upper).enumerate() {
            if l > u {
                return Err(Error::Infeasible(format!("group {j}: lower {l} > upper {u}")));
            }
            if u > k {
                return Err(Error::Infeasible(format!("group {j}: upper {u} > k = {k}")));
            }
        }
        let c = Self { k, lower, upper };
        c.check_feasible_sums()?;
        Ok(c)
    }

    /// `L = 0`, `U = k` for every group.
    pub fn vacuous(k: usize, n_groups: usize) -> Self {
        Self {
            k,
            lower: vec![0; n_groups],
            upper: vec![k; n_groups],
        }
    }

    pub fn n_groups(&self) -> usize {
        self.lower.len()
    }

    pub fn is_vacuous(&self) -> bool {
        self.lower.iter().all(|&l| l == 0) && self.upper.iter().all(|&u| u >= self.k)
    }

    fn check_feasible_sums(&self) -> Result<()> {
        let lo: usize = self.lower.iter().sum();
        let hi: usize = self.upper.iter().sum();
        if lo > self.k {
            return Err(Error::Infeasible(format!(
                "sum of lower bounds {lo} exceeds k = {}",
                self.k
            )));
        }
        if hi < self.k {
            return Err(Error::Infeasible(format!(
                "sum of upper bounds {hi} is below k = {}",
                self.k
            )));
        }
        Ok(())
    }

    /// Bounds `(p_j ± delta)·k`, floored below and ceiled above.
    ///
    /// Products within `1e-9` of an integer are snapped to it first so that
    /// representation error such as `0.3 * 10 = 3.0000000000000004` does not
    /// widen the band.
    pub fn from_delta(proportions: &[f64], delta: f64, k: usize) -> Result<Self> {
        if proportions.is_empty() {
            return Err(Error::InvalidArgument("no group proportions".into()));
        }
        if !(delta >= 0.0) {
            return Err(Error::InvalidArgument(format!("delta must be >= 0, got {delta}")));
        }
        if proportions.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::InvalidArgument("proportions must lie in [0, 1]".into()));
        }
        let total: f64 = proportions.iter().sum();
        if (total - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidArgument(format!(
                "proportions sum to {total}, expected 1"
            )));
        }
        let kf = k as f64;
        let snap = |x: f64| {
            let r = x.round();
            if (x - r).abs() < 1e-9 {
                r
            } else {
                x
            }
        };
        let lower = proportions
            .iter()
            .map(|p| snap((p - delta) * kf).floor().max(0.0) as usize)
            .collect::<Vec<_>>();
        let upper = proportions
            .iter()
            .map(|p| (snap((p + delta) * kf).ceil() as usize).min(k))
            .collect::<Vec<_>>();
        let c = Self::new(k, lower, upper);
        debug_assert!(c.is_ok(), "delta-derived bounds are always feasible");
        c
    }

    /// Clamp each upper bound to the group's size and confirm feasibility.
    pub fn validate(&self, group_sizes: &[usize]) -> Result<Self> {
        if group_sizes.len() != self.n_groups() {
            return Err(Error::ShapeMismatch(format!(
                "constraints cover {} groups, query has {}",
                self.n_groups(),
                group_sizes.len()
            )));
        }
        for (j, (&l, &size)) in self.lower.iter().zip(group_sizes).enumerate() {
            if l > size {
                return Err(Error::GroupTooSmall {
                    group: j,
                    lower: l,
                    size,
                });
            }
        }
        let upper = self
            .upper
            .iter()
            .zip(group_sizes)
            .map(|(&u, &s)| u.min(s))
            .collect();
        Self::new(self.k, self.lower.clone(), upper)
    }

    /// Whether a per-group count vector satisfies every bound and sums to k.
    pub fn admits_counts(&self, counts: &[usize]) -> bool {
        counts.len() == self.n_groups()
            && counts.iter().sum::<usize>() == self.k
            && counts
                .iter()
                .zip(self.lower.iter().zip(&self.upper))
                .all(|(&x, (&l, &u))| l <= x && x <= u)
    }
}

/// Group label of each of the top-k ranks.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GroupAssignment(pub Vec<usize>);

impl GroupAssignment {
    pub fn slots(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn counts(&self, n_groups: usize) -> Vec<usize> {
        let mut counts = vec![0; n_groups];
        for &g in &self.0 {
            if g < n_groups {
                counts[g] += 1;
            }
        }
        counts
    }

    /// Ranks assigned to each group, ascending.
    pub fn positions(&self, n_groups: usize) -> Vec<Vec<usize>> {
        let mut pos = vec![Vec::new(); n_groups];
        for (rank, &g) in self.0.iter().enumerate() {
            pos[g].push(rank);
        }
        pos
    }
}

/// A realised top-k ranking of item indices and its group assignment.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RankingOutcome {
    pub ranked_items: Vec<usize>,
    pub assignment: GroupAssignment,
}

impl RankingOutcome {
    /// Build from ranked item indices; `item_groups[d]` is item d's group.
    pub fn from_items(ranked_items: Vec<usize>, item_groups: &[usize]) -> Result<Self> {
        let mut seen = HashSet::with_capacity(ranked_items.len());
        let mut slots = Vec::with_capacity(ranked_items.len());
        for &d in &ranked_items {
            let g = *item_groups.get(d).ok_or(Error::ItemNotInPool(d))?;
            if !seen.insert(d) {
                return Err(Error::DuplicateItem(d));
            }
            slots.push(g);
        }
        Ok(Self {
            ranked_items,
            assignment: GroupAssignment(slots),
        })
    }

    pub fn len(&self) -> usize {
        self.ranked_items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ranked_items.is_empty()
    }
}

/// True iff every group's count in `outcome` lies within its bounds.
pub fn check_ex_post_fair(outcome: &RankingOutcome, c: &FairnessConstraints) -> Result<bool> {
    if outcome.len() != c.k {
        return Err(Error::LengthMismatch {
            expected: c.k,
            found: outcome.len(),
        });
    }
    if outcome.assignment.slots().iter().any(|&g| g >= c.n_groups()) {
        return Ok(false);
    }
    Ok(c.admits_counts(&outcome.assignment.counts(c.n_groups())))
}

/// Per-rank weights of the relevance metric.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PositionDiscounts(Vec<f64>);

impl PositionDiscounts {
    pub fn new(theta: Vec<f64>) -> Result<Self> {
        if theta.iter().any(|t| !(t.is_finite() && *t >= 0.0)) {
            return Err(Error::InvalidArgument(
                "position discounts must be finite and non-negative".into(),
            ));
        }
        Ok(Self(theta))
    }

    /// `1 / log2(i + 1)` for ranks `i = 1..=k`.
    pub fn ndcg(k: usize) -> Self {
        Self((1..=k).map(|i| 1.0 / ((i + 1) as f64).log2()).collect())
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

    pub fn scaled(&self, factor: f64) -> Self {
        Self(self.0.iter().map(|t| t * factor).collect())
    }

    /// Best achievable `Σ θ_i ρ_(i)` over the whole pool, ignoring constraints.
    pub fn ideal_dcg(&self, relevance: &[f64]) -> f64 {
        let mut rel = relevance.to_vec();
        rel.sort_by(|a, b| b.total_cmp(a));
        self.0.iter().zip(&rel).map(|(t, r)| t * r).sum()
    }
}
