//! Dataset-level evaluation of trained scorers under each ranking policy.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::assignment::TableCache;
use crate::data::DatasetManifest;
use crate::domain::{check_ex_post_fair, FairnessConstraints, PositionDiscounts, QueryInstance, RelevanceSource};
use crate::error::{Error, Result};
use crate::metrics::{ndcg_of_ranking, Estimate, MeanAccumulator};
use crate::mlp::MlpParams;
use crate::pl::ScoreVector;
use crate::policy::{FairPolicy, PlPolicy, RankingSampler};
use crate::postprocess::{gak19_detgreedy, FixedRanking, Gdl22Policy};

/// How a score vector becomes rankings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    /// Plackett-Luce over all items.
    PlainPl,
    /// Fair assignment, then Plackett-Luce within groups.
    GroupFair,
    /// Fair assignment, then groups filled in score order.
    Gdl22,
    /// Deterministic greedy re-ranking.
    Gak19,
}

/// splitmix64 over a sequence of words; used to give every
/// (seed, epoch, query, ...) its own random stream.
pub fn derive_seed(parts: &[u64]) -> u64 {
    let mut h: u64 = 0x9E37_79B9_7F4A_7C15;
    for &p in parts {
        h ^= p.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_add(h << 6).wrapping_add(h >> 2);
        let mut z = h.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h = z ^ (z >> 31);
    }
    h
}

pub fn stream_rng(parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(parts))
}

/// Sampling totals for one query.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryEval {
    pub ndcg_true: f64,
    pub ndcg_observed: f64,
    pub violations: usize,
    pub samples: usize,
    /// `hits[j][i]`: rankings with a group-`j` item at rank `i`.
    pub hits: Vec<Vec<usize>>,
}

pub fn evaluate_sampler<S: RankingSampler>(
    sampler: &S,
    q: &QueryInstance,
    c: &FairnessConstraints,
    n_samples: usize,
    rng: &mut ChaCha8Rng,
) -> Result<QueryEval> {
    if n_samples == 0 {
        return Err(Error::InvalidArgument("n_samples must be at least 1".into()));
    }
    let k = sampler.k();
    let theta = PositionDiscounts::ndcg(k);
    let rel_true = q.relevance(RelevanceSource::True);
    let rel_obs = q.relevance(RelevanceSource::Observed);
    let mut hits = vec![vec![0usize; k]; q.n_groups()];
    let (mut nt, mut no, mut bad) = (0.0, 0.0, 0usize);
    for _ in 0..n_samples {
        let o = sampler.sample_ranking(rng)?;
        nt += ndcg_of_ranking(&o.ranked_items, &rel_true, &theta)?;
        no += ndcg_of_ranking(&o.ranked_items, &rel_obs, &theta)?;
        if !check_ex_post_fair(&o, c)? {
            bad += 1;
        }
        for (i, &g) in o.assignment.slots().iter().enumerate() {
            hits[g][i] += 1;
        }
    }
    Ok(QueryEval {
        ndcg_true: nt / n_samples as f64,
        ndcg_observed: no / n_samples as f64,
        violations: bad,
        samples: n_samples,
        hits,
    })
}

/// Evaluate one query's scores under `kind`.
pub fn evaluate_scores(
    kind: PolicyKind,
    scores: ScoreVector,
    q: &QueryInstance,
    c: &FairnessConstraints,
    n_samples: usize,
    cache: &TableCache,
    rng: &mut ChaCha8Rng,
) -> Result<QueryEval> {
    let groups = q.groups();
    match kind {
        PolicyKind::PlainPl => evaluate_sampler(&PlPolicy::new(scores, groups, c.k)?, q, c, n_samples, rng),
        PolicyKind::GroupFair => {
            evaluate_sampler(&FairPolicy::cached(scores, groups, c, cache)?, q, c, n_samples, rng)
        }
        PolicyKind::Gdl22 => evaluate_sampler(&Gdl22Policy::new(&scores, groups, c)?, q, c, n_samples, rng),
        PolicyKind::Gak19 => {
            let fixed = FixedRanking::new(gak19_detgreedy(&scores, &groups, c)?, groups);
            // Deterministic: one draw carries all the information.
            let mut e = evaluate_sampler(&fixed, q, c, 1, rng)?;
            e.violations *= n_samples;
            e.samples = n_samples;
            e.hits.iter_mut().flatten().for_each(|h| *h *= n_samples);
            Ok(e)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    /// Mean over queries of each query's expected NDCG; the standard error
    /// is taken across queries.
    pub ndcg_true: Estimate,
    pub ndcg_observed: Estimate,
    pub violation_rate: f64,
    /// `group_fraction[j][i]`: share of sampled rankings (over all queries
    /// long enough to have rank `i`) with a group-`j` item at rank `i`.
    pub group_fraction: Vec<Vec<f64>>,
    pub n_queries: usize,
    pub n_samples: usize,
}

pub fn summarize(evals: &[QueryEval], n_groups: usize) -> EvalSummary {
    let ndcg_true: MeanAccumulator = evals.iter().map(|e| e.ndcg_true).collect();
    let ndcg_observed: MeanAccumulator = evals.iter().map(|e| e.ndcg_observed).collect();
    let total: usize = evals.iter().map(|e| e.samples).sum();
    let bad: usize = evals.iter().map(|e| e.violations).sum();
    let max_k = evals.iter().map(|e| e.hits.first().map_or(0, Vec::len)).max().unwrap_or(0);
    let mut denom = vec![0usize; max_k];
    let mut num = vec![vec![0usize; max_k]; n_groups];
    for e in evals {
        let k = e.hits.first().map_or(0, Vec::len);
        denom[..k].iter_mut().for_each(|d| *d += e.samples);
        for (j, row) in e.hits.iter().enumerate() {
            for (i, &h) in row.iter().enumerate() {
                num[j][i] += h;
            }
        }
    }
    let group_fraction = num
        .into_iter()
        .map(|row| {
            row.into_iter()
                .zip(&denom)
                .map(|(h, &d)| if d == 0 { 0.0 } else { h as f64 / d as f64 })
                .collect()
        })
        .collect();
    EvalSummary {
        ndcg_true: ndcg_true.estimate(),
        ndcg_observed: ndcg_observed.estimate(),
        violation_rate: if total == 0 { 0.0 } else { bad as f64 / total as f64 },
        group_fraction,
        n_queries: evals.len(),
        n_samples: total,
    }
}

/// Score every query with `params` and evaluate it under `kind`. Query `i`
/// draws from the stream `(seed, i)`, so results do not depend on the
/// number of worker threads.
pub fn evaluate(
    params: &MlpParams,
    data: &DatasetManifest,
    constraints: &[FairnessConstraints],
    kind: PolicyKind,
    n_samples: usize,
    seed: u64,
) -> Result<EvalSummary> {
    if constraints.len() != data.queries.len() {
        return Err(Error::LengthMismatch {
            expected: data.queries.len(),
            found: constraints.len(),
        });
    }
    let cache = TableCache::new();
    let evals = data
        .queries
        .par_iter()
        .zip(constraints)
        .enumerate()
        .map(|(i, (q, c))| {
            let scores = params.forward_scores(q)?;
            let mut rng = stream_rng(&[seed, i as u64]);
            evaluate_scores(kind, scores, q, c, n_samples, &cache, &mut rng)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(summarize(&evals, data.n_groups()))
}
