//! Stochastic gradient ascent on expected NDCG.

use std::path::Path;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::assignment::TableCache;
use crate::data::DatasetManifest;
use crate::domain::{FairnessConstraints, PositionDiscounts, QueryInstance, RelevanceSource};
use crate::error::{Error, Result};
use crate::eval::{evaluate, stream_rng, PolicyKind};
use crate::gradient::{algorithm1_gradient, plrank3_gradient};
use crate::mlp::{MlpParams, HIDDEN};
use crate::policy::FairPolicy;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    PlainPl,
    GroupFair,
}

impl TrainMode {
    pub fn policy(self) -> PolicyKind {
        match self {
            TrainMode::PlainPl => PolicyKind::PlainPl,
            TrainMode::GroupFair => PolicyKind::GroupFair,
        }
    }
}

fn default_learning_rate() -> f64 {
    0.001
}
fn default_batch_size() -> usize {
    512
}
fn default_epochs() -> usize {
    100
}
fn default_samples() -> usize {
    25
}
fn default_log_samples() -> usize {
    50
}
fn default_relevance() -> RelevanceSource {
    RelevanceSource::Observed
}
fn default_log_every() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    #[serde(default = "default_learning_rate")]
    pub learning_rate: f64,
    /// Minimum items per step; queries are never split.
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    /// Monte Carlo samples per query gradient (`M`).
    #[serde(default = "default_samples")]
    pub samples: usize,
    #[serde(default)]
    pub seed: u64,
    pub mode: TrainMode,
    /// Relevance column the objective reads.
    #[serde(default = "default_relevance")]
    pub relevance: RelevanceSource,
    /// Rankings drawn per validation query for the per-epoch log.
    #[serde(default = "default_log_samples")]
    pub log_samples: usize,
    /// Log every this many epochs (and always the last); 0 logs only the
    /// final model.
    #[serde(default = "default_log_every")]
    pub log_every: usize,
}

impl TrainConfig {
    pub fn new(mode: TrainMode, seed: u64) -> Self {
        Self {
            learning_rate: default_learning_rate(),
            batch_size: default_batch_size(),
            epochs: default_epochs(),
            samples: default_samples(),
            seed,
            mode,
            relevance: default_relevance(),
            log_samples: default_log_samples(),
            log_every: default_log_every(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.samples == 0 {
            return Err(Error::InvalidArgument("samples (M) must be at least 1".into()));
        }
        if self.batch_size == 0 || self.log_samples == 0 {
            return Err(Error::InvalidArgument("batch_size and log_samples must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub epoch: usize,
    pub split: String,
    pub ndcg_observed: f64,
    pub ndcg_true: f64,
    pub fairness_violation_rate: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutput {
    pub params: MlpParams,
    pub log: Vec<LogRow>,
}

/// Queries with their constraints; `k` is taken from the constraints.
#[derive(Debug, Clone, Copy)]
pub struct QuerySet<'a> {
    pub data: &'a DatasetManifest,
    pub constraints: &'a [FairnessConstraints],
}

impl<'a> QuerySet<'a> {
    pub fn new(data: &'a DatasetManifest, constraints: &'a [FairnessConstraints]) -> Result<Self> {
        if constraints.len() != data.queries.len() {
            return Err(Error::LengthMismatch {
                expected: data.queries.len(),
                found: constraints.len(),
            });
        }
        Ok(Self { data, constraints })
    }
}

/// `∂ NDCG / ∂m` for one query: discounts are divided by the ideal DCG of
/// the training relevance, so every query weighs the same. Queries without
/// any relevant item contribute nothing.
pub fn query_score_gradient(
    params: &MlpParams,
    q: &QueryInstance,
    c: &FairnessConstraints,
    cfg: &TrainConfig,
    cache: &TableCache,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Result<Vec<f64>> {
    let relevance = q.relevance(cfg.relevance);
    let base = PositionDiscounts::ndcg(c.k);
    let ideal = base.ideal_dcg(&relevance);
    if ideal <= 0.0 {
        return Ok(vec![0.0; q.len()]);
    }
    let theta = base.scaled(1.0 / ideal);
    let scores = params.forward_scores(q)?;
    let g = match cfg.mode {
        TrainMode::PlainPl => plrank3_gradient(&scores, &relevance, &theta, c.k, cfg.samples, rng)?,
        TrainMode::GroupFair => {
            let policy = FairPolicy::cached(scores, q.groups(), c, cache)?;
            algorithm1_gradient(&policy, &relevance, &theta, cfg.samples, rng)?
        }
    };
    Ok(g.0)
}

fn log_row(params: &MlpParams, epoch: usize, split: &str, set: QuerySet<'_>, cfg: &TrainConfig) -> Result<LogRow> {
    let s = evaluate(
        params,
        set.data,
        set.constraints,
        cfg.mode.policy(),
        cfg.log_samples,
        crate::eval::derive_seed(&[cfg.seed, 0x10c]),
    )?;
    Ok(LogRow {
        epoch,
        split: split.to_string(),
        ndcg_observed: s.ndcg_observed.mean,
        ndcg_true: s.ndcg_true.mean,
        fairness_violation_rate: s.violation_rate,
    })
}

/// Train from a seeded initialisation. The log holds one row per logged
/// epoch (epoch 0 is the initial model) on `validation`, or on the training
/// queries when no validation set is given.
pub fn train(
    train_set: QuerySet<'_>,
    cfg: &TrainConfig,
    validation: Option<QuerySet<'_>>,
) -> Result<TrainOutput> {
    let init = MlpParams::init(train_set.data.feature_dim(), &mut stream_rng(&[cfg.seed, 0x1417]));
    train_from(init, train_set, cfg, validation)
}

pub fn train_from(
    mut params: MlpParams,
    train_set: QuerySet<'_>,
    cfg: &TrainConfig,
    validation: Option<QuerySet<'_>>,
) -> Result<TrainOutput> {
    cfg.validate()?;
    let data = train_set.data;
    if data.queries.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if data.feature_dim() != params.input_dim {
        return Err(Error::DimMismatch {
            expected: params.input_dim,
            found: data.feature_dim(),
        });
    }
    let cache = TableCache::new();
    // Surface infeasible or mis-sized constraints before any work.
    for (q, c) in data.queries.iter().zip(train_set.constraints) {
        if c.k > q.len() {
            return Err(Error::SlotsExceedPool {
                slots: c.k,
                pool: q.len(),
            });
        }
        if cfg.mode == TrainMode::GroupFair {
            cache.get(&c.validate(&q.group_sizes)?)?;
        }
    }
    let (log_split, log_set) = match validation {
        Some(v) => ("validation", v),
        None => ("train", train_set),
    };

    let mut log = Vec::with_capacity(cfg.epochs + 1);
    if cfg.log_every > 0 {
        log.push(log_row(&params, 0, log_split, log_set, cfg)?);
    }
    let mut order: Vec<usize> = (0..data.queries.len()).collect();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut stream_rng(&[cfg.seed, epoch as u64, u64::MAX]));
        let mut start = 0;
        let mut batch_no = 0;
        while start < order.len() {
            let mut end = start;
            let mut items = 0;
            while end < order.len() && items < cfg.batch_size {
                items += data.queries[order[end]].len();
                end += 1;
            }
            let batch = &order[start..end];
            let snapshot = &params;
            let grads = batch
                .par_iter()
                .map(|&qi| {
                    let q = &data.queries[qi];
                    let mut rng = stream_rng(&[cfg.seed, epoch as u64, qi as u64]);
                    let up = query_score_gradient(snapshot, q, &train_set.constraints[qi], cfg, &cache, &mut rng)?;
                    snapshot.backward_chain(q, &up)
                })
                .collect::<Result<Vec<_>>>()?;
            let mut total = MlpParams::zeros(params.input_dim);
            for g in &grads {
                total.add_scaled(g, 1.0);
            }
            if !total.is_finite() {
                return Err(Error::NonFiniteLoss(format!(
                    "epoch {epoch}, batch {batch_no}: gradient has non-finite entries (parameter norm {:.3e})",
                    params.norm()
                )));
            }
            params.add_scaled(&total, cfg.learning_rate);
            if !params.is_finite() {
                return Err(Error::NonFiniteLoss(format!(
                    "epoch {epoch}, batch {batch_no}: parameters diverged after a step of norm {:.3e}",
                    total.norm() * cfg.learning_rate
                )));
            }
            start = end;
            batch_no += 1;
        }
        let due = cfg.log_every > 0 && epoch % cfg.log_every == 0;
        if due || epoch == cfg.epochs {
            log.push(log_row(&params, epoch, log_split, log_set, cfg)?);
        }
    }
    Ok(TrainOutput { params, log })
}

pub const CHECKPOINT_FORMAT: &str = "fairpl-mlp";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub input_dim: usize,
    pub hidden: usize,
    pub mode: TrainMode,
    pub params: MlpParams,
}

impl Checkpoint {
    pub fn new(params: MlpParams, mode: TrainMode) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            input_dim: params.input_dim,
            hidden: HIDDEN,
            mode,
            params,
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ck: Checkpoint = serde_json::from_str(&text)
            .map_err(|e| Error::IncompatibleCheckpoint(format!("{}: {e}", path.display())))?;
        ck.check_shape()?;
        Ok(ck)
    }

    fn check_shape(&self) -> Result<()> {
        if self.format != CHECKPOINT_FORMAT || self.version != CHECKPOINT_VERSION {
            return Err(Error::IncompatibleCheckpoint(format!(
                "expected {CHECKPOINT_FORMAT} v{CHECKPOINT_VERSION}, found {} v{}",
                self.format, self.version
            )));
        }
        let p = &self.params;
        let f = self.input_dim;
        let shapes_ok = self.hidden == HIDDEN
            && p.input_dim == f
            && p.w1.len() == f * HIDDEN
            && p.b1.len() == HIDDEN
            && p.w2.len() == HIDDEN * HIDDEN
            && p.b2.len() == HIDDEN
            && p.w3.len() == HIDDEN;
        if !shapes_ok {
            return Err(Error::IncompatibleCheckpoint("parameter shapes do not match the header".into()));
        }
        Ok(())
    }

    /// The model must read the dataset's feature dimension.
    pub fn check_dataset(&self, data: &DatasetManifest) -> Result<()> {
        if data.feature_dim() != self.input_dim {
            return Err(Error::IncompatibleCheckpoint(format!(
                "checkpoint expects {} features, dataset has {}",
                self.input_dim,
                data.feature_dim()
            )));
        }
        Ok(())
    }
}

pub fn write_log_csv(log: &[LogRow], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    for row in log {
        w.serialize(row).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub(crate) fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::io(path, std::io::Error::other(e))
}
