//! Bias sweeps: train every requested model for each (β, run) cell,
//! evaluate it on held-out queries and aggregate over runs.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::fs::OpenOptions;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Mutex;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{inject_bias, parse_ranking_file_with, split_train_test, synth_generate, BiasSpec, DatasetManifest, ParseOptions, SynthSpec};
use crate::domain::{FairnessConstraints, RelevanceSource};
use crate::error::{Error, Result};
use crate::eval::{derive_seed, evaluate, EvalSummary, PolicyKind};
use crate::metrics::{MeanAccumulator, MetricRow};
use crate::mlp::MlpParams;
use crate::train::{csv_err, train, QuerySet, TrainConfig, TrainMode};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "plain_pl")]
    PlainPl,
    #[serde(rename = "group_fair")]
    GroupFair,
    #[serde(rename = "plain_pl+gdl22")]
    PlainPlGdl22,
    #[serde(rename = "plain_pl+gak19")]
    PlainPlGak19,
    #[serde(rename = "plain_pl_true")]
    PlainPlTrue,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::PlainPl,
        Method::GroupFair,
        Method::PlainPlGdl22,
        Method::PlainPlGak19,
        Method::PlainPlTrue,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::PlainPl => "plain_pl",
            Method::GroupFair => "group_fair",
            Method::PlainPlGdl22 => "plain_pl+gdl22",
            Method::PlainPlGak19 => "plain_pl+gak19",
            Method::PlainPlTrue => "plain_pl_true",
        }
    }

    /// The model a method ranks with; post-processors reuse the plain model.
    pub fn model(self) -> ModelSpec {
        match self {
            Method::GroupFair => ModelSpec {
                mode: TrainMode::GroupFair,
                relevance: RelevanceSource::Observed,
            },
            Method::PlainPlTrue => ModelSpec {
                mode: TrainMode::PlainPl,
                relevance: RelevanceSource::True,
            },
            _ => ModelSpec {
                mode: TrainMode::PlainPl,
                relevance: RelevanceSource::Observed,
            },
        }
    }

    pub fn policy(self) -> PolicyKind {
        match self {
            Method::PlainPl | Method::PlainPlTrue => PolicyKind::PlainPl,
            Method::GroupFair => PolicyKind::GroupFair,
            Method::PlainPlGdl22 => PolicyKind::Gdl22,
            Method::PlainPlGak19 => PolicyKind::Gak19,
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown method {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ModelSpec {
    pub mode: TrainMode,
    pub relevance: RelevanceSource,
}

/// Where the queries come from: a ranking file (optionally with a separate
/// test file) or the synthetic generator.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    #[serde(default)]
    pub path: Option<PathBuf>,
    #[serde(default)]
    pub test_path: Option<PathBuf>,
    #[serde(default)]
    pub max_label: Option<u32>,
    #[serde(default)]
    pub synthetic: Option<SynthSpec>,
}

impl DatasetConfig {
    /// Resolve relative paths against `base`.
    pub fn resolve(&mut self, base: &Path) {
        for p in [&mut self.path, &mut self.test_path].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }
}

fn d_k() -> usize {
    10
}
fn d_delta() -> f64 {
    0.05
}
fn d_samples() -> usize {
    25
}
fn d_epochs() -> usize {
    100
}
fn d_lr() -> f64 {
    0.001
}
fn d_batch() -> usize {
    512
}
fn d_fraction() -> f64 {
    0.8
}
fn d_eval_samples() -> usize {
    100
}
fn d_beta() -> Vec<f64> {
    vec![1.0]
}
fn d_methods() -> Vec<Method> {
    Method::ALL.to_vec()
}
fn d_runs() -> usize {
    10
}
fn d_mode() -> TrainMode {
    TrainMode::GroupFair
}
fn d_bias() -> f64 {
    1.0
}
fn d_log_every() -> usize {
    1
}
fn d_log_samples() -> usize {
    50
}

/// JSON configuration shared by every command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetConfig,
    #[serde(default = "d_k")]
    pub k: usize,
    #[serde(default = "d_delta")]
    pub delta: f64,
    /// `M`, Monte Carlo samples per query gradient.
    #[serde(default = "d_samples")]
    pub samples: usize,
    #[serde(default = "d_epochs")]
    pub epochs: usize,
    #[serde(default = "d_lr")]
    pub learning_rate: f64,
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "d_fraction")]
    pub train_fraction: f64,
    /// Rankings drawn per test query when evaluating.
    #[serde(default = "d_eval_samples")]
    pub eval_samples: usize,
    /// Training mode for `train`.
    #[serde(default = "d_mode")]
    pub mode: TrainMode,
    /// Bias multiplier for `train`/`eval`/`sample`.
    #[serde(default = "d_bias")]
    pub bias: f64,
    /// One-based group that receives the bias; the minority by default.
    #[serde(default)]
    pub bias_group: Option<usize>,
    /// Bias grid for `experiment`.
    #[serde(default = "d_beta")]
    pub beta: Vec<f64>,
    #[serde(default = "d_methods")]
    pub methods: Vec<Method>,
    #[serde(default = "d_runs")]
    pub runs: usize,
    #[serde(default = "d_log_every")]
    pub log_every: usize,
    #[serde(default = "d_log_samples")]
    pub log_samples: usize,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_json(&text)?;
        if let Some(base) = path.parent() {
            cfg.dataset.resolve(base);
        }
        Ok(cfg)
    }

    pub fn train_config(&self, model: ModelSpec, seed: u64) -> TrainConfig {
        TrainConfig {
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            epochs: self.epochs,
            samples: self.samples,
            seed,
            mode: model.mode,
            relevance: model.relevance,
            log_samples: self.log_samples,
            log_every: self.log_every,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::InvalidArgument("k must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.delta) {
            return Err(Error::InvalidArgument(format!("delta {} outside [0, 1]", self.delta)));
        }
        if self.runs == 0 || self.eval_samples == 0 {
            return Err(Error::InvalidArgument("runs and eval_samples must be positive".into()));
        }
        if self.methods.is_empty() || self.beta.is_empty() {
            return Err(Error::InvalidArgument("methods and beta must be non-empty".into()));
        }
        BiasSpec::new(self.beta.clone())?;
        BiasSpec::new(vec![self.bias])?;
        Ok(())
    }
}

/// Train/test queries plus the full-data group proportions the bounds use.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentData {
    pub train: DatasetManifest,
    pub test: DatasetManifest,
    pub proportions: Vec<f64>,
}

impl ExperimentData {
    pub fn name(&self) -> &str {
        &self.train.name
    }

    pub fn minority_group(&self) -> usize {
        self.train.minority_group
    }

    pub fn bias_group(&self, cfg: &ExperimentConfig) -> Result<usize> {
        match cfg.bias_group {
            None => Ok(self.minority_group()),
            Some(g) if (1..=self.train.n_groups()).contains(&g) => Ok(g - 1),
            Some(g) => Err(Error::InvalidArgument(format!(
                "bias_group {g} outside 1..={}",
                self.train.n_groups()
            ))),
        }
    }

    pub fn constraints(&self, data: &DatasetManifest, cfg: &ExperimentConfig) -> Result<Vec<FairnessConstraints>> {
        data.constraints_for(&self.proportions, cfg.k, cfg.delta)
    }

    /// Both splits with `beta` applied to the bias group.
    pub fn biased(&self, cfg: &ExperimentConfig, beta: f64) -> Result<ExperimentData> {
        let spec = BiasSpec::on_group(self.train.n_groups(), self.bias_group(cfg)?, beta)?;
        Ok(ExperimentData {
            train: inject_bias(&self.train, &spec)?,
            test: inject_bias(&self.test, &spec)?,
            proportions: self.proportions.clone(),
        })
    }
}

fn merged(a: &DatasetManifest, b: &DatasetManifest) -> DatasetManifest {
    let mut m = a.clone();
    m.queries.extend(b.queries.iter().cloned());
    m
}

pub fn load_data(cfg: &ExperimentConfig) -> Result<ExperimentData> {
    let ds = &cfg.dataset;
    let opts = ParseOptions {
        max_label: ds.max_label,
        ..Default::default()
    };
    let full = match (&ds.path, &ds.synthetic) {
        (Some(path), None) => parse_ranking_file_with(path, &opts)?,
        (None, Some(spec)) => synth_generate(spec)?,
        (Some(_), Some(_)) => {
            return Err(Error::InvalidArgument(
                "config fields `dataset.path` and `dataset.synthetic` are mutually exclusive".into(),
            ))
        }
        (None, None) => {
            return Err(Error::InvalidArgument(
                "config field `dataset.path` is missing (or give `dataset.synthetic`)".into(),
            ))
        }
    };
    let (train, test) = match &ds.test_path {
        Some(tp) => {
            let opts = ParseOptions {
                max_label: Some(full.max_label),
                n_groups: Some(full.n_groups()),
                ..Default::default()
            };
            let test = parse_ranking_file_with(tp, &opts)?;
            if test.feature_dim() != full.feature_dim() {
                return Err(Error::DimMismatch {
                    expected: full.feature_dim(),
                    found: test.feature_dim(),
                });
            }
            (full, test)
        }
        None => split_train_test(&full, cfg.train_fraction, derive_seed(&[cfg.seed, 0x5911]))?,
    };
    let proportions = merged(&train, &test).group_proportions();
    Ok(ExperimentData { train, test, proportions })
}

/// One raw per-run measurement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub dataset: String,
    pub method: Method,
    pub beta: f64,
    pub run: usize,
    pub metric: String,
    pub rank_or_epoch: Option<usize>,
    pub value: f64,
}

fn summary_rows(
    dataset: &str,
    method: Method,
    beta: f64,
    run: usize,
    s: &EvalSummary,
    minority: usize,
) -> Vec<ResultRow> {
    let row = |metric: &str, rank: Option<usize>, value: f64| ResultRow {
        dataset: dataset.to_string(),
        method,
        beta,
        run,
        metric: metric.to_string(),
        rank_or_epoch: rank,
        value,
    };
    let mut out = vec![
        row("ndcg_true", None, s.ndcg_true.mean),
        row("ndcg_observed", None, s.ndcg_observed.mean),
        row("fairness_violation_rate", None, s.violation_rate),
    ];
    if let Some(fr) = s.group_fraction.get(minority) {
        out.extend(fr.iter().enumerate().map(|(i, &v)| row("minority_fraction", Some(i + 1), v)));
    }
    out
}

/// Train the models `methods` need for one (β, run) cell and evaluate
/// each method on the test queries.
pub fn run_cell(
    cfg: &ExperimentConfig,
    base: &ExperimentData,
    beta: f64,
    run: usize,
    methods: &[Method],
) -> Result<Vec<(Method, EvalSummary)>> {
    let data = base.biased(cfg, beta)?;
    let train_c = data.constraints(&data.train, cfg)?;
    let test_c = data.constraints(&data.test, cfg)?;
    let train_set = QuerySet::new(&data.train, &train_c)?;
    // Same initialisation and sampling streams for every model of a run.
    let seed = derive_seed(&[cfg.seed, run as u64]);
    let mut models: BTreeMap<ModelSpec, MlpParams> = BTreeMap::new();
    for m in methods {
        let spec = m.model();
        if let std::collections::btree_map::Entry::Vacant(e) = models.entry(spec) {
            let mut tc = cfg.train_config(spec, seed);
            tc.log_every = 0;
            e.insert(train(train_set, &tc, None)?.params);
        }
    }
    let eval_seed = derive_seed(&[seed, 0xe7a1]);
    methods
        .iter()
        .map(|&m| {
            let s = evaluate(&models[&m.model()], &data.test, &test_c, m.policy(), cfg.eval_samples, eval_seed)?;
            Ok((m, s))
        })
        .collect()
}

type CellKey = (u64, Method, usize);

fn key_of(beta: f64, method: Method, run: usize) -> CellKey {
    (beta.to_bits(), method, run)
}

fn key_line(beta: f64, method: Method, run: usize) -> String {
    format!("{beta},{method},{run}")
}

fn parse_key(line: &str) -> Option<CellKey> {
    let mut parts = line.trim().split(',');
    let beta: f64 = parts.next()?.parse().ok()?;
    let method: Method = parts.next()?.parse().ok()?;
    let run: usize = parts.next()?.parse().ok()?;
    Some(key_of(beta, method, run))
}

fn read_rows(path: &Path) -> Result<Vec<ResultRow>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    r.deserialize().map(|row| row.map_err(|e| csv_err(path, e))).collect()
}

const RESULT_HEADER: [&str; 7] = ["dataset", "method", "beta", "run", "metric", "rank_or_epoch", "value"];

fn write_rows(path: &Path, rows: &[ResultRow]) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(|e| csv_err(path, e))?;
    w.write_record(RESULT_HEADER).map_err(|e| csv_err(path, e))?;
    for row in rows {
        w.serialize(row).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Mean and standard error over runs of each (method, β, metric, rank).
pub fn aggregate(rows: &[ResultRow]) -> Vec<MetricRow> {
    let mut groups: BTreeMap<(String, Method, u64, String, Option<usize>), MeanAccumulator> = BTreeMap::new();
    for r in rows {
        groups
            .entry((r.dataset.clone(), r.method, r.beta.to_bits(), r.metric.clone(), r.rank_or_epoch))
            .or_default()
            .push(r.value);
    }
    let mut out: Vec<MetricRow> = groups
        .into_iter()
        .map(|((dataset, method, beta, metric, rank), acc)| MetricRow {
            dataset,
            method: method.to_string(),
            beta: f64::from_bits(beta),
            metric,
            rank_or_epoch: rank,
            value: acc.mean(),
            stderr: acc.stderr(),
        })
        .collect();
    out.sort_by(|a, b| {
        a.beta
            .total_cmp(&b.beta)
            .then_with(|| a.method.cmp(&b.method))
            .then_with(|| a.metric.cmp(&b.metric))
            .then_with(|| a.rank_or_epoch.cmp(&b.rank_or_epoch))
    });
    out
}

#[derive(Debug, Clone, Serialize)]
pub struct ExperimentMeta {
    pub dataset: String,
    pub aggregation: &'static str,
    pub gak19_parameterization: &'static str,
    pub bounds: &'static str,
    pub proportions: Vec<f64>,
    pub bias_group: usize,
    pub lower_band: f64,
    pub upper_band: f64,
    pub completed_cells: usize,
    pub config: ExperimentConfig,
}

#[derive(Debug, Clone)]
pub struct ExperimentOutput {
    pub rows: Vec<ResultRow>,
    pub summary: Vec<MetricRow>,
    /// Cells skipped because an earlier invocation finished them.
    pub resumed: usize,
}

pub const RESULTS_FILE: &str = "results.csv";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const PROGRESS_FILE: &str = "completed.txt";
pub const META_FILE: &str = "results.meta.json";

/// Run the full sweep into `out_dir`. Finished (β, method, run) cells are
/// recorded as they complete; a rerun skips them.
pub fn run_experiment(cfg: &ExperimentConfig, out_dir: &Path) -> Result<ExperimentOutput> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let base = load_data(cfg)?;
    let results_path = out_dir.join(RESULTS_FILE);
    let progress_path = out_dir.join(PROGRESS_FILE);

    let done: BTreeSet<CellKey> = match std::fs::read_to_string(&progress_path) {
        Ok(text) => text.lines().filter_map(parse_key).collect(),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => BTreeSet::new(),
        Err(e) => return Err(Error::io(&progress_path, e)),
    };
    // Rows of unfinished cells may be partial; drop them.
    let kept: Vec<ResultRow> = read_rows(&results_path)?
        .into_iter()
        .filter(|r| done.contains(&key_of(r.beta, r.method, r.run)))
        .collect();
    write_rows(&results_path, &kept)?;

    let mut cells: Vec<(f64, usize, Vec<Method>)> = Vec::new();
    let mut resumed = 0;
    for &beta in &cfg.beta {
        for run in 0..cfg.runs {
            let pending: Vec<Method> = cfg
                .methods
                .iter()
                .copied()
                .filter(|&m| !done.contains(&key_of(beta, m, run)))
                .collect();
            resumed += cfg.methods.len() - pending.len();
            if !pending.is_empty() {
                cells.push((beta, run, pending));
            }
        }
    }

    let appender = Mutex::new(());
    let minority = base.minority_group();
    let name = base.name().to_string();
    cells
        .par_iter()
        .map(|(beta, run, methods)| {
            let evals = run_cell(cfg, &base, *beta, *run, methods)?;
            let _guard = appender.lock().expect("appender poisoned");
            let file = OpenOptions::new()
                .append(true)
                .create(true)
                .open(&results_path)
                .map_err(|e| Error::io(&results_path, e))?;
            let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(file);
            for (m, s) in &evals {
                for row in summary_rows(&name, *m, *beta, *run, s, minority) {
                    w.serialize(row).map_err(|e| csv_err(&results_path, e))?;
                }
            }
            w.flush().map_err(|e| Error::io(&results_path, e))?;
            let mut progress = OpenOptions::new()
                .append(true)
                .create(true)
                .open(&progress_path)
                .map_err(|e| Error::io(&progress_path, e))?;
            for (m, _) in &evals {
                writeln!(progress, "{}", key_line(*beta, *m, *run)).map_err(|e| Error::io(&progress_path, e))?;
            }
            Ok(())
        })
        .collect::<Result<Vec<()>>>()?;

    // Canonical order so that reruns produce identical files.
    let mut rows = read_rows(&results_path)?;
    let order: HashMap<Method, usize> = Method::ALL.iter().enumerate().map(|(i, &m)| (m, i)).collect();
    rows.sort_by(|a, b| {
        a.beta
            .total_cmp(&b.beta)
            .then_with(|| order[&a.method].cmp(&order[&b.method]))
            .then_with(|| a.run.cmp(&b.run))
            .then_with(|| a.metric.cmp(&b.metric))
            .then_with(|| a.rank_or_epoch.cmp(&b.rank_or_epoch))
    });
    write_rows(&results_path, &rows)?;
    let summary = aggregate(&rows);
    let summary_path = out_dir.join(SUMMARY_FILE);
    let mut w = csv::Writer::from_path(&summary_path).map_err(|e| csv_err(&summary_path, e))?;
    for r in &summary {
        w.serialize(r).map_err(|e| csv_err(&summary_path, e))?;
    }
    w.flush().map_err(|e| Error::io(&summary_path, e))?;

    let p = base.proportions.get(minority).copied().unwrap_or(0.0);
    let completed_cells = rows
        .iter()
        .map(|r| key_of(r.beta, r.method, r.run))
        .collect::<BTreeSet<_>>()
        .len();
    let meta = ExperimentMeta {
        dataset: name,
        aggregation: "mean over runs; stderr = sample standard deviation / sqrt(runs)",
        gak19_parameterization: "minimum proportion L_j/k and maximum proportion U_j/k per group",
        bounds: "L_j = floor((p_j - delta) k), U_j = ceil((p_j + delta) k), clamped to group sizes",
        proportions: base.proportions.clone(),
        bias_group: base.bias_group(cfg)? + 1,
        lower_band: p - cfg.delta,
        upper_band: p + cfg.delta,
        completed_cells,
        config: cfg.clone(),
    };
    let meta_path = out_dir.join(META_FILE);
    std::fs::write(&meta_path, serde_json::to_string_pretty(&meta)?).map_err(|e| Error::io(&meta_path, e))?;
    Ok(ExperimentOutput { rows, summary, resumed })
}
