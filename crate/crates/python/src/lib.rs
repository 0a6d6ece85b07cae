//! Python bindings: constraints, the plain and group-fair Plackett-Luce
//! policies, gradient estimators, datasets, training, evaluation and the
//! experiment sweep.

use std::path::PathBuf;

use fairpl::eval::stream_rng;
use fairpl::experiment::run_experiment as run_sweep;
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn err(e: fairpl::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn scores(v: Vec<f64>) -> PyResult<fairpl::ScoreVector> {
    fairpl::ScoreVector::new(v).map_err(err)
}

fn outcome(ranking: Vec<usize>, groups: &[usize]) -> PyResult<fairpl::RankingOutcome> {
    fairpl::RankingOutcome::from_items(ranking, groups).map_err(err)
}

/// Per-group lower and upper bounds on the top-k composition. Groups are
/// numbered from 0.
#[pyclass(module = "fairpl", from_py_object)]
#[derive(Clone)]
struct FairnessConstraints(fairpl::FairnessConstraints);

#[pymethods]
impl FairnessConstraints {
    #[new]
    fn new(k: usize, lower: Vec<usize>, upper: Vec<usize>) -> PyResult<Self> {
        fairpl::FairnessConstraints::new(k, lower, upper).map(Self).map_err(err)
    }

    /// Bounds floor((p - delta) k) and ceil((p + delta) k).
    #[staticmethod]
    fn from_delta(proportions: Vec<f64>, delta: f64, k: usize) -> PyResult<Self> {
        fairpl::FairnessConstraints::from_delta(&proportions, delta, k)
            .map(Self)
            .map_err(err)
    }

    #[staticmethod]
    fn vacuous(k: usize, n_groups: usize) -> Self {
        Self(fairpl::FairnessConstraints::vacuous(k, n_groups))
    }

    #[getter]
    fn k(&self) -> usize {
        self.0.k
    }

    #[getter]
    fn lower(&self) -> Vec<usize> {
        self.0.lower.clone()
    }

    #[getter]
    fn upper(&self) -> Vec<usize> {
        self.0.upper.clone()
    }

    /// Clamp upper bounds to the group sizes and check feasibility.
    fn validate(&self, group_sizes: Vec<usize>) -> PyResult<Self> {
        self.0.validate(&group_sizes).map(Self).map_err(err)
    }

    fn __repr__(&self) -> String {
        format!(
            "FairnessConstraints(k={}, lower={:?}, upper={:?})",
            self.0.k, self.0.lower, self.0.upper
        )
    }
}

/// Plackett-Luce over all items, truncated at k.
#[pyclass(module = "fairpl")]
struct PlPolicy(fairpl::PlPolicy);

#[pymethods]
impl PlPolicy {
    #[new]
    fn new(scores_: Vec<f64>, groups: Vec<usize>, k: usize) -> PyResult<Self> {
        fairpl::PlPolicy::new(scores(scores_)?, groups, k).map(Self).map_err(err)
    }

    #[pyo3(signature = (n, seed=0))]
    fn sample(&self, n: usize, seed: u64) -> PyResult<Vec<Vec<usize>>> {
        use fairpl::RankingSampler;
        let mut rng = stream_rng(&[seed]);
        (0..n)
            .map(|_| self.0.sample_ranking(&mut rng).map(|o| o.ranked_items).map_err(err))
            .collect()
    }

    fn log_prob(&self, ranking: Vec<usize>) -> PyResult<f64> {
        self.0.log_prob(&ranking).map_err(err)
    }
}

/// Fair group assignment first, then Plackett-Luce within each group.
#[pyclass(module = "fairpl")]
struct FairPolicy(fairpl::FairPolicy);

#[pymethods]
impl FairPolicy {
    #[new]
    fn new(scores_: Vec<f64>, groups: Vec<usize>, constraints: &FairnessConstraints) -> PyResult<Self> {
        fairpl::FairPolicy::new(scores(scores_)?, groups, &constraints.0)
            .map(Self)
            .map_err(err)
    }

    /// The constraints after validation against the group sizes.
    #[getter]
    fn constraints(&self) -> FairnessConstraints {
        FairnessConstraints(self.0.constraints().clone())
    }

    #[pyo3(signature = (n, seed=0))]
    fn sample(&self, n: usize, seed: u64) -> PyResult<Vec<Vec<usize>>> {
        use fairpl::RankingSampler;
        let mut rng = stream_rng(&[seed]);
        (0..n)
            .map(|_| self.0.sample_ranking(&mut rng).map(|o| o.ranked_items).map_err(err))
            .collect()
    }

    /// Log-probability of a top-k ranking, or None outside the support.
    fn log_prob(&self, ranking: Vec<usize>) -> PyResult<Option<f64>> {
        use fairpl::RankingSampler;
        let o = outcome(ranking, self.0.item_groups())?;
        self.0.log_prob(&o).map(|lp| lp.finite()).map_err(err)
    }

    /// Expected DCG with NDCG discounts, by enumeration (small instances).
    fn exact_relevance(&self, relevance: Vec<f64>) -> PyResult<f64> {
        use fairpl::RankingSampler;
        let theta = fairpl::PositionDiscounts::ndcg(self.0.k());
        self.0.exact_relevance(&relevance, &theta).map_err(err)
    }

    fn exact_relevance_gradient(&self, relevance: Vec<f64>) -> PyResult<Vec<f64>> {
        use fairpl::RankingSampler;
        let theta = fairpl::PositionDiscounts::ndcg(self.0.k());
        self.0.exact_relevance_gradient(&relevance, &theta).map_err(err)
    }

    /// Sampled estimate of the expected-DCG gradient in the scores.
    #[pyo3(signature = (relevance, samples=25, seed=0))]
    fn gradient(&self, relevance: Vec<f64>, samples: usize, seed: u64) -> PyResult<Vec<f64>> {
        use fairpl::RankingSampler;
        let theta = fairpl::PositionDiscounts::ndcg(self.0.k());
        fairpl::algorithm1_gradient(&self.0, &relevance, &theta, samples, &mut stream_rng(&[seed]))
            .map(|g| g.0)
            .map_err(err)
    }
}

/// PL-Rank-3 gradient for plain Plackett-Luce with NDCG discounts.
#[pyfunction]
#[pyo3(signature = (scores_, relevance, k, samples=25, seed=0))]
fn plrank3_gradient(scores_: Vec<f64>, relevance: Vec<f64>, k: usize, samples: usize, seed: u64) -> PyResult<Vec<f64>> {
    let theta = fairpl::PositionDiscounts::ndcg(k);
    fairpl::plrank3_gradient(&scores(scores_)?, &relevance, &theta, k, samples, &mut stream_rng(&[seed]))
        .map(|g| g.0)
        .map_err(err)
}

#[pyfunction]
fn check_ex_post_fair(ranking: Vec<usize>, groups: Vec<usize>, constraints: &FairnessConstraints) -> PyResult<bool> {
    fairpl::check_ex_post_fair(&outcome(ranking, &groups)?, &constraints.0).map_err(err)
}

/// Deterministic greedy fair re-ranking.
#[pyfunction]
fn gak19(scores_: Vec<f64>, groups: Vec<usize>, constraints: &FairnessConstraints) -> PyResult<Vec<usize>> {
    fairpl::gak19_detgreedy(&scores(scores_)?, &groups, &constraints.0)
        .map(|o| o.ranked_items)
        .map_err(err)
}

/// Random fair assignment filled in score order within groups.
#[pyfunction]
#[pyo3(signature = (scores_, groups, constraints, seed=0))]
fn gdl22(scores_: Vec<f64>, groups: Vec<usize>, constraints: &FairnessConstraints, seed: u64) -> PyResult<Vec<usize>> {
    fairpl::gdl22_postprocess(&scores(scores_)?, &groups, &constraints.0, &mut stream_rng(&[seed]))
        .map(|o| o.ranked_items)
        .map_err(err)
}

/// Queries with features, groups and relevance.
#[pyclass(module = "fairpl", skip_from_py_object)]
#[derive(Clone)]
struct Dataset(fairpl::DatasetManifest);

impl Dataset {
    fn query(&self, query_id: &str) -> PyResult<&fairpl::QueryInstance> {
        self.0.query(query_id).map_err(err)
    }
}

#[pymethods]
impl Dataset {
    /// Read an extended LibSVM ranking file (`gid` is 1-based on disk).
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        fairpl::parse_ranking_file(path).map(Self).map_err(err)
    }

    #[staticmethod]
    fn parse(text: &str) -> PyResult<Self> {
        fairpl::parse_ranking_str(text, &fairpl::ParseOptions::default())
            .map(Self)
            .map_err(err)
    }

    #[staticmethod]
    fn synthetic(
        n_queries: usize,
        items_per_query: usize,
        proportions: Vec<f64>,
        feature_dim: usize,
        seed: u64,
    ) -> PyResult<Self> {
        let spec = fairpl::SynthSpec::new(n_queries, items_per_query, proportions, feature_dim, seed);
        fairpl::synth_generate(&spec).map(Self).map_err(err)
    }

    fn to_text(&self) -> String {
        fairpl::serialize_dataset(&self.0)
    }

    #[getter]
    fn name(&self) -> String {
        self.0.name.clone()
    }

    #[getter]
    fn query_ids(&self) -> Vec<String> {
        self.0.queries.iter().map(|q| q.query_id.clone()).collect()
    }

    #[getter]
    fn n_groups(&self) -> usize {
        self.0.n_groups()
    }

    #[getter]
    fn feature_dim(&self) -> usize {
        self.0.feature_dim()
    }

    #[getter]
    fn minority_group(&self) -> usize {
        self.0.minority_group
    }

    fn group_proportions(&self) -> Vec<f64> {
        self.0.group_proportions()
    }

    fn features(&self, query_id: &str) -> PyResult<Vec<Vec<f64>>> {
        Ok(self.query(query_id)?.items.iter().map(|it| it.features.clone()).collect())
    }

    fn groups(&self, query_id: &str) -> PyResult<Vec<usize>> {
        Ok(self.query(query_id)?.groups())
    }

    #[pyo3(signature = (query_id, observed=false))]
    fn relevance(&self, query_id: &str, observed: bool) -> PyResult<Vec<f64>> {
        let source = if observed {
            fairpl::RelevanceSource::Observed
        } else {
            fairpl::RelevanceSource::True
        };
        Ok(self.query(query_id)?.relevance(source))
    }

    /// Multiply one group's observed relevance by `beta`.
    fn inject_bias(&self, group: usize, beta: f64) -> PyResult<Self> {
        let spec = fairpl::BiasSpec::on_group(self.0.n_groups(), group, beta).map_err(err)?;
        fairpl::inject_bias(&self.0, &spec).map(Self).map_err(err)
    }

    #[pyo3(signature = (fraction, seed=0))]
    fn split(&self, fraction: f64, seed: u64) -> PyResult<(Self, Self)> {
        fairpl::split_train_test(&self.0, fraction, seed)
            .map(|(a, b)| (Self(a), Self(b)))
            .map_err(err)
    }

    fn __len__(&self) -> usize {
        self.0.queries.len()
    }
}

fn parse_mode(mode: &str) -> PyResult<fairpl::TrainMode> {
    match mode {
        "plain_pl" => Ok(fairpl::TrainMode::PlainPl),
        "group_fair" => Ok(fairpl::TrainMode::GroupFair),
        other => Err(PyValueError::new_err(format!(
            "mode must be 'plain_pl' or 'group_fair', got {other:?}"
        ))),
    }
}

fn parse_policy(policy: &str) -> PyResult<fairpl::PolicyKind> {
    match policy {
        "plain_pl" => Ok(fairpl::PolicyKind::PlainPl),
        "group_fair" => Ok(fairpl::PolicyKind::GroupFair),
        "gdl22" => Ok(fairpl::PolicyKind::Gdl22),
        "gak19" => Ok(fairpl::PolicyKind::Gak19),
        other => Err(PyValueError::new_err(format!(
            "policy must be one of plain_pl, group_fair, gdl22, gak19; got {other:?}"
        ))),
    }
}

/// A trained scorer.
#[pyclass(module = "fairpl")]
struct Model(fairpl::Checkpoint);

#[pymethods]
impl Model {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        fairpl::Checkpoint::load(path).map(Self).map_err(err)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.0.save(path).map_err(err)
    }

    #[getter]
    fn mode(&self) -> &'static str {
        match self.0.mode {
            fairpl::TrainMode::PlainPl => "plain_pl",
            fairpl::TrainMode::GroupFair => "group_fair",
        }
    }

    fn scores(&self, dataset: &Dataset, query_id: &str) -> PyResult<Vec<f64>> {
        let q = dataset.query(query_id)?;
        self.0
            .params
            .forward_scores(q)
            .map(|s| s.as_slice().to_vec())
            .map_err(err)
    }

    /// Expected NDCG (true and observed), violation rate and per-rank group
    /// fractions over every query of `dataset`.
    #[pyo3(signature = (dataset, k=10, delta=0.05, policy=None, n_samples=100, seed=0, proportions=None))]
    #[allow(clippy::too_many_arguments)]
    fn evaluate<'py>(
        &self,
        py: Python<'py>,
        dataset: &Dataset,
        k: usize,
        delta: f64,
        policy: Option<&str>,
        n_samples: usize,
        seed: u64,
        proportions: Option<Vec<f64>>,
    ) -> PyResult<Bound<'py, PyDict>> {
        self.0.check_dataset(&dataset.0).map_err(err)?;
        let kind = match policy {
            Some(p) => parse_policy(p)?,
            None => self.0.mode.policy(),
        };
        let props = proportions.unwrap_or_else(|| dataset.0.group_proportions());
        let cs = dataset.0.constraints_for(&props, k, delta).map_err(err)?;
        let s = fairpl::evaluate(&self.0.params, &dataset.0, &cs, kind, n_samples, seed).map_err(err)?;
        let d = PyDict::new(py);
        d.set_item("ndcg_true", s.ndcg_true.mean)?;
        d.set_item("ndcg_true_stderr", s.ndcg_true.stderr)?;
        d.set_item("ndcg_observed", s.ndcg_observed.mean)?;
        d.set_item("violation_rate", s.violation_rate)?;
        d.set_item("group_fraction", s.group_fraction)?;
        d.set_item("n_queries", s.n_queries)?;
        Ok(d)
    }
}

/// Train a scorer on `dataset` with bounds from its group proportions.
#[pyfunction]
#[pyo3(signature = (dataset, mode="group_fair", k=10, delta=0.05, epochs=100, learning_rate=0.001,
                    samples=25, batch_size=512, seed=0, observed=true))]
#[allow(clippy::too_many_arguments)]
fn train(
    dataset: &Dataset,
    mode: &str,
    k: usize,
    delta: f64,
    epochs: usize,
    learning_rate: f64,
    samples: usize,
    batch_size: usize,
    seed: u64,
    observed: bool,
) -> PyResult<Model> {
    let mode = parse_mode(mode)?;
    let mut cfg = fairpl::TrainConfig::new(mode, seed);
    cfg.epochs = epochs;
    cfg.learning_rate = learning_rate;
    cfg.samples = samples;
    cfg.batch_size = batch_size;
    cfg.log_every = 0;
    if !observed {
        cfg.relevance = fairpl::RelevanceSource::True;
    }
    let cs = dataset.0.derive_constraints(k, delta).map_err(err)?;
    let set = fairpl::QuerySet::new(&dataset.0, &cs).map_err(err)?;
    let out = fairpl::train(set, &cfg, None).map_err(err)?;
    Ok(Model(fairpl::Checkpoint::new(out.params, mode)))
}

/// Run a sweep from a JSON config string; returns the aggregated rows.
#[pyfunction]
fn run_experiment<'py>(py: Python<'py>, config_json: &str, out_dir: PathBuf) -> PyResult<Vec<Bound<'py, PyDict>>> {
    let cfg = fairpl::ExperimentConfig::from_json(config_json).map_err(err)?;
    let out = run_sweep(&cfg, &out_dir).map_err(err)?;
    out.summary
        .iter()
        .map(|r| {
            let d = PyDict::new(py);
            d.set_item("method", &r.method)?;
            d.set_item("beta", r.beta)?;
            d.set_item("metric", &r.metric)?;
            d.set_item("rank_or_epoch", r.rank_or_epoch)?;
            d.set_item("value", r.value)?;
            d.set_item("stderr", r.stderr)?;
            Ok(d)
        })
        .collect()
}

#[pymodule]
#[pyo3(name = "fairpl")]
fn fairpl_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<FairnessConstraints>()?;
    m.add_class::<PlPolicy>()?;
    m.add_class::<FairPolicy>()?;
    m.add_class::<Dataset>()?;
    m.add_class::<Model>()?;
    m.add_function(wrap_pyfunction!(plrank3_gradient, m)?)?;
    m.add_function(wrap_pyfunction!(check_ex_post_fair, m)?)?;
    m.add_function(wrap_pyfunction!(gak19, m)?)?;
    m.add_function(wrap_pyfunction!(gdl22, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    Ok(())
}
