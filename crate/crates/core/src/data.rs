//! Ranking datasets: parsing, serialization, bias injection, splits and a
//! synthetic generator.
//!
//! Files use LibSVM ranking lines extended with a group token:
//!
//! ```text
//! # max_label: 4
//! 3 qid:7 gid:2 1:0.5 4:1.0 # doc-17
//! ```
//!
//! `gid` is one-based on disk. A trailing `# <id>` names the item; otherwise
//! its ordinal within the query is used. Whole-line comments of the form
//! `# key: value` carry manifest metadata (`name`, `max_label`, `groups`,
//! `minority`) and are written by [`serialize_dataset`] so that a round trip
//! reproduces the manifest exactly.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::domain::{FairnessConstraints, Item, QueryInstance};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub name: String,
    pub queries: Vec<QueryInstance>,
    pub max_label: u32,
    pub group_names: Vec<String>,
    pub minority_group: usize,
}

impl DatasetManifest {
    pub fn n_groups(&self) -> usize {
        self.group_names.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.queries.first().map_or(0, QueryInstance::feature_dim)
    }

    pub fn n_items(&self) -> usize {
        self.queries.iter().map(QueryInstance::len).sum()
    }

    /// Fraction of all items that belong to each group.
    pub fn group_proportions(&self) -> Vec<f64> {
        let mut sizes = vec![0usize; self.n_groups()];
        for q in &self.queries {
            for (s, &g) in sizes.iter_mut().zip(&q.group_sizes) {
                *s += g;
            }
        }
        let n = self.n_items().max(1) as f64;
        sizes.into_iter().map(|s| s as f64 / n).collect()
    }

    pub fn query(&self, query_id: &str) -> Result<&QueryInstance> {
        self.queries
            .iter()
            .find(|q| q.query_id == query_id)
            .ok_or_else(|| Error::UnknownQuery(query_id.to_string()))
    }

    /// Per-query constraints from `(p_j ± δ)k` with dataset-level proportions,
    /// `k` capped at each query's size and bounds clamped to its group sizes.
    pub fn derive_constraints(&self, k: usize, delta: f64) -> Result<Vec<FairnessConstraints>> {
        self.constraints_for(&self.group_proportions(), k, delta)
    }

    /// As [`DatasetManifest::derive_constraints`] with given proportions,
    /// e.g. those of the full dataset when `self` is one split of it.
    pub fn constraints_for(&self, proportions: &[f64], k: usize, delta: f64) -> Result<Vec<FairnessConstraints>> {
        if proportions.len() != self.n_groups() {
            return Err(Error::ShapeMismatch(format!(
                "{} proportions for {} groups",
                proportions.len(),
                self.n_groups()
            )));
        }
        self.queries
            .iter()
            .map(|q| FairnessConstraints::from_delta(proportions, delta, k.min(q.len()))?.validate(&q.group_sizes))
            .collect()
    }

    /// Same `k` cap with no group bounds.
    pub fn vacuous_constraints(&self, k: usize) -> Vec<FairnessConstraints> {
        self.queries
            .iter()
            .map(|q| FairnessConstraints::vacuous(k.min(q.len()), self.n_groups()))
            .collect()
    }
}

/// Per-group multipliers applied to observed relevance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasSpec {
    pub beta: Vec<f64>,
}

impl BiasSpec {
    pub fn new(beta: Vec<f64>) -> Result<Self> {
        if let Some(b) = beta.iter().find(|b| !(0.0..=1.0).contains(*b)) {
            return Err(Error::InvalidArgument(format!("bias multiplier {b} outside [0, 1]")));
        }
        Ok(Self { beta })
    }

    /// `beta` on one group, 1 elsewhere.
    pub fn on_group(n_groups: usize, group: usize, beta: f64) -> Result<Self> {
        if group >= n_groups {
            return Err(Error::ShapeMismatch(format!("group {group} of {n_groups}")));
        }
        let mut v = vec![1.0; n_groups];
        v[group] = beta;
        Self::new(v)
    }
}

#[derive(Debug, Clone, Default)]
pub struct ParseOptions {
    /// Overrides the header and the largest observed label.
    pub max_label: Option<u32>,
    /// Overrides the header and the largest observed gid.
    pub n_groups: Option<usize>,
    pub name: Option<String>,
}

pub fn parse_ranking_file(path: impl AsRef<Path>) -> Result<DatasetManifest> {
    parse_ranking_file_with(path, &ParseOptions::default())
}

pub fn parse_ranking_file_with(path: impl AsRef<Path>, opts: &ParseOptions) -> Result<DatasetManifest> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned());
    parse_named(&text, opts, stem)
}

struct RawLine {
    line: usize,
    label: f64,
    qid: String,
    gid: usize,
    features: Vec<f64>,
    id: Option<String>,
}

fn parse_err(line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        line,
        message: message.into(),
    }
}

fn parse_line(lineno: usize, body: &str, id: Option<String>) -> Result<RawLine> {
    let mut tokens = body.split_whitespace();
    let label_tok = tokens.next().ok_or_else(|| parse_err(lineno, "empty line"))?;
    let label: f64 = label_tok
        .parse()
        .map_err(|_| parse_err(lineno, format!("bad label {label_tok:?}")))?;
    if !label.is_finite() || label < 0.0 {
        return Err(parse_err(lineno, format!("label must be finite and non-negative, got {label}")));
    }
    let mut qid = None;
    let mut gid = None;
    let mut features: Vec<f64> = Vec::new();
    let mut last_fid = 0;
    for tok in tokens {
        let (key, value) = tok
            .split_once(':')
            .ok_or_else(|| parse_err(lineno, format!("expected key:value, got {tok:?}")))?;
        match key {
            "qid" => qid = Some(value.to_string()),
            "gid" => {
                let g: usize = value
                    .parse()
                    .map_err(|_| parse_err(lineno, format!("bad gid {value:?}")))?;
                if g == 0 {
                    return Err(parse_err(lineno, "gid is one-based"));
                }
                gid = Some(g);
            }
            _ => {
                let fid: usize = key
                    .parse()
                    .map_err(|_| parse_err(lineno, format!("bad feature id {key:?}")))?;
                if fid <= last_fid {
                    return Err(parse_err(lineno, format!("feature ids must be one-based and ascending at {fid}")));
                }
                last_fid = fid;
                let v: f64 = value
                    .parse()
                    .map_err(|_| parse_err(lineno, format!("bad feature value {value:?}")))?;
                if !v.is_finite() {
                    return Err(parse_err(lineno, format!("feature {fid} is not finite")));
                }
                features.resize(fid, 0.0);
                features[fid - 1] = v;
            }
        }
    }
    let qid = qid.ok_or_else(|| parse_err(lineno, "missing qid"))?;
    let gid = gid.ok_or(Error::MissingGroup { line: lineno })?;
    Ok(RawLine {
        line: lineno,
        label,
        qid,
        gid,
        features,
        id,
    })
}

/// Parse ranking lines from a string. Line numbers in errors are one-based.
pub fn parse_ranking_str(text: &str, opts: &ParseOptions) -> Result<DatasetManifest> {
    parse_named(text, opts, None)
}

/// The name comes from the options, then the `# name` header, then
/// `fallback_name`.
fn parse_named(text: &str, opts: &ParseOptions, fallback_name: Option<String>) -> Result<DatasetManifest> {
    let mut header: HashMap<String, String> = HashMap::new();
    let mut raw = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        if let Some(comment) = trimmed.strip_prefix('#') {
            if let Some((k, v)) = comment.split_once(':') {
                header.insert(k.trim().to_string(), v.trim().to_string());
            }
            continue;
        }
        let (body, id) = match trimmed.split_once('#') {
            Some((b, c)) => (b, Some(c.trim().to_string()).filter(|s| !s.is_empty())),
            None => (trimmed, None),
        };
        raw.push(parse_line(lineno, body, id)?);
    }
    if raw.is_empty() {
        return Err(Error::EmptyDataset);
    }

    let header_usize = |key: &str| -> Result<Option<usize>> {
        header
            .get(key)
            .map(|v| {
                v.parse::<usize>()
                    .map_err(|_| Error::InvalidArgument(format!("header {key}: expected an integer, got {v:?}")))
            })
            .transpose()
    };

    let observed_max = raw.iter().map(|r| r.label).fold(0.0, f64::max);
    let max_label = match (opts.max_label, header_usize("max_label")?) {
        (Some(m), _) => m,
        (None, Some(m)) => u32::try_from(m).map_err(|_| Error::InvalidArgument(format!("max_label {m} too large")))?,
        (None, None) => (observed_max.ceil() as u32).max(1),
    };
    if max_label == 0 || observed_max > f64::from(max_label) {
        return Err(Error::InvalidArgument(format!(
            "max_label {max_label} is below the largest label {observed_max}"
        )));
    }

    let max_gid = raw.iter().map(|r| r.gid).max().unwrap_or(1);
    let group_names: Option<Vec<String>> = header
        .get("groups")
        .map(|v| v.split(',').map(|s| s.trim().to_string()).collect());
    let n_groups = opts
        .n_groups
        .or(group_names.as_ref().map(Vec::len))
        .unwrap_or(max_gid);
    if max_gid > n_groups {
        return Err(Error::InvalidArgument(format!("gid {max_gid} exceeds the {n_groups} declared groups")));
    }
    let group_names = match group_names {
        Some(names) if names.len() == n_groups => names,
        _ => (1..=n_groups).map(|g| format!("group{g}")).collect(),
    };

    // Queries in order of first appearance.
    let mut order: Vec<String> = Vec::new();
    let mut by_qid: HashMap<String, Vec<RawLine>> = HashMap::new();
    for r in raw {
        if !by_qid.contains_key(&r.qid) {
            order.push(r.qid.clone());
        }
        by_qid.entry(r.qid.clone()).or_default().push(r);
    }

    let mut queries = Vec::with_capacity(order.len());
    let mut dim: Option<(usize, usize)> = None;
    for qid in order {
        let lines = by_qid.remove(&qid).unwrap_or_default();
        let mut items = Vec::with_capacity(lines.len());
        for (ordinal, r) in lines.into_iter().enumerate() {
            match dim {
                None => dim = Some((r.features.len(), r.line)),
                Some((expected, _)) if expected != r.features.len() => {
                    return Err(Error::InconsistentFeatureDim {
                        line: r.line,
                        expected,
                        found: r.features.len(),
                    })
                }
                _ => {}
            }
            let rho = r.label / f64::from(max_label);
            items.push(Item {
                item_id: r.id.unwrap_or_else(|| ordinal.to_string()),
                features: r.features,
                label: r.label,
                relevance_true: rho,
                relevance_observed: rho,
                group: r.gid - 1,
            });
        }
        queries.push(QueryInstance::new(qid, items, n_groups)?);
    }

    let minority_group = match header_usize("minority")? {
        Some(m) if (1..=n_groups).contains(&m) => m - 1,
        Some(m) => return Err(Error::InvalidArgument(format!("minority group {m} out of range"))),
        None => smallest_group(&queries, n_groups),
    };

    Ok(DatasetManifest {
        name: opts
            .name
            .clone()
            .or_else(|| header.get("name").cloned())
            .or(fallback_name)
            .unwrap_or_else(|| "dataset".into()),
        queries,
        max_label,
        group_names,
        minority_group,
    })
}

fn smallest_group(queries: &[QueryInstance], n_groups: usize) -> usize {
    let mut sizes = vec![0usize; n_groups];
    for q in queries {
        for (s, &g) in sizes.iter_mut().zip(&q.group_sizes) {
            *s += g;
        }
    }
    (0..n_groups).min_by_key(|&j| (sizes[j], j)).unwrap_or(0)
}

/// Text form read back by [`parse_ranking_str`]. Features are written
/// densely, numbers in shortest round-trip form.
pub fn serialize_dataset(d: &DatasetManifest) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "# name: {}", d.name);
    let _ = writeln!(out, "# max_label: {}", d.max_label);
    let _ = writeln!(out, "# groups: {}", d.group_names.join(","));
    let _ = writeln!(out, "# minority: {}", d.minority_group + 1);
    for q in &d.queries {
        for item in &q.items {
            let _ = write!(out, "{} qid:{} gid:{}", item.label, q.query_id, item.group + 1);
            for (f, v) in item.features.iter().enumerate() {
                let _ = write!(out, " {}:{}", f + 1, v);
            }
            let _ = writeln!(out, " # {}", item.item_id);
        }
    }
    out
}

pub fn write_ranking_file(d: &DatasetManifest, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, serialize_dataset(d)).map_err(|e| Error::io(path, e))
}

/// `relevance_observed = β_g · relevance_true` for every item.
pub fn inject_bias(d: &DatasetManifest, b: &BiasSpec) -> Result<DatasetManifest> {
    if b.beta.len() != d.n_groups() {
        return Err(Error::ShapeMismatch(format!(
            "bias has {} entries for {} groups",
            b.beta.len(),
            d.n_groups()
        )));
    }
    let mut out = d.clone();
    for item in out.queries.iter_mut().flat_map(|q| q.items.iter_mut()) {
        item.relevance_observed = b.beta[item.group] * item.relevance_true;
    }
    Ok(out)
}

/// Query-level split with `floor(fraction · n)` training queries, kept
/// within `[1, n - 1]`. Both sides keep the original query order.
pub fn split_train_test(d: &DatasetManifest, fraction: f64, seed: u64) -> Result<(DatasetManifest, DatasetManifest)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::InvalidArgument(format!("split fraction {fraction} not in (0, 1)")));
    }
    let n = d.queries.len();
    if n < 2 {
        return Err(Error::TooFewQueries(n));
    }
    let n_train = ((fraction * n as f64).floor() as usize).clamp(1, n - 1);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut train_idx = idx[..n_train].to_vec();
    let mut test_idx = idx[n_train..].to_vec();
    train_idx.sort_unstable();
    test_idx.sort_unstable();
    let pick = |ids: &[usize]| DatasetManifest {
        queries: ids.iter().map(|&i| d.queries[i].clone()).collect(),
        ..d.clone_meta()
    };
    Ok((pick(&train_idx), pick(&test_idx)))
}

impl DatasetManifest {
    fn clone_meta(&self) -> Self {
        Self {
            name: self.name.clone(),
            queries: Vec::new(),
            max_label: self.max_label,
            group_names: self.group_names.clone(),
            minority_group: self.minority_group,
        }
    }
}

fn default_noise() -> f64 {
    0.5
}

fn default_group_shift() -> f64 {
    1.0
}

fn default_logit_scale() -> f64 {
    1.0
}

/// Parameters of the synthetic generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub n_queries: usize,
    pub items_per_query: usize,
    pub proportions: Vec<f64>,
    pub feature_dim: usize,
    pub seed: u64,
    /// Std. dev. of the logit noise; 0 makes relevance a function of features.
    #[serde(default = "default_noise")]
    pub noise: f64,
    /// Group mean offset, applied only to features the hidden scorer ignores.
    #[serde(default = "default_group_shift")]
    pub group_shift: f64,
    /// Multiplies the hidden logit; large values push relevance toward 0/1.
    #[serde(default = "default_logit_scale")]
    pub logit_scale: f64,
}

impl SynthSpec {
    pub fn new(n_queries: usize, items_per_query: usize, proportions: Vec<f64>, feature_dim: usize, seed: u64) -> Self {
        Self {
            n_queries,
            items_per_query,
            proportions,
            feature_dim,
            seed,
            noise: default_noise(),
            group_shift: default_group_shift(),
            logit_scale: default_logit_scale(),
        }
    }
}

/// Largest-remainder allocation of `n` slots to `proportions`.
pub fn allocate_counts(n: usize, proportions: &[f64]) -> Vec<usize> {
    let exact: Vec<f64> = proportions.iter().map(|p| p * n as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| (e + 1e-9).floor() as usize).collect();
    let mut left = n.saturating_sub(counts.iter().sum());
    let mut order: Vec<usize> = (0..proportions.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - counts[a] as f64;
        let rb = exact[b] - counts[b] as f64;
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &j in order.iter().cycle().take(proportions.len() * 2) {
        if left == 0 {
            break;
        }
        counts[j] += 1;
        left -= 1;
    }
    counts
}

/// Gaussian features; relevance is `sigmoid(scale · (w·x) + noise)` for a
/// hidden `w` supported on the first half of the features. The second half
/// carries the group offset, so every group has the same relevance
/// distribution and group membership is still learnable from features.
pub fn synth_generate(spec: &SynthSpec) -> Result<DatasetManifest> {
    let l = spec.proportions.len();
    if l == 0 || spec.proportions.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
        return Err(Error::InvalidArgument("proportions must be non-empty and in [0, 1]".into()));
    }
    if (spec.proportions.iter().sum::<f64>() - 1.0).abs() > 1e-6 {
        return Err(Error::InvalidArgument(format!(
            "proportions sum to {}, expected 1",
            spec.proportions.iter().sum::<f64>()
        )));
    }
    if spec.feature_dim == 0 || spec.items_per_query == 0 || spec.n_queries == 0 {
        return Err(Error::InvalidArgument(
            "n_queries, items_per_query and feature_dim must be positive".into(),
        ));
    }
    if !(spec.noise >= 0.0) {
        return Err(Error::InvalidArgument("noise must be non-negative".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let std = Normal::new(0.0, 1.0).expect("unit normal");
    let signal_dims = spec.feature_dim.div_ceil(2);
    let norm = (signal_dims as f64).sqrt();
    let w: Vec<f64> = (0..signal_dims).map(|_| std.sample(&mut rng) / norm).collect();
    // Per-group offsets on the non-signal dims; group 0 is centred.
    let offsets: Vec<Vec<f64>> = (0..l)
        .map(|g| {
            (signal_dims..spec.feature_dim)
                .map(|f| if g == 0 { 0.0 } else { spec.group_shift * if (f + g) % 2 == 0 { 1.0 } else { -1.0 } })
                .collect()
        })
        .collect();
    let counts = allocate_counts(spec.items_per_query, &spec.proportions);

    let mut queries = Vec::with_capacity(spec.n_queries);
    for q in 0..spec.n_queries {
        let mut groups: Vec<usize> = counts
            .iter()
            .enumerate()
            .flat_map(|(g, &c)| std::iter::repeat(g).take(c))
            .collect();
        groups.shuffle(&mut rng);
        let items = groups
            .into_iter()
            .enumerate()
            .map(|(i, g)| {
                let mut x: Vec<f64> = (0..spec.feature_dim).map(|_| std.sample(&mut rng)).collect();
                for (xf, off) in x[signal_dims..].iter_mut().zip(&offsets[g]) {
                    *xf += off;
                }
                let logit: f64 = w.iter().zip(&x).map(|(a, b)| a * b).sum::<f64>() * spec.logit_scale;
                let noise = if spec.noise > 0.0 { spec.noise * std.sample(&mut rng) } else { 0.0 };
                let rho = (1.0 / (1.0 + (-(logit + noise)).exp())).clamp(0.0, 1.0);
                Item {
                    item_id: format!("q{q}d{i}"),
                    features: x,
                    label: rho,
                    relevance_true: rho,
                    relevance_observed: rho,
                    group: g,
                }
            })
            .collect();
        queries.push(QueryInstance::new(format!("q{q}"), items, l)?);
    }
    let minority_group = (0..l)
        .min_by(|&a, &b| spec.proportions[a].total_cmp(&spec.proportions[b]).then(b.cmp(&a)))
        .unwrap_or(0);
    Ok(DatasetManifest {
        name: "synthetic".into(),
        queries,
        max_label: 1,
        group_names: (1..=l).map(|g| format!("group{g}")).collect(),
        minority_group,
    })
}
