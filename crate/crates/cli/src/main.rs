use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use fairpl::assignment::CompositionTable;
use fairpl::eval::stream_rng;
use fairpl::experiment::{run_experiment, ExperimentData, ModelSpec};
use fairpl::train::write_log_csv;
use fairpl::{
    check_ex_post_fair, evaluate, gak19_detgreedy, load_data, train, Checkpoint, DatasetManifest,
    ExperimentConfig, FairPolicy, FairnessConstraints, Gdl22Policy, PlPolicy, PolicyKind, QuerySet, RankingOutcome,
    RankingSampler, RelevanceSource, TrainMode,
};
use serde::Serialize;

#[derive(Parser)]
#[command(name = "fairpl", version, about = "Group-fair Plackett-Luce ranking experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one scorer and write a checkpoint plus a training log.
    Train(TrainArgs),
    /// Evaluate a checkpoint: expected NDCG, per-rank group fractions, violation rate.
    Eval(EvalArgs),
    /// Draw rankings for one query as JSON lines.
    Sample(SampleArgs),
    /// Run a full (beta, method, run) sweep with resume.
    Experiment(ExperimentArgs),
}

/// Flags shared by every command; each overrides the config field of the
/// same name.
#[derive(Args, Clone)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    delta: Option<f64>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, value_enum)]
    mode: Option<Mode>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    /// Gradient samples per query (M).
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Bias factor applied to the bias group's observed relevance.
    #[arg(long)]
    bias: Option<f64>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Evaluate every query of this file instead of the config's test split.
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long, value_enum)]
    policy: Option<Policy>,
    /// Rankings sampled per query.
    #[arg(long)]
    n_samples: Option<usize>,
    #[arg(long)]
    bias: Option<f64>,
}

#[derive(Args)]
struct SampleArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    query: String,
    #[arg(short, long, default_value_t = 1)]
    n: usize,
    #[arg(long, value_enum)]
    policy: Option<Policy>,
}

#[derive(Args)]
struct ExperimentArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    runs: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    eval_samples: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    PlainPl,
    GroupFair,
}

impl From<Mode> for TrainMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::PlainPl => TrainMode::PlainPl,
            Mode::GroupFair => TrainMode::GroupFair,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Policy {
    PlainPl,
    GroupFair,
    Gdl22,
    Gak19,
}

impl From<Policy> for PolicyKind {
    fn from(p: Policy) -> Self {
        match p {
            Policy::PlainPl => PolicyKind::PlainPl,
            Policy::GroupFair => PolicyKind::GroupFair,
            Policy::Gdl22 => PolicyKind::Gdl22,
            Policy::Gak19 => PolicyKind::Gak19,
        }
    }
}

fn policy_name(p: PolicyKind) -> &'static str {
    match p {
        PolicyKind::PlainPl => "plain_pl",
        PolicyKind::GroupFair => "group_fair",
        PolicyKind::Gdl22 => "plain_pl+gdl22",
        PolicyKind::Gak19 => "plain_pl+gak19",
    }
}

fn load_config(c: &Common) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(&c.config).with_context(|| format!("reading config {}", c.config.display()))?;
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(k) = c.k {
        cfg.k = k;
    }
    if let Some(d) = c.delta {
        cfg.delta = d;
    }
    Ok(cfg)
}

fn set<T>(field: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *field = v;
    }
}

fn create_out(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating output directory {}", dir.display()))
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let mut cfg = load_config(&a.common)?;
    set(&mut cfg.mode, a.mode.map(Into::into));
    set(&mut cfg.epochs, a.epochs);
    set(&mut cfg.learning_rate, a.learning_rate);
    set(&mut cfg.samples, a.samples);
    set(&mut cfg.batch_size, a.batch_size);
    set(&mut cfg.bias, a.bias);
    cfg.validate()?;
    let data = load_data(&cfg)?.biased(&cfg, cfg.bias)?;
    let train_cs = data.constraints(&data.train, &cfg)?;
    let test_cs = data.constraints(&data.test, &cfg)?;
    let tc = cfg.train_config(
        ModelSpec {
            mode: cfg.mode,
            relevance: RelevanceSource::Observed,
        },
        cfg.seed,
    );
    let out = train(
        QuerySet::new(&data.train, &train_cs)?,
        &tc,
        Some(QuerySet::new(&data.test, &test_cs)?),
    )?;
    create_out(&a.common.out)?;
    let ckpt = a.common.out.join("checkpoint.json");
    Checkpoint::new(out.params, cfg.mode).save(&ckpt)?;
    let log = a.common.out.join("train_log.csv");
    write_log_csv(&out.log, &log)?;
    if let Some(last) = out.log.last() {
        eprintln!(
            "epoch {}: ndcg_true {:.4}, ndcg_observed {:.4}, violation rate {:.4}",
            last.epoch, last.ndcg_true, last.ndcg_observed, last.fairness_violation_rate
        );
    }
    println!("{}", ckpt.display());
    println!("{}", log.display());
    Ok(())
}

/// The queries a command works on and the proportions behind their bounds.
fn eval_data(cfg: &ExperimentConfig, dataset: Option<&Path>, bias: f64) -> Result<(DatasetManifest, Vec<f64>)> {
    match dataset {
        Some(path) => {
            let opts = fairpl::ParseOptions {
                max_label: cfg.dataset.max_label,
                ..Default::default()
            };
            let d = fairpl::data::parse_ranking_file_with(path, &opts)?;
            let p = d.group_proportions();
            let group = match cfg.bias_group {
                None => d.minority_group,
                Some(g) if (1..=d.n_groups()).contains(&g) => g - 1,
                Some(g) => bail!("config field `bias_group` = {g} is outside 1..={}", d.n_groups()),
            };
            let spec = fairpl::BiasSpec::on_group(d.n_groups(), group, bias)?;
            Ok((fairpl::inject_bias(&d, &spec)?, p))
        }
        None => {
            let data: ExperimentData = load_data(cfg)?.biased(cfg, bias)?;
            Ok((data.test, data.proportions))
        }
    }
}

fn default_policy(ckpt: &Checkpoint) -> PolicyKind {
    match ckpt.mode {
        TrainMode::PlainPl => PolicyKind::PlainPl,
        TrainMode::GroupFair => PolicyKind::GroupFair,
    }
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let mut cfg = load_config(&a.common)?;
    set(&mut cfg.eval_samples, a.n_samples);
    set(&mut cfg.bias, a.bias);
    cfg.validate()?;
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let (data, props) = eval_data(&cfg, a.dataset.as_deref(), cfg.bias)?;
    ckpt.check_dataset(&data)?;
    let kind = a.policy.map_or_else(|| default_policy(&ckpt), Into::into);
    let cs = data.constraints_for(&props, cfg.k, cfg.delta)?;
    let summary = evaluate(&ckpt.params, &data, &cs, kind, cfg.eval_samples, cfg.seed)?;

    create_out(&a.common.out)?;
    let method = policy_name(kind);
    let metrics_path = a.common.out.join("metrics.csv");
    let mut w = csv::Writer::from_path(&metrics_path)?;
    w.write_record(["method", "metric", "value", "stderr", "n_queries", "n_samples"])?;
    let rows = [
        ("ndcg_true", summary.ndcg_true.mean, summary.ndcg_true.stderr),
        ("ndcg_observed", summary.ndcg_observed.mean, summary.ndcg_observed.stderr),
        ("fairness_violation_rate", summary.violation_rate, None),
    ];
    for (metric, value, se) in rows {
        w.write_record([
            method.to_string(),
            metric.to_string(),
            value.to_string(),
            se.map_or(String::new(), |s| s.to_string()),
            summary.n_queries.to_string(),
            summary.n_samples.to_string(),
        ])?;
    }
    w.flush()?;

    // Bounds at the configured k from the dataset proportions, as fractions.
    let k = cs.iter().map(|c| c.k).max().unwrap_or(cfg.k);
    let bounds = FairnessConstraints::from_delta(&props, cfg.delta, k)?;
    let fractions_path = a.common.out.join("rank_fractions.csv");
    let mut w = csv::Writer::from_path(&fractions_path)?;
    w.write_record(["method", "group", "rank", "fraction", "lower_bound", "upper_bound"])?;
    for (j, row) in summary.group_fraction.iter().enumerate() {
        for (i, f) in row.iter().enumerate() {
            w.write_record([
                method.to_string(),
                (j + 1).to_string(),
                (i + 1).to_string(),
                f.to_string(),
                (bounds.lower[j] as f64 / k as f64).to_string(),
                (bounds.upper[j] as f64 / k as f64).to_string(),
            ])?;
        }
    }
    w.flush()?;
    eprintln!(
        "{method}: ndcg_true {:.4}, ndcg_observed {:.4}, violation rate {:.4}",
        summary.ndcg_true.mean, summary.ndcg_observed.mean, summary.violation_rate
    );
    println!("{}", metrics_path.display());
    println!("{}", fractions_path.display());
    Ok(())
}

#[derive(Serialize)]
struct SampleLine<'a> {
    query: &'a str,
    draw: usize,
    items: Vec<&'a str>,
    groups: Vec<usize>,
    /// Absent when the ranking's probability is not defined for the policy.
    log_prob: Option<f64>,
    fair: bool,
}

fn cmd_sample(a: SampleArgs) -> Result<()> {
    let cfg = load_config(&a.common)?;
    cfg.validate()?;
    if a.n == 0 {
        bail!("-n must be at least 1");
    }
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let (data, props) = match &a.dataset {
        Some(_) => eval_data(&cfg, a.dataset.as_deref(), 1.0)?,
        None => {
            let d = load_data(&cfg)?;
            let mut all = d.train.clone();
            all.queries.extend(d.test.queries.iter().cloned());
            (all, d.proportions)
        }
    };
    ckpt.check_dataset(&data)?;
    let q = data.query(&a.query)?;
    let c = FairnessConstraints::from_delta(&props, cfg.delta, cfg.k.min(q.len()))?.validate(&q.group_sizes)?;
    let scores = ckpt.params.forward_scores(q)?;
    let groups = q.groups();
    let kind = a.policy.map_or_else(|| default_policy(&ckpt), Into::into);
    let mut rng = stream_rng(&[cfg.seed, 0x5a3]);

    let draws: Vec<(RankingOutcome, Option<f64>)> = match kind {
        PolicyKind::PlainPl => {
            let p = PlPolicy::new(scores, groups, c.k)?;
            (0..a.n)
                .map(|_| {
                    let o = p.sample_ranking(&mut rng)?;
                    let lp = p.log_prob(&o.ranked_items)?;
                    Ok((o, Some(lp)))
                })
                .collect::<Result<_>>()?
        }
        PolicyKind::GroupFair => {
            let p = FairPolicy::new(scores, groups, &c)?;
            (0..a.n)
                .map(|_| {
                    let o = p.sample_ranking(&mut rng)?;
                    let lp = p.log_prob(&o)?.finite();
                    Ok((o, lp))
                })
                .collect::<Result<_>>()?
        }
        PolicyKind::Gdl22 => {
            // Only the group assignment is random; the fill is by score.
            let p = Gdl22Policy::new(&scores, groups, &c)?;
            let table = CompositionTable::build(&c)?;
            (0..a.n)
                .map(|_| {
                    let o = p.sample_ranking(&mut rng)?;
                    let lp = table.log_prob(&o.assignment);
                    Ok((o, lp))
                })
                .collect::<Result<_>>()?
        }
        PolicyKind::Gak19 => {
            let o = gak19_detgreedy(&scores, &groups, &c)?;
            vec![(o, Some(0.0)); a.n]
        }
    };

    let mut sink = BufWriter::new(std::io::stdout().lock());
    for (i, (o, lp)) in draws.iter().enumerate() {
        let line = SampleLine {
            query: &q.query_id,
            draw: i,
            items: o.ranked_items.iter().map(|&d| q.items[d].item_id.as_str()).collect(),
            groups: o.assignment.slots().iter().map(|g| g + 1).collect(),
            log_prob: *lp,
            fair: check_ex_post_fair(o, &c)?,
        };
        serde_json::to_writer(&mut sink, &line)?;
        writeln!(sink)?;
    }
    sink.flush()?;
    Ok(())
}

fn cmd_experiment(a: ExperimentArgs) -> Result<()> {
    let mut cfg = load_config(&a.common)?;
    set(&mut cfg.runs, a.runs);
    set(&mut cfg.epochs, a.epochs);
    set(&mut cfg.learning_rate, a.learning_rate);
    set(&mut cfg.samples, a.samples);
    set(&mut cfg.eval_samples, a.eval_samples);
    cfg.validate()?;
    create_out(&a.common.out)?;
    let out = run_experiment(&cfg, &a.common.out)?;
    if out.resumed > 0 {
        eprintln!("resumed {} completed cells", out.resumed);
    }
    for r in out.summary.iter().filter(|r| r.metric == "ndcg_true") {
        eprintln!(
            "beta {:<4} {:<16} ndcg_true {:.4} ± {:.4}",
            r.beta,
            r.method,
            r.value,
            r.stderr.unwrap_or(0.0)
        );
    }
    println!("{}", a.common.out.join("summary.csv").display());
    Ok(())
}

fn configure_workers() -> Result<()> {
    let Ok(raw) = std::env::var("FAIRPL_WORKERS") else {
        return Ok(());
    };
    let n: usize = raw
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| anyhow!("FAIRPL_WORKERS must be a positive integer, got {raw:?}"))?;
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = configure_workers().and_then(|()| match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Sample(a) => cmd_sample(a),
        Command::Experiment(a) => cmd_experiment(a),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
