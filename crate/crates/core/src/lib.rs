//! Group-fair Plackett-Luce learning to rank.
//!
//! A ranking policy first draws how many items of each group enter the top
//! k and in which ranks they sit, uniformly over assignments that satisfy
//! per-group lower and upper bounds, and then fills every group's ranks with
//! a Plackett-Luce draw over that group's items. Every realised ranking
//! therefore satisfies the bounds, and the policy can still be trained for
//! expected relevance with low-variance PL-Rank-3 gradients.

pub mod assignment;
pub mod data;
pub mod domain;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod gradient;
pub mod metrics;
pub mod mlp;
pub mod pl;
pub mod policy;
pub mod postprocess;
pub mod train;

pub use assignment::{sample_group_assignment, CompositionTable, TableCache};
pub use domain::{
    check_ex_post_fair, FairnessConstraints, GroupAssignment, Item, PositionDiscounts, QueryInstance, RankingOutcome,
    RelevanceSource,
};
pub use error::{Error, Result};
pub use gradient::{
    algorithm1_gradient, finite_difference_oracle, plrank3_gradient, plrank3_group_gradient, reinforce_gradient,
    GradientVector, PerSampleStats,
};
pub use metrics::{
    expected_ndcg, fairness_violation_rate, ndcg_of_ranking, per_rank_group_fraction, Estimate, MeanAccumulator, MetricRow,
};
pub use pl::{enumerate_rankings, pl_log_prob, pl_sample, softmax_denominators, Denominators, ScoreVector};
pub use policy::{rejection_sample_baseline, FairDraw, FairPolicy, LogProb, PlPolicy, RankingSampler};
pub use postprocess::{gak19_detgreedy, gdl22_postprocess, FixedRanking, Gdl22Policy};
pub use data::{
    inject_bias, parse_ranking_file, parse_ranking_str, serialize_dataset, split_train_test, synth_generate, BiasSpec,
    DatasetManifest, ParseOptions, SynthSpec,
};
pub use eval::{derive_seed, evaluate, EvalSummary, PolicyKind};
pub use mlp::{MlpParams, HIDDEN};
pub use train::{train, Checkpoint, LogRow, QuerySet, TrainConfig, TrainMode, TrainOutput};
pub use experiment::{load_data, run_experiment, DatasetConfig, ExperimentConfig, ExperimentData, Method};
