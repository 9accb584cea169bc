//! Sequential-task training, score matrices and forgetting metrics.

pub mod analysis;
pub mod config;
pub mod metrics;
pub mod runner;
pub mod train;

pub use analysis::{grad_study, granularity_for, probe_study, route_study, GradStudy, ProbeStudy, RouteStudy, TransitionRoutes};
pub use config::{Arch, ArchTable, PretrainConfig, RunConfig, TrainConfig, SEED_ENV};
pub use metrics::{bwt_metric, mean_scores, op_metric, ScoreMatrix};
pub use runner::{check_matched_budget, pretrain_backbone, run_sequence, Experiment, SequenceOutcome, SequenceSummary, TaskRows, AnalysisRows, row_compositions};
pub use train::{score_rows, task_accuracy, train_task, RowScores, TaskInput, TrainLog};
