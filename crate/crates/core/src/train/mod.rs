//! Offline pretraining, online fine-tuning with prefix replanning, and evaluation.

mod config;
mod eval;
mod run;

pub use config::{CriticDims, EnvOverrides, Mode, RunConfig};
pub use eval::{evaluate, Decision, EpisodeLog, EvalReport};
pub use run::{
    train_offline, train_online, workspace_scaler, Actor, CriticBatch, MetricRecord, OnlineEpisode,
    RunState, StepLosses,
};
