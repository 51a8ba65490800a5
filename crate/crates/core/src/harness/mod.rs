//! Experiment harness: declarative configs, seeded instance construction,
//! run orchestration with on-disk artifacts, the fast oracle suite, and the
//! saddle-escape driver.

pub mod checks;
pub mod config;
pub mod experiment;

pub use checks::{run_checks, CheckItem};
pub use config::{ExperimentConfig, InitMode, ProblemKind, ScheduleModeConfig, SmoothnessMode, ToyKind};
pub use experiment::{
    build_experiment, predict_rate_report, run_escape, run_experiment, BuiltExperiment,
    EscapeOutput, PredictReport, RunOutput, RunSummary,
};
