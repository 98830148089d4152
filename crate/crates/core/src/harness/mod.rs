//! Experiment plumbing shared by the `ncv` binary and the acceptance suite:
//! config files with overrides, run manifests, and one function per command.

mod commands;
mod config;
mod manifest;
mod sweep;

pub use commands::{
    build_bundle, eval, explain, generate, load_game, ratio_tag, save_game, train, EvalOutput, ExplainOutput,
    GenerateOutput, TrainOutput, CERTIFICATES_FILE, CHECKPOINT_FILE, EVAL_FILE, LOG_FILE, METRICS_FILE,
    SHORTCUT_FILE,
};
pub use config::{DatasetConfig, ExperimentConfig, ModelKind, SweepConfig, GRID_TRAIN, PRESETS};
pub use manifest::{sha256_hex, Artifact, RunManifest, MANIFEST_FILE};
pub use sweep::{
    format_pm, mean_std, run_job, sweep, sweep_jobs, thread_count, CellSummary, RunRecord, SweepJob, SweepOutput,
    SUMMARY_FILE, TABLE_FILE,
};
