//! Experiment orchestration: configs, seeded training runs, greedy
//! evaluation, metrics files and multi-seed summaries.

mod config;
mod report;
mod run;

pub use config::{
    Algorithm, CliOverrides, EnvKind, EvalConfig, ExperimentConfig, NetworkConfig, ResolvedConfig, Source,
    TrainConfig,
};
pub use report::{
    bootstrap_median_ci, dump_qtot_table, final_metric, load_checkpoint, median, metric_rows, read_metrics_csv,
    save_checkpoint, sidecar_path, summarise, write_metrics_csv, write_train_log, MetricRow, PhaseValues,
    QtotTable, SeedSummary, CSV_HEADER, QTOT_PHASES,
};
pub use run::{
    build_learner, evaluate, rollout, run_experiment, stream_rng, AnyEnv, Controller, EvalPoint, EvalReport,
    Rollout, RunOutput, Stream,
};
