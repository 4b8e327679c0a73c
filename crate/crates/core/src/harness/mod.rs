//! Configuration, evaluation reports and the command implementations behind the CLI.

pub mod commands;
pub mod config;
pub mod report;

pub use commands::{
    ablation_row, cmd_ablation, cmd_distill_student, cmd_evaluate, cmd_prepare_data, cmd_train_teacher, config_diff,
    AblationRow, AblationTable, PrepareOutcome, RunSummary, ABLATION_ROWS,
};
pub use config::{apply_device_from_env, resolve_config, string_override, Provenance, ResolvedConfig, RunConfig, DEVICE_ENV};
pub use report::{evaluate, EvaluationReport, InputSide};
