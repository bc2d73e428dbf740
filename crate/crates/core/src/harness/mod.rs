//! Operational surface: configuration, synthetic tasks, experiment runs,
//! sweeps with Pareto extraction, checkpoints and CSV reports.

mod checkpoint;
mod config;
mod data;
mod experiment;
mod report;
mod verify;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, MAGIC, VERSION,
};
pub use config::{
    deep_linear_demo_config, expand_grid, load_grid, ExperimentConfig, MethodKind, MethodTag,
    ModelConfig, OialrSection, OutputSection, SvdSection, TaskConfig, TaskKind, TrainingSection,
    TrpSection,
};
pub use data::{
    csv_dataset, deep_linear_student, deep_linear_task, generate_synthetic, DeepLinearTask,
    CLASS_SEPARATION, PLANTED_AXES,
};
pub use experiment::{
    build_task, dense_param_count, dominates, mark_pareto, one_shot_ranks, param_fraction,
    run_experiment, sort_rows, sweep, write_outputs, ExperimentOutcome, SweepFailure, SweepResult,
    SweepRow, Task,
};
pub use report::{
    emit_report, format_sig9, render_report, report_metadata, ReportOptions, REPORT_HEADER,
};
pub use verify::{
    convergence_suite, expansion_suite, pythagoras_suite, run_verification, VerifyLine,
    EXPANSION_RATIO, PYTHAGORAS_TOL,
};
