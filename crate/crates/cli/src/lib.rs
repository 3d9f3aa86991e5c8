//! Experiment orchestration for prefix-tuned open intent classification:
//! configuration, the end-to-end runner, ablation drivers, and reporting.

pub mod config;
pub mod runner;

pub use config::{DatasetSource, ExperimentConfig, PlanKind, PlanSpec};
pub use runner::{
    ablate_last_layer_components, ablate_layer_grouping, ablate_prefix_length, report,
    report_rows, run_experiment, AblationRow, AblationTable, ExperimentResult, MetricSummary,
    ReportRow, SeedOutcome,
};
