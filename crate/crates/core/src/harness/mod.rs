//! End-to-end orchestration: configuration, pipeline, reports, plots and the CLI.

pub mod cli;
pub mod config;
pub mod pipeline;
pub mod plot;
pub mod report;

pub use config::{default_out_root, DatasetConfig, RunConfig, OUT_ENV};
pub use pipeline::{run_pipeline, MethodFailure, RepeatSummary, RunSummary};
pub use plot::plot_overlay;
pub use report::{read_metrics_csv, render_report, write_metrics_csv, ResultsTable};
