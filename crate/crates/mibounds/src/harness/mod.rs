//! Configuration, orchestration and machine-readable reports.

pub mod config;
pub mod report;
pub mod run;
pub mod selftest;

pub use config::{AnnealSpec, CriticSpec, EstimatorSpec, ExperimentConfig, Grid, ModelSpec, ProposalSpec, StepSize, SweepSpec};
pub use report::{rows_csv, ReportRow, RowStatus, RunReport, SCHEMA_VERSION};
pub use run::{decompose_report, eval_ibal, run_experiment, sweep_gap_vs_t, train_critic, with_workers, DecomposeRow, SweepRow};
pub use selftest::Check;
