//! Batch runner: configs in, byte-stable CSV out.

mod batch;
mod compare;
mod config;
mod rate;
mod table;

pub use batch::{reference_optimum, run_batch, run_experiment, RunOutcome};
pub use compare::{compare, Metric, Ranking};
pub use config::{
    AlgorithmParams, AlgorithmSpec, Batch, BatchFile, ExperimentConfig, Fixture, Plan, ProblemSource, SafeguardKind,
    SafeguardSpec,
};
pub use rate::{rate_fit, rate_fit_trace, RateFit};
pub use table::{csv_string, read_csv, write_csv, RunRecord, COLUMNS};
