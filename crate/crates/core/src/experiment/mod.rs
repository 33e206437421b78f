//! Benchmark runner: configuration, training runs of the three learner
//! variants, metrics and persisted outputs.

pub mod config;
pub mod metrics;
pub mod output;
pub mod run;

pub use config::{Algorithm, ExperimentConfig};
pub use metrics::{bands, moving_average, percentile, window_mean, window_median, Bands, RunMetrics, UpdateEvent};
pub use output::{aggregate, audit_messages, end_window_cost, run_to_dir, sweep, write_run, Manifest, SweepRow};
pub use run::{run, RunOutput, StepRecord, ThetaSnapshot};
