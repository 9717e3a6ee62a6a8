//! Experiment configs, the training loop, metric logs, sweeps and presets.

pub mod config;
pub mod metrics;
pub mod presets;
pub mod run;
pub mod sweep;

pub use config::{ExperimentConfig, GeometrySplit};
pub use metrics::{read_metrics_csv, write_metrics_csv, MetricRecord, MetricsLog, CSV_HEADER};
pub use presets::{preset, run_etf_grid, train_preset, EtfGrid, EtfRow, Preset, PRESETS};
pub use run::{analyze, run_experiment, run_seed, write_experiment, SeedRun};
pub use sweep::{sweep, SweepPoint, SWEEP_PARAMS};
