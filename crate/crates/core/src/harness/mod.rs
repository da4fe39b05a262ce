//! Experiment harness: configuration files, datasets, and the train, drift,
//! L-sweep and oracle commands behind the CLI.

pub mod commands;
pub mod config;
pub mod datasets;
pub mod drift;

pub use commands::{
    cmd_drift, cmd_oracle, cmd_sweep_l, cmd_train, ingest_check, OracleOutcome, OracleSettings, Scenario, SweepRow,
};
pub use config::{DriftSettings, RunConfig};
pub use datasets::{Builtin, CsvSource, Dataset, DatasetSource, DatasetSpec};
pub use drift::{default_t_grid, measure_drift, DriftOptions, DriftRecord, DriftSeries, Reference};
