//! Command-line front end: experiment configs, the end-to-end runner and
//! the rank scan.

pub mod config;
pub mod experiment;
pub mod rank_scan;

pub use config::{parse_config, validate_config, ConfigErrors, ExperimentConfig};
pub use experiment::{emit_plot_data, run_experiment, ExperimentError, ExperimentReport, Summary};
pub use rank_scan::{rank_scan, RankScanRow, RankTable, ScanModel, ScanSpec};

/// Process exit codes.
pub mod exit {
    pub const OK: i32 = 0;
    pub const CONFIG: i32 = 1;
    pub const RUNTIME: i32 = 2;
    /// `run` finished but some receiving agent is not identifiable.
    pub const NON_IDENTIFIABLE: i32 = 3;
}
