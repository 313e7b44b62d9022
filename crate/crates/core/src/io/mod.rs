//! Run configuration, result files, run comparison and the scaling harness.

pub mod compare;
pub mod config;
pub mod output;
pub mod scale;

pub use compare::{compare, CompareReport, Spread};
pub use config::{load_config, parse_config, ConfigError, RunConfig};
pub use output::{read_csv, write_csv, RunSummary};
pub use scale::{scale_harness, write_scale_csv, ScaleRow};
