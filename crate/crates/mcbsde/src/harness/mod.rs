//! Config ingestion, instance generation, verification suites and reports.

pub mod config;
pub mod generate;
pub mod oracle;
pub mod report;
pub mod suites;

pub use config::{shipped_default_toml, Experiment, ExperimentConfig};
pub use generate::{generate_comparison_pair, generate_instance, Constraints, GeneratedInstance};
pub use report::{CheckRow, Direction, SuiteId, SuiteReport};
pub use suites::run_suite;
