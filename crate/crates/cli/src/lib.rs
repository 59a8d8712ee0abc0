//! Library surface of the experiment driver: config parsing, experiment
//! execution, and metrics analysis. The `fedsim` binary is a thin shell over
//! these modules.

pub mod analysis;
pub mod config;
pub mod error;
pub mod experiment;

pub use analysis::{analyze_dir, emit_plot_data, read_metrics_csv, rounds_to_milestone};
pub use config::{parse_config, parse_config_str, ExperimentConfig};
pub use error::{CliError, Result};
pub use experiment::{new_client_convergence, run_experiment, NewClientOutcome, PlateauRule};
