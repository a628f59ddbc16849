//! Experiment orchestration: configuration parsing, the study runners, and
//! CSV/JSON report writing.

pub mod config;
pub mod studies;

pub use config::{parse_config, parse_config_str, DriftConfig, ExperimentKind, ExperimentSpec};
pub use studies::{
    run_experiment, run_fluct_check, run_kbm_check, run_rates_table, run_simulate,
    run_strong_study, run_weak_study, Gate,
};

use crate::error::Result;

/// Version string embedded in every report.
pub const VERSION: &str = concat!("avgsde-", env!("CARGO_PKG_VERSION"));

/// 17-significant-digit scientific notation; every float in a CSV data file
/// goes through here so report bytes are reproducible and lossless.
pub fn format_float(x: f64) -> String {
    format!("{x:.16e}")
}

/// A finished study: data rows (CSV), JSON summary, verdict and a one-line
/// human summary. Data files are always written, pass or fail.
pub struct Report {
    pub kind: ExperimentKind,
    pub csv_file: String,
    pub csv: String,
    pub summary_json: String,
    pub pass: bool,
    pub text: String,
}

/// Write `<dir>/<csv_file>` and `<dir>/summary.json`, creating `dir`.
pub fn write_report(report: &Report, dir: &std::path::Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join(&report.csv_file), report.csv.as_bytes())?;
    std::fs::write(dir.join("summary.json"), report.summary_json.as_bytes())?;
    Ok(())
}
