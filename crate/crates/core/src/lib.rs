//! Paired benchmarking of two interpreter builds: sample tagged regions of
//! child processes (time, CPU, memory, RAPL energy) and summarize per-run
//! ratios as geometric means with Student-t confidence intervals.

pub mod analysis;
pub mod clock;
pub mod config;
pub mod doctor;
pub mod model;
pub mod powercap;
pub mod procsample;
pub mod ratiostats;
pub mod regions;
pub mod report;
pub mod runner;
pub mod tagstream;

pub use analysis::{analyze, analyze_dir, AnalysisOutput, AnalysisRow};
pub use config::{BuildSpec, ExperimentConfig, ScenarioSpec};
pub use model::{Metric, ParamValue};
pub use powercap::{EnergyDomain, EnergyReading};
pub use procsample::{ProcessStats, Sample};
pub use ratiostats::{aggregate, Classification, PairedSeries, RatioSummary};
pub use regions::{extract_region, validate_run, RegionMetrics};
pub use runner::{execute_matrix, execute_run, RunRecord};
pub use tagstream::{Region, TagEvent, TAG_FILE_ENV};
