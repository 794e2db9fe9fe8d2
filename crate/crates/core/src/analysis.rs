//! Post-processing of a finished (or partial) output directory: validate
//! runs, reduce regions, pair repetitions and aggregate ratios.

use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use thiserror::Error;

use crate::config::ExperimentConfig;
use crate::model::{Metric, ParamValue};
use crate::ratiostats::{self, RatioSummary, StatsError, DEFAULT_CONFIDENCE};
use crate::regions::{self, RegionMetrics};
use crate::report::{self, ReportError};
use crate::runner::{self, CellKey};

pub const ANALYSIS_FILE: &str = "analysis.csv";

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("no valid pairs in {0}")]
    NoValidPairs(PathBuf),
    #[error(transparent)]
    Report(#[from] ReportError),
    #[error("writing {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

/// One `(scenario, param, metric)` cell of the analysis.
#[derive(Debug, Clone, PartialEq)]
pub struct AnalysisRow {
    pub scenario: String,
    pub param: ParamValue,
    pub metric: Metric,
    /// Valid pairs that entered the aggregate.
    pub n: usize,
    /// `None` when fewer than two pairs survived.
    pub summary: Option<RatioSummary>,
}

#[derive(Debug, Default)]
pub struct AnalysisOutput {
    pub rows: Vec<AnalysisRow>,
    /// Human-readable reasons for every excluded run or pair.
    pub notes: Vec<String>,
    pub csv_path: PathBuf,
}

/// Loads one run and reduces its region, or explains why it cannot be used.
fn usable_metrics(
    dir: &Path,
    key: &CellKey,
    region: &str,
    notes: &mut Vec<String>,
) -> Result<Option<RegionMetrics>, AnalysisError> {
    let run_dir = key.dir(dir);
    let label = format!(
        "{}/{}/{}/{}",
        key.scenario, key.param, key.build_id, key.rep
    );
    if !runner::is_complete(&run_dir) {
        notes.push(format!("{label}: missing run"));
        return Ok(None);
    }
    let run = match runner::load_run(&run_dir) {
        Ok(r) => r,
        Err(e) => {
            notes.push(format!("{label}: unreadable ({e})"));
            return Ok(None);
        }
    };
    let verdict = regions::validate_run(&run, region);
    if !verdict.is_valid() {
        notes.push(format!("{label}: invalid ({})", verdict.reasons.join(", ")));
        return Ok(None);
    }
    let metrics = match regions::extract_region(&run, region) {
        Ok(m) => m,
        Err(e) => {
            notes.push(format!("{label}: {e}"));
            return Ok(None);
        }
    };
    if metrics.peak_swap_bytes.unwrap_or(0) > 0 {
        warn!(
            "{label}: region swapped {} bytes",
            metrics.peak_swap_bytes.unwrap_or(0)
        );
    }
    if metrics.cpu_mean_pct.is_none() {
        notes.push(format!(
            "{label}: no samples in region; only time is paired"
        ));
    }
    regions::write_region_metrics(&run_dir, &metrics).map_err(|source| AnalysisError::Io {
        path: run_dir.clone(),
        source,
    })?;
    Ok(Some(metrics))
}

/// Analyzes the runs stored under `dir` according to `cfg` and writes
/// `analysis.csv` there. Cells with too few pairs are kept as insufficient
/// rows; the call only fails if no cell could be aggregated at all.
pub fn analyze(cfg: &ExperimentConfig, dir: &Path) -> Result<AnalysisOutput, AnalysisError> {
    let mut out = AnalysisOutput::default();
    let reference = &cfg.reference().id;
    let candidate = &cfg.candidate().id;

    for scenario in &cfg.scenarios {
        for param in &scenario.param_values {
            let mut reps: Vec<(RegionMetrics, RegionMetrics)> = Vec::new();
            for rep in 0..cfg.repetitions {
                let key = |build: &String| CellKey {
                    scenario: scenario.name.clone(),
                    param: param.clone(),
                    build_id: build.clone(),
                    rep,
                };
                let cand = usable_metrics(dir, &key(candidate), &scenario.region, &mut out.notes)?;
                let refm = usable_metrics(dir, &key(reference), &scenario.region, &mut out.notes)?;
                match (cand, refm) {
                    (Some(c), Some(r)) => reps.push((c, r)),
                    _ => out
                        .notes
                        .push(format!("{}/{param} rep {rep}: pair dropped", scenario.name)),
                }
            }

            for metric in Metric::ALL {
                let pairs: Vec<(f64, f64)> = reps
                    .iter()
                    .filter_map(|(c, r)| {
                        let pair = (c.value(metric)?, r.value(metric)?);
                        ratiostats::per_run_ratio(pair.0, pair.1).ok().map(|_| pair)
                    })
                    .collect();
                let series = ratiostats::PairedSeries {
                    scenario: scenario.name.clone(),
                    param_value: param.clone(),
                    metric,
                    pairs,
                };
                let summary = match ratiostats::aggregate(&series, DEFAULT_CONFIDENCE) {
                    Ok(s) => Some(s),
                    Err(StatsError::InsufficientPairs(n)) => {
                        info!(
                            "{}/{param}/{metric}: insufficient data (n = {n})",
                            scenario.name
                        );
                        None
                    }
                    Err(e) => {
                        warn!("{}/{param}/{metric}: {e}", scenario.name);
                        None
                    }
                };
                out.rows.push(AnalysisRow {
                    scenario: scenario.name.clone(),
                    param: param.clone(),
                    metric,
                    n: series.n(),
                    summary,
                });
            }
        }
    }

    for note in &out.notes {
        info!("{note}");
    }
    fs::create_dir_all(dir).map_err(|source| AnalysisError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    out.csv_path = dir.join(ANALYSIS_FILE);
    report::export_csv(&out.rows, &out.csv_path)?;

    if out.rows.iter().all(|r| r.summary.is_none()) {
        return Err(AnalysisError::NoValidPairs(dir.to_path_buf()));
    }
    Ok(out)
}

/// [`analyze`] using the configuration saved in `dir` by the runner.
pub fn analyze_dir(dir: &Path) -> Result<AnalysisOutput, Box<dyn std::error::Error + Send + Sync>> {
    let cfg = runner::load_config(dir)?;
    Ok(analyze(&cfg, dir)?)
}
