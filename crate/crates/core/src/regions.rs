//! Reduction of one run to scalar metrics over its tagged region.
//!
//! Elapsed time comes from the tag timestamps. Every other metric uses the
//! samples whose timestamp (the end of their interval) lies inside
//! `[start_ns, finish_ns]`. A sample's energy delta covers the interval
//! before its timestamp, so attributed energy can be off from the true
//! in-region energy by at most one interval at each boundary.

use std::fs;
use std::path::Path;

use log::warn;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::Metric;
use crate::runner::RunRecord;
use crate::tagstream::{self, Region, TagError};

pub const REGION_METRICS_FILE: &str = "region_metrics.json";

#[derive(Debug, Error, PartialEq, Eq)]
pub enum RegionError {
    #[error("region {region:?} not found: {source}")]
    RegionNotFound { region: String, source: TagError },
    #[error("region {0} does not end after it starts")]
    RegionOrder(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionMetrics {
    pub elapsed_s: f64,
    pub cpu_mean_pct: Option<f64>,
    pub peak_rss_bytes: Option<u64>,
    pub peak_vms_bytes: Option<u64>,
    pub peak_swap_bytes: Option<u64>,
    pub energy_j: Option<f64>,
    pub power_mean_w: Option<f64>,
}

impl RegionMetrics {
    /// The value compared between builds for `metric`.
    pub fn value(&self, metric: Metric) -> Option<f64> {
        match metric {
            Metric::Time => Some(self.elapsed_s),
            Metric::Cpu => self.cpu_mean_pct,
            Metric::Energy => self.energy_j,
            Metric::Vms => self.peak_vms_bytes.map(|v| v as f64),
            Metric::Rss => self.peak_rss_bytes.map(|v| v as f64),
            Metric::Swap => self.peak_swap_bytes.map(|v| v as f64),
        }
    }
}

pub fn resolve_region(run: &RunRecord, region_name: &str) -> Result<Region, RegionError> {
    let region = tagstream::find_region(&run.tags, region_name).map_err(|source| {
        RegionError::RegionNotFound {
            region: region_name.to_string(),
            source,
        }
    })?;
    if region.finish_ns <= region.start_ns {
        return Err(RegionError::RegionOrder(region.to_string()));
    }
    Ok(region)
}

pub fn extract_region(run: &RunRecord, region_name: &str) -> Result<RegionMetrics, RegionError> {
    let region = resolve_region(run, region_name)?;
    let elapsed_s = region.elapsed_s();

    let inside: Vec<_> = run
        .samples
        .iter()
        .filter(|s| region.contains(s.t_ns))
        .collect();
    if inside.is_empty() {
        warn!(
            "{}/{}/{}/{}: no samples inside {region}; only elapsed time is available",
            run.scenario, run.param_value, run.build_id, run.rep_index
        );
        return Ok(RegionMetrics {
            elapsed_s,
            cpu_mean_pct: None,
            peak_rss_bytes: None,
            peak_vms_bytes: None,
            peak_swap_bytes: None,
            energy_j: None,
            power_mean_w: None,
        });
    }

    let cpu_mean_pct = inside.iter().map(|s| s.cpu_pct).sum::<f64>() / inside.len() as f64;
    let peak = |f: fn(&crate::procsample::Sample) -> u64| inside.iter().map(|s| f(s)).max();

    let mut energy_uj: Option<u64> = None;
    for d in inside.iter().filter_map(|s| s.energy_delta_uj) {
        *energy_uj.get_or_insert(0) += d;
    }
    // integer sum first, then one conversion
    let energy_j = energy_uj.map(|uj| uj as f64 * 1e-6);

    Ok(RegionMetrics {
        elapsed_s,
        cpu_mean_pct: Some(cpu_mean_pct),
        peak_rss_bytes: peak(|s| s.rss_bytes),
        peak_vms_bytes: peak(|s| s.vms_bytes),
        peak_swap_bytes: peak(|s| s.swap_bytes),
        energy_j,
        power_mean_w: energy_j.map(|e| e / elapsed_s),
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Verdict {
    pub reasons: Vec<&'static str>,
}

impl Verdict {
    pub fn is_valid(&self) -> bool {
        self.reasons.is_empty()
    }
}

/// Checks everything that makes a run unusable for pairing.
pub fn validate_run(run: &RunRecord, region_name: &str) -> Verdict {
    let mut reasons = Vec::new();
    if run.exit_code != 0 {
        reasons.push("nonzero-exit");
    }
    if run.samples.windows(2).any(|w| w[0].t_ns >= w[1].t_ns) {
        reasons.push("non-monotonic-samples");
    }
    match resolve_region(run, region_name) {
        Ok(_) => {}
        Err(RegionError::RegionOrder(_)) => reasons.push("region-order"),
        Err(RegionError::RegionNotFound { source, .. }) => {
            let finish = format!("finish_{region_name}");
            let has_finish = run.tags.iter().any(|t| t.name == finish);
            match source {
                TagError::MissingFinish(_) if has_finish => reasons.push("region-order"),
                _ => reasons.push("region-missing"),
            }
        }
    }
    Verdict { reasons }
}

pub fn write_region_metrics(dir: &Path, metrics: &RegionMetrics) -> std::io::Result<()> {
    let mut json = serde_json::to_vec_pretty(metrics).expect("metrics serialize");
    json.push(b'\n');
    fs::write(dir.join(REGION_METRICS_FILE), json)
}

#[cfg(test)]
pub(crate) mod testutil {
    use crate::model::ParamValue;
    use crate::procsample::Sample;
    use crate::runner::{RunMetadata, RunRecord};
    use crate::tagstream::TagEvent;

    pub fn sample(t_ns: u64, cpu: f64, rss: u64, energy: Option<u64>) -> Sample {
        Sample {
            t_ns,
            cpu_pct: cpu,
            rss_bytes: rss,
            vms_bytes: rss * 4,
            swap_bytes: 0,
            energy_delta_uj: energy,
            energy_cum_j: 0.0,
        }
    }

    pub fn run(samples: Vec<Sample>, tags: &[(u64, &str)], exit_code: i32) -> RunRecord {
        RunRecord {
            scenario: "s".into(),
            param_value: ParamValue::Int(1),
            build_id: "b".into(),
            rep_index: 0,
            samples,
            tags: tags
                .iter()
                .map(|&(t_ns, n)| TagEvent {
                    t_ns,
                    name: n.into(),
                })
                .collect(),
            exit_code,
            started_at_ns: 0,
            finished_at_ns: 0,
            invalid_reason: None,
            metadata: RunMetadata {
                host: "h".into(),
                n_cores: 1,
                energy_domains: vec![],
                energy_scope: String::new(),
                sample_interval_ms: 50,
                governor: None,
                command: vec![],
                sampler_steps: 0,
                sampler_max_step_ns: 0,
                sampler_mean_step_ns: 0.0,
            },
        }
    }
}
