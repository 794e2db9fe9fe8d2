//! Independent oracles and fixtures shared by the integration tests.
//!
//! Nothing here calls into the statistics or reduction code of the crate; the
//! point is to have a second implementation to compare against.
#![allow(dead_code)]

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use wattbench_core::config::{ReportConfig, ScriptTemplate};
use wattbench_core::runner::RunMetadata;
use wattbench_core::{
    BuildSpec, ExperimentConfig, ParamValue, RunRecord, Sample, ScenarioSpec, TagEvent,
};

/// Neumaier-compensated sum.
pub fn compensated_sum(xs: impl IntoIterator<Item = f64>) -> f64 {
    let mut sum = 0.0f64;
    let mut c = 0.0f64;
    for x in xs {
        let t = sum + x;
        if sum.abs() >= x.abs() {
            c += (sum - t) + x;
        } else {
            c += (x - t) + sum;
        }
        sum = t;
    }
    sum + c
}

/// Central probability mass `P(|T| <= t)` for an integer number of degrees of
/// freedom, via the finite trigonometric series for Student's t.
pub fn t_central_mass(t: f64, dof: u64) -> f64 {
    let theta = (t / (dof as f64).sqrt()).atan();
    let (s, c) = theta.sin_cos();
    let c2 = c * c;
    if dof == 1 {
        return 2.0 * theta / PI;
    }
    if dof % 2 == 1 {
        let mut term = c;
        let mut terms = vec![term];
        let mut k = 1u64;
        while 2 * k + 1 < dof {
            term *= c2 * (2 * k) as f64 / (2 * k + 1) as f64;
            terms.push(term);
            k += 1;
        }
        2.0 / PI * (theta + s * compensated_sum(terms))
    } else {
        let mut term = 1.0;
        let mut terms = vec![term];
        let mut k = 1u64;
        while 2 * k < dof {
            term *= c2 * (2 * k - 1) as f64 / (2 * k) as f64;
            terms.push(term);
            k += 1;
        }
        s * compensated_sum(terms)
    }
}

/// Upper quantile `t` with `P(T <= t) = p`, `p > 0.5`, by bisection.
pub fn t_quantile_oracle(p: f64, dof: u64) -> f64 {
    assert!(p > 0.5 && p < 1.0);
    let target = 2.0 * p - 1.0;
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    while t_central_mass(hi, dof) < target {
        hi *= 2.0;
    }
    for _ in 0..2000 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if t_central_mass(mid, dof) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

#[derive(Debug, Clone, Copy)]
pub struct OracleSummary {
    pub r_geo: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub classification: &'static str,
}

/// Geometric mean and t interval computed with compensated sums in input
/// order.
pub fn oracle_aggregate(ratios: &[f64], confidence: f64) -> OracleSummary {
    let n = ratios.len();
    let logs: Vec<f64> = ratios.iter().map(|r| r.ln()).collect();
    let mean = compensated_sum(logs.iter().copied()) / n as f64;
    let ss = compensated_sum(logs.iter().map(|l| (l - mean) * (l - mean)));
    let sd = (ss / (n as f64 - 1.0)).sqrt();
    let t = t_quantile_oracle(0.5 + confidence / 2.0, n as u64 - 1);
    let half = t * sd / (n as f64).sqrt();
    let (ci_low, ci_high) = ((mean - half).exp(), (mean + half).exp());
    let classification = if ci_high < 1.0 {
        "NOGIL_LOWER"
    } else if ci_low > 1.0 {
        "NOGIL_HIGHER"
    } else {
        "INDISTINGUISHABLE"
    };
    OracleSummary {
        r_geo: mean.exp(),
        ci_low,
        ci_high,
        classification,
    }
}

pub fn rel_close(a: f64, b: f64, tol: f64) -> bool {
    if a == b {
        return true;
    }
    (a - b).abs() <= tol * a.abs().max(b.abs())
}

#[derive(Debug, Clone, PartialEq)]
pub struct BruteMetrics {
    pub elapsed_s: f64,
    pub cpu_mean_pct: Option<f64>,
    pub peak_rss: Option<u64>,
    pub peak_vms: Option<u64>,
    pub peak_swap: Option<u64>,
    pub energy_j: Option<f64>,
    pub power_w: Option<f64>,
}

/// Reduces a region straight from the on-disk text files, splitting lines by
/// hand. Returns `None` if the region is not well formed.
pub fn brute_force_region(samples_csv: &str, tags_tsv: &str, region: &str) -> Option<BruteMetrics> {
    let mut start = None;
    let mut finish = None;
    for line in tags_tsv.lines() {
        let Some((t, name)) = line.split_once('\t') else {
            continue;
        };
        let Ok(t) = t.parse::<u64>() else { continue };
        if start.is_none() && name == format!("start_{region}") {
            start = Some(t);
        } else if start.is_some() && finish.is_none() && name == format!("finish_{region}") {
            finish = Some(t);
        }
    }
    let (start, finish) = (start?, finish?);
    if finish <= start {
        return None;
    }

    let mut n = 0usize;
    let mut cpu = Vec::new();
    let (mut rss, mut vms, mut swap) = (0u64, 0u64, 0u64);
    let mut energy: Option<u128> = None;
    for line in samples_csv.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        let t: u64 = f[0].parse().unwrap();
        if t < start || t > finish {
            continue;
        }
        n += 1;
        cpu.push(f[1].parse::<f64>().unwrap());
        rss = rss.max(f[2].parse().unwrap());
        vms = vms.max(f[3].parse().unwrap());
        swap = swap.max(f[4].parse().unwrap());
        if !f[5].is_empty() {
            *energy.get_or_insert(0) += f[5].parse::<u128>().unwrap();
        }
    }
    let elapsed_s = (finish - start) as f64 / 1e9;
    if n == 0 {
        return Some(BruteMetrics {
            elapsed_s,
            cpu_mean_pct: None,
            peak_rss: None,
            peak_vms: None,
            peak_swap: None,
            energy_j: None,
            power_w: None,
        });
    }
    let energy_j = energy.map(|uj| uj as f64 / 1e6);
    Some(BruteMetrics {
        elapsed_s,
        cpu_mean_pct: Some(compensated_sum(cpu) / n as f64),
        peak_rss: Some(rss),
        peak_vms: Some(vms),
        peak_swap: Some(swap),
        energy_j,
        power_w: energy_j.map(|e| e / elapsed_s),
    })
}

pub fn metadata() -> RunMetadata {
    RunMetadata {
        host: "test".into(),
        n_cores: 4,
        energy_domains: vec!["intel-rapl:0".into()],
        energy_scope: "test".into(),
        sample_interval_ms: 50,
        governor: None,
        command: vec!["true".into()],
        sampler_steps: 0,
        sampler_max_step_ns: 0,
        sampler_mean_step_ns: 0.0,
    }
}

/// A random but well-formed run with region `r` and some unrelated tags.
pub fn random_run<R: Rng>(rng: &mut R) -> RunRecord {
    let n = rng.gen_range(0..400usize);
    let t0: u64 = rng.gen_range(1_000_000_000..2_000_000_000_000_000_000);
    let mut t = t0;
    let mut samples = Vec::with_capacity(n);
    for _ in 0..n {
        t += rng.gen_range(1..120_000_000u64);
        let energy = if rng.gen_bool(0.1) {
            None
        } else {
            Some(rng.gen_range(0..50_000_000u64))
        };
        samples.push(Sample {
            t_ns: t,
            cpu_pct: rng.gen_range(0.0..100.0),
            rss_bytes: rng.gen_range(0..1u64 << 36),
            vms_bytes: rng.gen_range(0..1u64 << 40),
            swap_bytes: if rng.gen_bool(0.8) {
                0
            } else {
                rng.gen_range(0..1u64 << 30)
            },
            energy_delta_uj: energy,
            energy_cum_j: 0.0,
        });
    }
    let span = (t - t0).max(2);
    let a = t0 + rng.gen_range(0..span);
    let b = t0 + rng.gen_range(0..span);
    let (start, finish) = if a == b {
        (a, a + 1)
    } else {
        (a.min(b), a.max(b))
    };
    let mut tags = vec![
        TagEvent {
            t_ns: t0,
            name: "start_setup".into(),
        },
        TagEvent {
            t_ns: start,
            name: "start_r".into(),
        },
        TagEvent {
            t_ns: (start + finish) / 2,
            name: "checkpoint".into(),
        },
        TagEvent {
            t_ns: finish,
            name: "finish_r".into(),
        },
    ];
    if rng.gen_bool(0.5) {
        tags.push(TagEvent {
            t_ns: finish + 1,
            name: "start_r".into(),
        });
    }
    RunRecord {
        scenario: "synthetic".into(),
        param_value: ParamValue::Int(1),
        build_id: "gil".into(),
        rep_index: 0,
        samples,
        tags,
        exit_code: 0,
        started_at_ns: t0,
        finished_at_ns: t + 1,
        invalid_reason: None,
        metadata: metadata(),
    }
}

/// Creates a powercap-style domain directory.
pub fn add_domain(root: &Path, id: &str, max: u64, counter: u64) -> PathBuf {
    let dir = root.join(id);
    fs::create_dir_all(&dir).unwrap();
    fs::write(dir.join("name"), format!("package-{id}\n")).unwrap();
    fs::write(dir.join("max_energy_range_uj"), format!("{max}\n")).unwrap();
    fs::write(dir.join("energy_uj"), format!("{counter}\n")).unwrap();
    dir
}

/// Replaces a counter file atomically so concurrent readers never see a
/// truncated value.
pub fn set_counter(domain_dir: &Path, value: u64) {
    let tmp = domain_dir.join("energy_uj.tmp");
    fs::write(&tmp, format!("{value}\n")).unwrap();
    fs::rename(tmp, domain_dir.join("energy_uj")).unwrap();
}

/// A `sh -c` build whose script body receives the expanded scenario args as
/// `$1`, `$2`, ...
pub fn sh_build(id: &str, body: &str) -> BuildSpec {
    BuildSpec {
        id: id.into(),
        command: vec!["sh".into(), "-c".into(), body.into(), "sh".into()],
        env_overrides: BTreeMap::new(),
    }
}

/// Tags with wall-clock timestamps around a sleep of `factor * param`
/// seconds.
pub fn sleeping_build(id: &str, factor: f64) -> BuildSpec {
    sh_build(
        id,
        &format!(
            r#"printf '%s\tstart_work\n' "$(date +%s%N)" >> "$WATTBENCH_TAG_FILE"
sleep "$(awk "BEGIN {{ print {factor} * $1 }}")"
printf '%s\tfinish_work\n' "$(date +%s%N)" >> "$WATTBENCH_TAG_FILE""#
        ),
    )
}

/// Writes fixed tag timestamps derived only from the parameter, so every
/// rerun yields the same region length.
pub fn deterministic_build(id: &str, per_param_ns: u64) -> BuildSpec {
    sh_build(
        id,
        &format!(
            r#"printf '1000\tstart_work\n%s\tfinish_work\n' "$((1000 + {per_param_ns} * $1))" >> "$WATTBENCH_TAG_FILE""#
        ),
    )
}

pub fn matrix_config(
    out: &Path,
    powercap_root: &Path,
    builds: Vec<BuildSpec>,
    reps: u32,
) -> ExperimentConfig {
    ExperimentConfig {
        builds,
        scenarios: vec![ScenarioSpec {
            name: "sleepy".into(),
            script: ScriptTemplate::Args(vec!["{param}".into()]),
            region: "work".into(),
            param_name: "seconds".into(),
            param_values: vec![ParamValue::Int(1), ParamValue::Int(2)],
        }],
        repetitions: reps,
        cooldown_s: 0.0,
        sample_interval_ms: 50,
        powercap_root: powercap_root.to_path_buf(),
        output_dir: out.to_path_buf(),
        energy_domains: None,
        include_children: false,
        report: ReportConfig::default(),
    }
}
