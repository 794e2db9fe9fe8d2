//! Non-blocking sampling of one process from `/proc`.
//!
//! CPU utilization is a delta metric: the first read of a session only
//! establishes a baseline, and every later read yields one [`Sample`]
//! covering the interval since the previous read. Package energy is sampled
//! on the same cadence.

use std::fs;
use std::io;
use std::sync::atomic::{AtomicBool, Ordering};
use std::thread;
use std::time::{Duration, Instant};

use log::{debug, warn};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock::now_ns;
use crate::powercap::{self, EnergyDomain, EnergyReading};

#[derive(Debug, Error)]
pub enum SampleError {
    #[error("process {0} is gone")]
    ProcessGone(u32),
    #[error("wall clock did not advance ({prev_ns} -> {cur_ns})")]
    NonMonotonicClock { prev_ns: u64, cur_ns: u64 },
    #[error("unparseable /proc data for {pid}: {reason}")]
    Parse { pid: u32, reason: String },
    #[error("reading /proc for {pid}: {source}")]
    Io { pid: u32, source: io::Error },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProcessStats {
    pub t_ns: u64,
    /// Cumulative user + system CPU seconds.
    pub cpu_time_s: f64,
    pub rss_bytes: u64,
    pub vms_bytes: u64,
    pub swap_bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub t_ns: u64,
    pub cpu_pct: f64,
    pub rss_bytes: u64,
    pub vms_bytes: u64,
    pub swap_bytes: u64,
    pub energy_delta_uj: Option<u64>,
    /// Joules accumulated since the first sample of the run.
    #[serde(skip)]
    pub energy_cum_j: f64,
}

/// Recomputes `energy_cum_j` for a sample list loaded from disk.
pub fn accumulate_energy(samples: &mut [Sample]) {
    let mut cum = 0.0;
    for s in samples {
        if let Some(d) = s.energy_delta_uj {
            cum += d as f64 * 1e-6;
        }
        s.energy_cum_j = cum;
    }
}

pub fn clock_ticks_per_second() -> f64 {
    // SAFETY: sysconf has no memory-safety preconditions.
    let ticks = unsafe { libc::sysconf(libc::_SC_CLK_TCK) };
    if ticks > 0 {
        ticks as f64
    } else {
        100.0
    }
}

/// Logical CPUs online, hyperthreads included.
pub fn logical_cores() -> usize {
    // SAFETY: as above.
    let n = unsafe { libc::sysconf(libc::_SC_NPROCESSORS_ONLN) };
    if n > 0 {
        n as usize
    } else {
        thread::available_parallelism()
            .map(|n| n.get())
            .unwrap_or(1)
    }
}

struct StatFields {
    state: char,
    utime: u64,
    stime: u64,
    cutime: u64,
    cstime: u64,
}

fn parse_stat(pid: u32, contents: &str) -> Result<StatFields, SampleError> {
    let parse_err = |reason: &str| SampleError::Parse {
        pid,
        reason: reason.to_string(),
    };
    // comm may contain spaces and parentheses; fields resume after the last ')'
    let close = contents
        .rfind(')')
        .ok_or_else(|| parse_err("no ')' in stat"))?;
    let fields: Vec<&str> = contents[close + 1..].split_whitespace().collect();
    if fields.len() < 15 {
        return Err(parse_err("short stat line"));
    }
    let num = |i: usize| {
        fields[i]
            .parse::<u64>()
            .map_err(|_| parse_err("non-numeric cpu time"))
    };
    Ok(StatFields {
        state: fields[0].chars().next().unwrap_or('?'),
        utime: num(11)?,
        stime: num(12)?,
        cutime: num(13)?,
        cstime: num(14)?,
    })
}

/// Pulls `VmRSS`, `VmSize` and `VmSwap` (kB) out of `/proc/<pid>/status`.
fn parse_status(contents: &str) -> (u64, u64, u64) {
    let mut rss = 0;
    let mut vms = 0;
    let mut swap = 0;
    for line in contents.lines() {
        let Some((key, rest)) = line.split_once(':') else {
            continue;
        };
        let slot = match key {
            "VmRSS" => &mut rss,
            "VmSize" => &mut vms,
            "VmSwap" => &mut swap,
            _ => continue,
        };
        if let Some(kb) = rest
            .split_whitespace()
            .next()
            .and_then(|v| v.parse::<u64>().ok())
        {
            *slot = kb * 1024;
        }
    }
    (rss, vms, swap)
}

fn read_proc(pid: u32, file: &str) -> Result<String, SampleError> {
    fs::read_to_string(format!("/proc/{pid}/{file}")).map_err(|e| match e.kind() {
        io::ErrorKind::NotFound => SampleError::ProcessGone(pid),
        // ESRCH surfaces as an uncategorized error on some kernels
        _ if e.raw_os_error() == Some(libc::ESRCH) => SampleError::ProcessGone(pid),
        _ => SampleError::Io { pid, source: e },
    })
}

/// One snapshot of the process' own CPU time and memory footprint.
pub fn read_process_stats(pid: u32) -> Result<ProcessStats, SampleError> {
    read_process_stats_with(pid, false)
}

/// Like [`read_process_stats`]; with `include_children` the CPU time of
/// terminated, waited-for children is added.
pub fn read_process_stats_with(
    pid: u32,
    include_children: bool,
) -> Result<ProcessStats, SampleError> {
    let stat = parse_stat(pid, &read_proc(pid, "stat")?)?;
    let t_ns = now_ns();
    if matches!(stat.state, 'Z' | 'X' | 'x') {
        return Err(SampleError::ProcessGone(pid));
    }
    let (rss_bytes, vms_bytes, swap_bytes) = parse_status(&read_proc(pid, "status")?);
    let mut ticks = stat.utime + stat.stime;
    if include_children {
        ticks += stat.cutime + stat.cstime;
    }
    Ok(ProcessStats {
        t_ns,
        cpu_time_s: ticks as f64 / clock_ticks_per_second(),
        rss_bytes,
        vms_bytes,
        swap_bytes,
    })
}

/// CPU share of the whole machine over `prev..cur`, in percent of
/// `n_cores` fully busy cores, clamped to `[0, 100]`.
pub fn cpu_utilization(
    prev: &ProcessStats,
    cur: &ProcessStats,
    n_cores: usize,
) -> Result<f64, SampleError> {
    if cur.t_ns <= prev.t_ns {
        return Err(SampleError::NonMonotonicClock {
            prev_ns: prev.t_ns,
            cur_ns: cur.t_ns,
        });
    }
    let wall_s = (cur.t_ns - prev.t_ns) as f64 / 1e9;
    let cpu_s = cur.cpu_time_s - prev.cpu_time_s;
    let pct = 100.0 * (cpu_s / wall_s) / n_cores.max(1) as f64;
    Ok(pct.clamp(0.0, 100.0))
}

/// Baselines carried from one sampling step to the next.
#[derive(Debug, Clone)]
pub struct Baseline {
    pub stats: ProcessStats,
    /// `None` when energy is unavailable for the session.
    pub energy: Option<Vec<EnergyReading>>,
}

/// Produces the sample for the interval since `prev` and the baselines for
/// the next step. A failed energy read yields a sample without energy and
/// keeps the previous energy baseline, so the energy is attributed to the
/// next successful sample instead of being lost.
pub fn take_sample(
    pid: u32,
    prev: &Baseline,
    domains: &[EnergyDomain],
    n_cores: usize,
    include_children: bool,
) -> Result<(Sample, Baseline), SampleError> {
    let stats = read_process_stats_with(pid, include_children)?;
    let (energy_delta_uj, energy) = match &prev.energy {
        None => (None, None),
        Some(prev_readings) => match powercap::read_all(domains)
            .and_then(|cur| powercap::total_delta(domains, prev_readings, &cur).map(|d| (d, cur)))
        {
            Ok((delta, cur)) => (Some(delta), Some(cur)),
            Err(e) => {
                warn!("energy sample missing: {e}");
                (None, Some(prev_readings.clone()))
            }
        },
    };
    let cpu_pct = cpu_utilization(&prev.stats, &stats, n_cores)?;
    Ok((
        Sample {
            t_ns: stats.t_ns,
            cpu_pct,
            rss_bytes: stats.rss_bytes,
            vms_bytes: stats.vms_bytes,
            swap_bytes: stats.swap_bytes,
            energy_delta_uj,
            energy_cum_j: 0.0,
        },
        Baseline { stats, energy },
    ))
}

#[derive(Debug, Clone)]
pub struct SamplerConfig {
    pub interval: Duration,
    pub n_cores: usize,
    pub include_children: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            interval: Duration::from_millis(50),
            n_cores: logical_cores(),
            include_children: false,
        }
    }
}

/// Stateful sampler for one process. The first [`Sampler::step`] only takes
/// the baseline.
pub struct Sampler {
    pid: u32,
    cfg: SamplerConfig,
    domains: Vec<EnergyDomain>,
    baseline: Option<Baseline>,
    cum_j: f64,
    last_t_ns: u64,
}

impl Sampler {
    /// `domains` empty means energy is not measured.
    pub fn new(pid: u32, cfg: SamplerConfig, domains: Vec<EnergyDomain>) -> Self {
        Sampler {
            pid,
            cfg,
            domains,
            baseline: None,
            cum_j: 0.0,
            last_t_ns: 0,
        }
    }

    pub fn step(&mut self) -> Result<Option<Sample>, SampleError> {
        let Some(prev) = &self.baseline else {
            let stats = read_process_stats_with(self.pid, self.cfg.include_children)?;
            let energy = if self.domains.is_empty() {
                None
            } else {
                match powercap::read_all(&self.domains) {
                    Ok(r) => Some(r),
                    Err(e) => {
                        warn!("energy baseline unavailable, continuing without energy: {e}");
                        None
                    }
                }
            };
            self.baseline = Some(Baseline { stats, energy });
            return Ok(None);
        };

        match take_sample(
            self.pid,
            prev,
            &self.domains,
            self.cfg.n_cores,
            self.cfg.include_children,
        ) {
            Ok((mut sample, next)) => {
                self.baseline = Some(next);
                if sample.t_ns <= self.last_t_ns {
                    debug!(
                        "dropping sample with non-increasing timestamp {}",
                        sample.t_ns
                    );
                    return Ok(None);
                }
                if let Some(d) = sample.energy_delta_uj {
                    self.cum_j += d as f64 * 1e-6;
                }
                sample.energy_cum_j = self.cum_j;
                self.last_t_ns = sample.t_ns;
                Ok(Some(sample))
            }
            Err(SampleError::NonMonotonicClock { prev_ns, cur_ns }) => {
                debug!("clock went from {prev_ns} to {cur_ns}; sample discarded");
                if let Some(b) = &mut self.baseline {
                    b.stats = read_process_stats_with(self.pid, self.cfg.include_children)?;
                }
                Ok(None)
            }
            Err(e) => Err(e),
        }
    }
}

/// Everything a finished sampling session produced.
#[derive(Debug, Clone, Default)]
pub struct SessionOutput {
    pub samples: Vec<Sample>,
    pub steps: usize,
    pub max_step_ns: u64,
    pub mean_step_ns: f64,
}

/// Samples `pid` every `cfg.interval` until the process disappears or `stop`
/// is raised. Each step reads `/proc` and the energy counters once and never
/// waits on the target.
pub fn run_session(
    pid: u32,
    cfg: SamplerConfig,
    domains: Vec<EnergyDomain>,
    stop: &AtomicBool,
) -> SessionOutput {
    let interval = cfg.interval;
    let mut sampler = Sampler::new(pid, cfg, domains);
    let mut out = SessionOutput::default();
    let mut total_step_ns = 0u128;

    match sampler.step() {
        Ok(_) => {}
        Err(SampleError::ProcessGone(_)) => return out,
        Err(e) => {
            warn!("sampling {pid} failed at baseline: {e}");
            return out;
        }
    }
    while !stop.load(Ordering::Acquire) {
        thread::sleep(interval);
        if stop.load(Ordering::Acquire) {
            break;
        }
        let started = Instant::now();
        let result = sampler.step();
        let took = started.elapsed().as_nanos() as u64;
        out.steps += 1;
        total_step_ns += took as u128;
        out.max_step_ns = out.max_step_ns.max(took);
        match result {
            Ok(Some(s)) => out.samples.push(s),
            Ok(None) => {}
            Err(SampleError::ProcessGone(_)) => break,
            Err(e) => {
                warn!("sampling {pid} stopped: {e}");
                break;
            }
        }
    }
    if out.steps > 0 {
        out.mean_step_ns = total_step_ns as f64 / out.steps as f64;
    }
    out
}
