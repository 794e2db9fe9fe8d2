//! Experiment matrix execution and raw-run persistence.
//!
//! Every run lives in its own directory:
//!
//! ```text
//! <output_dir>/<scenario>/<param>/<build>/<rep>/
//!     samples.csv   t_ns,cpu_pct,rss_bytes,vms_bytes,swap_bytes,energy_delta_uj
//!     tags.tsv      raw tag lines written by the child
//!     meta.json     exit code, timing, host metadata (written last)
//!     stdout.log, stderr.log
//! ```
//!
//! A cell counts as done once `meta.json` exists, which is what makes an
//! interrupted matrix resumable.

use std::fs::{self, File};
use std::io::{self, Write};
use std::ops::ControlFlow;
use std::path::{Path, PathBuf};
use std::process::{Command, ExitStatus, Stdio};
use std::sync::atomic::{AtomicBool, Ordering};
use std::thread;
use std::time::Duration;

use log::{info, warn};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock::now_ns;
use crate::config::{BuildSpec, ExperimentConfig, ScenarioSpec};
use crate::model::ParamValue;
use crate::powercap::{self, EnergyDomain, PowercapError};
use crate::procsample::{self, Sample, SamplerConfig};
use crate::tagstream::{self, TagEvent, TAG_FILE_ENV};

pub const SAMPLES_FILE: &str = "samples.csv";
pub const TAGS_FILE: &str = "tags.tsv";
pub const META_FILE: &str = "meta.json";
pub const CONFIG_FILE: &str = "config.json";

/// Stated in every run's metadata so reports can qualify energy figures.
pub const ENERGY_SCOPE: &str = "system-wide RAPL, no idle-baseline subtraction";

#[derive(Debug, Error)]
pub enum RunError {
    #[error("failed to spawn {command:?}: {source}")]
    SpawnFailure {
        command: Vec<String>,
        source: io::Error,
    },
    #[error("I/O error at {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("corrupt run data at {path}: {reason}")]
    Corrupt { path: PathBuf, reason: String },
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> RunError + '_ {
    move |source| RunError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Address of one run in the matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct CellKey {
    pub scenario: String,
    pub param: ParamValue,
    pub build_id: String,
    pub rep: u32,
}

impl CellKey {
    pub fn dir(&self, output_dir: &Path) -> PathBuf {
        output_dir
            .join(&self.scenario)
            .join(self.param.to_string())
            .join(&self.build_id)
            .join(self.rep.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetadata {
    pub host: String,
    pub n_cores: usize,
    pub energy_domains: Vec<String>,
    pub energy_scope: String,
    pub sample_interval_ms: u64,
    pub governor: Option<String>,
    pub command: Vec<String>,
    pub sampler_steps: usize,
    pub sampler_max_step_ns: u64,
    pub sampler_mean_step_ns: f64,
}

/// Contents of `meta.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct MetaFile {
    scenario: String,
    param: ParamValue,
    build: String,
    rep: u32,
    exit_code: i32,
    started_at_ns: u64,
    finished_at_ns: u64,
    invalid_reason: Option<String>,
    metadata: RunMetadata,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub scenario: String,
    pub param_value: ParamValue,
    pub build_id: String,
    pub rep_index: u32,
    pub samples: Vec<Sample>,
    pub tags: Vec<TagEvent>,
    pub exit_code: i32,
    pub started_at_ns: u64,
    pub finished_at_ns: u64,
    /// Set when the run is known to be unusable at execution time.
    pub invalid_reason: Option<String>,
    pub metadata: RunMetadata,
}

impl RunRecord {
    pub fn key(&self) -> CellKey {
        CellKey {
            scenario: self.scenario.clone(),
            param: self.param_value.clone(),
            build_id: self.build_id.clone(),
            rep: self.rep_index,
        }
    }

    pub fn duration_ns(&self) -> u64 {
        self.finished_at_ns.saturating_sub(self.started_at_ns)
    }
}

fn write_samples(path: &Path, samples: &[Sample]) -> Result<(), RunError> {
    let corrupt = |e: csv::Error| RunError::Corrupt {
        path: path.to_path_buf(),
        reason: e.to_string(),
    };
    let mut w = csv::Writer::from_path(path).map_err(corrupt)?;
    for s in samples {
        w.serialize(s).map_err(corrupt)?;
    }
    if samples.is_empty() {
        w.write_record([
            "t_ns",
            "cpu_pct",
            "rss_bytes",
            "vms_bytes",
            "swap_bytes",
            "energy_delta_uj",
        ])
        .map_err(corrupt)?;
    }
    w.flush().map_err(io_err(path))
}

fn read_samples(path: &Path) -> Result<Vec<Sample>, RunError> {
    let corrupt = |e: csv::Error| RunError::Corrupt {
        path: path.to_path_buf(),
        reason: e.to_string(),
    };
    let mut r = csv::Reader::from_path(path).map_err(corrupt)?;
    let mut samples = r
        .deserialize::<Sample>()
        .collect::<Result<Vec<_>, _>>()
        .map_err(corrupt)?;
    procsample::accumulate_energy(&mut samples);
    Ok(samples)
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), RunError> {
    let tmp = path.with_extension("tmp");
    let mut f = File::create(&tmp).map_err(io_err(&tmp))?;
    f.write_all(bytes).map_err(io_err(&tmp))?;
    f.sync_all().map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

/// Persists a finished run into `dir`. `tags.tsv` is rewritten only if the
/// child did not already produce it there.
pub fn save_run(dir: &Path, run: &RunRecord) -> Result<(), RunError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    write_samples(&dir.join(SAMPLES_FILE), &run.samples)?;
    let tags_path = dir.join(TAGS_FILE);
    if !tags_path.exists() {
        let text: String = run.tags.iter().map(TagEvent::to_line).collect();
        fs::write(&tags_path, text).map_err(io_err(&tags_path))?;
    }
    let meta = MetaFile {
        scenario: run.scenario.clone(),
        param: run.param_value.clone(),
        build: run.build_id.clone(),
        rep: run.rep_index,
        exit_code: run.exit_code,
        started_at_ns: run.started_at_ns,
        finished_at_ns: run.finished_at_ns,
        invalid_reason: run.invalid_reason.clone(),
        metadata: run.metadata.clone(),
    };
    let json = serde_json::to_vec_pretty(&meta).expect("meta serializes");
    write_atomic(&dir.join(META_FILE), &json)
}

pub fn is_complete(dir: &Path) -> bool {
    dir.join(META_FILE).is_file()
}

pub fn load_run(dir: &Path) -> Result<RunRecord, RunError> {
    let meta_path = dir.join(META_FILE);
    let meta_text = fs::read(&meta_path).map_err(io_err(&meta_path))?;
    let meta: MetaFile = serde_json::from_slice(&meta_text).map_err(|e| RunError::Corrupt {
        path: meta_path.clone(),
        reason: e.to_string(),
    })?;
    let samples = read_samples(&dir.join(SAMPLES_FILE))?;
    let tags_path = dir.join(TAGS_FILE);
    let tags = match fs::read_to_string(&tags_path) {
        Ok(text) => tagstream::parse_tags(&text),
        Err(e) if e.kind() == io::ErrorKind::NotFound => Vec::new(),
        Err(e) => return Err(io_err(&tags_path)(e)),
    };
    Ok(RunRecord {
        scenario: meta.scenario,
        param_value: meta.param,
        build_id: meta.build,
        rep_index: meta.rep,
        samples,
        tags,
        exit_code: meta.exit_code,
        started_at_ns: meta.started_at_ns,
        finished_at_ns: meta.finished_at_ns,
        invalid_reason: meta.invalid_reason,
        metadata: meta.metadata,
    })
}

/// Writes the effective configuration next to the runs so that analysis can
/// be repeated from the output directory alone.
pub fn save_config(cfg: &ExperimentConfig) -> Result<(), RunError> {
    fs::create_dir_all(&cfg.output_dir).map_err(io_err(&cfg.output_dir))?;
    let path = cfg.output_dir.join(CONFIG_FILE);
    let mut json = serde_json::to_vec_pretty(cfg).expect("config serializes");
    json.push(b'\n');
    if let Ok(old) = fs::read(&path) {
        if old != json {
            warn!(
                "{} differs from the current config; overwriting",
                path.display()
            );
        }
    }
    write_atomic(&path, &json)
}

pub fn load_config(output_dir: &Path) -> Result<ExperimentConfig, crate::config::ConfigError> {
    ExperimentConfig::load(&output_dir.join(CONFIG_FILE), &[])
}

fn host_name() -> String {
    fs::read_to_string("/proc/sys/kernel/hostname")
        .map(|s| s.trim().to_string())
        .unwrap_or_else(|_| "unknown".into())
}

fn cpu_governor() -> Option<String> {
    fs::read_to_string("/sys/devices/system/cpu/cpu0/cpufreq/scaling_governor")
        .ok()
        .map(|s| s.trim().to_string())
}

fn exit_code(status: ExitStatus) -> i32 {
    use std::os::unix::process::ExitStatusExt;
    status
        .code()
        .unwrap_or_else(|| 128 + status.signal().unwrap_or(0))
}

/// Energy domains for a session, or none when energy is unavailable.
pub fn session_domains(cfg: &ExperimentConfig) -> Vec<EnergyDomain> {
    let all = match powercap::discover_domains(&cfg.powercap_root) {
        Ok(d) => d,
        Err(e @ PowercapError::PermissionDenied { .. }) => {
            warn!("{e}");
            return Vec::new();
        }
        Err(e) => {
            warn!("energy unavailable: {e}");
            return Vec::new();
        }
    };
    match powercap::select_domains(&all, cfg.energy_domains.as_deref()) {
        Ok(d) => d,
        Err(e) => {
            warn!("energy unavailable: {e}");
            Vec::new()
        }
    }
}

/// Runs one build on one scenario point under the sampler and persists the
/// result. A non-zero exit is recorded, not returned as an error.
pub fn execute_run(
    build: &BuildSpec,
    scenario: &ScenarioSpec,
    param: &ParamValue,
    rep: u32,
    cfg: &ExperimentConfig,
    domains: &[EnergyDomain],
) -> Result<RunRecord, RunError> {
    let key = CellKey {
        scenario: scenario.name.clone(),
        param: param.clone(),
        build_id: build.id.clone(),
        rep,
    };
    let dir = key.dir(&cfg.output_dir);
    if dir.exists() {
        fs::remove_dir_all(&dir).map_err(io_err(&dir))?;
    }
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    let dir = dir.canonicalize().map_err(io_err(&dir))?;
    let tag_path = dir.join(TAGS_FILE);
    File::create(&tag_path).map_err(io_err(&tag_path))?;
    let stdout_path = dir.join("stdout.log");
    let stderr_path = dir.join("stderr.log");
    let stdout = File::create(&stdout_path).map_err(io_err(&stdout_path))?;
    let stderr = File::create(&stderr_path).map_err(io_err(&stderr_path))?;

    let mut command_line = build.command.clone();
    command_line.extend(scenario.script.expand(&scenario.name, param, rep));

    let mut cmd = Command::new(&command_line[0]);
    cmd.args(&command_line[1..])
        .env(TAG_FILE_ENV, &tag_path)
        .env("WATTBENCH_SCENARIO", &scenario.name)
        .env("WATTBENCH_PARAM", param.to_string())
        .env("WATTBENCH_REP", rep.to_string())
        .envs(&build.env_overrides)
        .stdin(Stdio::null())
        .stdout(stdout)
        .stderr(stderr);

    let sampler_cfg = SamplerConfig {
        interval: Duration::from_millis(cfg.sample_interval_ms),
        n_cores: procsample::logical_cores(),
        include_children: cfg.include_children,
    };
    let n_cores = sampler_cfg.n_cores;

    let started_at_ns = now_ns();
    let mut child = cmd.spawn().map_err(|source| RunError::SpawnFailure {
        command: command_line.clone(),
        source,
    })?;
    let pid = child.id();
    let stop = AtomicBool::new(false);
    let session_domains = domains.to_vec();

    let (status, session) = thread::scope(|s| {
        let sampler = s.spawn(|| procsample::run_session(pid, sampler_cfg, session_domains, &stop));
        let status = child.wait();
        stop.store(true, Ordering::Release);
        (status, sampler.join().expect("sampler thread panicked"))
    });
    let finished_at_ns = now_ns();
    let status = status.map_err(io_err(&dir))?;
    let code = exit_code(status);

    let tags = fs::read_to_string(&tag_path)
        .map(|t| tagstream::parse_tags(&t))
        .unwrap_or_default();

    let invalid_reason = (code != 0).then(|| {
        warn!("{} exited with {code}; run marked invalid", dir.display());
        "nonzero-exit".to_string()
    });

    let record = RunRecord {
        scenario: scenario.name.clone(),
        param_value: param.clone(),
        build_id: build.id.clone(),
        rep_index: rep,
        samples: session.samples,
        tags,
        exit_code: code,
        started_at_ns,
        finished_at_ns,
        invalid_reason,
        metadata: RunMetadata {
            host: host_name(),
            n_cores,
            energy_domains: domains.iter().map(|d| d.id.clone()).collect(),
            energy_scope: ENERGY_SCOPE.to_string(),
            sample_interval_ms: cfg.sample_interval_ms,
            governor: cpu_governor(),
            command: command_line,
            sampler_steps: session.steps,
            sampler_max_step_ns: session.max_step_ns,
            sampler_mean_step_ns: session.mean_step_ns,
        },
    };
    save_run(&dir, &record)?;
    Ok(record)
}

/// All cells in execution order: scenario, parameter, repetition, then the
/// two builds with the leading build alternating between repetitions.
pub fn matrix_order(cfg: &ExperimentConfig) -> Vec<CellKey> {
    let mut cells = Vec::new();
    for scenario in &cfg.scenarios {
        for param in &scenario.param_values {
            for rep in 0..cfg.repetitions {
                let (first, second) = if rep % 2 == 0 {
                    (cfg.reference(), cfg.candidate())
                } else {
                    (cfg.candidate(), cfg.reference())
                };
                for build in [first, second] {
                    cells.push(CellKey {
                        scenario: scenario.name.clone(),
                        param: param.clone(),
                        build_id: build.id.clone(),
                        rep,
                    });
                }
            }
        }
    }
    cells
}

#[derive(Debug, Default)]
pub struct MatrixOutcome {
    /// One record per cell reached, in execution order.
    pub records: Vec<RunRecord>,
    pub executed: Vec<CellKey>,
    pub skipped: Vec<CellKey>,
    pub cooldowns: usize,
    /// False if the control callback stopped the matrix early.
    pub completed: bool,
}

pub fn execute_matrix(cfg: &ExperimentConfig) -> Result<MatrixOutcome, RunError> {
    execute_matrix_with(cfg, |_| ControlFlow::Continue(()))
}

/// Like [`execute_matrix`], calling `control` after every executed run;
/// returning `Break` stops the matrix with the finished runs persisted.
pub fn execute_matrix_with<F>(
    cfg: &ExperimentConfig,
    mut control: F,
) -> Result<MatrixOutcome, RunError>
where
    F: FnMut(&RunRecord) -> ControlFlow<()>,
{
    save_config(cfg)?;
    let domains = session_domains(cfg);
    let cooldown = Duration::from_secs_f64(cfg.cooldown_s);
    let cells = matrix_order(cfg);
    let total = cells.len();
    let mut out = MatrixOutcome::default();
    let mut ran_any = false;

    for (i, key) in cells.into_iter().enumerate() {
        let dir = key.dir(&cfg.output_dir);
        if is_complete(&dir) {
            match load_run(&dir) {
                Ok(rec) => {
                    out.records.push(rec);
                    out.skipped.push(key);
                    continue;
                }
                Err(e) => warn!("re-running {}: {e}", dir.display()),
            }
        }
        if ran_any && !cooldown.is_zero() {
            thread::sleep(cooldown);
        }
        if ran_any {
            out.cooldowns += 1;
        }
        let scenario = cfg.scenario(&key.scenario).expect("cell from config");
        let build = cfg
            .builds
            .iter()
            .find(|b| b.id == key.build_id)
            .expect("cell from config");
        info!(
            "[{}/{total}] {} {}={} build={} rep={}",
            i + 1,
            key.scenario,
            scenario.param_name,
            key.param,
            key.build_id,
            key.rep
        );
        let rec = execute_run(build, scenario, &key.param, key.rep, cfg, &domains)?;
        ran_any = true;
        out.executed.push(key);
        let flow = control(&rec);
        out.records.push(rec);
        if flow.is_break() {
            return Ok(out);
        }
    }
    out.completed = true;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ScriptTemplate;
    use std::collections::BTreeMap;

    fn cfg(dir: &Path, reps: u32) -> ExperimentConfig {
        let sh = |id: &str, body: &str| BuildSpec {
            id: id.into(),
            command: vec!["sh".into(), "-c".into(), body.into(), "sh".into()],
            env_overrides: BTreeMap::new(),
        };
        ExperimentConfig {
            builds: vec![
                sh(
                    "a",
                    r#"printf '1\tstart_r\n2\tfinish_r\n' >> "$WATTBENCH_TAG_FILE""#,
                ),
                sh(
                    "b",
                    r#"printf '1\tstart_r\n3\tfinish_r\n' >> "$WATTBENCH_TAG_FILE"; exit "$1""#,
                ),
            ],
            scenarios: vec![ScenarioSpec {
                name: "s".into(),
                script: ScriptTemplate::Args(vec!["{param}".into()]),
                region: "r".into(),
                param_name: "code".into(),
                param_values: vec![ParamValue::Int(0), ParamValue::Int(3)],
            }],
            repetitions: reps,
            cooldown_s: 0.0,
            sample_interval_ms: 10,
            powercap_root: dir.join("no-powercap"),
            output_dir: dir.join("out"),
            energy_domains: None,
            include_children: false,
            report: Default::default(),
        }
    }

    #[test]
    fn order_alternates_builds() {
        let tmp = tempfile::tempdir().unwrap();
        let order: Vec<(String, u32)> = matrix_order(&cfg(tmp.path(), 3))
            .into_iter()
            .take(6)
            .map(|k| (k.build_id, k.rep))
            .collect();
        let expect = [("a", 0), ("b", 0), ("b", 1), ("a", 1), ("a", 2), ("b", 2)];
        let expect: Vec<(String, u32)> = expect.iter().map(|(b, r)| (b.to_string(), *r)).collect();
        assert_eq!(order, expect);
    }

    #[test]
    fn matrix_runs_every_cell_and_records_exit_codes() {
        let tmp = tempfile::tempdir().unwrap();
        let c = cfg(tmp.path(), 2);
        let out = execute_matrix(&c).unwrap();
        assert!(out.completed);
        assert_eq!(out.executed.len(), 8);
        assert_eq!(out.cooldowns, 7);
        for rec in &out.records {
            let expect_code = if rec.build_id == "b" && rec.param_value == ParamValue::Int(3) {
                3
            } else {
                0
            };
            assert_eq!(rec.exit_code, expect_code, "{:?}", rec.key());
            assert_eq!(rec.invalid_reason.is_some(), expect_code != 0);
            assert_eq!(rec.tags.len(), 2);
            let loaded = load_run(&rec.key().dir(&c.output_dir)).unwrap();
            assert_eq!(&loaded, rec);
        }
        assert!(c.output_dir.join(CONFIG_FILE).is_file());
        assert_eq!(load_config(&c.output_dir).unwrap(), c);

        // second invocation skips everything
        let again = execute_matrix(&c).unwrap();
        assert!(again.executed.is_empty());
        assert_eq!(again.skipped.len(), 8);
        assert_eq!(again.cooldowns, 0);
    }

    #[test]
    fn resume_after_break() {
        let tmp = tempfile::tempdir().unwrap();
        let c = cfg(tmp.path(), 2);
        let mut seen = 0;
        let first = execute_matrix_with(&c, |_| {
            seen += 1;
            if seen == 4 {
                ControlFlow::Break(())
            } else {
                ControlFlow::Continue(())
            }
        })
        .unwrap();
        assert!(!first.completed);
        assert_eq!(first.executed.len(), 4);

        // a crashed fifth run leaves a directory without meta.json
        let order = matrix_order(&c);
        let torn = order[4].dir(&c.output_dir);
        fs::create_dir_all(&torn).unwrap();
        fs::write(torn.join(TAGS_FILE), "garbage\n").unwrap();

        let second = execute_matrix(&c).unwrap();
        assert_eq!(second.skipped, order[..4].to_vec());
        assert_eq!(second.executed, order[4..].to_vec());
        assert_eq!(second.records.len(), 8);
        let rerun = load_run(&torn).unwrap();
        assert_eq!(rerun.tags.len(), 2);
    }

    #[test]
    fn spawn_failure_aborts() {
        let tmp = tempfile::tempdir().unwrap();
        let mut c = cfg(tmp.path(), 2);
        c.builds[0].command = vec!["/nonexistent/interpreter".into()];
        assert!(matches!(
            execute_matrix(&c),
            Err(RunError::SpawnFailure { .. })
        ));
    }

    #[test]
    fn child_sees_tag_file_and_overrides() {
        let tmp = tempfile::tempdir().unwrap();
        let mut c = cfg(tmp.path(), 2);
        c.builds[0]
            .env_overrides
            .insert("EXTRA".into(), "yes".into());
        c.builds[0].command = vec![
            "sh".into(),
            "-c".into(),
            r#"echo "$EXTRA $WATTBENCH_PARAM"; printf '5\tstart_r\n' >> "$WATTBENCH_TAG_FILE""#
                .into(),
        ];
        let rec = execute_run(
            &c.builds[0],
            &c.scenarios[0],
            &ParamValue::Int(0),
            0,
            &c,
            &[],
        )
        .unwrap();
        let dir = rec.key().dir(&c.output_dir);
        assert_eq!(
            fs::read_to_string(dir.join("stdout.log")).unwrap(),
            "yes 0\n"
        );
        assert_eq!(
            fs::read_to_string(dir.join(TAGS_FILE)).unwrap(),
            "5\tstart_r\n"
        );
        assert_eq!(rec.tags.len(), 1);
        assert!(rec.metadata.energy_domains.is_empty());
        assert_eq!(rec.metadata.energy_scope, ENERGY_SCOPE);
    }

    #[test]
    fn samples_csv_schema() {
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join(SAMPLES_FILE);
        let samples = vec![
            Sample {
                t_ns: 10,
                cpu_pct: 8.25,
                rss_bytes: 1,
                vms_bytes: 2,
                swap_bytes: 0,
                energy_delta_uj: Some(500),
                energy_cum_j: 0.0005,
            },
            Sample {
                t_ns: 20,
                cpu_pct: 0.0,
                rss_bytes: 1,
                vms_bytes: 2,
                swap_bytes: 0,
                energy_delta_uj: None,
                energy_cum_j: 0.0005,
            },
        ];
        write_samples(&path, &samples).unwrap();
        assert_eq!(
            fs::read_to_string(&path).unwrap(),
            "t_ns,cpu_pct,rss_bytes,vms_bytes,swap_bytes,energy_delta_uj\n\
             10,8.25,1,2,0,500\n\
             20,0.0,1,2,0,\n"
        );
        assert_eq!(read_samples(&path).unwrap(), samples);

        write_samples(&path, &[]).unwrap();
        assert_eq!(
            fs::read_to_string(&path).unwrap(),
            "t_ns,cpu_pct,rss_bytes,vms_bytes,swap_bytes,energy_delta_uj\n"
        );
        assert!(read_samples(&path).unwrap().is_empty());
    }
}
