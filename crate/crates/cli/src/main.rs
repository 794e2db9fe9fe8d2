use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use log::{info, warn};
use wattbench_core::analysis::{AnalysisError, ANALYSIS_FILE};
use wattbench_core::doctor::DoctorReport;
use wattbench_core::powercap::DEFAULT_POWERCAP_ROOT;
use wattbench_core::report::{self, Format};
use wattbench_core::runner::{self, RunError};
use wattbench_core::{analyze, execute_matrix, ExperimentConfig};

/// Paired energy/performance benchmarking of two interpreter builds.
#[derive(Parser)]
#[command(name = "wattbench", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Execute the experiment matrix, skipping cells that already finished.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Override a config key, e.g. `--set repetitions=3`. Repeatable.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Reduce the runs in an output directory to analysis.csv.
    Analyze {
        #[arg(long)]
        dir: PathBuf,
    },
    /// Render tables and the summary from analysis.csv.
    Report {
        #[arg(long)]
        dir: PathBuf,
        #[arg(long, value_enum, default_value_t = ReportFormat::Text)]
        format: ReportFormat,
        /// Write to this file instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check energy counter access and clock resolution.
    Doctor {
        #[arg(long, default_value = DEFAULT_POWERCAP_ROOT)]
        powercap_root: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ReportFormat {
    Text,
    Pipe,
    Csv,
}

impl From<ReportFormat> for Format {
    fn from(f: ReportFormat) -> Self {
        match f {
            ReportFormat::Text => Format::Text,
            ReportFormat::Pipe => Format::Pipe,
            ReportFormat::Csv => Format::Csv,
        }
    }
}

fn cmd_run(config: &Path, overrides: &[String]) -> Result<ExitCode> {
    let cfg = ExperimentConfig::load(config, overrides)
        .with_context(|| format!("invalid configuration {}", config.display()))?;
    match execute_matrix(&cfg) {
        Ok(outcome) => {
            let failed = outcome.records.iter().filter(|r| r.exit_code != 0).count();
            info!(
                "{} runs executed, {} already complete, {failed} exited non-zero",
                outcome.executed.len(),
                outcome.skipped.len()
            );
            println!("{}", cfg.output_dir.display());
            Ok(ExitCode::SUCCESS)
        }
        Err(e @ RunError::SpawnFailure { .. }) => {
            eprintln!("error: {e}");
            Ok(ExitCode::from(2))
        }
        Err(e) => Err(e.into()),
    }
}

fn cmd_analyze(dir: &Path) -> Result<ExitCode> {
    let cfg = runner::load_config(dir)
        .with_context(|| format!("no usable config.json in {}", dir.display()))?;
    match analyze(&cfg, dir) {
        Ok(out) => {
            let usable = out.rows.iter().filter(|r| r.summary.is_some()).count();
            info!("{usable}/{} cells aggregated", out.rows.len());
            println!("{}", out.csv_path.display());
            Ok(ExitCode::SUCCESS)
        }
        Err(e @ AnalysisError::NoValidPairs(_)) => {
            eprintln!("error: {e}");
            Ok(ExitCode::from(1))
        }
        Err(e) => Err(e.into()),
    }
}

fn cmd_report(dir: &Path, format: ReportFormat, out: Option<&Path>) -> Result<ExitCode> {
    let rows = report::read_csv(&dir.join(ANALYSIS_FILE))?;
    let (param_names, report_cfg) = match runner::load_config(dir) {
        Ok(cfg) => {
            let names: BTreeMap<String, String> = cfg
                .scenarios
                .iter()
                .map(|s| (s.name.clone(), s.param_name.clone()))
                .collect();
            (names, cfg.report)
        }
        Err(e) => {
            warn!("config.json unavailable ({e}); rendering tables without summary");
            (BTreeMap::new(), Default::default())
        }
    };
    let text = report::render_report(&rows, &param_names, &report_cfg, format.into())?;
    match out {
        Some(path) => {
            fs::write(path, &text).with_context(|| format!("writing {}", path.display()))?
        }
        None => print!("{text}"),
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_doctor(root: &Path) -> ExitCode {
    let report = DoctorReport::gather(root);
    print!("{}", report.render());
    ExitCode::from(report.exit_code() as u8)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run { config, overrides } => cmd_run(config, overrides),
        Command::Analyze { dir } => cmd_analyze(dir),
        Command::Report { dir, format, out } => cmd_report(dir, *format, out.as_deref()),
        Command::Doctor { powercap_root } => Ok(cmd_doctor(powercap_root)),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
