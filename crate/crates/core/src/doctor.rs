//! Environment checks behind `wattbench doctor`.

use std::path::Path;
use std::time::Instant;

use crate::powercap::{self, EnergyDomain, PowercapError, PERMISSION_HINT};
use crate::procsample;

#[derive(Debug)]
pub enum EnergyStatus {
    Ok(Vec<EnergyDomain>),
    Permission(String),
    Unavailable(String),
}

impl EnergyStatus {
    pub fn line(&self) -> String {
        match self {
            EnergyStatus::Ok(domains) => {
                let packages: Vec<&str> = domains
                    .iter()
                    .filter(|d| d.is_package)
                    .map(|d| d.id.as_str())
                    .collect();
                format!("energy: OK ({})", packages.join(", "))
            }
            EnergyStatus::Permission(_) => "energy: PERMISSION — fix required".to_string(),
            EnergyStatus::Unavailable(_) => "energy: UNAVAILABLE (metrics limited)".to_string(),
        }
    }

    pub fn detail(&self) -> Option<String> {
        match self {
            EnergyStatus::Ok(_) => None,
            EnergyStatus::Permission(path) => Some(format!(
                "  {path} is not readable by this user; run:\n    {PERMISSION_HINT}"
            )),
            EnergyStatus::Unavailable(why) => Some(format!("  {why}")),
        }
    }

    /// Exit status contribution: 0 ok, 2 unavailable, 3 permission.
    pub fn code(&self) -> i32 {
        match self {
            EnergyStatus::Ok(_) => 0,
            EnergyStatus::Unavailable(_) => 2,
            EnergyStatus::Permission(_) => 3,
        }
    }
}

impl From<Result<Vec<EnergyDomain>, PowercapError>> for EnergyStatus {
    fn from(r: Result<Vec<EnergyDomain>, PowercapError>) -> Self {
        match r {
            Ok(d) => EnergyStatus::Ok(d),
            Err(PowercapError::PermissionDenied { path, .. }) => {
                EnergyStatus::Permission(path.display().to_string())
            }
            Err(e) => EnergyStatus::Unavailable(e.to_string()),
        }
    }
}

pub fn check_energy(root: &Path) -> EnergyStatus {
    powercap::discover_domains(root).into()
}

/// Smallest observable step of the wall clock, in nanoseconds.
pub fn clock_resolution_ns() -> u64 {
    let mut best = u64::MAX;
    for _ in 0..1000 {
        let a = crate::clock::now_ns();
        let mut b = crate::clock::now_ns();
        let spin = Instant::now();
        while b == a && spin.elapsed().as_millis() < 10 {
            b = crate::clock::now_ns();
        }
        if b > a {
            best = best.min(b - a);
        }
    }
    best
}

#[derive(Debug)]
pub struct DoctorReport {
    pub energy: EnergyStatus,
    pub clock_resolution_ns: u64,
    pub logical_cores: usize,
    pub clock_ticks: f64,
}

impl DoctorReport {
    pub fn gather(powercap_root: &Path) -> Self {
        DoctorReport {
            energy: check_energy(powercap_root),
            clock_resolution_ns: clock_resolution_ns(),
            logical_cores: procsample::logical_cores(),
            clock_ticks: procsample::clock_ticks_per_second(),
        }
    }

    pub fn render(&self) -> String {
        let mut lines = vec![self.energy.line()];
        if let Some(d) = self.energy.detail() {
            lines.push(d);
        }
        let clock = if self.clock_resolution_ns <= 1_000 {
            "OK"
        } else {
            "COARSE"
        };
        lines.push(format!(
            "clock: {clock} ({} ns resolution)",
            self.clock_resolution_ns
        ));
        lines.push(format!(
            "cores: {} logical (CPU % is normalized by this count)",
            self.logical_cores
        ));
        lines.push(format!("clock ticks: {} Hz", self.clock_ticks));
        lines.join("\n") + "\n"
    }

    pub fn exit_code(&self) -> i32 {
        self.energy.code()
    }
}
