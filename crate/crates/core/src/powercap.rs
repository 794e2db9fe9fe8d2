//! RAPL energy counters exposed through the Linux powercap tree.
//!
//! Layout read under `<root>`:
//!
//! ```text
//! intel-rapl:<k>/energy_uj            package counter (µJ, ASCII decimal)
//! intel-rapl:<k>/max_energy_range_uj  wrap point of the counter
//! intel-rapl:<k>/name                 e.g. "package-0"
//! intel-rapl:<k>:<m>/...              subdomains (core, uncore, dram)
//! ```
//!
//! Counters stay `u64` until two readings have been differenced; only the
//! delta is ever converted to joules. RAPL is package wide, so every energy
//! figure produced here is a system-wide quantity.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock::now_ns;

pub const DEFAULT_POWERCAP_ROOT: &str = "/sys/class/powercap";

const DOMAIN_PREFIX: &str = "intel-rapl:";

/// Shell command an administrator can run so energy counters are readable
/// without elevated privileges.
pub const PERMISSION_HINT: &str =
    "sudo chmod a+r /sys/class/powercap/intel-rapl:*/energy_uj /sys/class/powercap/intel-rapl:*:*/energy_uj";

#[derive(Debug, Error)]
pub enum PowercapError {
    #[error("no RAPL domains found under {0}; energy measurement disabled")]
    EmptyTree(PathBuf),
    #[error("permission denied reading {path}; run `{hint}` or adjust the udev rules")]
    PermissionDenied { path: PathBuf, hint: &'static str },
    #[error("failed to read counter {path}: {reason}")]
    ReadFailure { path: PathBuf, reason: String },
    #[error("counter value {value} exceeds max_energy_range_uj {max_range}")]
    RangeViolation { value: u64, max_range: u64 },
    #[error("energy snapshots cover different domains: {0}")]
    DomainMismatch(String),
    #[error("malformed domain {path}: {reason}")]
    MalformedDomain { path: PathBuf, reason: String },
}

/// One node of the RAPL tree.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnergyDomain {
    /// Directory name, e.g. `intel-rapl:0` or `intel-rapl:0:1`.
    pub id: String,
    /// Contents of the `name` file.
    pub label: String,
    pub max_energy_range_uj: u64,
    pub counter_path: PathBuf,
    /// Top-level package domain (single index).
    pub is_package: bool,
}

/// A single integer read of a domain counter.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnergyReading {
    pub domain_id: String,
    pub t_ns: u64,
    pub counter_uj: u64,
}

/// Parses the numeric indices out of a domain id; `None` if the name is not
/// an `intel-rapl:` domain.
fn domain_indices(id: &str) -> Option<Vec<u32>> {
    let rest = id.strip_prefix(DOMAIN_PREFIX)?;
    let idx: Option<Vec<u32>> = rest.split(':').map(|s| s.parse().ok()).collect();
    idx.filter(|v| !v.is_empty() && v.len() <= 2)
}

pub(crate) fn map_io_error(path: &Path, err: io::Error) -> PowercapError {
    if err.kind() == io::ErrorKind::PermissionDenied {
        PowercapError::PermissionDenied {
            path: path.to_path_buf(),
            hint: PERMISSION_HINT,
        }
    } else {
        PowercapError::ReadFailure {
            path: path.to_path_buf(),
            reason: err.to_string(),
        }
    }
}

fn parse_uj(path: &Path, contents: &str) -> Result<u64, PowercapError> {
    contents
        .trim_end_matches(['\n', '\r'])
        .parse::<u64>()
        .map_err(|e| PowercapError::ReadFailure {
            path: path.to_path_buf(),
            reason: format!("invalid counter {:?}: {e}", contents),
        })
}

fn read_uj(path: &Path) -> Result<u64, PowercapError> {
    let contents = fs::read_to_string(path).map_err(|e| map_io_error(path, e))?;
    parse_uj(path, &contents)
}

/// Lists every `intel-rapl:*` domain below `root`, packages and subdomains,
/// sorted by their numeric indices.
///
/// Each counter is read once so that unreadable counters are reported now
/// rather than mid-run.
pub fn discover_domains(root: &Path) -> Result<Vec<EnergyDomain>, PowercapError> {
    let entries = match fs::read_dir(root) {
        Ok(e) => e,
        Err(e) if e.kind() == io::ErrorKind::NotFound => {
            return Err(PowercapError::EmptyTree(root.to_path_buf()))
        }
        Err(e) => return Err(map_io_error(root, e)),
    };

    let mut found: Vec<(Vec<u32>, EnergyDomain)> = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| map_io_error(root, e))?;
        let id = entry.file_name().to_string_lossy().into_owned();
        let Some(indices) = domain_indices(&id) else {
            continue;
        };
        let dir = entry.path();
        let counter_path = dir.join("energy_uj");
        if !counter_path.exists() {
            continue;
        }
        let max_energy_range_uj = read_uj(&dir.join("max_energy_range_uj"))?;
        if max_energy_range_uj == 0 {
            return Err(PowercapError::MalformedDomain {
                path: dir,
                reason: "max_energy_range_uj is 0".into(),
            });
        }
        let label = fs::read_to_string(dir.join("name"))
            .map(|s| s.trim().to_string())
            .unwrap_or_default();
        // Probe readability; energy_uj is root-only on many kernels.
        read_uj(&counter_path)?;
        found.push((
            indices.clone(),
            EnergyDomain {
                id,
                label,
                max_energy_range_uj,
                counter_path,
                is_package: indices.len() == 1,
            },
        ));
    }

    if found.is_empty() {
        return Err(PowercapError::EmptyTree(root.to_path_buf()));
    }
    found.sort_by(|a, b| a.0.cmp(&b.0));
    Ok(found.into_iter().map(|(_, d)| d).collect())
}

/// Picks the domains that contribute to energy totals: the explicitly named
/// ids if given, otherwise every package domain.
pub fn select_domains(
    all: &[EnergyDomain],
    explicit_ids: Option<&[String]>,
) -> Result<Vec<EnergyDomain>, PowercapError> {
    match explicit_ids {
        None => Ok(all.iter().filter(|d| d.is_package).cloned().collect()),
        Some(ids) => {
            ids.iter()
                .map(|id| {
                    all.iter().find(|d| &d.id == id).cloned().ok_or_else(|| {
                        PowercapError::DomainMismatch(format!("unknown domain {id}"))
                    })
                })
                .collect()
        }
    }
}

/// Reads the current counter of `domain`, timestamped just after the read.
pub fn read_counter(domain: &EnergyDomain) -> Result<EnergyReading, PowercapError> {
    let counter_uj = read_uj(&domain.counter_path)?;
    let t_ns = now_ns();
    if counter_uj > domain.max_energy_range_uj {
        return Err(PowercapError::RangeViolation {
            value: counter_uj,
            max_range: domain.max_energy_range_uj,
        });
    }
    Ok(EnergyReading {
        domain_id: domain.id.clone(),
        t_ns,
        counter_uj,
    })
}

/// Reads every domain in order. Any failure fails the whole snapshot.
pub fn read_all(domains: &[EnergyDomain]) -> Result<Vec<EnergyReading>, PowercapError> {
    domains.iter().map(read_counter).collect()
}

/// Energy consumed between two reads of one counter, accounting for a single
/// wrap at `max_range_uj`.
pub fn counter_delta(prev_uj: u64, cur_uj: u64, max_range_uj: u64) -> Result<u64, PowercapError> {
    for value in [prev_uj, cur_uj] {
        if value > max_range_uj {
            return Err(PowercapError::RangeViolation {
                value,
                max_range: max_range_uj,
            });
        }
    }
    if cur_uj >= prev_uj {
        Ok(cur_uj - prev_uj)
    } else {
        Ok((max_range_uj - prev_uj) + cur_uj)
    }
}

/// Sums [`counter_delta`] over `domains`. Readings for domains outside the
/// set (e.g. subdomains) are ignored; both snapshots must contain exactly the
/// same ids.
pub fn total_delta(
    domains: &[EnergyDomain],
    prev: &[EnergyReading],
    cur: &[EnergyReading],
) -> Result<u64, PowercapError> {
    let mut prev_ids: Vec<&str> = prev.iter().map(|r| r.domain_id.as_str()).collect();
    let mut cur_ids: Vec<&str> = cur.iter().map(|r| r.domain_id.as_str()).collect();
    prev_ids.sort_unstable();
    cur_ids.sort_unstable();
    if prev_ids != cur_ids {
        return Err(PowercapError::DomainMismatch(format!(
            "{prev_ids:?} vs {cur_ids:?}"
        )));
    }

    let mut total = 0u64;
    for domain in domains {
        let find = |set: &[EnergyReading]| {
            set.iter()
                .find(|r| r.domain_id == domain.id)
                .map(|r| r.counter_uj)
                .ok_or_else(|| {
                    PowercapError::DomainMismatch(format!("no reading for {}", domain.id))
                })
        };
        total += counter_delta(find(prev)?, find(cur)?, domain.max_energy_range_uj)?;
    }
    Ok(total)
}


#[cfg(test)]
mod tests {
    use super::mock::add_domain;
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn package_and_subdomain() {
        let tmp = tempfile::tempdir().unwrap();
        add_domain(tmp.path(), "intel-rapl:0", "package-0", 262143328850, 10);
        add_domain(tmp.path(), "intel-rapl:0:0", "core", 262143328850, 5);
        // the control-type directory has no counter and no index
        fs::create_dir_all(tmp.path().join("intel-rapl")).unwrap();

        let domains = discover_domains(tmp.path()).unwrap();
        assert_eq!(domains.len(), 2);
        assert_eq!(domains[0].id, "intel-rapl:0");
        assert!(domains[0].is_package);
        assert_eq!(domains[0].label, "package-0");
        assert_eq!(domains[1].id, "intel-rapl:0:0");
        assert!(!domains[1].is_package);

        let selected = select_domains(&domains, None).unwrap();
        assert_eq!(selected.len(), 1);
        assert_eq!(selected[0].id, "intel-rapl:0");

        let explicit = select_domains(&domains, Some(&["intel-rapl:0:0".to_string()])).unwrap();
        assert_eq!(explicit[0].id, "intel-rapl:0:0");
        assert!(select_domains(&domains, Some(&["intel-rapl:7".to_string()])).is_err());
    }

    #[test]
    fn empty_tree() {
        let tmp = tempfile::tempdir().unwrap();
        assert!(matches!(
            discover_domains(tmp.path()),
            Err(PowercapError::EmptyTree(_))
        ));
        assert!(matches!(
            discover_domains(&tmp.path().join("missing")),
            Err(PowercapError::EmptyTree(_))
        ));
    }

    #[test]
    fn packages_sorted_numerically() {
        let tmp = tempfile::tempdir().unwrap();
        add_domain(tmp.path(), "intel-rapl:1", "package-1", 1000, 0);
        add_domain(tmp.path(), "intel-rapl:10", "package-10", 1000, 0);
        add_domain(tmp.path(), "intel-rapl:0", "package-0", 1000, 0);
        let ids: Vec<_> = discover_domains(tmp.path())
            .unwrap()
            .into_iter()
            .map(|d| d.id)
            .collect();
        assert_eq!(ids, ["intel-rapl:0", "intel-rapl:1", "intel-rapl:10"]);
    }

    #[test]
    fn permission_errors_carry_hint() {
        let err = map_io_error(
            Path::new("/x/energy_uj"),
            io::Error::from(io::ErrorKind::PermissionDenied),
        );
        match err {
            PowercapError::PermissionDenied { hint, .. } => assert!(hint.contains("chmod")),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn read_counter_values() {
        let tmp = tempfile::tempdir().unwrap();
        let dir = add_domain(tmp.path(), "intel-rapl:0", "package-0", 1_000_000, 0);
        let domain = discover_domains(tmp.path()).unwrap().remove(0);

        fs::write(dir.join("energy_uj"), "123456\n").unwrap();
        assert_eq!(read_counter(&domain).unwrap().counter_uj, 123456);

        fs::write(dir.join("energy_uj"), "0").unwrap();
        let r = read_counter(&domain).unwrap();
        assert_eq!(r.counter_uj, 0);
        assert_eq!(r.domain_id, "intel-rapl:0");
        assert!(r.t_ns > 0);

        fs::write(dir.join("energy_uj"), "not-a-number").unwrap();
        assert!(matches!(
            read_counter(&domain),
            Err(PowercapError::ReadFailure { .. })
        ));

        fs::write(dir.join("energy_uj"), "2000000\n").unwrap();
        assert!(matches!(
            read_counter(&domain),
            Err(PowercapError::RangeViolation { .. })
        ));
    }

    #[test]
    fn delta_examples() {
        assert_eq!(counter_delta(100, 250, 1000).unwrap(), 150);
        assert_eq!(counter_delta(900, 50, 1000).unwrap(), 150);
        assert_eq!(counter_delta(42, 42, 1000).unwrap(), 0);
        assert!(matches!(
            counter_delta(1001, 5, 1000),
            Err(PowercapError::RangeViolation { value: 1001, .. })
        ));
    }

    fn reading(id: &str, counter_uj: u64) -> EnergyReading {
        EnergyReading {
            domain_id: id.into(),
            t_ns: 0,
            counter_uj,
        }
    }

    fn domain(id: &str, max: u64) -> EnergyDomain {
        EnergyDomain {
            id: id.into(),
            label: String::new(),
            max_energy_range_uj: max,
            counter_path: PathBuf::new(),
            is_package: domain_indices(id).map(|v| v.len() == 1).unwrap_or(false),
        }
    }

    #[test]
    fn total_delta_examples() {
        let d0 = domain("intel-rapl:0", 1000);
        let d1 = domain("intel-rapl:1", 1000);
        assert_eq!(
            total_delta(
                std::slice::from_ref(&d0),
                &[reading("intel-rapl:0", 100)],
                &[reading("intel-rapl:0", 250)]
            )
            .unwrap(),
            150
        );
        assert_eq!(
            total_delta(
                &[d0.clone(), d1.clone()],
                &[reading("intel-rapl:0", 0), reading("intel-rapl:1", 980)],
                &[reading("intel-rapl:1", 30), reading("intel-rapl:0", 100)],
            )
            .unwrap(),
            150
        );
        assert!(matches!(
            total_delta(
                std::slice::from_ref(&d0),
                &[reading("intel-rapl:0", 0)],
                &[reading("intel-rapl:1", 0)]
            ),
            Err(PowercapError::DomainMismatch(_))
        ));
        // subdomain readings present in both snapshots are not summed
        assert_eq!(
            total_delta(
                &[d0],
                &[reading("intel-rapl:0", 0), reading("intel-rapl:0:0", 0)],
                &[reading("intel-rapl:0", 10), reading("intel-rapl:0:0", 7)],
            )
            .unwrap(),
            10
        );
    }

    #[test]
    fn is_package_rule() {
        assert!(domain("intel-rapl:3", 1).is_package);
        assert!(!domain("intel-rapl:3:1", 1).is_package);
        assert!(domain_indices("intel-rapl-mmio:0").is_none());
        assert!(domain_indices("intel-rapl").is_none());
        assert!(domain_indices("intel-rapl:x").is_none());
    }

    proptest! {
        #[test]
        fn delta_in_range(max in 1u64..u64::MAX, a in any::<u64>(), b in any::<u64>()) {
            let (prev, cur) = (a % max, b % max);
            let d = counter_delta(prev, cur, max).unwrap();
            prop_assert!(d < max);
            prop_assert_eq!(counter_delta(prev, prev, max).unwrap(), 0);
        }

        #[test]
        fn wraparound_recovers_consumption(max in 2u64..=1u64 << 40, p in any::<u64>(), d in any::<u64>()) {
            let prev = p % max;
            let consumed = d % max;
            let cur = ((prev as u128 + consumed as u128) % max as u128) as u64;
            prop_assert_eq!(counter_delta(prev, cur, max).unwrap(), consumed);
        }
    }
}
