//! Experiment configuration: a single JSON document, unknown keys rejected.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::model::ParamValue;
use crate::powercap::DEFAULT_POWERCAP_ROOT;
use crate::tagstream::is_legal_name;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("reading config {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("config is not valid JSON: {0}")]
    Syntax(#[from] serde_json::Error),
    #[error("invalid config at `{key}`: {reason}")]
    Invalid { key: String, reason: String },
    #[error("bad override {0:?}: expected key=value")]
    BadOverride(String),
}

fn invalid(key: impl Into<String>, reason: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        key: key.into(),
        reason: reason.into(),
    }
}

/// One interpreter build. The first build in a config is the reference
/// (ratio denominator), the second the candidate (numerator).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BuildSpec {
    pub id: String,
    pub command: Vec<String>,
    #[serde(default)]
    pub env_overrides: BTreeMap<String, String>,
}

/// Arguments appended to the build command. `{param}`, `{scenario}` and
/// `{rep}` are substituted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ScriptTemplate {
    Path(String),
    Args(Vec<String>),
}

impl ScriptTemplate {
    pub fn expand(&self, scenario: &str, param: &ParamValue, rep: u32) -> Vec<String> {
        let raw: Vec<&str> = match self {
            ScriptTemplate::Path(p) => vec![p.as_str()],
            ScriptTemplate::Args(a) => a.iter().map(String::as_str).collect(),
        };
        let param = param.to_string();
        let rep = rep.to_string();
        raw.into_iter()
            .map(|a| {
                a.replace("{param}", &param)
                    .replace("{scenario}", scenario)
                    .replace("{rep}", &rep)
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSpec {
    pub name: String,
    pub script: ScriptTemplate,
    pub region: String,
    pub param_name: String,
    pub param_values: Vec<ParamValue>,
}

/// Which parameter points feed the cross-scenario summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum SummarySelection {
    /// The `n` largest parameter values of each scenario.
    Top(usize),
    /// Exactly these parameter values.
    Values(Vec<ParamValue>),
}

impl Default for SummarySelection {
    fn default() -> Self {
        SummarySelection::Top(2)
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportConfig {
    /// scenario name -> summary category. Empty disables the summary.
    #[serde(default)]
    pub categories: BTreeMap<String, String>,
    #[serde(default)]
    pub summary_params: SummarySelection,
}

fn default_repetitions() -> u32 {
    10
}
fn default_cooldown() -> f64 {
    60.0
}
fn default_interval() -> u64 {
    50
}
fn default_powercap_root() -> PathBuf {
    PathBuf::from(DEFAULT_POWERCAP_ROOT)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub builds: Vec<BuildSpec>,
    pub scenarios: Vec<ScenarioSpec>,
    #[serde(default = "default_repetitions")]
    pub repetitions: u32,
    #[serde(default = "default_cooldown")]
    pub cooldown_s: f64,
    #[serde(default = "default_interval")]
    pub sample_interval_ms: u64,
    #[serde(default = "default_powercap_root")]
    pub powercap_root: PathBuf,
    pub output_dir: PathBuf,
    /// Explicit powercap domain ids to sum; all packages when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub energy_domains: Option<Vec<String>>,
    /// Add CPU time of reaped children to the target's own.
    #[serde(default)]
    pub include_children: bool,
    #[serde(default)]
    pub report: ReportConfig,
}

impl ExperimentConfig {
    pub fn from_json_str(text: &str) -> Result<Self, ConfigError> {
        Self::from_value(serde_json::from_str(text)?)
    }

    pub fn from_value(value: Value) -> Result<Self, ConfigError> {
        let cfg: ExperimentConfig = serde_path_to_error::deserialize(value).map_err(|e| {
            let key = e.path().to_string();
            invalid(key, e.into_inner().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads `path`, applies `key=value` overrides, then validates.
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut value: Value = serde_json::from_str(&text)?;
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        Self::from_value(value)
    }

    pub fn reference(&self) -> &BuildSpec {
        &self.builds[0]
    }

    pub fn candidate(&self) -> &BuildSpec {
        &self.builds[1]
    }

    pub fn scenario(&self, name: &str) -> Option<&ScenarioSpec> {
        self.scenarios.iter().find(|s| s.name == name)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.builds.len() != 2 {
            return Err(invalid(
                "builds",
                format!("exactly two builds required, got {}", self.builds.len()),
            ));
        }
        let mut ids = HashSet::new();
        for (i, b) in self.builds.iter().enumerate() {
            if !is_legal_name(&b.id) {
                return Err(invalid(
                    format!("builds[{i}].id"),
                    "must match [A-Za-z0-9_.-]+",
                ));
            }
            if !ids.insert(&b.id) {
                return Err(invalid(
                    format!("builds[{i}].id"),
                    format!("duplicate id {:?}", b.id),
                ));
            }
            if b.command.is_empty() || b.command[0].is_empty() {
                return Err(invalid(format!("builds[{i}].command"), "must be non-empty"));
            }
        }

        if self.scenarios.is_empty() {
            return Err(invalid("scenarios", "at least one scenario required"));
        }
        let mut names = HashSet::new();
        for (i, s) in self.scenarios.iter().enumerate() {
            if !is_legal_name(&s.name) {
                return Err(invalid(
                    format!("scenarios[{i}].name"),
                    "must match [A-Za-z0-9_.-]+",
                ));
            }
            if !names.insert(&s.name) {
                return Err(invalid(
                    format!("scenarios[{i}].name"),
                    format!("duplicate scenario {:?}", s.name),
                ));
            }
            if !is_legal_name(&s.region) {
                return Err(invalid(
                    format!("scenarios[{i}].region"),
                    "must be a legal tag name",
                ));
            }
            if s.param_values.is_empty() {
                return Err(invalid(
                    format!("scenarios[{i}].param_values"),
                    "must be non-empty",
                ));
            }
            let mut seen = HashSet::new();
            for (j, p) in s.param_values.iter().enumerate() {
                let shown = p.to_string();
                if !is_legal_name(&shown) {
                    return Err(invalid(
                        format!("scenarios[{i}].param_values[{j}]"),
                        "must render as [A-Za-z0-9_.-]+",
                    ));
                }
                if !seen.insert(shown) {
                    return Err(invalid(
                        format!("scenarios[{i}].param_values[{j}]"),
                        "duplicate value",
                    ));
                }
            }
        }

        if self.repetitions < 2 {
            return Err(invalid(
                "repetitions",
                "must be >= 2 (confidence intervals need n - 1 >= 1)",
            ));
        }
        if !(self.cooldown_s >= 0.0 && self.cooldown_s.is_finite()) {
            return Err(invalid(
                "cooldown_s",
                "must be a non-negative number of seconds",
            ));
        }
        if self.sample_interval_ms == 0 {
            return Err(invalid("sample_interval_ms", "must be positive"));
        }
        for scenario in self.report.categories.keys() {
            if !names.contains(scenario) {
                return Err(invalid(
                    format!("report.categories.{scenario}"),
                    "unknown scenario",
                ));
            }
        }
        if let SummarySelection::Top(0) = self.report.summary_params {
            return Err(invalid("report.summary_params.top", "must be positive"));
        }
        Ok(())
    }
}

/// Applies a dotted `key=value` override to a raw config document. The value
/// is parsed as JSON when possible and taken as a string otherwise; numeric
/// path segments index into arrays.
pub fn apply_override(doc: &mut Value, assignment: &str) -> Result<(), ConfigError> {
    let (key, raw) = assignment
        .split_once('=')
        .filter(|(k, _)| !k.is_empty())
        .ok_or_else(|| ConfigError::BadOverride(assignment.to_string()))?;
    let new_value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));

    let mut cur = doc;
    let parts: Vec<&str> = key.split('.').collect();
    for (depth, part) in parts.iter().enumerate() {
        let last = depth + 1 == parts.len();
        cur = match cur {
            Value::Object(map) => {
                if last {
                    map.insert(part.to_string(), new_value);
                    return Ok(());
                }
                map.entry(part.to_string())
                    .or_insert_with(|| Value::Object(Default::default()))
            }
            Value::Array(items) => {
                let idx: usize = part
                    .parse()
                    .map_err(|_| invalid(key, format!("{part:?} is not an array index")))?;
                let len = items.len();
                let slot = items
                    .get_mut(idx)
                    .ok_or_else(|| invalid(key, format!("index {idx} out of range ({len})")))?;
                if last {
                    *slot = new_value;
                    return Ok(());
                }
                slot
            }
            _ => {
                return Err(invalid(
                    key,
                    format!("cannot descend into scalar at {part:?}"),
                ))
            }
        };
    }
    Ok(())
}
