//! Paired effect sizes between a candidate build and a reference build.
//!
//! Per repetition `i` the ratio `R_i = X_candidate / X_reference` is taken
//! for one metric. Ratios are averaged in log space:
//!
//! ```text
//! L_i   = ln R_i
//! L̄     = mean(L_i)
//! s_L   = sample standard deviation of L_i (n - 1 denominator)
//! SE    = s_L / sqrt(n)
//! CI    = exp(L̄ ∓ t(0.975, n - 1) · SE)
//! R_geo = exp(L̄)
//! ```
//!
//! An interval entirely below 1 means the candidate build is lower (faster,
//! cheaper); entirely above 1 means higher; otherwise the builds are not
//! distinguishable at the chosen confidence.

mod student_t;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Metric, ParamValue};

pub use student_t::{inc_beta, ln_gamma, normal_quantile, t_quantile};

pub const DEFAULT_CONFIDENCE: f64 = 0.95;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StatsError {
    #[error("non-positive input ({0}, {1})")]
    NonPositiveInput(f64, f64),
    #[error("degrees of freedom must be >= 1, got {0}")]
    InvalidDof(f64),
    #[error("probability must lie in (0, 1), got {0}")]
    InvalidProbability(f64),
    #[error("need at least 2 valid pairs, got {0}")]
    InsufficientPairs(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Classification {
    NogilLower,
    NogilHigher,
    Indistinguishable,
}

impl Classification {
    pub fn as_str(self) -> &'static str {
        match self {
            Classification::NogilLower => "NOGIL_LOWER",
            Classification::NogilHigher => "NOGIL_HIGHER",
            Classification::Indistinguishable => "INDISTINGUISHABLE",
        }
    }

    /// The interpretation rule applied to a ratio-space interval.
    pub fn from_interval(ci_low: f64, ci_high: f64) -> Self {
        if ci_high < 1.0 {
            Classification::NogilLower
        } else if ci_low > 1.0 {
            Classification::NogilHigher
        } else {
            Classification::Indistinguishable
        }
    }
}

impl fmt::Display for Classification {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Classification {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        [
            Classification::NogilLower,
            Classification::NogilHigher,
            Classification::Indistinguishable,
        ]
        .into_iter()
        .find(|c| c.as_str() == s)
        .ok_or_else(|| format!("unknown classification {s:?}"))
    }
}

/// Matched measurements of one metric at one parameter point.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedSeries {
    pub scenario: String,
    pub param_value: ParamValue,
    pub metric: Metric,
    /// `(x_candidate, x_reference)` per repetition.
    pub pairs: Vec<(f64, f64)>,
}

impl PairedSeries {
    pub fn n(&self) -> usize {
        self.pairs.len()
    }

    /// The same series with numerator and denominator exchanged.
    pub fn swapped(&self) -> Self {
        PairedSeries {
            pairs: self.pairs.iter().map(|&(a, b)| (b, a)).collect(),
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatioSummary {
    pub r_geo: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub n: usize,
    pub mean_log: f64,
    pub sd_log: f64,
    pub classification: Classification,
}

pub fn per_run_ratio(x_candidate: f64, x_reference: f64) -> Result<f64, StatsError> {
    if x_candidate > 0.0 && x_reference > 0.0 && x_candidate.is_finite() && x_reference.is_finite()
    {
        Ok(x_candidate / x_reference)
    } else {
        Err(StatsError::NonPositiveInput(x_candidate, x_reference))
    }
}

pub fn classify(summary: &RatioSummary) -> Classification {
    Classification::from_interval(summary.ci_low, summary.ci_high)
}

/// Aggregates already-formed ratios.
pub fn aggregate_ratios(ratios: &[f64], confidence: f64) -> Result<RatioSummary, StatsError> {
    let n = ratios.len();
    if n < 2 {
        return Err(StatsError::InsufficientPairs(n));
    }
    if !(confidence > 0.0 && confidence < 1.0) {
        return Err(StatsError::InvalidProbability(confidence));
    }
    let mut logs = Vec::with_capacity(n);
    for &r in ratios {
        if !(r > 0.0 && r.is_finite()) {
            return Err(StatsError::NonPositiveInput(r, 1.0));
        }
        logs.push(r.ln());
    }
    // fixed summation order makes the result independent of pair order
    logs.sort_by(f64::total_cmp);

    let nf = n as f64;
    let mean_log = logs.iter().sum::<f64>() / nf;
    let ss: f64 = logs.iter().map(|l| (l - mean_log).powi(2)).sum();
    let sd_log = (ss / (nf - 1.0)).sqrt();
    let se = sd_log / nf.sqrt();
    let t = t_quantile(0.5 + confidence / 2.0, nf - 1.0)?;
    let half = t * se;

    let ci_low = (mean_log - half).exp();
    let ci_high = (mean_log + half).exp();
    Ok(RatioSummary {
        r_geo: mean_log.exp(),
        ci_low,
        ci_high,
        n,
        mean_log,
        sd_log,
        classification: Classification::from_interval(ci_low, ci_high),
    })
}

pub fn aggregate(series: &PairedSeries, confidence: f64) -> Result<RatioSummary, StatsError> {
    let ratios = series
        .pairs
        .iter()
        .map(|&(a, b)| per_run_ratio(a, b))
        .collect::<Result<Vec<_>, _>>()?;
    aggregate_ratios(&ratios, confidence)
}
