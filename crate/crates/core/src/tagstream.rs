//! Region markers written by the profiled child.
//!
//! The child appends one line per marker to the file named by
//! [`TAG_FILE_ENV`]:
//!
//! ```text
//! <epoch_ns>\t<name>\n
//! ```
//!
//! A measured region `r` spans the first `start_r` marker and the first
//! `finish_r` marker that follows it.

use std::fmt;
use std::io::{self, Write};

use log::warn;
use thiserror::Error;

pub const TAG_FILE_ENV: &str = "WATTBENCH_TAG_FILE";

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TagError {
    #[error("malformed tag line {line:?}: {reason}")]
    MalformedTag { line: String, reason: &'static str },
    #[error("no start_{0} tag")]
    MissingStart(String),
    #[error("no finish_{0} tag after start_{0}")]
    MissingFinish(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TagEvent {
    pub t_ns: u64,
    pub name: String,
}

impl TagEvent {
    /// Encodes the event as one protocol line, including the newline.
    pub fn to_line(&self) -> String {
        format!("{}\t{}\n", self.t_ns, self.name)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Region {
    pub name: String,
    pub start_ns: u64,
    pub finish_ns: u64,
}

impl Region {
    pub fn elapsed_s(&self) -> f64 {
        self.finish_ns.saturating_sub(self.start_ns) as f64 / 1e9
    }

    pub fn contains(&self, t_ns: u64) -> bool {
        self.start_ns <= t_ns && t_ns <= self.finish_ns
    }
}

impl fmt::Display for Region {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} [{}, {}]", self.name, self.start_ns, self.finish_ns)
    }
}

/// `[A-Za-z0-9_.-]+`
pub fn is_legal_name(name: &str) -> bool {
    !name.is_empty()
        && name
            .bytes()
            .all(|b| b.is_ascii_alphanumeric() || matches!(b, b'_' | b'.' | b'-'))
}

pub fn parse_tag_line(line: &str) -> Result<TagEvent, TagError> {
    let malformed = |reason| TagError::MalformedTag {
        line: line.to_string(),
        reason,
    };
    let line_body = line.strip_suffix('\n').unwrap_or(line);
    let line_body = line_body.strip_suffix('\r').unwrap_or(line_body);
    let mut fields = line_body.split('\t');
    let (Some(ts), Some(name), None) = (fields.next(), fields.next(), fields.next()) else {
        return Err(malformed("expected two tab-separated fields"));
    };
    if ts.is_empty() || !ts.bytes().all(|b| b.is_ascii_digit()) {
        return Err(malformed("timestamp is not a decimal integer"));
    }
    let t_ns = ts
        .parse()
        .map_err(|_| malformed("timestamp out of range"))?;
    if !is_legal_name(name) {
        return Err(malformed("illegal tag name"));
    }
    Ok(TagEvent {
        t_ns,
        name: name.to_string(),
    })
}

/// Parses a whole tag file, skipping (and logging) malformed lines.
pub fn parse_tags(contents: &str) -> Vec<TagEvent> {
    contents
        .lines()
        .filter(|l| !l.trim().is_empty())
        .filter_map(|l| match parse_tag_line(l) {
            Ok(ev) => Some(ev),
            Err(e) => {
                warn!("{e}; line skipped");
                None
            }
        })
        .collect()
}

pub fn find_region(events: &[TagEvent], region: &str) -> Result<Region, TagError> {
    let start_tag = format!("start_{region}");
    let finish_tag = format!("finish_{region}");

    let start_idx = events
        .iter()
        .position(|e| e.name == start_tag)
        .ok_or_else(|| TagError::MissingStart(region.to_string()))?;
    let start = &events[start_idx];

    let mut finish = None;
    for ev in &events[start_idx + 1..] {
        if ev.name == start_tag {
            warn!("duplicate {start_tag} at {}; keeping the first", ev.t_ns);
        } else if ev.name == finish_tag {
            finish = Some(ev);
            break;
        }
    }
    let finish = finish.ok_or_else(|| TagError::MissingFinish(region.to_string()))?;

    Ok(Region {
        name: region.to_string(),
        start_ns: start.t_ns,
        finish_ns: finish.t_ns,
    })
}

/// Appends one marker line to `out` and flushes it.
pub fn emit<W: Write>(out: &mut W, event: &TagEvent) -> io::Result<()> {
    out.write_all(event.to_line().as_bytes())?;
    out.flush()
}
