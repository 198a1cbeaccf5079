//! Line-oriented trace files.
//!
//! The first line is `{"format":"vlcal-trace","version":1}`; every following
//! non-blank line is one JSON record:
//!
//! ```json
//! {"id":"q17","steps":[{"token":2,"original":[0.1,0.8,0.1],"perturbed":[0.3,0.4,0.3]}],
//!  "correct":true,"quality":0.75}
//! ```
//!
//! `correct` and `quality` are optional labels used by validation.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{read_to_string, write_atomic};
use crate::certainty::VisualTrace;
use crate::distributions::TokenDistribution;
use crate::env::Trajectory;
use crate::error::{Error, Result};

pub const TRACE_FORMAT: &str = "vlcal-trace";
pub const TRACE_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format: String,
    version: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceStep {
    pub token: usize,
    pub original: TokenDistribution,
    pub perturbed: TokenDistribution,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceRecord {
    pub id: String,
    pub steps: Vec<TraceStep>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub correct: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub quality: Option<f64>,
}

impl TraceRecord {
    pub fn from_trajectory(id: impl Into<String>, traj: &Trajectory) -> Self {
        Self {
            id: id.into(),
            steps: traj
                .vis_trace
                .steps()
                .iter()
                .zip(traj.vis_trace.token_ids())
                .map(|((o, p), &token)| TraceStep {
                    token,
                    original: o.clone(),
                    perturbed: p.clone(),
                })
                .collect(),
            correct: None,
            quality: None,
        }
    }

    pub fn visual_trace(&self) -> Result<VisualTrace> {
        if self.steps.is_empty() {
            return Err(Error::EmptyInput("trace record"));
        }
        VisualTrace::new(
            self.steps.iter().map(|s| (s.original.clone(), s.perturbed.clone())).collect(),
            self.steps.iter().map(|s| s.token).collect(),
        )
    }
}

/// Parsed records with their 1-based line numbers, plus the diagnostics for
/// lines that were skipped.
#[derive(Debug, Default)]
pub struct TraceFile {
    pub records: Vec<(usize, TraceRecord, VisualTrace)>,
    pub skipped: Vec<Error>,
}

/// Reads a trace file. A bad header fails the whole read; a bad record is
/// reported in `skipped` and reading continues.
pub fn read_trace(path: &Path) -> Result<TraceFile> {
    let text = read_to_string(path)?;
    let fail = |line: usize, message: String| Error::Format {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    let (_, first) = lines.next().ok_or_else(|| fail(1, "missing header line".into()))?;
    let header: Header = serde_json::from_str(first).map_err(|e| fail(1, format!("bad header: {e}")))?;
    if header.format != TRACE_FORMAT || header.version != TRACE_VERSION {
        return Err(fail(
            1,
            format!(
                "unsupported format {} v{} (expected {TRACE_FORMAT} v{TRACE_VERSION})",
                header.format, header.version
            ),
        ));
    }
    let mut out = TraceFile::default();
    for (line, raw) in lines {
        if raw.trim().is_empty() {
            continue;
        }
        let parsed = serde_json::from_str::<TraceRecord>(raw)
            .map_err(|e| e.to_string())
            .and_then(|r| r.visual_trace().map(|t| (r, t)).map_err(|e| e.to_string()));
        match parsed {
            Ok((record, trace)) => out.records.push((line, record, trace)),
            Err(message) => out.skipped.push(fail(line, message)),
        }
    }
    Ok(out)
}

pub fn write_trace(path: &Path, records: &[TraceRecord]) -> Result<()> {
    let header = Header {
        format: TRACE_FORMAT.into(),
        version: TRACE_VERSION,
    };
    let mut text = serde_json::to_string(&header).expect("header serializes");
    text.push('\n');
    for r in records {
        text.push_str(&serde_json::to_string(r).map_err(|e| Error::Parse(e.to_string()))?);
        text.push('\n');
    }
    write_atomic(path, text.as_bytes())
}
