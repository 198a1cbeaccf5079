//! Run configuration, file formats and the commands behind the `vlcal` binary.
//!
//! Every file written here starts with a versioned header so readers can
//! reject formats they do not understand. Numbers in tables are printed in
//! scientific notation with 17 significant digits, which round-trips `f64`
//! exactly and does not depend on the locale.

mod commands;
mod config;
mod tables;
mod trace;

pub use commands::{
    cmd_estimate, cmd_report, cmd_train, cmd_validate, read_policy, EstimateOutput, EstimateRow, ReportOutput, RunSummary,
    TrainOutcome,
    ValidationReport, CONFIG_FILE, EVAL_FILE, POLICY_FILE, REPORT_DIR, STATS_FILE, SUMMARY_FILE,
};
pub use config::RunConfig;
pub use tables::{parse_bins_table, read_eval_records};
pub use trace::{read_trace, write_trace, TraceFile, TraceRecord, TraceStep, TRACE_FORMAT, TRACE_VERSION};

use std::io::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

/// Process exit status for a failed command: 1 usage/config, 2 data, 3 numeric.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) => 1,
        Error::Numeric(_) => 3,
        _ => 2,
    }
}

/// Fixed-width scientific notation with 17 significant digits.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

/// Writes `bytes` to a sibling temp file and renames it over `path`.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = dir.join(format!(".{name}.tmp{}", std::process::id()));
    let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_to_string(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}
