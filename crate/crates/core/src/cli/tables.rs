//! Tab-separated tables written by `train` and `report`.

use std::path::Path;

use super::{fmt_f64, read_to_string};
use crate::confidence::CONFIDENCE_LEVELS;
use crate::error::{Error, Result};
use crate::eval::{EvalRecord, EvalSummary};
use crate::metrics::{Bin, ReliabilityBins, Split};

const KIND_NAMES: [&str; 3] = ["majority_color", "count_color", "compare_counts"];
const EVAL_HEADER: &str = "# vlcal-eval v1";
const EVAL_COLUMNS: &str = "task\tsplit\tquery_kind\tcorrect\tconfidence\tc_vis_raw\tc_reas_raw\thidden_fraction\ts_vis";
const BINS_HEADER: &str = "# vlcal-bins v1";
const BINS_COLUMNS: &str = "bin\tlower\tupper\tcount\tmean_confidence\taccuracy";
const MISSING: &str = "-";

fn opt(x: Option<f64>) -> String {
    x.map_or_else(|| MISSING.to_string(), fmt_f64)
}

pub(crate) fn eval_records_tsv(records: &[EvalRecord]) -> String {
    let mut out = format!("{EVAL_HEADER}\n{EVAL_COLUMNS}\n");
    for r in records {
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
            r.task,
            r.split.name(),
            KIND_NAMES[r.query_kind],
            u8::from(r.correct),
            fmt_f64(r.confidence),
            r.c_vis_raw.map_or_else(|| MISSING.to_string(), |v| v.to_string()),
            r.c_reas_raw,
            fmt_f64(r.hidden_fraction),
            fmt_f64(r.s_vis),
        ));
    }
    out
}

pub fn read_eval_records(path: &Path) -> Result<Vec<EvalRecord>> {
    let text = read_to_string(path)?;
    let fail = |line: usize, message: String| Error::Format {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    match lines.next() {
        Some((_, EVAL_HEADER)) => {}
        _ => return Err(fail(1, format!("expected header `{EVAL_HEADER}`"))),
    }
    match lines.next() {
        Some((_, EVAL_COLUMNS)) => {}
        _ => return Err(fail(2, "unexpected column header".into())),
    }
    let mut out = Vec::new();
    for (line, raw) in lines {
        if raw.is_empty() {
            continue;
        }
        let cols: Vec<&str> = raw.split('\t').collect();
        if cols.len() != 9 {
            return Err(fail(line, format!("expected 9 columns, found {}", cols.len())));
        }
        let num = |i: usize| -> Result<f64> {
            cols[i].parse::<f64>().map_err(|e| fail(line, format!("column {}: {e}", i + 1)))
        };
        let int = |i: usize| -> Result<u64> {
            cols[i].parse::<u64>().map_err(|e| fail(line, format!("column {}: {e}", i + 1)))
        };
        let confidence_level = |i: usize| -> Result<u8> {
            let v = int(i)?;
            if v as usize >= CONFIDENCE_LEVELS {
                return Err(fail(line, format!("confidence level {v} outside 0..=10")));
            }
            Ok(v as u8)
        };
        out.push(EvalRecord {
            task: int(0)?,
            split: cols[1].parse().map_err(|e: Error| fail(line, e.to_string()))?,
            query_kind: KIND_NAMES
                .iter()
                .position(|k| *k == cols[2])
                .ok_or_else(|| fail(line, format!("unknown query kind `{}`", cols[2])))?,
            correct: match cols[3] {
                "1" => true,
                "0" => false,
                other => return Err(fail(line, format!("correct flag must be 0 or 1, got `{other}`"))),
            },
            confidence: num(4)?,
            c_vis_raw: if cols[5] == MISSING { None } else { Some(confidence_level(5)?) },
            c_reas_raw: confidence_level(6)?,
            hidden_fraction: num(7)?,
            s_vis: num(8)?,
        });
    }
    Ok(out)
}

pub(crate) fn bins_tsv(bins: &ReliabilityBins) -> String {
    let mut out = format!("{BINS_HEADER}\n{BINS_COLUMNS}\n");
    if bins.total() == 0 {
        return out;
    }
    for (i, b) in bins.bins.iter().enumerate() {
        out.push_str(&format!(
            "{i}\t{}\t{}\t{}\t{}\t{}\n",
            fmt_f64(b.lower),
            fmt_f64(b.upper),
            b.count,
            opt(b.mean_confidence),
            opt(b.accuracy)
        ));
    }
    out
}

/// Parses a table produced by the report command back into bins.
pub fn parse_bins_table(text: &str) -> Result<ReliabilityBins> {
    let fail = |line: usize, message: String| Error::Parse(format!("bins table line {line}: {message}"));
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    if lines.next().map(|(_, l)| l) != Some(BINS_HEADER) {
        return Err(fail(1, "missing header".into()));
    }
    if lines.next().map(|(_, l)| l) != Some(BINS_COLUMNS) {
        return Err(fail(2, "unexpected column header".into()));
    }
    let mut bins = Vec::new();
    for (line, raw) in lines {
        let cols: Vec<&str> = raw.split('\t').collect();
        if cols.len() != 6 {
            return Err(fail(line, format!("expected 6 columns, found {}", cols.len())));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|e| fail(line, e.to_string()));
        let opt_num = |s: &str| if s == MISSING { Ok(None) } else { num(s).map(Some) };
        bins.push(Bin {
            lower: num(cols[1])?,
            upper: num(cols[2])?,
            count: cols[3].parse().map_err(|e| fail(line, format!("{e}")))?,
            mean_confidence: opt_num(cols[4])?,
            accuracy: opt_num(cols[5])?,
        });
    }
    Ok(ReliabilityBins { bins })
}

pub(crate) fn metrics_tsv(summary: &EvalSummary) -> String {
    let mut out = String::from("# vlcal-metrics v1\nmetric\tvalue\n");
    if summary.answerable == 0 {
        return out;
    }
    let rows = [
        ("accuracy", summary.accuracy),
        ("ece", summary.ece),
        ("brier", summary.brier),
        ("auroc", summary.auroc),
        ("mean_confidence", summary.mean_confidence),
    ];
    out.push_str(&format!("n\t{}\n", summary.answerable));
    for (name, v) in rows {
        out.push_str(&format!("{name}\t{}\n", opt(v)));
    }
    out
}

/// Counts of `(c_vis_raw, c_reas_raw)` over answerable decoupled records.
pub(crate) fn joint_histogram(records: &[EvalRecord]) -> [[usize; CONFIDENCE_LEVELS]; CONFIDENCE_LEVELS] {
    let mut h = [[0; CONFIDENCE_LEVELS]; CONFIDENCE_LEVELS];
    for r in records.iter().filter(|r| r.split == Split::Answerable) {
        if let Some(v) = r.c_vis_raw {
            h[v as usize][r.c_reas_raw as usize] += 1;
        }
    }
    h
}

pub(crate) fn joint_tsv(records: &[EvalRecord]) -> String {
    let mut out = String::from("# vlcal-joint v1\nc_vis\\c_reas");
    for k in 0..CONFIDENCE_LEVELS {
        out.push_str(&format!("\t{k}"));
    }
    out.push('\n');
    if records.is_empty() {
        return out;
    }
    for (v, row) in joint_histogram(records).iter().enumerate() {
        out.push_str(&v.to_string());
        for c in row {
            out.push_str(&format!("\t{c}"));
        }
        out.push('\n');
    }
    out
}

pub(crate) fn gap_tsv(records: &[EvalRecord]) -> String {
    let mut out = String::from("# vlcal-gap v1\nsplit\tn\tmean_confidence\taccuracy\n");
    let mut means = Vec::new();
    for split in [Split::Answerable, Split::Unanswerable] {
        let rs: Vec<&EvalRecord> = records.iter().filter(|r| r.split == split).collect();
        if rs.is_empty() {
            continue;
        }
        let n = rs.len() as f64;
        let conf = rs.iter().map(|r| r.confidence).sum::<f64>() / n;
        let acc = rs.iter().filter(|r| r.correct).count() as f64 / n;
        out.push_str(&format!("{}\t{}\t{}\t{}\n", split.name(), rs.len(), fmt_f64(conf), fmt_f64(acc)));
        means.push(conf);
    }
    if let [a, u] = means[..] {
        out.push_str(&format!("delta\t-\t{}\t-\n", fmt_f64(a - u)));
    }
    out
}
