use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::tables::{bins_tsv, eval_records_tsv, gap_tsv, joint_tsv, metrics_tsv, read_eval_records};
use super::trace::read_trace;
use super::{fmt_f64, read_to_string, write_atomic};
use crate::certainty::{batch_normalize, internal_certainty, visual_grounding, Estimator};
use crate::env::Policy;
use crate::error::{Error, Result};
use crate::eval::{answerable_bins, evaluate, summarize, EvalSummary};
use crate::grpo::{StepStats, Trainer};
use crate::metrics::{auroc_scores, kendall_tau, spearman};
use crate::parallel::Execution;

pub const STATS_FILE: &str = "stats.jsonl";
pub const POLICY_FILE: &str = "policy.json";
pub const EVAL_FILE: &str = "eval_records.tsv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const CONFIG_FILE: &str = "config.toml";
pub const REPORT_DIR: &str = "report";

#[derive(Debug, Serialize, Deserialize)]
struct Versioned {
    format: String,
    version: u32,
}

fn header_line(format: &str) -> String {
    let mut s = serde_json::to_string(&Versioned {
        format: format.into(),
        version: 1,
    })
    .expect("header serializes");
    s.push('\n');
    s
}

#[derive(Debug, Serialize, Deserialize)]
struct PolicyFile {
    format: String,
    version: u32,
    policy: Policy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub seed: u64,
    pub steps: usize,
    pub initial: EvalSummary,
    /// Absent when no training step ran.
    #[serde(rename = "final")]
    pub trained: Option<EvalSummary>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub stats: Vec<StepStats>,
    pub summary: RunSummary,
}

fn stats_text(stats: &[StepStats]) -> Result<String> {
    let mut text = header_line("vlcal-stats");
    for s in stats {
        text.push_str(&serde_json::to_string(s).map_err(|e| Error::Parse(e.to_string()))?);
        text.push('\n');
    }
    Ok(text)
}

fn write_policy(path: &Path, policy: &Policy) -> Result<()> {
    let file = PolicyFile {
        format: "vlcal-policy".into(),
        version: 1,
        policy: policy.clone(),
    };
    let text = serde_json::to_string(&file).map_err(|e| Error::Parse(e.to_string()))?;
    write_atomic(path, text.as_bytes())
}

pub fn read_policy(path: &Path) -> Result<Policy> {
    let text = read_to_string(path)?;
    let file: PolicyFile = serde_json::from_str(&text).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        line: e.line(),
        message: e.to_string(),
    })?;
    if file.format != "vlcal-policy" || file.version != 1 {
        return Err(Error::Format {
            path: path.to_path_buf(),
            line: 1,
            message: format!("unsupported format {} v{}", file.format, file.version),
        });
    }
    Policy::from_params(file.policy.colors(), file.policy.params().to_vec())
}

/// Trains from the base policy, evaluating before and after. Writes the
/// resolved config, the per-step log, the final parameters, the evaluation
/// records and a summary into `cfg.out_dir`. A numeric failure mid-run still
/// writes the log and parameters reached so far before returning the error.
/// `on_step` sees each step's statistics as they are produced.
pub fn cmd_train(cfg: &RunConfig, exec: Execution, mut on_step: impl FnMut(&StepStats)) -> Result<TrainOutcome> {
    cfg.validate()?;
    let out = &cfg.out_dir;
    write_atomic(&out.join(CONFIG_FILE), cfg.to_toml_string()?.as_bytes())?;

    let policy = Policy::base(cfg.env.task.colors as usize);
    let initial_records = evaluate(&policy, &cfg.env, &cfg.reward, &cfg.eval, cfg.seed, exec)?;
    let initial = summarize(&initial_records, cfg.eval.bins)?;

    let train = cfg.train_config();
    let mut trainer = Trainer::new(policy, cfg.env, train, cfg.reward)?.with_execution(exec);
    let mut stats = Vec::with_capacity(train.steps);
    for _ in 0..train.steps {
        match trainer.step() {
            Ok(s) => {
                on_step(&s);
                stats.push(s);
            }
            Err(e) => {
                write_atomic(&out.join(STATS_FILE), stats_text(&stats)?.as_bytes())?;
                write_policy(&out.join(POLICY_FILE), trainer.policy())?;
                return Err(e);
            }
        }
    }

    let (records, trained) = if train.steps == 0 {
        (initial_records, None)
    } else {
        let recs = evaluate(trainer.policy(), &cfg.env, &cfg.reward, &cfg.eval, cfg.seed, exec)?;
        let s = summarize(&recs, cfg.eval.bins)?;
        (recs, Some(s))
    };
    let summary = RunSummary {
        seed: cfg.seed,
        steps: train.steps,
        initial,
        trained,
    };
    write_atomic(&out.join(STATS_FILE), stats_text(&stats)?.as_bytes())?;
    write_policy(&out.join(POLICY_FILE), trainer.policy())?;
    write_atomic(&out.join(EVAL_FILE), eval_records_tsv(&records).as_bytes())?;
    let mut summary_text = serde_json::to_string_pretty(&summary).map_err(|e| Error::Parse(e.to_string()))?;
    summary_text.push('\n');
    write_atomic(&out.join(SUMMARY_FILE), summary_text.as_bytes())?;
    Ok(TrainOutcome { stats, summary })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EstimateRow {
    pub id: String,
    pub line: usize,
    pub d_kl: f64,
    pub h: f64,
    /// Raw score of the chosen estimator (`S_vis` for the combined one).
    pub score: f64,
    /// Score normalized over the whole file.
    pub s_tilde: f64,
}

#[derive(Debug)]
pub struct EstimateOutput {
    pub method: Estimator,
    pub rows: Vec<EstimateRow>,
    /// Diagnostics for records that could not be read.
    pub skipped: Vec<Error>,
}

impl EstimateOutput {
    pub fn to_tsv(&self) -> String {
        let mut out = format!("# vlcal-estimate v1 method={}\nid\td_kl\th\tscore\ts_tilde\n", self.method.name());
        for r in &self.rows {
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\n",
                r.id,
                fmt_f64(r.d_kl),
                fmt_f64(r.h),
                fmt_f64(r.score),
                fmt_f64(r.s_tilde)
            ));
        }
        out
    }
}

pub fn cmd_estimate(trace_path: &Path, method: Estimator) -> Result<EstimateOutput> {
    let file = read_trace(trace_path)?;
    let mut rows = Vec::with_capacity(file.records.len());
    for (line, record, trace) in &file.records {
        rows.push(EstimateRow {
            id: record.id.clone(),
            line: *line,
            d_kl: visual_grounding(trace)?,
            h: internal_certainty(trace)?,
            score: method.score(trace)?,
            s_tilde: 0.0,
        });
    }
    if !rows.is_empty() {
        let scores: Vec<f64> = rows.iter().map(|r| r.score).collect();
        for (r, s) in rows.iter_mut().zip(batch_normalize(&scores)?) {
            r.s_tilde = s;
        }
    }
    Ok(EstimateOutput {
        method,
        rows,
        skipped: file.skipped,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub n: usize,
    pub auroc: f64,
    pub spearman: f64,
    pub kendall: f64,
}

impl ValidationReport {
    pub fn to_tsv(&self) -> String {
        format!(
            "# vlcal-validate v1\nmetric\tvalue\nn\t{}\nauroc\t{}\nspearman\t{}\nkendall\t{}\n",
            self.n,
            fmt_f64(self.auroc),
            fmt_f64(self.spearman),
            fmt_f64(self.kendall)
        )
    }
}

/// Scores every labeled record and measures how well the score tracks the
/// correctness flag (AUROC) and the quality label (rank correlations).
pub fn cmd_validate(trace_path: &Path, method: Estimator) -> Result<ValidationReport> {
    let mut file = read_trace(trace_path)?;
    if !file.skipped.is_empty() {
        return Err(file.skipped.swap_remove(0));
    }
    let mut scores = Vec::with_capacity(file.records.len());
    let mut correct = Vec::with_capacity(file.records.len());
    let mut quality = Vec::with_capacity(file.records.len());
    for (line, record, trace) in &file.records {
        let (Some(c), Some(q)) = (record.correct, record.quality) else {
            return Err(Error::Format {
                path: trace_path.to_path_buf(),
                line: *line,
                message: format!("record `{}` needs both `correct` and `quality` labels", record.id),
            });
        };
        scores.push(method.score(trace)?);
        correct.push(c);
        quality.push(q);
    }
    Ok(ValidationReport {
        n: scores.len(),
        auroc: auroc_scores(&scores, &correct)?,
        spearman: spearman(&scores, &quality)?,
        kendall: kendall_tau(&scores, &quality)?,
    })
}

#[derive(Debug, Clone)]
pub struct ReportOutput {
    pub files: Vec<PathBuf>,
    pub summary: EvalSummary,
}

fn training_tsv(stats_path: &Path) -> Result<String> {
    let text = read_to_string(stats_path)?;
    let fail = |line: usize, message: String| Error::Format {
        path: stats_path.to_path_buf(),
        line,
        message,
    };
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    let header: Versioned = lines
        .next()
        .ok_or_else(|| fail(1, "missing header line".into()))
        .and_then(|(_, l)| serde_json::from_str(l).map_err(|e| fail(1, e.to_string())))?;
    if header.format != "vlcal-stats" || header.version != 1 {
        return Err(fail(1, format!("unsupported format {} v{}", header.format, header.version)));
    }
    let mut out =
        String::from("# vlcal-training v1\nstep\tmean_reward\taccuracy\tmean_confidence\tece\tref_kl\tzvis_entropy\n");
    for (line, raw) in lines {
        let s: StepStats = serde_json::from_str(raw).map_err(|e| fail(line, e.to_string()))?;
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
            s.step,
            fmt_f64(s.mean_reward),
            fmt_f64(s.accuracy),
            fmt_f64(s.mean_confidence),
            fmt_f64(s.ece),
            fmt_f64(s.ref_kl),
            fmt_f64(s.zvis_entropy)
        ));
    }
    Ok(out)
}

/// Writes reliability bins, a metric summary, the confidence gap, the
/// `(c_vis, c_reas)` joint histogram and the training curve under
/// `run_dir/report`.
pub fn cmd_report(run_dir: &Path, bins: usize) -> Result<ReportOutput> {
    if bins == 0 {
        return Err(Error::Config("bins must be >= 1".into()));
    }
    let records = read_eval_records(&run_dir.join(EVAL_FILE))?;
    let training = training_tsv(&run_dir.join(STATS_FILE))?;
    let summary = summarize(&records, bins)?;
    let dir = run_dir.join(REPORT_DIR);
    let outputs = [
        ("reliability.tsv", bins_tsv(&answerable_bins(&records, bins)?)),
        ("metrics.tsv", metrics_tsv(&summary)),
        ("gap.tsv", gap_tsv(&records)),
        ("joint_confidence.tsv", joint_tsv(&records)),
        ("training.tsv", training),
    ];
    let mut files = Vec::with_capacity(outputs.len());
    for (name, text) in outputs {
        let path = dir.join(name);
        write_atomic(&path, text.as_bytes())?;
        files.push(path);
    }
    Ok(ReportOutput { files, summary })
}
