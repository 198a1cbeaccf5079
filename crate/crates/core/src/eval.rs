//! Held-out evaluation on answerable and visually unanswerable inputs.

use serde::{Deserialize, Serialize};

use crate::certainty::{certainty_score, internal_certainty, visual_grounding};
use crate::confidence::{ConfidenceMode, RewardConfig};
use crate::env::{generate_task, make_unanswerable, rollout, verify, Decoding, Environment, Policy, RolloutConfig};
use crate::error::{Error, Result};
use crate::metrics::{
    accuracy, auroc, brier, confidence_gap, reliability_bins, CalibrationRecord, ConfidenceGap, ReliabilityBins, Split,
};
use crate::parallel::Execution;
use crate::seeding::{derive_seed, TAG_EVAL};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Held-out tasks; each is scored once as-is and once fully hidden.
    pub tasks: usize,
    pub bins: usize,
    pub decoding: Decoding,
    pub temperature: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            tasks: 1000,
            bins: 10,
            decoding: Decoding::Sample,
            temperature: 1.0,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.bins == 0 {
            return Err(Error::Config("bins must be >= 1".into()));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config(format!("temperature must be positive, got {}", self.temperature)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub task: u64,
    pub split: Split,
    pub query_kind: usize,
    pub correct: bool,
    /// Holistic confidence `Phi`.
    pub confidence: f64,
    pub c_vis_raw: Option<u8>,
    pub c_reas_raw: u8,
    pub hidden_fraction: f64,
    pub s_vis: f64,
}

impl EvalRecord {
    pub fn calibration(&self) -> Result<CalibrationRecord> {
        let mut r = CalibrationRecord::new(self.confidence, self.correct)?.with_split(self.split);
        if let Some(v) = self.c_vis_raw {
            r = r.with_decoupled(v as f64 / 10.0, self.c_reas_raw as f64 / 10.0);
        }
        Ok(r)
    }
}

/// Rolls out `policy` on `cfg.tasks` held-out tasks drawn from `seed`, on
/// both splits. Records come back ordered by task, answerable first.
pub fn evaluate(
    policy: &Policy,
    env: &Environment,
    reward: &RewardConfig,
    cfg: &EvalConfig,
    seed: u64,
    exec: Execution,
) -> Result<Vec<EvalRecord>> {
    cfg.validate()?;
    env.validate()?;
    let rcfg = RolloutConfig {
        temperature: cfg.temperature,
        perturbation: env.perturbation,
        mode: reward.mode,
        decoding: cfg.decoding,
    };
    let per_task = exec.map_range(cfg.tasks, |i| -> Result<[EvalRecord; 2]> {
        let task = i as u64;
        let (img, query) = generate_task(derive_seed(seed, &[TAG_EVAL, task]), &env.task)?;
        let hidden = make_unanswerable(&img);
        let run = |image: &crate::env::GridImage, split: Split, stream: u64| -> Result<EvalRecord> {
            let t = rollout(policy, image, &query, &rcfg, derive_seed(seed, &[TAG_EVAL, task, stream]))?;
            let s_vis = certainty_score(visual_grounding(&t.vis_trace)?, internal_certainty(&t.vis_trace)?)?;
            Ok(EvalRecord {
                task,
                split,
                query_kind: query.kind.index(),
                correct: verify(t.y, &query),
                confidence: t.holistic_confidence(reward.aggregation),
                c_vis_raw: match reward.mode {
                    ConfidenceMode::Decoupled => t.c_vis_raw,
                    ConfidenceMode::Holistic => None,
                },
                c_reas_raw: t.c_reas_raw,
                hidden_fraction: image.hidden_fraction(),
                s_vis,
            })
        };
        Ok([run(&img, Split::Answerable, 1)?, run(&hidden, Split::Unanswerable, 2)?])
    });
    let mut out = Vec::with_capacity(2 * cfg.tasks);
    for pair in per_task {
        out.extend(pair?);
    }
    Ok(out)
}

/// Calibration metrics on the answerable split plus the confidence gap.
/// Metrics that are undefined for the given records are `None`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub answerable: usize,
    pub unanswerable: usize,
    pub accuracy: Option<f64>,
    pub ece: Option<f64>,
    pub brier: Option<f64>,
    pub auroc: Option<f64>,
    pub mean_confidence: Option<f64>,
    pub gap: Option<ConfidenceGap>,
}

pub fn summarize(records: &[EvalRecord], bins: usize) -> Result<EvalSummary> {
    let mut ans = Vec::new();
    let mut unans = Vec::new();
    for r in records {
        let c = r.calibration()?;
        match r.split {
            Split::Answerable => ans.push(c),
            Split::Unanswerable => unans.push(c),
        }
    }
    let bins_table = answerable_bins(records, bins)?;
    Ok(EvalSummary {
        answerable: ans.len(),
        unanswerable: unans.len(),
        accuracy: accuracy(&ans).ok(),
        ece: bins_table.ece().ok(),
        brier: brier(&ans).ok(),
        auroc: auroc(&ans).ok(),
        mean_confidence: (!ans.is_empty()).then(|| ans.iter().map(|r| r.confidence).sum::<f64>() / ans.len() as f64),
        gap: confidence_gap(&ans, &unans).ok(),
    })
}

/// Reliability bins over the answerable split.
pub fn answerable_bins(records: &[EvalRecord], bins: usize) -> Result<ReliabilityBins> {
    let ans = records
        .iter()
        .filter(|r| r.split == Split::Answerable)
        .map(EvalRecord::calibration)
        .collect::<Result<Vec<_>>>()?;
    reliability_bins(&ans, bins)
}
