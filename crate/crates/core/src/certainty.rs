//! Intrinsic visual-certainty estimation.
//!
//! A [`VisualTrace`] holds, for each visual-rationale token, the policy's
//! distribution under the original observation and under a perturbed one,
//! both conditioned on the same (original) prefix. Grounding is the mean KL
//! between the two; internal certainty is the mean entropy of the original
//! pass. The score combines them as a log-ratio.

use serde::{Deserialize, Serialize};

use crate::distributions::{entropy, kl_divergence, TokenDistribution};
use crate::error::{Error, Result};

/// Stabilizer for the log-ratio and the z-score denominator.
pub const CERTAINTY_EPS: f64 = 1e-8;

/// Per-token original/perturbed distributions along a teacher-forced prefix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VisualTrace {
    steps: Vec<(TokenDistribution, TokenDistribution)>,
    token_ids: Vec<usize>,
}

impl VisualTrace {
    pub fn new(
        steps: Vec<(TokenDistribution, TokenDistribution)>,
        token_ids: Vec<usize>,
    ) -> Result<Self> {
        if steps.len() != token_ids.len() {
            return Err(Error::Shape {
                expected: steps.len(),
                actual: token_ids.len(),
            });
        }
        if let Some((first, _)) = steps.first() {
            let vocab = first.len();
            for (t, (orig, pert)) in steps.iter().enumerate() {
                for d in [orig, pert] {
                    if d.len() != vocab {
                        return Err(Error::Shape {
                            expected: vocab,
                            actual: d.len(),
                        });
                    }
                }
                if token_ids[t] >= vocab {
                    return Err(Error::Domain(format!(
                        "token id {} at step {t} outside vocabulary of {vocab}",
                        token_ids[t]
                    )));
                }
            }
        }
        Ok(Self { steps, token_ids })
    }

    pub fn steps(&self) -> &[(TokenDistribution, TokenDistribution)] {
        &self.steps
    }

    pub fn token_ids(&self) -> &[usize] {
        &self.token_ids
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Per-step `KL(orig || perturbed)`.
    pub fn step_kls(&self) -> Vec<f64> {
        self.steps
            .iter()
            .map(|(o, p)| kl_divergence(o, p).expect("vocabulary checked on construction"))
            .collect()
    }

    /// Per-step entropy of the original-pass distribution.
    pub fn step_entropies(&self) -> Vec<f64> {
        self.steps.iter().map(|(o, _)| entropy(o)).collect()
    }
}

/// Sequence-level certainty summary.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VisualCertainty {
    pub d_kl: f64,
    pub h: f64,
    pub s_vis: f64,
    /// Batch-normalized score; `None` until the batch is known.
    pub s_tilde: Option<f64>,
}

impl VisualCertainty {
    pub fn from_trace(trace: &VisualTrace) -> Result<Self> {
        let d_kl = visual_grounding(trace)?;
        let h = internal_certainty(trace)?;
        Ok(Self {
            d_kl,
            h,
            s_vis: certainty_score(d_kl, h)?,
            s_tilde: None,
        })
    }
}

/// Which certainty signal to use as the per-record score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimator {
    /// `ln(D_KL + eps) - ln(H + eps)`.
    #[default]
    Combined,
    /// Grounding only (`D_KL`).
    KlOnly,
    /// Internal certainty only (`-H`).
    EntropyOnly,
    /// Mean `KL(orig || uniform)`: sharpness without any perturbation.
    UniformDivergence,
}

impl Estimator {
    pub const ALL: [Estimator; 4] = [
        Estimator::Combined,
        Estimator::KlOnly,
        Estimator::EntropyOnly,
        Estimator::UniformDivergence,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Estimator::Combined => "combined",
            Estimator::KlOnly => "kl_only",
            Estimator::EntropyOnly => "entropy_only",
            Estimator::UniformDivergence => "uniform_divergence",
        }
    }

    /// Raw (un-normalized) score; larger means more visually certain.
    pub fn score(self, trace: &VisualTrace) -> Result<f64> {
        match self {
            Estimator::Combined => Ok(VisualCertainty::from_trace(trace)?.s_vis),
            Estimator::KlOnly => visual_grounding(trace),
            Estimator::EntropyOnly => Ok(-internal_certainty(trace)?),
            Estimator::UniformDivergence => uniform_divergence(trace),
        }
    }
}

impl std::str::FromStr for Estimator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Estimator::ALL
            .into_iter()
            .find(|e| e.name() == s)
            .ok_or_else(|| {
                Error::Parse(format!(
                    "unknown estimator `{s}` (expected combined, kl_only, entropy_only or uniform_divergence)"
                ))
            })
    }
}

/// Mean per-step `KL(orig || perturbed)`.
pub fn visual_grounding(trace: &VisualTrace) -> Result<f64> {
    mean_nonempty(&trace.step_kls(), "visual trace")
}

/// Mean per-step entropy of the original-pass distributions.
pub fn internal_certainty(trace: &VisualTrace) -> Result<f64> {
    mean_nonempty(&trace.step_entropies(), "visual trace")
}

/// Mean per-step `KL(orig || uniform)`.
pub fn uniform_divergence(trace: &VisualTrace) -> Result<f64> {
    let kls: Vec<f64> = trace
        .steps
        .iter()
        .map(|(o, _)| {
            let u = TokenDistribution::uniform(o.len())?;
            kl_divergence(o, &u)
        })
        .collect::<Result<_>>()?;
    mean_nonempty(&kls, "visual trace")
}

/// `ln(d_kl + eps) - ln(h + eps)`.
pub fn certainty_score(d_kl: f64, h: f64) -> Result<f64> {
    if d_kl.is_nan() || h.is_nan() || d_kl < 0.0 || h < 0.0 {
        return Err(Error::Domain(format!(
            "certainty score needs non-negative inputs, got d_kl={d_kl}, h={h}"
        )));
    }
    Ok((d_kl + CERTAINTY_EPS).ln() - (h + CERTAINTY_EPS).ln())
}

/// Z-score with population std, then logistic squashing into (0, 1).
pub fn batch_normalize(scores: &[f64]) -> Result<Vec<f64>> {
    if scores.is_empty() {
        return Err(Error::EmptyInput("normalization batch"));
    }
    if let Some(bad) = scores.iter().find(|s| !s.is_finite()) {
        return Err(Error::Numeric(format!("non-finite certainty score {bad}")));
    }
    if scores.iter().all(|&s| s == scores[0]) {
        return Ok(vec![0.5; scores.len()]);
    }
    let n = scores.len() as f64;
    let mean = scores.iter().sum::<f64>() / n;
    let var = scores.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / n;
    let denom = var.sqrt() + CERTAINTY_EPS;
    Ok(scores.iter().map(|s| sigmoid((s - mean) / denom)).collect())
}

/// Per-token scores normalized within the one sample.
pub fn token_certainty(trace: &VisualTrace) -> Result<Vec<f64>> {
    if trace.is_empty() {
        return Err(Error::EmptyInput("visual trace"));
    }
    let raw = token_scores(trace)?;
    batch_normalize(&raw)
}

/// Per-token raw log-ratio scores before normalization.
pub fn token_scores(trace: &VisualTrace) -> Result<Vec<f64>> {
    trace
        .step_kls()
        .into_iter()
        .zip(trace.step_entropies())
        .map(|(kl, h)| certainty_score(kl, h))
        .collect()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn mean_nonempty(values: &[f64], what: &'static str) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::EmptyInput(what));
    }
    Ok(values.iter().sum::<f64>() / values.len() as f64)
}
