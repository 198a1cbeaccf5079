//! Sampling a decoupled trajectory with dual-pass (original/perturbed) logging.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::policy::{reas_features, vis_features, AnswerContext, Policy, Site};
use super::{perturb, GridImage, Perturbation, Query, QueryKind};
use crate::certainty::VisualTrace;
use crate::confidence::{ConfidenceMode, MAX_CONFIDENCE};
use crate::distributions::{log_softmax, softmax, TokenDistribution};
use crate::error::{Error, Result};
use crate::seeding::{derive_seed, rng_from, Rng, TAG_PERTURB};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decoding {
    #[default]
    Sample,
    /// Argmax of each distribution (lowest index on ties).
    Greedy,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RolloutConfig {
    pub temperature: f64,
    pub perturbation: Perturbation,
    pub mode: ConfidenceMode,
    pub decoding: Decoding,
}

impl Default for RolloutConfig {
    fn default() -> Self {
        Self {
            temperature: 1.0,
            perturbation: Perturbation::default(),
            mode: ConfidenceMode::Decoupled,
            decoding: Decoding::Sample,
        }
    }
}

/// One emitted token and the context it was drawn in.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampledToken {
    pub site: Site,
    pub token: usize,
}

/// A decoupled rollout: `z_vis, c_vis, z_reas, c_reas, y`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    /// One perceived token per cell, row-major (a color or "unknown").
    pub z_vis: Vec<usize>,
    /// Absent in holistic mode.
    pub c_vis_raw: Option<u8>,
    /// Tallies of `z_vis`: one count per color, then the unknown count.
    pub z_reas: Vec<u32>,
    /// The reasoning confidence (the single confidence in holistic mode).
    pub c_reas_raw: u8,
    pub y: usize,
    pub vis_trace: VisualTrace,
    /// Sampled tokens in emission order; `z_reas` is derived, not sampled.
    pub tokens: Vec<SampledToken>,
    /// Log-probability of each sampled token under the behavior policy.
    pub logprobs_old: Vec<f64>,
}

impl Trajectory {
    /// Holistic confidence under `aggregation` (decoupled) or the single
    /// confidence (holistic).
    pub fn holistic_confidence(&self, aggregation: crate::confidence::Aggregation) -> f64 {
        let c_reas = self.c_reas_raw as f64 / MAX_CONFIDENCE as f64;
        match self.c_vis_raw {
            Some(v) => crate::confidence::aggregate(v as f64 / MAX_CONFIDENCE as f64, c_reas, aggregation),
            None => c_reas,
        }
    }

    pub fn c_vis(&self) -> Option<f64> {
        self.c_vis_raw.map(|v| v as f64 / MAX_CONFIDENCE as f64)
    }

    /// Whether each sampled token belongs to the visual rationale.
    pub fn visual_mask(&self) -> Vec<bool> {
        self.tokens.iter().map(|t| t.site.is_visual()).collect()
    }
}

struct Sampler<'a> {
    policy: &'a Policy,
    cfg: &'a RolloutConfig,
    rng: Rng,
    tokens: Vec<SampledToken>,
    logprobs: Vec<f64>,
}

impl Sampler<'_> {
    fn distribution(&self, site: &Site) -> Result<TokenDistribution> {
        softmax(&self.policy.logits(site), self.cfg.temperature)
    }

    fn emit(&mut self, site: Site, dist: &TokenDistribution) -> usize {
        let token = match self.cfg.decoding {
            Decoding::Greedy => argmax(dist.probs()),
            Decoding::Sample => draw(dist.probs(), self.rng.random::<f64>()),
        };
        let logp = log_softmax(&self.policy.logits(&site), self.cfg.temperature)[token];
        self.tokens.push(SampledToken { site, token });
        self.logprobs.push(logp);
        token
    }
}

fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in p.iter().enumerate() {
        if v > p[best] {
            best = i;
        }
    }
    best
}

/// Inverse-CDF draw; never returns a zero-probability token.
fn draw(p: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &v) in p.iter().enumerate() {
        if v > 0.0 {
            acc += v;
            last = i;
            if u < acc {
                return i;
            }
        }
    }
    last
}

/// Samples one trajectory on `img`; the perturbed pass is evaluated along
/// the same emitted prefix, never sampled.
pub fn rollout(
    policy: &Policy,
    img: &GridImage,
    query: &Query,
    cfg: &RolloutConfig,
    seed: u64,
) -> Result<Trajectory> {
    if img.colors as usize != policy.colors() {
        return Err(Error::Shape {
            expected: policy.colors(),
            actual: img.colors as usize,
        });
    }
    let perturbed = perturb(img, &cfg.perturbation, derive_seed(seed, &[TAG_PERTURB]))?;
    let mut s = Sampler {
        policy,
        cfg,
        rng: rng_from(seed, &[]),
        tokens: Vec::with_capacity(img.len() + 3),
        logprobs: Vec::with_capacity(img.len() + 3),
    };

    let colors = policy.colors();
    let mut steps = Vec::with_capacity(img.len());
    let mut z_vis = Vec::with_capacity(img.len());
    for cell in 0..img.len() {
        let orig_site = Site::Perception {
            evidence: img.evidence(cell),
        };
        let orig = s.distribution(&orig_site)?;
        let pert = s.distribution(&Site::Perception {
            evidence: perturbed.evidence(cell),
        })?;
        z_vis.push(s.emit(orig_site, &orig));
        steps.push((orig, pert));
    }
    let vis_trace = VisualTrace::new(steps, z_vis.clone())?;

    let hidden_fraction = img.hidden_fraction();
    let c_vis_raw = match cfg.mode {
        ConfidenceMode::Decoupled => {
            let site = Site::VisConfidence {
                features: vis_features(hidden_fraction),
            };
            let d = s.distribution(&site)?;
            Some(s.emit(site, &d) as u8)
        }
        ConfidenceMode::Holistic => None,
    };

    let mut z_reas = vec![0u32; colors + 1];
    for &t in &z_vis {
        z_reas[t] += 1;
    }
    let unknown = z_reas[colors];
    let n = img.len() as f64;
    let (answer_ctx, margin) = match query.kind {
        QueryKind::MajorityColor => {
            let tallies = z_reas[..colors].to_vec();
            let mut sorted = tallies.clone();
            sorted.sort_unstable_by(|a, b| b.cmp(a));
            let margin = (sorted[0] - sorted[1]) as f64 / n;
            (AnswerContext::Majority { tallies }, margin)
        }
        QueryKind::CountColor { target } => (
            AnswerContext::Count {
                tally: z_reas[target as usize],
                unknown,
                space: query.answer_space,
            },
            0.0,
        ),
        QueryKind::CompareCounts { a, b } => {
            let diff = z_reas[a as usize] as i32 - z_reas[b as usize] as i32;
            (AnswerContext::Compare { diff }, diff.unsigned_abs() as f64 / n)
        }
    };

    let reas_site = Site::ReasConfidence {
        features: reas_features(query.kind.index(), margin, unknown as f64 / n, hidden_fraction),
    };
    let d = s.distribution(&reas_site)?;
    let c_reas_raw = s.emit(reas_site, &d) as u8;

    let answer_site = Site::Answer(answer_ctx);
    let d = s.distribution(&answer_site)?;
    let y = s.emit(answer_site, &d);

    Ok(Trajectory {
        z_vis,
        c_vis_raw,
        z_reas,
        c_reas_raw,
        y,
        vis_trace,
        tokens: s.tokens,
        logprobs_old: s.logprobs,
    })
}
