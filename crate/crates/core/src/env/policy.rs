//! The toy two-stage policy.
//!
//! All heads are linear in a single flat parameter vector:
//!
//! * perception: a `(C+1) x (C+1)` logit table indexed by the cell evidence
//!   (a color or "hidden") and the emitted token (a color or "unknown");
//! * confidence heads: ordinal logits `q (w.x) - q^2 (u.x)` over the levels
//!   `q = k/10`, so neighbouring levels share mass and the mode moves smoothly
//!   with the features. The visual head sees `[1, hidden fraction]`; the
//!   reasoning head sees a per-query-kind intercept, tally margin and
//!   unknown-token fraction, plus the hidden fraction;
//! * answer: five scalars shaping logits from the emitted tallies.

use serde::{Deserialize, Serialize};

use crate::confidence::CONFIDENCE_LEVELS;
use crate::env::compare_answer;
use crate::error::{Error, Result};
use crate::seeding::{rng_from, TAG_INIT};
use rand::Rng as _;
use rand_distr::StandardNormal;

pub const VIS_FEATURES: usize = 2;
pub const REAS_FEATURES: usize = 10;
const ANSWER_PARAMS: usize = 5;

// Answer-head parameter slots.
const A_MAJ: usize = 0;
const A_CNT: usize = 1;
const D_CNT: usize = 2;
const A_CMP: usize = 3;
const G_EQ: usize = 4;

/// Cell evidence as seen by the perception head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Evidence {
    Color(u8),
    Hidden,
}

impl Evidence {
    fn row(self, colors: usize) -> usize {
        match self {
            Evidence::Color(c) => c as usize,
            Evidence::Hidden => colors,
        }
    }
}

/// What the answer head conditions on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum AnswerContext {
    Majority { tallies: Vec<u32> },
    Count { tally: u32, unknown: u32, space: usize },
    Compare { diff: i32 },
}

impl AnswerContext {
    pub fn vocab(&self) -> usize {
        match self {
            AnswerContext::Majority { tallies } => tallies.len(),
            AnswerContext::Count { space, .. } => *space,
            AnswerContext::Compare { .. } => 3,
        }
    }

    /// Answer implied by the tallies alone (ties to the lowest index).
    pub fn tally_answer(&self) -> usize {
        match self {
            AnswerContext::Majority { tallies } => crate::env::argmax_first(tallies),
            AnswerContext::Count { tally, .. } => *tally as usize,
            AnswerContext::Compare { diff } => compare_answer(*diff as i64),
        }
    }
}

/// A decision point of the policy: enough context to recompute its logits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Site {
    Perception { evidence: Evidence },
    VisConfidence { features: [f64; VIS_FEATURES] },
    ReasConfidence { features: [f64; REAS_FEATURES] },
    Answer(AnswerContext),
}

impl Site {
    pub fn is_visual(&self) -> bool {
        matches!(self, Site::Perception { .. })
    }
}

pub fn vis_features(hidden_fraction: f64) -> [f64; VIS_FEATURES] {
    [1.0, hidden_fraction]
}

pub fn reas_features(kind: usize, margin: f64, unknown_fraction: f64, hidden_fraction: f64) -> [f64; REAS_FEATURES] {
    let mut f = [0.0; REAS_FEATURES];
    f[3 * kind] = 1.0;
    f[3 * kind + 1] = margin;
    f[3 * kind + 2] = unknown_fraction;
    f[9] = hidden_fraction;
    f
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Policy {
    colors: usize,
    params: Vec<f64>,
}

impl Policy {
    pub fn num_params_for(colors: usize) -> usize {
        (colors + 1) * (colors + 1) + 2 * (VIS_FEATURES + REAS_FEATURES) + ANSWER_PARAMS
    }

    pub fn from_params(colors: usize, params: Vec<f64>) -> Result<Self> {
        if colors < 2 {
            return Err(Error::Config("policy needs at least two colors".into()));
        }
        let expected = Self::num_params_for(colors);
        if params.len() != expected {
            return Err(Error::Shape {
                expected,
                actual: params.len(),
            });
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::Numeric("non-finite policy parameter".into()));
        }
        Ok(Self { colors, params })
    }

    fn zeros(colors: usize) -> Self {
        Self {
            colors,
            params: vec![0.0; Self::num_params_for(colors)],
        }
    }

    /// A "pretrained" starting point: noisy perception that guesses a color
    /// for hidden cells, moderate answer scales, and confidence heads peaked
    /// at 9/10 regardless of context.
    pub fn base(colors: usize) -> Self {
        let mut p = Self::zeros(colors);
        for c in 0..colors {
            let i = p.perception_offset(c) + c;
            p.params[i] = 2.0;
        }
        let hidden = p.perception_offset(colors);
        p.params[hidden + colors] = -1.0;
        // -0.5 (k - 9)^2 up to a constant, written in q = k/10.
        let (linear, quadratic) = (90.0, 50.0);
        let (vis, reas) = (p.vis_offset(), p.reas_offset());
        p.params[vis] = linear;
        p.params[vis + VIS_FEATURES] = quadratic;
        for kind in 0..3 {
            p.params[reas + 3 * kind] = linear;
            p.params[reas + REAS_FEATURES + 3 * kind] = quadratic;
        }
        let a = p.answer_offset();
        p.params[a + A_MAJ] = 1.0;
        p.params[a + A_CNT] = 0.5;
        p.params[a + D_CNT] = 1.0 / colors as f64;
        p.params[a + A_CMP] = 1.0;
        p.params[a + G_EQ] = 0.5;
        p
    }

    /// Gaussian-initialized parameters with standard deviation `scale`.
    pub fn random(colors: usize, seed: u64, scale: f64) -> Self {
        let mut rng = rng_from(seed, &[TAG_INIT]);
        let mut p = Self::zeros(colors);
        for v in &mut p.params {
            let z: f64 = rng.sample(StandardNormal);
            *v = scale * z;
        }
        p
    }

    /// Perception that ignores its evidence: every row of the table is equal.
    pub fn blind(colors: usize) -> Self {
        let mut p = Self::base(colors);
        let row: Vec<f64> = (0..=colors).map(|t| if t < colors { 0.5 } else { -1.0 }).collect();
        for e in 0..=colors {
            let off = p.perception_offset(e);
            p.params[off..off + colors + 1].copy_from_slice(&row);
        }
        p
    }

    /// Near-perfect perception (hidden cells map to "unknown") with sharp
    /// answer heads.
    pub fn oracle(colors: usize) -> Self {
        let mut p = Self::base(colors);
        for e in 0..=colors {
            let off = p.perception_offset(e);
            for t in 0..=colors {
                p.params[off + t] = if t == e { 10.0 } else { 0.0 };
            }
        }
        let a = p.answer_offset();
        p.params[a + A_MAJ] = 10.0;
        p.params[a + A_CNT] = 10.0;
        p.params[a + D_CNT] = 0.0;
        p.params[a + A_CMP] = 10.0;
        p.params[a + G_EQ] = 5.0;
        p
    }

    pub fn colors(&self) -> usize {
        self.colors
    }

    /// Perception vocabulary: the colors plus "unknown".
    pub fn perception_vocab(&self) -> usize {
        self.colors + 1
    }

    pub fn unknown_token(&self) -> usize {
        self.colors
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    fn perception_offset(&self, row: usize) -> usize {
        row * (self.colors + 1)
    }

    fn vis_offset(&self) -> usize {
        (self.colors + 1) * (self.colors + 1)
    }

    fn reas_offset(&self) -> usize {
        self.vis_offset() + 2 * VIS_FEATURES
    }

    fn answer_offset(&self) -> usize {
        self.reas_offset() + 2 * REAS_FEATURES
    }

    pub fn vocab(&self, site: &Site) -> usize {
        match site {
            Site::Perception { .. } => self.perception_vocab(),
            Site::VisConfidence { .. } | Site::ReasConfidence { .. } => CONFIDENCE_LEVELS,
            Site::Answer(ctx) => ctx.vocab(),
        }
    }

    /// Untempered logits at `site`.
    pub fn logits(&self, site: &Site) -> Vec<f64> {
        match site {
            Site::Perception { evidence } => {
                let off = self.perception_offset(evidence.row(self.colors));
                self.params[off..off + self.colors + 1].to_vec()
            }
            Site::VisConfidence { features } => self.ordinal_logits(self.vis_offset(), features),
            Site::ReasConfidence { features } => self.ordinal_logits(self.reas_offset(), features),
            Site::Answer(ctx) => {
                let a = &self.params[self.answer_offset()..];
                match ctx {
                    AnswerContext::Majority { tallies } => {
                        tallies.iter().map(|&t| a[A_MAJ] * t as f64).collect()
                    }
                    AnswerContext::Count { tally, unknown, space } => {
                        let centre = *tally as f64 + a[D_CNT] * *unknown as f64;
                        (0..*space)
                            .map(|k| -a[A_CNT] * (k as f64 - centre).powi(2))
                            .collect()
                    }
                    AnswerContext::Compare { diff } => {
                        let d = *diff as f64;
                        vec![a[A_CMP] * d, a[G_EQ] - a[A_CMP] * d.abs(), -a[A_CMP] * d]
                    }
                }
            }
        }
    }

    /// Adds `J^T dlogits` (the pull-back of a logit-space gradient) to `grad`.
    pub fn backward(&self, site: &Site, dlogits: &[f64], grad: &mut [f64]) {
        debug_assert_eq!(dlogits.len(), self.vocab(site));
        match site {
            Site::Perception { evidence } => {
                let off = self.perception_offset(evidence.row(self.colors));
                for (g, d) in grad[off..off + self.colors + 1].iter_mut().zip(dlogits) {
                    *g += d;
                }
            }
            Site::VisConfidence { features } => ordinal_backward(self.vis_offset(), features, dlogits, grad),
            Site::ReasConfidence { features } => ordinal_backward(self.reas_offset(), features, dlogits, grad),
            Site::Answer(ctx) => {
                let off = self.answer_offset();
                let a = &self.params[off..];
                match ctx {
                    AnswerContext::Majority { tallies } => {
                        grad[off + A_MAJ] += tallies
                            .iter()
                            .zip(dlogits)
                            .map(|(&t, d)| t as f64 * d)
                            .sum::<f64>();
                    }
                    AnswerContext::Count { tally, unknown, .. } => {
                        let centre = *tally as f64 + a[D_CNT] * *unknown as f64;
                        let (mut g_scale, mut g_shift) = (0.0, 0.0);
                        for (k, d) in dlogits.iter().enumerate() {
                            let r = k as f64 - centre;
                            g_scale += -r * r * d;
                            g_shift += 2.0 * a[A_CNT] * r * *unknown as f64 * d;
                        }
                        grad[off + A_CNT] += g_scale;
                        grad[off + D_CNT] += g_shift;
                    }
                    AnswerContext::Compare { diff } => {
                        let d = *diff as f64;
                        grad[off + A_CMP] += d * dlogits[0] - d.abs() * dlogits[1] - d * dlogits[2];
                        grad[off + G_EQ] += dlogits[1];
                    }
                }
            }
        }
    }

    fn ordinal_logits<const F: usize>(&self, off: usize, features: &[f64; F]) -> Vec<f64> {
        let dot = |o: usize| -> f64 { self.params[o..o + F].iter().zip(features).map(|(w, x)| w * x).sum() };
        let (lin, quad) = (dot(off), dot(off + F));
        (0..CONFIDENCE_LEVELS)
            .map(|k| {
                let q = level(k);
                q * lin - q * q * quad
            })
            .collect()
    }
}

fn level(k: usize) -> f64 {
    k as f64 / (CONFIDENCE_LEVELS - 1) as f64
}

fn ordinal_backward<const F: usize>(off: usize, features: &[f64; F], dlogits: &[f64], grad: &mut [f64]) {
    let (mut g_lin, mut g_quad) = (0.0, 0.0);
    for (k, d) in dlogits.iter().enumerate() {
        let q = level(k);
        g_lin += q * d;
        g_quad -= q * q * d;
    }
    for (j, x) in features.iter().enumerate() {
        grad[off + j] += g_lin * x;
        grad[off + F + j] += g_quad * x;
    }
}
