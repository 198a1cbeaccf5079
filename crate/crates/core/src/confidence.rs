//! Verbalized confidence tokens, aggregation and the reward terms.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Highest raw confidence token; raw tokens live in `0..=MAX_CONFIDENCE`.
pub const MAX_CONFIDENCE: u8 = 10;
/// Number of distinct confidence tokens.
pub const CONFIDENCE_LEVELS: usize = MAX_CONFIDENCE as usize + 1;

/// Maps a raw confidence token to `[0, 1]`.
pub fn normalize_confidence(raw: u32) -> Result<f64> {
    if raw > MAX_CONFIDENCE as u32 {
        return Err(Error::Parse(format!(
            "confidence token {raw} outside 0..={MAX_CONFIDENCE}"
        )));
    }
    Ok(raw as f64 / MAX_CONFIDENCE as f64)
}

/// Parses a textual confidence token such as `"8"`.
pub fn parse_confidence(token: &str) -> Result<u8> {
    let raw: u32 = token
        .trim()
        .parse()
        .map_err(|_| Error::Parse(format!("confidence token `{token}` is not an integer")))?;
    normalize_confidence(raw)?;
    Ok(raw as u8)
}

/// Like [`parse_confidence`], but falls back to raw 0 and reports whether the
/// token was malformed.
pub fn parse_confidence_or_floor(token: Option<&str>) -> (u8, bool) {
    match token.map(parse_confidence) {
        Some(Ok(raw)) => (raw, false),
        _ => (0, true),
    }
}

/// The decoupled pair emitted by a rollout.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecoupledConfidence {
    pub c_vis_raw: u8,
    pub c_reas_raw: u8,
    pub c_vis: f64,
    pub c_reas: f64,
}

impl DecoupledConfidence {
    pub fn from_raw(c_vis_raw: u8, c_reas_raw: u8) -> Result<Self> {
        Ok(Self {
            c_vis_raw,
            c_reas_raw,
            c_vis: normalize_confidence(c_vis_raw as u32)?,
            c_reas: normalize_confidence(c_reas_raw as u32)?,
        })
    }

    pub fn holistic(&self, method: Aggregation) -> f64 {
        aggregate(self.c_vis, self.c_reas, method)
    }
}

/// Aggregation of visual and reasoning confidence into one holistic score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    #[default]
    Harmonic,
    Arithmetic,
    Geometric,
    Minimum,
}

impl Aggregation {
    pub const ALL: [Aggregation; 4] = [
        Aggregation::Harmonic,
        Aggregation::Arithmetic,
        Aggregation::Geometric,
        Aggregation::Minimum,
    ];
}

pub fn aggregate(a: f64, b: f64, method: Aggregation) -> f64 {
    match method {
        Aggregation::Harmonic => {
            if a == 0.0 || b == 0.0 {
                0.0
            } else {
                // Reciprocal form rounds better than 2ab/(a+b).
                (2.0 / (1.0 / a + 1.0 / b)).clamp(a.min(b), a.max(b))
            }
        }
        Aggregation::Arithmetic => 0.5 * (a + b),
        Aggregation::Geometric => (a * b).sqrt(),
        Aggregation::Minimum => a.min(b),
    }
}

/// Exact-match correctness indicator.
pub fn accuracy_reward<T: PartialEq + ?Sized>(y: &T, y_star: &T) -> f64 {
    if y == y_star {
        1.0
    } else {
        0.0
    }
}

/// Brier-style calibration reward `-(phi - correct)^2`.
pub fn calibration_reward(phi: f64, correct: bool) -> f64 {
    let target = if correct { 1.0 } else { 0.0 };
    -(phi - target).powi(2)
}

/// `-(c_vis - s_tilde)^2`; `s_tilde` is a fixed target.
pub fn visual_reward(c_vis: f64, s_tilde: f64) -> f64 {
    -(c_vis - s_tilde).powi(2)
}

/// How the trajectory expresses confidence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConfidenceMode {
    /// Separate visual and reasoning confidence, aggregated into a holistic score.
    #[default]
    Decoupled,
    /// One holistic confidence scored with a Brier term only (no visual term).
    Holistic,
}

/// Reward weights and aggregation choice.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardConfig {
    pub lambda_acc: f64,
    pub lambda_cal: f64,
    pub lambda_vis: f64,
    pub aggregation: Aggregation,
    pub mode: ConfidenceMode,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            lambda_acc: 1.0,
            lambda_cal: 2.0,
            lambda_vis: 0.4,
            aggregation: Aggregation::Harmonic,
            mode: ConfidenceMode::Decoupled,
        }
    }
}

impl RewardConfig {
    /// Holistic-confidence ablation: Brier calibration only, no visual term.
    pub fn holistic() -> Self {
        Self {
            lambda_vis: 0.0,
            mode: ConfidenceMode::Holistic,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_acc", self.lambda_acc),
            ("lambda_cal", self.lambda_cal),
            ("lambda_vis", self.lambda_vis),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }

    pub fn visual_term_active(&self) -> bool {
        self.mode == ConfidenceMode::Decoupled && self.lambda_vis > 0.0
    }
}

/// What a trajectory contributes to the reward.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardInputs {
    pub correct: bool,
    /// Holistic confidence: the aggregate in decoupled mode, the single
    /// confidence in holistic mode.
    pub phi: f64,
    /// Visual confidence and its normalized certainty target (decoupled mode).
    pub visual: Option<(f64, f64)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub r_acc: f64,
    pub r_cal: f64,
    pub r_vis: f64,
    pub total: f64,
}

pub fn composite_reward(parts: &RewardInputs, cfg: &RewardConfig) -> Result<RewardBreakdown> {
    cfg.validate()?;
    if !(0.0..=1.0).contains(&parts.phi) {
        return Err(Error::Domain(format!("holistic confidence {} outside [0, 1]", parts.phi)));
    }
    let r_acc = if parts.correct { 1.0 } else { 0.0 };
    let r_cal = calibration_reward(parts.phi, parts.correct);
    let (r_vis, lambda_vis) = match (cfg.mode, parts.visual) {
        (ConfidenceMode::Decoupled, Some((c_vis, s_tilde))) => {
            (visual_reward(c_vis, s_tilde), cfg.lambda_vis)
        }
        (ConfidenceMode::Decoupled, None) if cfg.lambda_vis > 0.0 => {
            return Err(Error::Contract(
                "visual reward weight is set but no visual confidence/target was supplied".into(),
            ))
        }
        _ => (0.0, 0.0),
    };
    Ok(RewardBreakdown {
        r_acc,
        r_cal,
        r_vis,
        total: cfg.lambda_acc * r_acc + cfg.lambda_cal * r_cal + lambda_vis * r_vis,
    })
}
