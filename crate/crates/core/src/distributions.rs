//! Discrete distribution kernels: entropy, KL divergence and tempered softmax.
//!
//! All quantities are in nats. Distributions are validated on construction so
//! the kernels themselves only check shapes.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance on the total mass of a distribution.
pub const MASS_TOLERANCE: f64 = 1e-9;

/// Floor substituted for zero entries of the second argument of KL.
pub const KL_FLOOR: f64 = 1e-12;

/// A normalized probability vector over a finite vocabulary (|V| >= 2).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct TokenDistribution(Vec<f64>);

impl TokenDistribution {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.len() < 2 {
            return Err(Error::InvalidDistribution(format!(
                "vocabulary size {} < 2",
                probs.len()
            )));
        }
        let mut total = 0.0;
        for (i, &p) in probs.iter().enumerate() {
            if !p.is_finite() || p < 0.0 {
                return Err(Error::InvalidDistribution(format!(
                    "entry {i} is {p}, expected a finite non-negative probability"
                )));
            }
            total += p;
        }
        if (total - 1.0).abs() > MASS_TOLERANCE {
            return Err(Error::InvalidDistribution(format!(
                "probabilities sum to {total}, expected 1"
            )));
        }
        Ok(Self(probs))
    }

    pub fn uniform(size: usize) -> Result<Self> {
        if size < 2 {
            return Self::new(vec![1.0; size]);
        }
        Ok(Self(vec![1.0 / size as f64; size]))
    }

    pub fn one_hot(size: usize, index: usize) -> Result<Self> {
        if index >= size {
            return Err(Error::Shape {
                expected: size,
                actual: index + 1,
            });
        }
        let mut probs = vec![0.0; size];
        probs[index] = 1.0;
        Self::new(probs)
    }

    /// Wraps the output of [`softmax`]; mass is exact to rounding.
    fn from_normalized(probs: Vec<f64>) -> Self {
        debug_assert!((probs.iter().sum::<f64>() - 1.0).abs() <= MASS_TOLERANCE);
        Self(probs)
    }

    pub fn probs(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn prob(&self, token: usize) -> f64 {
        self.0[token]
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl TryFrom<Vec<f64>> for TokenDistribution {
    type Error = Error;

    fn try_from(value: Vec<f64>) -> Result<Self> {
        Self::new(value)
    }
}

impl From<TokenDistribution> for Vec<f64> {
    fn from(value: TokenDistribution) -> Self {
        value.0
    }
}

/// Shannon entropy `-Σ p ln p`, with `0 ln 0 = 0`.
pub fn entropy(d: &TokenDistribution) -> f64 {
    let h: f64 = d
        .0
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| -p * p.ln())
        .sum();
    h.max(0.0)
}

/// `KL(p || q) = Σ p ln(p / q)`.
///
/// Entries where `q` is zero but `p` has mass are floored at [`KL_FLOOR`] and
/// `q` is renormalized; otherwise `q` is used exactly, so `KL(p, p)` is `0.0`
/// bit-for-bit.
pub fn kl_divergence(p: &TokenDistribution, q: &TokenDistribution) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::Shape {
            expected: p.len(),
            actual: q.len(),
        });
    }
    let needs_floor = p.0.iter().zip(&q.0).any(|(&pv, &qv)| pv > 0.0 && qv == 0.0);
    let kl = if needs_floor {
        let floored: Vec<f64> = q.0.iter().map(|&qv| if qv == 0.0 { KL_FLOOR } else { qv }).collect();
        let total: f64 = floored.iter().sum();
        kl_terms(&p.0, floored.iter().map(|qv| qv / total))
    } else {
        kl_terms(&p.0, q.0.iter().copied())
    };
    Ok(kl.max(0.0))
}

fn kl_terms(p: &[f64], q: impl Iterator<Item = f64>) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(&pv, _)| pv > 0.0)
        .map(|(&pv, qv)| if pv == qv { 0.0 } else { pv * (pv / qv).ln() })
        .sum()
}

/// Tempered softmax with max-subtraction.
pub fn softmax(logits: &[f64], temperature: f64) -> Result<TokenDistribution> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::Domain(format!(
            "temperature must be positive and finite, got {temperature}"
        )));
    }
    if logits.len() < 2 {
        return Err(Error::InvalidDistribution(format!(
            "vocabulary size {} < 2",
            logits.len()
        )));
    }
    if let Some(bad) = logits.iter().find(|l| !l.is_finite()) {
        return Err(Error::Numeric(format!("non-finite logit {bad}")));
    }
    Ok(TokenDistribution::from_normalized(softmax_unchecked(
        logits,
        temperature,
    )))
}

/// Softmax without validation, for hot loops whose logits are known finite.
pub(crate) fn softmax_unchecked(logits: &[f64], temperature: f64) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits
        .iter()
        .map(|&l| ((l - max) / temperature).exp())
        .collect();
    let total: f64 = out.iter().sum();
    for v in &mut out {
        *v /= total;
    }
    out
}

/// Tempered log-softmax; exact where the probabilities underflow.
pub(crate) fn log_softmax(logits: &[f64], temperature: f64) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let scaled: Vec<f64> = logits.iter().map(|&l| (l - max) / temperature).collect();
    let log_total = scaled.iter().map(|s| s.exp()).sum::<f64>().ln();
    scaled.into_iter().map(|s| s - log_total).collect()
}
