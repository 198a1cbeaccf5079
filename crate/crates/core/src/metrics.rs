//! Calibration and ranking metrics.
//!
//! Binning uses equal-width bins `[m/M, (m+1)/M)` with the last bin closed
//! at one. Metrics that are undefined on the given input (single-class AUROC, zero
//! rank variance) return [`Error::UndefinedMetric`] instead of a sentinel.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Answerable,
    Unanswerable,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Answerable => "answerable",
            Split::Unanswerable => "unanswerable",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "answerable" => Ok(Split::Answerable),
            "unanswerable" => Ok(Split::Unanswerable),
            other => Err(Error::Parse(format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationRecord {
    pub confidence: f64,
    pub correct: bool,
    pub split: Option<Split>,
    /// Decoupled `(c_vis, c_reas)` when the record came from a decoupled rollout.
    pub decoupled: Option<(f64, f64)>,
}

impl CalibrationRecord {
    pub fn new(confidence: f64, correct: bool) -> Result<Self> {
        if !(0.0..=1.0).contains(&confidence) {
            return Err(Error::Domain(format!("confidence {confidence} outside [0, 1]")));
        }
        Ok(Self {
            confidence,
            correct,
            split: None,
            decoupled: None,
        })
    }

    pub fn with_split(mut self, split: Split) -> Self {
        self.split = Some(split);
        self
    }

    pub fn with_decoupled(mut self, c_vis: f64, c_reas: f64) -> Self {
        self.decoupled = Some((c_vis, c_reas));
        self
    }

    fn target(&self) -> f64 {
        if self.correct {
            1.0
        } else {
            0.0
        }
    }
}

/// One row of a reliability table.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bin {
    pub lower: f64,
    pub upper: f64,
    pub count: usize,
    /// `None` for empty bins.
    pub mean_confidence: Option<f64>,
    pub accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityBins {
    pub bins: Vec<Bin>,
}

impl ReliabilityBins {
    pub fn total(&self) -> usize {
        self.bins.iter().map(|b| b.count).sum()
    }

    /// Count-weighted mean absolute gap between confidence and accuracy.
    pub fn ece(&self) -> Result<f64> {
        let n = self.total();
        if n == 0 {
            return Err(Error::EmptyInput("calibration records"));
        }
        let mut acc = 0.0;
        for b in &self.bins {
            if let (Some(conf), Some(hit)) = (b.mean_confidence, b.accuracy) {
                acc += (b.count as f64 / n as f64) * (hit - conf).abs();
            }
        }
        Ok(acc)
    }
}

/// Index of the equal-width bin containing `c`.
pub fn bin_index(c: f64, bins: usize) -> usize {
    let m = bins as f64;
    let mut idx = ((c * m).floor().max(0.0) as usize).min(bins - 1);
    // Correct for rounding in `c * m` against the exact edges `k / m`.
    while idx > 0 && c < idx as f64 / m {
        idx -= 1;
    }
    while idx + 1 < bins && c >= (idx + 1) as f64 / m {
        idx += 1;
    }
    idx
}

pub fn reliability_bins(records: &[CalibrationRecord], bins: usize) -> Result<ReliabilityBins> {
    if bins == 0 {
        return Err(Error::Config("number of bins must be >= 1".into()));
    }
    let mut counts = vec![0usize; bins];
    let mut conf_sum = vec![0.0; bins];
    let mut hit_sum = vec![0.0; bins];
    for r in records {
        let i = bin_index(r.confidence, bins);
        counts[i] += 1;
        conf_sum[i] += r.confidence;
        hit_sum[i] += r.target();
    }
    let m = bins as f64;
    Ok(ReliabilityBins {
        bins: (0..bins)
            .map(|i| {
                let count = counts[i];
                let (mean_confidence, accuracy) = if count == 0 {
                    (None, None)
                } else {
                    (
                        Some(conf_sum[i] / count as f64),
                        Some(hit_sum[i] / count as f64),
                    )
                };
                Bin {
                    lower: i as f64 / m,
                    upper: (i + 1) as f64 / m,
                    count,
                    mean_confidence,
                    accuracy,
                }
            })
            .collect(),
    })
}

/// Expected calibration error with `bins` equal-width bins.
pub fn ece(records: &[CalibrationRecord], bins: usize) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::EmptyInput("calibration records"));
    }
    reliability_bins(records, bins)?.ece()
}

pub fn brier(records: &[CalibrationRecord]) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::EmptyInput("calibration records"));
    }
    Ok(records
        .iter()
        .map(|r| (r.confidence - r.target()).powi(2))
        .sum::<f64>()
        / records.len() as f64)
}

pub fn accuracy(records: &[CalibrationRecord]) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::EmptyInput("calibration records"));
    }
    Ok(records.iter().filter(|r| r.correct).count() as f64 / records.len() as f64)
}

pub fn auroc(records: &[CalibrationRecord]) -> Result<f64> {
    let scores: Vec<f64> = records.iter().map(|r| r.confidence).collect();
    let labels: Vec<bool> = records.iter().map(|r| r.correct).collect();
    auroc_scores(&scores, &labels)
}

/// Mann-Whitney AUROC of real-valued scores against binary labels.
///
/// Computed from average ranks, so tied (positive, negative) pairs count 1/2.
pub fn auroc_scores(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Shape {
            expected: scores.len(),
            actual: labels.len(),
        });
    }
    check_finite(scores)?;
    let positives = labels.iter().filter(|&&l| l).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(Error::UndefinedMetric(format!(
            "AUROC needs both classes ({positives} positive, {negatives} negative)"
        )));
    }
    let ranks = average_ranks(scores);
    let rank_sum: f64 = ranks
        .iter()
        .zip(labels)
        .filter(|(_, &l)| l)
        .map(|(r, _)| r)
        .sum();
    let p = positives as f64;
    let u = rank_sum - p * (p + 1.0) / 2.0;
    Ok(u / (p * negatives as f64))
}

/// Spearman correlation: Pearson correlation of average ranks.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    check_pair(x, y)?;
    pearson(&average_ranks(x), &average_ranks(y))
}

pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    check_pair(x, y)?;
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::UndefinedMetric("zero variance".into()));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Kendall's tau-b, O(n log n) via a merge-sort discordance count.
pub fn kendall_tau(x: &[f64], y: &[f64]) -> Result<f64> {
    check_pair(x, y)?;
    let n = x.len();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&i, &j| cmp(x[i], x[j]).then(cmp(y[i], y[j])));

    let pairs = (n * (n - 1) / 2) as f64;
    let tied_x = tie_pairs(&idx, |a, b| x[a] == x[b]);
    let tied_xy = tie_pairs(&idx, |a, b| x[a] == x[b] && y[a] == y[b]);

    let mut ys: Vec<f64> = idx.iter().map(|&i| y[i]).collect();
    let swaps = merge_count(&mut ys) as f64;
    let order: Vec<usize> = (0..n).collect();
    let tied_y = tie_pairs(&order, |a, b| ys[a] == ys[b]);

    let denom = ((pairs - tied_x) * (pairs - tied_y)).sqrt();
    if denom == 0.0 {
        return Err(Error::UndefinedMetric(
            "Kendall tau undefined: one variable is constant".into(),
        ));
    }
    let numer = pairs - tied_x - tied_y + tied_xy - 2.0 * swaps;
    Ok((numer / denom).clamp(-1.0, 1.0))
}

/// Mean confidences on the answerable and unanswerable splits and their gap.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceGap {
    pub mean_answerable: f64,
    pub mean_unanswerable: f64,
    pub delta: f64,
}

pub fn confidence_gap(
    answerable: &[CalibrationRecord],
    unanswerable: &[CalibrationRecord],
) -> Result<ConfidenceGap> {
    if answerable.is_empty() {
        return Err(Error::EmptyInput("answerable split"));
    }
    if unanswerable.is_empty() {
        return Err(Error::EmptyInput("unanswerable split"));
    }
    let mean = |rs: &[CalibrationRecord]| rs.iter().map(|r| r.confidence).sum::<f64>() / rs.len() as f64;
    let (a, u) = (mean(answerable), mean(unanswerable));
    Ok(ConfidenceGap {
        mean_answerable: a,
        mean_unanswerable: u,
        delta: a - u,
    })
}

/// 1-based average ranks (ties share the mean of their positions).
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&i, &j| cmp(values[i], values[j]));
    let mut ranks = vec![0.0; values.len()];
    let mut start = 0;
    while start < idx.len() {
        let mut end = start + 1;
        while end < idx.len() && values[idx[end]] == values[idx[start]] {
            end += 1;
        }
        let rank = (start + end + 1) as f64 / 2.0;
        for &i in &idx[start..end] {
            ranks[i] = rank;
        }
        start = end;
    }
    ranks
}

fn cmp(a: f64, b: f64) -> Ordering {
    a.partial_cmp(&b).expect("finite values")
}

/// Number of tied pairs among runs of `order` grouped by `same`.
fn tie_pairs(order: &[usize], same: impl Fn(usize, usize) -> bool) -> f64 {
    let mut total = 0.0;
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && same(order[start], order[end]) {
            end += 1;
        }
        let t = (end - start) as f64;
        total += t * (t - 1.0) / 2.0;
        start = end;
    }
    total
}

/// Sorts `v` ascending and returns the number of strict inversions.
fn merge_count(v: &mut [f64]) -> u64 {
    let n = v.len();
    if n < 2 {
        return 0;
    }
    let mid = n / 2;
    let mut swaps = merge_count(&mut v[..mid]) + merge_count(&mut v[mid..]);
    let mut merged = Vec::with_capacity(n);
    let (mut i, mut j) = (0, mid);
    while i < mid && j < n {
        if v[j] < v[i] {
            swaps += (mid - i) as u64;
            merged.push(v[j]);
            j += 1;
        } else {
            merged.push(v[i]);
            i += 1;
        }
    }
    merged.extend_from_slice(&v[i..mid]);
    merged.extend_from_slice(&v[j..n]);
    v.copy_from_slice(&merged);
    swaps
}

fn check_finite(v: &[f64]) -> Result<()> {
    match v.iter().find(|x| !x.is_finite()) {
        Some(bad) => Err(Error::Numeric(format!("non-finite value {bad}"))),
        None => Ok(()),
    }
}

fn check_pair(x: &[f64], y: &[f64]) -> Result<()> {
    if x.len() != y.len() {
        return Err(Error::Shape {
            expected: x.len(),
            actual: y.len(),
        });
    }
    if x.len() < 2 {
        return Err(Error::EmptyInput("correlation needs at least two points"));
    }
    check_finite(x)?;
    check_finite(y)
}
