//! Synthetic grid-perception task.
//!
//! An "image" is a small grid of color indices, some of which may be hidden.
//! Queries ask for the majority color, the count of one color, or which of
//! two colors is more frequent; the answer is always computed from the full
//! (unhidden) cells.

mod policy;
mod rollout;

pub use policy::{AnswerContext, Evidence, Policy, Site, REAS_FEATURES, VIS_FEATURES};
pub use rollout::{rollout, Decoding, RolloutConfig, SampledToken, Trajectory};

use rand::seq::index::sample;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seeding::{rng_from, TAG_PERTURB};

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GridImage {
    pub width: usize,
    pub height: usize,
    pub colors: u8,
    /// Row-major color indices.
    pub cells: Vec<u8>,
    /// Row-major; `true` hides the cell from the policy.
    pub mask: Vec<bool>,
}

impl GridImage {
    pub fn new(width: usize, height: usize, colors: u8, cells: Vec<u8>) -> Result<Self> {
        let mask = vec![false; cells.len()];
        Self::with_mask(width, height, colors, cells, mask)
    }

    pub fn with_mask(
        width: usize,
        height: usize,
        colors: u8,
        cells: Vec<u8>,
        mask: Vec<bool>,
    ) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Config("grid dimensions must be >= 1".into()));
        }
        if colors < 2 {
            return Err(Error::Config("need at least two colors".into()));
        }
        for v in [cells.len(), mask.len()] {
            if v != width * height {
                return Err(Error::Shape {
                    expected: width * height,
                    actual: v,
                });
            }
        }
        if let Some(&bad) = cells.iter().find(|&&c| c >= colors) {
            return Err(Error::Domain(format!("color {bad} outside 0..{colors}")));
        }
        Ok(Self {
            width,
            height,
            colors,
            cells,
            mask,
        })
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn hidden_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn hidden_fraction(&self) -> f64 {
        self.hidden_count() as f64 / self.len() as f64
    }

    /// What the policy observes at `cell`.
    pub fn evidence(&self, cell: usize) -> Evidence {
        if self.mask[cell] {
            Evidence::Hidden
        } else {
            Evidence::Color(self.cells[cell])
        }
    }

    /// Color counts over all cells, hidden or not.
    pub fn color_counts(&self) -> Vec<u32> {
        let mut counts = vec![0u32; self.colors as usize];
        for &c in &self.cells {
            counts[c as usize] += 1;
        }
        counts
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum QueryKind {
    /// Most frequent color (ties go to the lowest index).
    MajorityColor,
    /// Number of cells of `target`.
    CountColor { target: u8 },
    /// Whether `a` or `b` is more frequent: answers 0 = a, 1 = equal, 2 = b.
    CompareCounts { a: u8, b: u8 },
}

impl QueryKind {
    pub fn index(&self) -> usize {
        match self {
            QueryKind::MajorityColor => 0,
            QueryKind::CountColor { .. } => 1,
            QueryKind::CompareCounts { .. } => 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Query {
    pub kind: QueryKind,
    /// Number of answers; answers are indices `0..answer_space`.
    pub answer_space: usize,
    pub y_star: usize,
}

impl Query {
    /// Builds a query whose ground truth is computed from `img`.
    pub fn for_image(kind: QueryKind, img: &GridImage) -> Result<Self> {
        let counts = img.color_counts();
        let check = |c: u8| {
            if c >= img.colors {
                Err(Error::Domain(format!("query color {c} outside 0..{}", img.colors)))
            } else {
                Ok(())
            }
        };
        let (answer_space, y_star) = match kind {
            QueryKind::MajorityColor => (img.colors as usize, argmax_first(&counts)),
            QueryKind::CountColor { target } => {
                check(target)?;
                (img.len() + 1, counts[target as usize] as usize)
            }
            QueryKind::CompareCounts { a, b } => {
                check(a)?;
                check(b)?;
                if a == b {
                    return Err(Error::Domain("compare query needs two distinct colors".into()));
                }
                (3, compare_answer(counts[a as usize] as i64 - counts[b as usize] as i64))
            }
        };
        Ok(Self {
            kind,
            answer_space,
            y_star,
        })
    }

    pub fn describe_answer(&self, y: usize) -> String {
        match self.kind {
            QueryKind::MajorityColor => format!("color:{y}"),
            QueryKind::CountColor { .. } => format!("count:{y}"),
            QueryKind::CompareCounts { .. } => match y {
                0 => "a_more".into(),
                1 => "equal".into(),
                2 => "b_more".into(),
                _ => format!("invalid:{y}"),
            },
        }
    }
}

pub(crate) fn compare_answer(diff: i64) -> usize {
    match diff.cmp(&0) {
        std::cmp::Ordering::Greater => 0,
        std::cmp::Ordering::Equal => 1,
        std::cmp::Ordering::Less => 2,
    }
}

pub(crate) fn argmax_first(counts: &[u32]) -> usize {
    let mut best = 0;
    for (i, &c) in counts.iter().enumerate() {
        if c > counts[best] {
            best = i;
        }
    }
    best
}

/// Exact-match correctness; answers outside the space never match.
pub fn verify(y: usize, query: &Query) -> bool {
    y < query.answer_space && y == query.y_star
}

/// Relative frequency of each query kind.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QueryMix {
    pub majority: f64,
    pub count: f64,
    pub compare: f64,
}

impl Default for QueryMix {
    fn default() -> Self {
        Self {
            majority: 0.5,
            count: 0.3,
            compare: 0.2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskConfig {
    pub width: usize,
    pub height: usize,
    pub colors: u8,
    pub query_mix: QueryMix,
    /// Probability that a cell takes the image's dominant color outright.
    pub dominance: f64,
    /// Probability that a task image arrives partially occluded.
    pub occlusion_prob: f64,
    /// Occluded fraction is uniform in `[occlusion_min, occlusion_max]`.
    pub occlusion_min: f64,
    pub occlusion_max: f64,
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self {
            width: 4,
            height: 4,
            colors: 4,
            query_mix: QueryMix::default(),
            dominance: 0.4,
            occlusion_prob: 0.3,
            occlusion_min: 0.1,
            occlusion_max: 0.5,
        }
    }
}

impl TaskConfig {
    pub fn cells(&self) -> usize {
        self.width * self.height
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::Config("grid dimensions must be >= 1".into()));
        }
        if self.colors < 2 {
            return Err(Error::Config("need at least two colors".into()));
        }
        let mix = self.query_mix;
        let weights = [mix.majority, mix.count, mix.compare];
        if weights.iter().any(|w| !(*w >= 0.0 && w.is_finite())) || weights.iter().sum::<f64>() <= 0.0 {
            return Err(Error::Config("query mix weights must be >= 0 with a positive sum".into()));
        }
        for (name, v) in [
            ("dominance", self.dominance),
            ("occlusion_prob", self.occlusion_prob),
            ("occlusion_min", self.occlusion_min),
            ("occlusion_max", self.occlusion_max),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} must lie in [0, 1], got {v}")));
            }
        }
        if self.occlusion_min > self.occlusion_max {
            return Err(Error::Config("occlusion_min exceeds occlusion_max".into()));
        }
        Ok(())
    }
}

/// Draws an image and a query; deterministic in `seed`.
pub fn generate_task(seed: u64, cfg: &TaskConfig) -> Result<(GridImage, Query)> {
    cfg.validate()?;
    let mut rng = rng_from(seed, &[]);
    let n = cfg.cells();
    let colors = cfg.colors;

    let dominant = rng.random_range(0..colors);
    let cells: Vec<u8> = (0..n)
        .map(|_| {
            if rng.random::<f64>() < cfg.dominance {
                dominant
            } else {
                rng.random_range(0..colors)
            }
        })
        .collect();
    let mut mask = vec![false; n];
    if rng.random::<f64>() < cfg.occlusion_prob {
        let frac = cfg.occlusion_min + (cfg.occlusion_max - cfg.occlusion_min) * rng.random::<f64>();
        let hidden = ((frac * n as f64).round() as usize).min(n);
        for i in sample(&mut rng, n, hidden) {
            mask[i] = true;
        }
    }
    let img = GridImage::with_mask(cfg.width, cfg.height, colors, cells, mask)?;

    let mix = cfg.query_mix;
    let total = mix.majority + mix.count + mix.compare;
    let u = rng.random::<f64>() * total;
    let kind = if u < mix.majority {
        QueryKind::MajorityColor
    } else if u < mix.majority + mix.count {
        QueryKind::CountColor {
            target: rng.random_range(0..colors),
        }
    } else {
        let a = rng.random_range(0..colors);
        let b = (a + rng.random_range(1..colors)) % colors;
        QueryKind::CompareCounts { a, b }
    };
    let query = Query::for_image(kind, &img)?;
    Ok((img, query))
}

/// Image perturbations used for the grounding probe.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)]
pub enum Perturbation {
    /// Hide `round(ratio * N)` uniformly chosen cells.
    Mask { ratio: f64 },
    /// Resample each visible cell's color with probability `1 - exp(-sigma^2 / 2)`.
    GaussianNoise { sigma: f64 },
    /// Hide everything outside the centered window spanning `fraction` of each side.
    CenterCrop { fraction: f64 },
    /// Replace each visible cell by the modal visible color of its neighborhood.
    Blur { radius: usize },
}

impl Default for Perturbation {
    fn default() -> Self {
        Perturbation::Mask { ratio: 0.8 }
    }
}

impl Perturbation {
    pub fn validate(&self) -> Result<()> {
        match *self {
            Perturbation::Mask { ratio } if !(0.0..=1.0).contains(&ratio) => {
                Err(Error::Config(format!("mask ratio {ratio} outside [0, 1]")))
            }
            Perturbation::CenterCrop { fraction } if !(0.0..=1.0).contains(&fraction) => {
                Err(Error::Config(format!("crop fraction {fraction} outside [0, 1]")))
            }
            Perturbation::GaussianNoise { sigma } if !(sigma >= 0.0 && sigma.is_finite()) => {
                Err(Error::Config(format!("noise sigma {sigma} must be finite and >= 0")))
            }
            _ => Ok(()),
        }
    }
}

/// Task distribution plus the perturbation used to probe grounding.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Environment {
    pub task: TaskConfig,
    pub perturbation: Perturbation,
}

impl Environment {
    pub fn validate(&self) -> Result<()> {
        self.task.validate()?;
        self.perturbation.validate()
    }
}

/// Returns a perturbed copy; `img` is left untouched.
pub fn perturb(img: &GridImage, kind: &Perturbation, seed: u64) -> Result<GridImage> {
    kind.validate()?;
    let mut rng = rng_from(seed, &[TAG_PERTURB]);
    let mut out = img.clone();
    let n = img.len();
    match *kind {
        Perturbation::Mask { ratio } => {
            let hidden = ((ratio * n as f64).round() as usize).min(n);
            for i in sample(&mut rng, n, hidden) {
                out.mask[i] = true;
            }
        }
        Perturbation::GaussianNoise { sigma } => {
            let p = 1.0 - (-sigma * sigma / 2.0).exp();
            for i in 0..n {
                // Draw both values for every cell so the stream does not depend on the mask.
                let flip = rng.random::<f64>() < p;
                let color = rng.random_range(0..img.colors);
                if flip && !img.mask[i] {
                    out.cells[i] = color;
                }
            }
        }
        Perturbation::CenterCrop { fraction } => {
            let keep_w = (fraction * img.width as f64).round() as usize;
            let keep_h = (fraction * img.height as f64).round() as usize;
            let x0 = (img.width - keep_w) / 2;
            let y0 = (img.height - keep_h) / 2;
            for y in 0..img.height {
                for x in 0..img.width {
                    let inside = x >= x0 && x < x0 + keep_w && y >= y0 && y < y0 + keep_h;
                    if !inside {
                        out.mask[y * img.width + x] = true;
                    }
                }
            }
        }
        Perturbation::Blur { radius } => {
            let r = radius as isize;
            for y in 0..img.height as isize {
                for x in 0..img.width as isize {
                    let here = (y as usize) * img.width + x as usize;
                    if img.mask[here] {
                        continue;
                    }
                    let mut counts = vec![0u32; img.colors as usize];
                    for dy in -r..=r {
                        for dx in -r..=r {
                            let (nx, ny) = (x + dx, y + dy);
                            if nx < 0 || ny < 0 || nx >= img.width as isize || ny >= img.height as isize {
                                continue;
                            }
                            let j = (ny as usize) * img.width + nx as usize;
                            if !img.mask[j] {
                                counts[img.cells[j] as usize] += 1;
                            }
                        }
                    }
                    let own = img.cells[here];
                    let best = counts.iter().copied().max().unwrap_or(0);
                    out.cells[here] = if counts[own as usize] == best {
                        own
                    } else {
                        argmax_first(&counts) as u8
                    };
                }
            }
        }
    }
    Ok(out)
}

/// Hides every cell: the visually unanswerable variant of `img`.
pub fn make_unanswerable(img: &GridImage) -> GridImage {
    let mut out = img.clone();
    out.mask.iter_mut().for_each(|m| *m = true);
    out
}
