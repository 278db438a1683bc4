//! Multilevel gray-level thresholding by maximum total class entropy.
//!
//! Thresholds `t_1 < ... < t_L` split the 256 gray levels into `L + 1`
//! bands `[t_c, t_{c+1})` with `t_0 = 0` and `t_{L+1} = 256`. The score of a
//! threshold set is the sum over bands of the Shannon entropy of the
//! histogram renormalized inside the band (Kapur's criterion). Empty bands
//! and empty bins contribute zero.

use thiserror::Error;

use crate::imagecore::{quantize_level, Histogram, Image, ImageError, LabelMap, GRAY_LEVELS};
use crate::woa::{self, SearchSpace, WoaConfig, WoaError};

pub const MAX_THRESHOLDS: usize = 4;

#[derive(Debug, Error)]
pub enum SegmentationError {
    #[error("histogram is empty")]
    EmptyHistogram,
    #[error("threshold count must be in 1..={MAX_THRESHOLDS}, got {0}")]
    LevelCount(usize),
    #[error("thresholds must be strictly increasing values in 1..=255, got {0:?}")]
    InvalidThresholds(Vec<usize>),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Woa(#[from] WoaError),
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ThresholdSet {
    levels: Vec<usize>,
}

impl ThresholdSet {
    pub fn new(levels: Vec<usize>) -> Result<Self, SegmentationError> {
        let ok = !levels.is_empty()
            && levels.iter().all(|&t| (1..GRAY_LEVELS).contains(&t))
            && levels.windows(2).all(|w| w[0] < w[1]);
        if ok {
            Ok(Self { levels })
        } else {
            Err(SegmentationError::InvalidThresholds(levels))
        }
    }

    pub fn levels(&self) -> &[usize] {
        &self.levels
    }

    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }

    /// Band index of a gray level: the number of thresholds `<= level`.
    pub fn band(&self, level: usize) -> usize {
        self.levels.partition_point(|&t| t <= level)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ThresholdResult {
    pub thresholds: ThresholdSet,
    pub objective: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Strategy {
    Exhaustive,
    Woa(WoaConfig),
}

/// Entropy of the histogram restricted to gray levels `[lo, hi)`.
fn class_entropy(hist: &Histogram, lo: usize, hi: usize) -> f64 {
    let bins = &hist.bins()[lo..hi];
    let total = hist.total() as f64;
    let mass: f64 = bins.iter().map(|&b| b as f64 / total).sum();
    if mass <= 0.0 {
        return 0.0;
    }
    let mut h = 0.0;
    for &b in bins {
        if b > 0 {
            let q = (b as f64 / total) / mass;
            h -= q * q.ln();
        }
    }
    h
}

pub fn entropy_objective(hist: &Histogram, thresholds: &ThresholdSet) -> Result<f64, SegmentationError> {
    if hist.total() == 0 {
        return Err(SegmentationError::EmptyHistogram);
    }
    let mut acc = 0.0;
    let mut lo = 0;
    for &t in thresholds.levels() {
        acc += class_entropy(hist, lo, t);
        lo = t;
    }
    acc += class_entropy(hist, lo, GRAY_LEVELS);
    Ok(acc)
}

/// Exhaustive search over all strictly increasing threshold tuples.
///
/// Band entropies are tabulated once with the same routine used by
/// [`entropy_objective`] and summed in the same order, so leaf scores are
/// bitwise equal to the objective. An upper bound from dynamic programming
/// prunes subtrees that cannot reach the optimum; the surviving leaves are
/// visited in lexicographic order and only a strictly better score replaces
/// the incumbent.
fn exhaustive(hist: &Histogram, count: usize) -> ThresholdResult {
    const N: usize = GRAY_LEVELS;
    let mut table = vec![0.0; (N + 1) * (N + 1)];
    for lo in 0..N {
        for hi in lo + 1..=N {
            table[lo * (N + 1) + hi] = class_entropy(hist, lo, hi);
        }
    }
    let band = |lo: usize, hi: usize| table[lo * (N + 1) + hi];

    // bound[j][a]: best sum for bands covering [a, 256) with j thresholds left.
    let mut bound = vec![vec![f64::NEG_INFINITY; N]; count + 1];
    for (a, b) in bound[0].iter_mut().enumerate() {
        *b = band(a, N);
    }
    for j in 1..=count {
        let (done, rest) = bound.split_at_mut(j);
        let prev = &done[j - 1];
        for (a, b) in rest[0].iter_mut().enumerate() {
            *b = (a + 1..=N - j)
                .map(|t| band(a, t) + prev[t])
                .fold(f64::NEG_INFINITY, f64::max);
        }
    }
    let target = bound[count][0];
    let slack = 1e-9 * (1.0 + target.abs());

    struct Search<'a, B: Fn(usize, usize) -> f64> {
        band: B,
        bound: &'a [Vec<f64>],
        count: usize,
        floor: f64,
        tuple: Vec<usize>,
        best: Option<(f64, Vec<usize>)>,
    }

    impl<B: Fn(usize, usize) -> f64> Search<'_, B> {
        fn visit(&mut self, depth: usize, lo: usize, partial: f64) {
            if depth == self.count {
                let score = partial + (self.band)(lo, N);
                if self.best.as_ref().is_none_or(|(b, _)| score > *b) {
                    self.best = Some((score, self.tuple.clone()));
                }
                return;
            }
            let remaining = self.count - depth;
            for t in lo + 1..=N - remaining {
                let next = partial + (self.band)(lo, t);
                if next + self.bound[remaining - 1][t] < self.floor {
                    continue;
                }
                self.tuple.push(t);
                self.visit(depth + 1, t, next);
                self.tuple.pop();
            }
        }
    }

    let mut search = Search {
        band,
        bound: &bound,
        count,
        floor: target - slack,
        tuple: Vec::with_capacity(count),
        best: None,
    };
    search.visit(0, 0, 0.0);
    let (objective, levels) = search.best.expect("at least one feasible tuple");
    ThresholdResult {
        thresholds: ThresholdSet { levels },
        objective,
    }
}

/// Rounds a continuous position to a valid threshold set: round half up,
/// clamp to `[1, 255]`, sort, then bump duplicates to the next free level.
pub fn decode_thresholds(position: &[f64]) -> ThresholdSet {
    let max = GRAY_LEVELS - 1;
    let mut levels: Vec<usize> = position
        .iter()
        .map(|&x| ((x + 0.5).floor().max(1.0) as usize).min(max))
        .collect();
    levels.sort_unstable();
    for j in 1..levels.len() {
        if levels[j] <= levels[j - 1] {
            levels[j] = levels[j - 1] + 1;
        }
    }
    if let Some(last) = levels.last_mut() {
        *last = (*last).min(max);
    }
    for j in (0..levels.len().saturating_sub(1)).rev() {
        if levels[j] >= levels[j + 1] {
            levels[j] = levels[j + 1] - 1;
        }
    }
    ThresholdSet { levels }
}

pub fn optimal_thresholds(
    hist: &Histogram,
    count: usize,
    strategy: Strategy,
) -> Result<ThresholdResult, SegmentationError> {
    if !(1..=MAX_THRESHOLDS).contains(&count) {
        return Err(SegmentationError::LevelCount(count));
    }
    if hist.total() == 0 {
        return Err(SegmentationError::EmptyHistogram);
    }
    match strategy {
        Strategy::Exhaustive => Ok(exhaustive(hist, count)),
        Strategy::Woa(config) => {
            let space = SearchSpace::uniform(count, 1.0, (GRAY_LEVELS - 1) as f64)?;
            let result = woa::optimize(&space, &config, |pos| {
                let set = decode_thresholds(pos);
                -entropy_objective(hist, &set).expect("non-empty histogram")
            })?;
            let thresholds = decode_thresholds(&result.best_position);
            let objective = entropy_objective(hist, &thresholds)?;
            Ok(ThresholdResult { thresholds, objective })
        }
    }
}

pub fn segment(image: &Image, thresholds: &ThresholdSet) -> Result<LabelMap, SegmentationError> {
    if image.channels() != 1 {
        return Err(ImageError::NotGrayscale(image.channels()).into());
    }
    let labels = image
        .pixels()
        .iter()
        .map(|&v| thresholds.band(quantize_level(v)) as u8)
        .collect();
    Ok(LabelMap {
        width: image.width(),
        height: image.height(),
        levels: thresholds.len(),
        labels,
    })
}
