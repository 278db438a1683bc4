//! Whale Optimization Algorithm over a bounded mixed search space.
//!
//! Each iteration moves every whale by one of three rules, chosen per whale
//! by a branch draw `i ~ U(0,1)` and per dimension by the coefficient `H`:
//!
//! * `i >= 0.5`: spiral around the best whale,
//!   `x <- |x* - x| * e^(p h) * cos(2 pi h) + x*`
//! * `i < 0.5`, `|H| < 1`: shrink towards the best whale,
//!   `E = |F x* - x|`, `x <- x* - H E`
//! * `i < 0.5`, `|H| >= 1`: move relative to a random peer,
//!   `E = |F x_r - x|`, `x <- x_r - H E`
//!
//! with `F = 2 s`, `H = 2 k s - k`, `s ~ U(0,1)` per dimension and
//! `k = 2 (1 - ju / ju_max)` falling from 2 towards 0. Positions are clamped
//! to the box after every move.
//!
//! # Random stream
//!
//! The generator is `ChaCha8Rng::seed_from_u64(seed)`. Every uniform draw is
//! one `f64` in `[0, 1)` built from the top 53 bits of `next_u64`. The stream
//! is consumed in this fixed order:
//!
//! 1. population init: whale-major, dimension-minor, `lo + u (hi - lo)`;
//! 2. per iteration, per whale in index order: branch `i = u`, spiral
//!    `h = 2u - 1`, peer index `floor(u n)`, then one `s = u` per dimension.
//!
//! All draws happen whether or not the chosen branch uses them.

use std::f64::consts::PI;
use std::io::{self, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum WoaError {
    #[error("population size must be at least 2, got {0}")]
    Population(usize),
    #[error("max_iterations must be at least 1")]
    Iterations,
    #[error("spiral constant must be finite, got {0}")]
    Spiral(f64),
    #[error("continuous dimension {index} needs lo < hi, got [{lo}, {hi}]")]
    DegenerateRange { index: usize, lo: f64, hi: f64 },
    #[error("categorical dimension {index} needs at least 2 values, got {count}")]
    TooFewChoices { index: usize, count: usize },
    #[error("empty population")]
    EmptyPopulation,
    #[error("objective returned {value} at position {position:?}")]
    NonFinite { position: Vec<f64>, value: f64 },
    #[error("position has {got} coordinates, space has {expected} dimensions")]
    Dimension { expected: usize, got: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub enum Dimension {
    Continuous {
        lo: f64,
        hi: f64,
    },
    /// Ordered choices, searched as the continuous index range `[0, n-1]`.
    Categorical {
        labels: Vec<String>,
    },
}

impl Dimension {
    pub fn bounds(&self) -> (f64, f64) {
        match self {
            Dimension::Continuous { lo, hi } => (*lo, *hi),
            Dimension::Categorical { labels } => (0.0, (labels.len() - 1) as f64),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SearchSpace {
    dims: Vec<Dimension>,
}

impl SearchSpace {
    pub fn new(dims: Vec<Dimension>) -> Result<Self, WoaError> {
        for (index, dim) in dims.iter().enumerate() {
            match dim {
                Dimension::Continuous { lo, hi } => {
                    if lo >= hi || !lo.is_finite() || !hi.is_finite() {
                        return Err(WoaError::DegenerateRange {
                            index,
                            lo: *lo,
                            hi: *hi,
                        });
                    }
                }
                Dimension::Categorical { labels } => {
                    if labels.len() < 2 {
                        return Err(WoaError::TooFewChoices {
                            index,
                            count: labels.len(),
                        });
                    }
                }
            }
        }
        Ok(Self { dims })
    }

    /// `n`-dimensional box `[lo, hi]^n`.
    pub fn uniform(n: usize, lo: f64, hi: f64) -> Result<Self, WoaError> {
        Self::new(vec![Dimension::Continuous { lo, hi }; n])
    }

    pub fn dims(&self) -> &[Dimension] {
        &self.dims
    }

    pub fn len(&self) -> usize {
        self.dims.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dims.is_empty()
    }

    pub fn clamp(&self, position: &mut [f64]) {
        for (x, dim) in position.iter_mut().zip(&self.dims) {
            let (lo, hi) = dim.bounds();
            *x = x.clamp(lo, hi);
        }
    }

    pub fn contains(&self, position: &[f64]) -> bool {
        position.len() == self.dims.len()
            && position.iter().zip(&self.dims).all(|(x, d)| {
                let (lo, hi) = d.bounds();
                *x >= lo && *x <= hi
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Decoded {
    Real(f64),
    /// Index into the dimension's ordered choices.
    Choice(usize),
}

impl Decoded {
    pub fn choice(self) -> Option<usize> {
        match self {
            Decoded::Choice(i) => Some(i),
            Decoded::Real(_) => None,
        }
    }

    pub fn real(self) -> Option<f64> {
        match self {
            Decoded::Real(v) => Some(v),
            Decoded::Choice(_) => None,
        }
    }
}

/// Round half up, clamped to `[0, n-1]`.
pub fn choice_index(coordinate: f64, count: usize) -> usize {
    let idx = (coordinate + 0.5).floor();
    if idx <= 0.0 {
        0
    } else {
        (idx as usize).min(count - 1)
    }
}

pub fn decode(position: &[f64], space: &SearchSpace) -> Result<Vec<Decoded>, WoaError> {
    if position.len() != space.len() {
        return Err(WoaError::Dimension {
            expected: space.len(),
            got: position.len(),
        });
    }
    Ok(position
        .iter()
        .zip(space.dims())
        .map(|(&x, dim)| match dim {
            Dimension::Continuous { .. } => Decoded::Real(x),
            Dimension::Categorical { labels } => Decoded::Choice(choice_index(x, labels.len())),
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WoaConfig {
    pub population_size: usize,
    pub max_iterations: usize,
    /// Logarithmic spiral shape constant `p`.
    pub spiral_constant: f64,
    pub seed: u64,
}

impl Default for WoaConfig {
    fn default() -> Self {
        Self {
            population_size: 30,
            max_iterations: 100,
            spiral_constant: 1.0,
            seed: 0,
        }
    }
}

impl WoaConfig {
    pub fn validate(&self) -> Result<(), WoaError> {
        if self.population_size < 2 {
            return Err(WoaError::Population(self.population_size));
        }
        if self.max_iterations < 1 {
            return Err(WoaError::Iterations);
        }
        if !self.spiral_constant.is_finite() {
            return Err(WoaError::Spiral(self.spiral_constant));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Whale {
    pub position: Vec<f64>,
    pub fitness: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TracePoint {
    pub iteration: usize,
    pub best_fitness: f64,
    pub mean_fitness: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptResult {
    pub best_position: Vec<f64>,
    pub best_fitness: f64,
    /// Iteration 0 is the initial population.
    pub trace: Vec<TracePoint>,
    pub evaluations: usize,
    pub final_population: Vec<Whale>,
}

impl OptResult {
    /// Writes `iteration,best_fitness,mean_fitness` rows.
    pub fn write_trace_csv<W: Write>(&self, mut out: W) -> io::Result<()> {
        writeln!(out, "iteration,best_fitness,mean_fitness")?;
        for p in &self.trace {
            writeln!(out, "{},{},{}", p.iteration, p.best_fitness, p.mean_fitness)?;
        }
        Ok(())
    }
}

/// Black-box minimizer over a [`SearchSpace`].
pub trait Optimizer {
    fn minimize<F>(&self, space: &SearchSpace, objective: F) -> Result<OptResult, WoaError>
    where
        F: FnMut(&[f64]) -> f64;
}

#[inline]
fn uniform(rng: &mut impl Rng) -> f64 {
    rng.random::<f64>()
}

fn init_with(space: &SearchSpace, n: usize, rng: &mut impl Rng) -> Vec<Whale> {
    (0..n)
        .map(|_| Whale {
            position: space
                .dims()
                .iter()
                .map(|d| {
                    let (lo, hi) = d.bounds();
                    lo + uniform(rng) * (hi - lo)
                })
                .collect(),
            fitness: None,
        })
        .collect()
}

pub fn init_population(space: &SearchSpace, config: &WoaConfig) -> Result<Vec<Whale>, WoaError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    Ok(init_with(space, config.population_size, &mut rng))
}

/// Random numbers consumed by one whale in one iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct WhaleDraws {
    pub branch: f64,
    pub spiral: f64,
    pub peer: usize,
    pub coefficients: Vec<f64>,
}

impl WhaleDraws {
    pub fn draw(rng: &mut impl Rng, population: usize, dims: usize) -> Self {
        let branch = uniform(rng);
        let spiral = 2.0 * uniform(rng) - 1.0;
        let peer = ((uniform(rng) * population as f64) as usize).min(population - 1);
        let coefficients = (0..dims).map(|_| uniform(rng)).collect();
        Self {
            branch,
            spiral,
            peer,
            coefficients,
        }
    }
}

/// `k = 2 (1 - ju / ju_max)`.
pub fn convergence_factor(iteration: usize, max_iterations: usize) -> f64 {
    2.0 * (1.0 - iteration as f64 / max_iterations as f64)
}

/// Moves a single whale. The result is clamped to `space`.
pub fn update_whale(
    position: &[f64],
    best: &[f64],
    peer: &[f64],
    draws: &WhaleDraws,
    k: f64,
    spiral_constant: f64,
    space: &SearchSpace,
) -> Vec<f64> {
    let mut next: Vec<f64> = position
        .iter()
        .enumerate()
        .map(|(d, &x)| {
            let s = draws.coefficients[d];
            let f = 2.0 * s;
            let h = 2.0 * k * s - k;
            if draws.branch >= 0.5 {
                let l = draws.spiral;
                (best[d] - x).abs() * (spiral_constant * l).exp() * (2.0 * PI * l).cos() + best[d]
            } else if h.abs() < 1.0 {
                best[d] - h * (f * best[d] - x).abs()
            } else {
                peer[d] - h * (f * peer[d] - x).abs()
            }
        })
        .collect();
    space.clamp(&mut next);
    next
}

/// Applies one WOA iteration to every whale, drawing randomness in the
/// documented stream order. Peers are taken from the population as it was
/// at the start of the iteration. Fitness values are reset.
pub fn woa_step(
    whales: &mut [Whale],
    best: &[f64],
    iteration: usize,
    config: &WoaConfig,
    space: &SearchSpace,
    rng: &mut impl Rng,
) -> Result<(), WoaError> {
    if whales.is_empty() {
        return Err(WoaError::EmptyPopulation);
    }
    let k = convergence_factor(iteration, config.max_iterations);
    let snapshot: Vec<Vec<f64>> = whales.iter().map(|w| w.position.clone()).collect();
    for (idx, whale) in whales.iter_mut().enumerate() {
        let draws = WhaleDraws::draw(rng, snapshot.len(), space.len());
        whale.position = update_whale(
            &snapshot[idx],
            best,
            &snapshot[draws.peer],
            &draws,
            k,
            config.spiral_constant,
            space,
        );
        whale.fitness = None;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Woa {
    pub config: WoaConfig,
}

impl Woa {
    pub fn new(config: WoaConfig) -> Self {
        Self { config }
    }
}

fn evaluate<F: FnMut(&[f64]) -> f64>(whales: &mut [Whale], objective: &mut F) -> Result<(), WoaError> {
    for whale in whales.iter_mut() {
        let value = objective(&whale.position);
        if !value.is_finite() {
            return Err(WoaError::NonFinite {
                position: whale.position.clone(),
                value,
            });
        }
        whale.fitness = Some(value);
    }
    Ok(())
}

fn summarize(whales: &[Whale]) -> (usize, f64) {
    let mut best = 0;
    let mut sum = 0.0;
    for (i, w) in whales.iter().enumerate() {
        let f = w.fitness.expect("evaluated");
        sum += f;
        if f < whales[best].fitness.expect("evaluated") {
            best = i;
        }
    }
    (best, sum / whales.len() as f64)
}

impl Optimizer for Woa {
    fn minimize<F>(&self, space: &SearchSpace, mut objective: F) -> Result<OptResult, WoaError>
    where
        F: FnMut(&[f64]) -> f64,
    {
        let config = &self.config;
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut whales = init_with(space, config.population_size, &mut rng);

        evaluate(&mut whales, &mut objective)?;
        let (idx, mean) = summarize(&whales);
        let mut best_position = whales[idx].position.clone();
        let mut best_fitness = whales[idx].fitness.expect("evaluated");
        let mut trace = vec![TracePoint {
            iteration: 0,
            best_fitness,
            mean_fitness: mean,
        }];

        for iteration in 1..=config.max_iterations {
            woa_step(&mut whales, &best_position, iteration, config, space, &mut rng)?;
            evaluate(&mut whales, &mut objective)?;
            let (idx, mean) = summarize(&whales);
            let candidate = whales[idx].fitness.expect("evaluated");
            if candidate < best_fitness {
                best_fitness = candidate;
                best_position = whales[idx].position.clone();
            }
            trace.push(TracePoint {
                iteration,
                best_fitness,
                mean_fitness: mean,
            });
        }

        Ok(OptResult {
            best_position,
            best_fitness,
            trace,
            evaluations: config.population_size * (config.max_iterations + 1),
            final_population: whales,
        })
    }
}

/// Runs WOA with `config` on `objective`.
pub fn optimize<F>(space: &SearchSpace, config: &WoaConfig, objective: F) -> Result<OptResult, WoaError>
where
    F: FnMut(&[f64]) -> f64,
{
    Woa::new(*config).minimize(space, objective)
}
