use std::cell::RefCell;

use thiserror::Error;

use super::dataset::{split, Dataset, DatasetError, SplitSpec};
use crate::micronet::train::evaluate_loss;
use crate::micronet::{train, Example, NetError, NetworkSpec, PoolKind, TrainConfig};
use crate::woa::{self, decode, Dimension, OptResult, SearchSpace, WoaConfig, WoaError};

/// Fitness assigned to a structure that cannot be built or trained.
pub const INFEASIBLE_FITNESS: f64 = 1e6;

#[derive(Debug, Error)]
pub enum TuneError {
    #[error("candidate list for {0} is empty")]
    EmptyCandidates(&'static str),
    #[error("validation fraction must lie strictly between 0 and 1, got {0}")]
    Fraction(f64),
    #[error("inner split: {0}")]
    Split(#[from] DatasetError),
    #[error(transparent)]
    Woa(#[from] WoaError),
    #[error("fitness training: {0}")]
    Net(#[from] NetError),
}

/// Candidate values for the searched structure.
#[derive(Debug, Clone, PartialEq)]
pub struct HyperSpace {
    pub kernel_sizes: Vec<usize>,
    pub feature_maps: Vec<usize>,
    pub pooling: Vec<PoolKind>,
}

impl Default for HyperSpace {
    fn default() -> Self {
        Self {
            kernel_sizes: vec![3, 5, 7],
            feature_maps: vec![4, 8, 16, 32],
            pooling: vec![PoolKind::Max, PoolKind::Average],
        }
    }
}

fn pool_name(p: PoolKind) -> &'static str {
    match p {
        PoolKind::Max => "max",
        PoolKind::Average => "average",
    }
}

impl HyperSpace {
    fn labels(&self) -> [Vec<String>; 3] {
        [
            self.kernel_sizes.iter().map(|k| k.to_string()).collect(),
            self.feature_maps.iter().map(|f| f.to_string()).collect(),
            self.pooling.iter().map(|&p| pool_name(p).to_string()).collect(),
        ]
    }

    /// Categorical search space over the lists with two or more values;
    /// single-valued lists are fixed rather than searched.
    pub fn search_space(&self) -> Result<SearchSpace, TuneError> {
        for (name, len) in [
            ("kernel_sizes", self.kernel_sizes.len()),
            ("feature_maps", self.feature_maps.len()),
            ("pooling", self.pooling.len()),
        ] {
            if len == 0 {
                return Err(TuneError::EmptyCandidates(name));
            }
        }
        let dims = self
            .labels()
            .into_iter()
            .filter(|l| l.len() >= 2)
            .map(|labels| Dimension::Categorical { labels })
            .collect();
        Ok(SearchSpace::new(dims)?)
    }

    /// Applies a position in [`HyperSpace::search_space`] to `base`.
    pub fn decode(&self, position: &[f64], base: NetworkSpec) -> Result<NetworkSpec, TuneError> {
        let decoded = decode(position, &self.search_space()?)?;
        let mut it = decoded.into_iter().map(|d| d.choice().expect("categorical"));
        let mut pick = |len: usize| {
            if len >= 2 {
                it.next().expect("one coordinate per searched list")
            } else {
                0
            }
        };
        let k = pick(self.kernel_sizes.len());
        let f = pick(self.feature_maps.len());
        let p = pick(self.pooling.len());
        Ok(NetworkSpec {
            kernel_size: self.kernel_sizes[k],
            feature_maps: self.feature_maps[f],
            pooling: self.pooling[p],
            ..base
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TuneBudget {
    pub woa: WoaConfig,
    /// Short training run behind every fitness evaluation. Its seed is
    /// mixed with the candidate structure.
    pub fitness_train: TrainConfig,
    /// Share of the training split held out to score candidates.
    pub validation_fraction: f64,
    /// Seed of the inner train/validation split.
    pub split_seed: u64,
}

impl Default for TuneBudget {
    fn default() -> Self {
        Self {
            woa: WoaConfig::default(),
            fitness_train: TrainConfig {
                epochs: 5,
                ..TrainConfig::default()
            },
            validation_fraction: 0.2,
            split_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TuneOutcome {
    pub spec: NetworkSpec,
    pub result: OptResult,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Training seed for one candidate: `base` mixed with the structure, so a
/// candidate always gets the same initialization.
pub fn fitness_seed(base: u64, spec: &NetworkSpec) -> u64 {
    let pool = match spec.pooling {
        PoolKind::Max => 0,
        PoolKind::Average => 1,
    };
    [spec.kernel_size as u64, spec.feature_maps as u64, pool]
        .into_iter()
        .fold(splitmix64(base), |h, v| splitmix64(h ^ v))
}

/// Validation loss after the fixed fitness budget, or
/// [`INFEASIBLE_FITNESS`] when the structure does not fit the input or
/// training diverges.
pub fn candidate_fitness(
    spec: NetworkSpec,
    inner_train: &[Example],
    inner_val: &[Example],
    config: &TrainConfig,
) -> Result<f64, NetError> {
    if spec.validate().is_err() {
        return Ok(INFEASIBLE_FITNESS);
    }
    let config = TrainConfig {
        seed: fitness_seed(config.seed, &spec),
        ..*config
    };
    match train(spec, inner_train, &[], &config) {
        Ok((network, _)) => {
            let (loss, _) = evaluate_loss(&network, inner_val)?;
            Ok(if loss.is_finite() { loss } else { INFEASIBLE_FITNESS })
        }
        Err(NetError::NonFinite) => Ok(INFEASIBLE_FITNESS),
        Err(e) => Err(e),
    }
}

/// Searches kernel size, feature-map count and pooling type with the whale
/// optimizer, scoring each position by validation loss on a stratified
/// inner split of `train_set`.
pub fn woa_tune(
    train_set: &Dataset,
    base: NetworkSpec,
    space: &HyperSpace,
    budget: &TuneBudget,
) -> Result<TuneOutcome, TuneError> {
    let f = budget.validation_fraction;
    if !(f > 0.0 && f < 1.0) {
        return Err(TuneError::Fraction(f));
    }
    let search = space.search_space()?;
    let (inner_train, inner_val) = split(
        train_set,
        &SplitSpec {
            train_fraction: 1.0 - f,
            seed: budget.split_seed,
            stratified: true,
        },
    )?;
    let inner_train = inner_train.to_examples();
    let inner_val = inner_val.to_examples();

    let failure: RefCell<Option<TuneError>> = RefCell::new(None);
    let result = woa::optimize(&search, &budget.woa, |position| {
        if failure.borrow().is_some() {
            return INFEASIBLE_FITNESS;
        }
        let outcome = space.decode(position, base).and_then(|spec| {
            Ok(candidate_fitness(
                spec,
                &inner_train,
                &inner_val,
                &budget.fitness_train,
            )?)
        });
        outcome.unwrap_or_else(|e| {
            *failure.borrow_mut() = Some(e);
            INFEASIBLE_FITNESS
        })
    });
    if let Some(e) = failure.into_inner() {
        return Err(e);
    }
    let result = result?;
    let spec = space.decode(&result.best_position, base)?;
    Ok(TuneOutcome { spec, result })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::micronet::Padding;
    use crate::pipeline::dataset::{gen_synthetic, SyntheticSpec};

    #[test]
    fn decode_maps_positions_to_candidates() {
        let space = HyperSpace::default();
        assert_eq!(space.search_space().unwrap().len(), 3);
        let base = NetworkSpec::new((1, 16, 16), 2);
        let spec = space.decode(&[1.4, 3.0, 0.0], base).unwrap();
        assert_eq!(
            (spec.kernel_size, spec.feature_maps, spec.pooling),
            (5, 32, PoolKind::Max)
        );
        let spec = space.decode(&[2.0, 0.5, 0.5], base).unwrap();
        assert_eq!(
            (spec.kernel_size, spec.feature_maps, spec.pooling),
            (7, 8, PoolKind::Average)
        );
    }

    #[test]
    fn fixed_lists_are_not_searched() {
        let space = HyperSpace {
            kernel_sizes: vec![5],
            feature_maps: vec![4, 8],
            pooling: vec![PoolKind::Average],
        };
        assert_eq!(space.search_space().unwrap().len(), 1);
        let spec = space.decode(&[1.0], NetworkSpec::new((1, 16, 16), 2)).unwrap();
        assert_eq!(
            (spec.kernel_size, spec.feature_maps, spec.pooling),
            (5, 8, PoolKind::Average)
        );
        assert!(HyperSpace {
            pooling: vec![],
            ..HyperSpace::default()
        }
        .search_space()
        .is_err());
    }

    #[test]
    fn seeds_depend_on_structure_only() {
        let a = NetworkSpec::new((1, 16, 16), 2);
        let b = NetworkSpec { kernel_size: 5, ..a };
        assert_eq!(fitness_seed(1, &a), fitness_seed(1, &a));
        assert_ne!(fitness_seed(1, &a), fitness_seed(1, &b));
        assert_ne!(fitness_seed(1, &a), fitness_seed(2, &a));
    }

    #[test]
    fn infeasible_structures_get_the_penalty() {
        let spec = NetworkSpec {
            kernel_size: 7,
            padding: Padding::Valid,
            ..NetworkSpec::new((1, 8, 8), 2)
        };
        let fitness = candidate_fitness(spec, &[], &[], &TrainConfig::default()).unwrap();
        assert_eq!(fitness, INFEASIBLE_FITNESS);
    }

    #[test]
    fn small_search_counts_evaluations() {
        let data = gen_synthetic(&SyntheticSpec {
            n_per_class: 10,
            size: 8,
            ..SyntheticSpec::default()
        })
        .unwrap();
        let base = NetworkSpec {
            dense_units: 0,
            padding: Padding::Same,
            ..NetworkSpec::new((1, 8, 8), 2)
        };
        let space = HyperSpace {
            kernel_sizes: vec![3, 5],
            feature_maps: vec![2, 4],
            pooling: vec![PoolKind::Max, PoolKind::Average],
        };
        let budget = TuneBudget {
            woa: WoaConfig {
                population_size: 4,
                max_iterations: 2,
                ..WoaConfig::default()
            },
            fitness_train: TrainConfig {
                epochs: 1,
                batch_size: 4,
                ..TrainConfig::default()
            },
            ..TuneBudget::default()
        };
        let out = woa_tune(&data, base, &space, &budget).unwrap();
        assert_eq!(out.result.evaluations, 12);
        assert!(out.result.best_fitness.is_finite());
        assert!(out
            .result
            .trace
            .iter()
            .all(|t| out.result.best_fitness <= t.best_fitness));
        assert_eq!(out.spec, space.decode(&out.result.best_position, base).unwrap());
    }
}
