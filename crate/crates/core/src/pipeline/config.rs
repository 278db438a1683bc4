//! `key = value` run configuration.
//!
//! One setting per line; `#` starts a comment; blank lines are ignored.
//! Keys are dotted (`train.epochs`). Unknown keys and repeated keys are
//! errors. Relative paths are resolved against the directory holding the
//! config file.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use thiserror::Error;

use super::dataset::{PreprocessParams, SplitSpec, SyntheticKind, SyntheticSpec};
use super::tune::{HyperSpace, TuneBudget};
use crate::imagecore::{load_image, to_grayscale, ImageError};
use crate::micronet::{Padding, PoolKind, TrainConfig};
use crate::preprocess::{GaussianConfig, PreprocessError};
use crate::segmentation::Strategy;
use crate::woa::WoaConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: expected `key = value`, got {text:?}")]
    Syntax { line: usize, text: String },
    #[error("line {line}: key {key:?} repeated")]
    Duplicate { line: usize, key: String },
    #[error("unknown key {0:?}")]
    UnknownKey(String),
    #[error("invalid value {value:?} for {key}: {reason}")]
    Value { key: String, value: String, reason: String },
    #[error("background image: {0}")]
    Background(#[from] ImageError),
    #[error(transparent)]
    Preprocess(#[from] PreprocessError),
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Folder(PathBuf),
    Synthetic(SyntheticSpec),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SegmentStrategy {
    Exhaustive,
    Woa,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegmentationParams {
    /// Threshold count; 0 skips segmentation.
    pub levels: usize,
    pub strategy: SegmentStrategy,
    /// WOA settings when `strategy` is `Woa`.
    pub woa: WoaConfig,
    /// Zero out band-0 pixels of the network input.
    pub mask_input: bool,
    /// Write every label map under `segments/`.
    pub dump: bool,
}

impl SegmentationParams {
    pub fn strategy(&self) -> Strategy {
        match self.strategy {
            SegmentStrategy::Exhaustive => Strategy::Exhaustive,
            SegmentStrategy::Woa => Strategy::Woa(self.woa),
        }
    }
}

impl Default for SegmentationParams {
    fn default() -> Self {
        Self {
            levels: 2,
            strategy: SegmentStrategy::Exhaustive,
            woa: WoaConfig {
                population_size: 20,
                max_iterations: 50,
                ..WoaConfig::default()
            },
            mask_input: false,
            dump: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub output_dir: PathBuf,
    pub source: DataSource,
    /// `(height, width)`.
    pub resize_to: (usize, usize),
    pub split: SplitSpec,
    pub preprocess: PreprocessParams,
    pub background_path: Option<PathBuf>,
    pub segmentation: SegmentationParams,
    pub search: HyperSpace,
    pub tune: TuneBudget,
    pub conv_blocks: usize,
    pub dense_units: usize,
    pub padding: Padding,
    pub train: TrainConfig,
    /// When false, `metrics.csv` reports a time of 0 so that repeated runs
    /// are byte-identical.
    pub record_wall_time: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            output_dir: PathBuf::from("out"),
            source: DataSource::Synthetic(SyntheticSpec::default()),
            resize_to: (16, 16),
            split: SplitSpec::default(),
            preprocess: PreprocessParams::default(),
            background_path: None,
            segmentation: SegmentationParams::default(),
            search: HyperSpace::default(),
            tune: TuneBudget {
                woa: WoaConfig {
                    population_size: 6,
                    max_iterations: 5,
                    ..WoaConfig::default()
                },
                fitness_train: TrainConfig {
                    epochs: 5,
                    ..TrainConfig::default()
                },
                ..TuneBudget::default()
            },
            conv_blocks: 2,
            dense_units: 32,
            padding: Padding::Same,
            train: TrainConfig {
                epochs: 30,
                ..TrainConfig::default()
            },
            record_wall_time: true,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: std::fmt::Display,
{
    value.parse().map_err(|e: T::Err| ConfigError::Value {
        key: key.into(),
        value: value.into(),
        reason: e.to_string(),
    })
}

fn bad(key: &str, value: &str, reason: &str) -> ConfigError {
    ConfigError::Value {
        key: key.into(),
        value: value.into(),
        reason: reason.into(),
    }
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>, ConfigError>
where
    T::Err: std::fmt::Display,
{
    value.split(',').map(|v| parse(key, v.trim())).collect()
}

pub fn parse_pooling(value: &str) -> Option<PoolKind> {
    match value {
        "max" => Some(PoolKind::Max),
        "average" | "avg" => Some(PoolKind::Average),
        _ => None,
    }
}

fn parse_size(key: &str, value: &str) -> Result<(usize, usize), ConfigError> {
    let (w, h) = value
        .split_once('x')
        .ok_or_else(|| bad(key, value, "expected WIDTHxHEIGHT"))?;
    Ok((parse(key, h.trim())?, parse(key, w.trim())?))
}

/// Splits text into `key -> (value, line)` pairs.
pub fn parse_pairs(text: &str) -> Result<BTreeMap<String, (String, usize)>, ConfigError> {
    let mut pairs = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
            line: i + 1,
            text: raw.to_string(),
        })?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(ConfigError::Syntax {
                line: i + 1,
                text: raw.to_string(),
            });
        }
        if pairs.insert(k.to_string(), (v.to_string(), i + 1)).is_some() {
            return Err(ConfigError::Duplicate {
                line: i + 1,
                key: k.to_string(),
            });
        }
    }
    Ok(pairs)
}

impl RunConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        let base = path.parent().unwrap_or(Path::new(""));
        Self::parse(&text, base)
    }

    /// Parses config text; relative paths are joined onto `base_dir`.
    pub fn parse(text: &str, base_dir: &Path) -> Result<Self, ConfigError> {
        let pairs = parse_pairs(text)?;
        let mut c = RunConfig::default();
        let get = |k: &str| pairs.get(k).map(|(v, _)| v.as_str());
        let resolve = |v: &str| {
            let p = PathBuf::from(v);
            if p.is_absolute() {
                p
            } else {
                base_dir.join(p)
            }
        };

        // A master seed feeds every stage unless overridden.
        if let Some(v) = get("seed") {
            let s: u64 = parse("seed", v)?;
            c.split.seed = s;
            c.tune.woa.seed = s;
            c.tune.split_seed = s;
            c.tune.fitness_train.seed = s;
            c.train.seed = s;
            c.segmentation.woa.seed = s;
            if let DataSource::Synthetic(ref mut spec) = c.source {
                spec.seed = s;
            }
        }
        let mut synth = match c.source {
            DataSource::Synthetic(s) => s,
            DataSource::Folder(_) => SyntheticSpec::default(),
        };
        let mut sigma = 0.8;
        let mut radius = None;
        let mut source = "synthetic".to_string();
        let mut folder = None;
        let mut size_set = false;

        for (key, (value, _)) in &pairs {
            let (k, v) = (key.as_str(), value.as_str());
            match k {
                "seed" => {}
                "output_dir" => c.output_dir = resolve(v),
                "dataset.source" => source = v.to_string(),
                "dataset.path" => folder = Some(resolve(v)),
                "dataset.resize" => {
                    c.resize_to = parse_size(k, v)?;
                    size_set = true;
                }
                "synthetic.kind" => {
                    synth.kind = match v {
                        "shapes" => SyntheticKind::Shapes,
                        "blobs" => SyntheticKind::Blobs,
                        _ => return Err(bad(k, v, "expected shapes or blobs")),
                    }
                }
                "synthetic.per_class" => synth.n_per_class = parse(k, v)?,
                "synthetic.size" => synth.size = parse(k, v)?,
                "synthetic.noise" => synth.noise_sigma = parse(k, v)?,
                "synthetic.seed" => synth.seed = parse(k, v)?,
                "split.train_fraction" => c.split.train_fraction = parse(k, v)?,
                "split.stratified" => c.split.stratified = parse(k, v)?,
                "split.seed" => c.split.seed = parse(k, v)?,
                "preprocess.sigma" => sigma = parse(k, v)?,
                "preprocess.radius" => radius = Some(parse(k, v)?),
                "preprocess.background" => c.background_path = Some(resolve(v)),
                "preprocess.cn_epsilon" => c.preprocess.cn_epsilon = parse(k, v)?,
                "segmentation.levels" => c.segmentation.levels = parse(k, v)?,
                "segmentation.strategy" => {
                    c.segmentation.strategy = match v {
                        "exhaustive" => SegmentStrategy::Exhaustive,
                        "woa" => SegmentStrategy::Woa,
                        _ => return Err(bad(k, v, "expected exhaustive or woa")),
                    }
                }
                "segmentation.mask_input" => c.segmentation.mask_input = parse(k, v)?,
                "segmentation.dump" => c.segmentation.dump = parse(k, v)?,
                "segmentation.woa.population" => c.segmentation.woa.population_size = parse(k, v)?,
                "segmentation.woa.iterations" => c.segmentation.woa.max_iterations = parse(k, v)?,
                "segmentation.woa.seed" => c.segmentation.woa.seed = parse(k, v)?,
                "woa.population" => c.tune.woa.population_size = parse(k, v)?,
                "woa.iterations" => c.tune.woa.max_iterations = parse(k, v)?,
                "woa.spiral" => c.tune.woa.spiral_constant = parse(k, v)?,
                "woa.seed" => c.tune.woa.seed = parse(k, v)?,
                "search.kernel_sizes" => c.search.kernel_sizes = parse_list(k, v)?,
                "search.feature_maps" => c.search.feature_maps = parse_list(k, v)?,
                "search.pooling" => {
                    c.search.pooling = v
                        .split(',')
                        .map(|p| parse_pooling(p.trim()).ok_or_else(|| bad(k, v, "expected max or average")))
                        .collect::<Result<_, _>>()?
                }
                "network.conv_blocks" => c.conv_blocks = parse(k, v)?,
                "network.dense_units" => c.dense_units = parse(k, v)?,
                "network.padding" => {
                    c.padding = match v {
                        "valid" => Padding::Valid,
                        "same" => Padding::Same,
                        _ => return Err(bad(k, v, "expected valid or same")),
                    }
                }
                "fitness.epochs" => c.tune.fitness_train.epochs = parse(k, v)?,
                "fitness.learning_rate" => c.tune.fitness_train.learning_rate = parse(k, v)?,
                "fitness.batch_size" => c.tune.fitness_train.batch_size = parse(k, v)?,
                "fitness.seed" => c.tune.fitness_train.seed = parse(k, v)?,
                "fitness.validation_fraction" => c.tune.validation_fraction = parse(k, v)?,
                "fitness.split_seed" => c.tune.split_seed = parse(k, v)?,
                "train.epochs" => c.train.epochs = parse(k, v)?,
                "train.learning_rate" => c.train.learning_rate = parse(k, v)?,
                "train.batch_size" => c.train.batch_size = parse(k, v)?,
                "train.seed" => c.train.seed = parse(k, v)?,
                "train.weight_init_scale" => {
                    c.train.weight_init_scale = parse(k, v)?;
                    c.tune.fitness_train.weight_init_scale = c.train.weight_init_scale;
                }
                "output.record_wall_time" => c.record_wall_time = parse(k, v)?,
                _ => return Err(ConfigError::UnknownKey(key.clone())),
            }
        }

        c.source = match source.as_str() {
            "synthetic" => {
                if !size_set {
                    c.resize_to = (synth.size, synth.size);
                }
                DataSource::Synthetic(synth)
            }
            "folder" => DataSource::Folder(
                folder.ok_or_else(|| ConfigError::Invalid("dataset.source = folder needs dataset.path".into()))?,
            ),
            other => return Err(bad("dataset.source", other, "expected synthetic or folder")),
        };
        c.preprocess.gaussian = match radius {
            Some(r) => GaussianConfig::new(sigma, r)?,
            None => GaussianConfig::with_sigma(sigma)?,
        };
        if let Some(bg) = &c.background_path {
            let (h, w) = c.resize_to;
            c.preprocess.background = Some(to_grayscale(&load_image(bg)?).resize_nearest(w, h)?);
        }
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |m: String| Err(ConfigError::Invalid(m));
        if let DataSource::Synthetic(s) = &self.source {
            if (s.size, s.size) != self.resize_to {
                return invalid(format!(
                    "synthetic size {} differs from dataset.resize {}x{}",
                    s.size, self.resize_to.1, self.resize_to.0
                ));
            }
        }
        if self.resize_to.0 == 0 || self.resize_to.1 == 0 {
            return invalid("dataset.resize must be positive".into());
        }
        if !(self.split.train_fraction > 0.0 && self.split.train_fraction < 1.0) {
            return invalid(format!(
                "split.train_fraction must be in (0,1), got {}",
                self.split.train_fraction
            ));
        }
        if self.preprocess.cn_epsilon.is_nan() || self.preprocess.cn_epsilon <= 0.0 {
            return invalid("preprocess.cn_epsilon must be positive".into());
        }
        if self.segmentation.levels > crate::segmentation::MAX_THRESHOLDS {
            return invalid(format!(
                "segmentation.levels must be at most {}",
                crate::segmentation::MAX_THRESHOLDS
            ));
        }
        if self.segmentation.mask_input && self.segmentation.levels == 0 {
            return invalid("segmentation.mask_input needs segmentation.levels >= 1".into());
        }
        if self.conv_blocks == 0 {
            return invalid("network.conv_blocks must be at least 1".into());
        }
        self.tune
            .woa
            .validate()
            .map_err(|e| ConfigError::Invalid(format!("woa: {e}")))?;
        if self.segmentation.strategy == SegmentStrategy::Woa {
            self.segmentation
                .woa
                .validate()
                .map_err(|e| ConfigError::Invalid(format!("segmentation.woa: {e}")))?;
        }
        self.search
            .search_space()
            .map_err(|e| ConfigError::Invalid(format!("search: {e}")))?;
        if self.search.kernel_sizes.iter().any(|&k| k < 3 || k % 2 == 0) {
            return invalid("search.kernel_sizes must be odd and at least 3".into());
        }
        if self.search.feature_maps.contains(&0) {
            return invalid("search.feature_maps must be positive".into());
        }
        for (name, t) in [("train", &self.train), ("fitness", &self.tune.fitness_train)] {
            t.validate().map_err(|e| ConfigError::Invalid(format!("{name}: {e}")))?;
            if t.learning_rate.is_nan() || t.learning_rate <= 0.0 {
                return invalid(format!("{name}.learning_rate must be positive"));
            }
        }
        if !(self.tune.validation_fraction > 0.0 && self.tune.validation_fraction < 1.0) {
            return invalid("fitness.validation_fraction must be in (0,1)".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_parse_from_empty_text() {
        let c = RunConfig::parse("", Path::new("")).unwrap();
        assert_eq!(c, RunConfig::default());
    }

    #[test]
    fn keys_and_seeds() {
        let text = "
            # comment
            seed = 7
            output_dir = results   # trailing comment
            synthetic.per_class = 20
            synthetic.size = 12
            woa.population = 4
            train.seed = 99
            search.pooling = max, average
            search.kernel_sizes = 3,5
            network.padding = valid
            output.record_wall_time = false
        ";
        let c = RunConfig::parse(text, Path::new("/base")).unwrap();
        assert_eq!(c.output_dir, PathBuf::from("/base/results"));
        assert_eq!(c.resize_to, (12, 12));
        assert_eq!(c.tune.woa.seed, 7);
        assert_eq!(c.split.seed, 7);
        assert_eq!(c.train.seed, 99);
        assert_eq!(c.tune.woa.population_size, 4);
        assert_eq!(c.search.kernel_sizes, vec![3, 5]);
        assert_eq!(c.padding, Padding::Valid);
        assert!(!c.record_wall_time);
        match c.source {
            DataSource::Synthetic(s) => assert_eq!((s.n_per_class, s.size, s.seed), (20, 12, 7)),
            DataSource::Folder(_) => panic!("expected synthetic"),
        }
    }

    #[test]
    fn rejects_bad_input() {
        let p = Path::new("");
        assert!(matches!(
            RunConfig::parse("nonsense", p),
            Err(ConfigError::Syntax { line: 1, .. })
        ));
        assert!(matches!(
            RunConfig::parse("a.b = 1", p),
            Err(ConfigError::UnknownKey(_))
        ));
        assert!(matches!(
            RunConfig::parse("seed = 1\nseed = 2", p),
            Err(ConfigError::Duplicate { line: 2, .. })
        ));
        assert!(matches!(
            RunConfig::parse("train.epochs = x", p),
            Err(ConfigError::Value { .. })
        ));
        assert!(RunConfig::parse("train.learning_rate = 0", p).is_err());
        assert!(RunConfig::parse("dataset.source = folder", p).is_err());
        assert!(RunConfig::parse("search.kernel_sizes = 4", p).is_err());
        assert!(RunConfig::parse("preprocess.sigma = -1", p).is_err());
        assert!(RunConfig::parse("segmentation.levels = 0\nsegmentation.mask_input = true", p).is_err());
    }

    #[test]
    fn folder_source() {
        let c = RunConfig::parse(
            "dataset.source = folder\ndataset.path = data\ndataset.resize = 20x10",
            Path::new("/x"),
        )
        .unwrap();
        assert_eq!(c.source, DataSource::Folder(PathBuf::from("/x/data")));
        assert_eq!(c.resize_to, (10, 20));
    }
}
