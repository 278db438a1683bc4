//! End-to-end run: ingest, split, pre-process, optional segmentation,
//! structure search, final training and evaluation.

pub mod config;
pub mod dataset;
pub mod metrics;
pub mod tune;

use std::error::Error as StdError;
use std::fmt;
use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::imagecore::{histogram, save_image, Image, LabelMap};
use crate::micronet::{checkpoint, train, Network, NetworkSpec, TrainReport};
use crate::segmentation::{optimal_thresholds, segment, ThresholdSet};

pub use config::{ConfigError, DataSource, RunConfig, SegmentStrategy, SegmentationParams};
pub use dataset::{
    gen_synthetic, load_folder_dataset, preprocess_all, preprocess_image, split, Dataset, DatasetError,
    PreprocessParams, SplitSpec, SyntheticKind, SyntheticSpec,
};
pub use metrics::{evaluate, roc_curve, Counts, Metrics, MetricsError, RocCurve, RocReport};
pub use tune::{woa_tune, HyperSpace, TuneBudget, TuneError, TuneOutcome};

pub const METRICS_FILE: &str = "metrics.csv";
pub const ROC_FILE: &str = "roc.csv";
pub const TRACE_FILE: &str = "woa_trace.csv";
pub const TRAIN_REPORT_FILE: &str = "train_report.csv";
pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const SEGMENTS_DIR: &str = "segments";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Config,
    Ingest,
    Split,
    Preprocess,
    Segment,
    Tune,
    Train,
    Evaluate,
    Write,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Config => "config",
            Stage::Ingest => "ingest",
            Stage::Split => "split",
            Stage::Preprocess => "preprocess",
            Stage::Segment => "segment",
            Stage::Tune => "tune",
            Stage::Train => "train",
            Stage::Evaluate => "evaluate",
            Stage::Write => "write",
        })
    }
}

/// A failure tagged with the stage it happened in.
#[derive(Debug)]
pub struct PipelineError {
    pub stage: Stage,
    pub source: Box<dyn StdError + Send + Sync>,
}

impl fmt::Display for PipelineError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}] {}", self.stage, self.source)
    }
}

impl StdError for PipelineError {
    fn source(&self) -> Option<&(dyn StdError + 'static)> {
        Some(self.source.as_ref())
    }
}

pub trait AtStage<T> {
    fn at(self, stage: Stage) -> Result<T, PipelineError>;
}

impl<T, E: StdError + Send + Sync + 'static> AtStage<T> for Result<T, E> {
    fn at(self, stage: Stage) -> Result<T, PipelineError> {
        self.map_err(|e| PipelineError {
            stage,
            source: Box::new(e),
        })
    }
}

/// What a run produced, in memory.
#[derive(Debug, Clone)]
pub struct RunReport {
    pub spec: NetworkSpec,
    pub tune: TuneOutcome,
    pub train: TrainReport,
    pub metrics: Metrics,
    pub roc: RocReport,
    pub network: Network,
    pub outputs: Vec<PathBuf>,
}

/// Files and directories written so far; removed again on failure.
struct Outputs {
    created_dir: Option<PathBuf>,
    paths: Vec<PathBuf>,
}

impl Outputs {
    fn write_with(&mut self, path: PathBuf, f: impl FnOnce(&mut dyn Write) -> io::Result<()>) -> io::Result<()> {
        self.paths.push(path.clone());
        let mut out = BufWriter::new(fs::File::create(&path)?);
        f(&mut out)?;
        out.flush()
    }

    fn cleanup(&self) {
        for p in self.paths.iter().rev() {
            if p.is_dir() {
                let _ = fs::remove_dir_all(p);
            } else {
                let _ = fs::remove_file(p);
            }
        }
        if let Some(dir) = &self.created_dir {
            let _ = fs::remove_dir(dir);
        }
    }
}

/// Thresholds each image (rescaled to `[0, 1]`) and returns the label maps.
pub fn segment_dataset(
    dataset: &Dataset,
    params: &SegmentationParams,
) -> Result<Vec<(LabelMap, ThresholdSet)>, Box<dyn StdError + Send + Sync>> {
    let mut maps = Vec::with_capacity(dataset.len());
    for (img, _) in &dataset.samples {
        let unit = img.rescale_to_unit();
        let hist = histogram(&unit)?;
        let t = optimal_thresholds(&hist, params.levels, params.strategy())?.thresholds;
        maps.push((segment(&unit, &t)?, t));
    }
    Ok(maps)
}

/// Zeros every pixel that fell in band 0.
pub fn mask_background(image: &Image, labels: &LabelMap) -> Image {
    let px = image
        .pixels()
        .iter()
        .zip(&labels.labels)
        .map(|(&v, &l)| if l == 0 { 0.0 } else { v })
        .collect();
    Image::new(image.width(), image.height(), image.channels(), px).expect("same shape as a valid image")
}

/// Applies the configured segmentation to a pre-processed dataset: label
/// maps go to `dump_dir` when given, and band 0 is masked out when
/// `mask_input` is set.
fn apply_segmentation(
    data: &Dataset,
    params: &SegmentationParams,
    dump: Option<(&Path, &str)>,
) -> Result<Dataset, Box<dyn StdError + Send + Sync>> {
    let maps = segment_dataset(data, params)?;
    if let Some((dir, prefix)) = dump {
        for (i, (map, _)) in maps.iter().enumerate() {
            save_image(&map.to_image(), dir.join(format!("{prefix}_{i:05}.pgm")))?;
        }
    }
    if !params.mask_input {
        return Ok(data.clone());
    }
    let samples = data
        .samples
        .iter()
        .zip(&maps)
        .map(|((img, label), (map, _))| (mask_background(img, map), *label))
        .collect();
    Ok(Dataset {
        samples,
        ..data.clone()
    })
}

fn ingest(config: &RunConfig) -> Result<Dataset, DatasetError> {
    match &config.source {
        DataSource::Folder(root) => load_folder_dataset(root, config.resize_to),
        DataSource::Synthetic(spec) => gen_synthetic(spec),
    }
}

/// Runs every stage and writes the report files into `config.output_dir`.
/// On failure, files this run created are removed.
pub fn run_pipeline(config: &RunConfig) -> Result<RunReport, PipelineError> {
    let started = Instant::now();
    config.validate().at(Stage::Config)?;
    let dir = &config.output_dir;
    let mut outputs = Outputs {
        created_dir: None,
        paths: Vec::new(),
    };
    if !dir.exists() {
        fs::create_dir_all(dir).at(Stage::Write)?;
        outputs.created_dir = Some(dir.clone());
    }
    let result = run_stages(config, &mut outputs, started);
    if result.is_err() {
        outputs.cleanup();
    }
    result
}

fn run_stages(config: &RunConfig, outputs: &mut Outputs, started: Instant) -> Result<RunReport, PipelineError> {
    let dir = config.output_dir.clone();
    let raw = ingest(config).at(Stage::Ingest)?;
    let (train_raw, test_raw) = split(&raw, &config.split).at(Stage::Split)?;
    let mut train_set = preprocess_all(&train_raw, &config.preprocess).at(Stage::Preprocess)?;
    let mut test_set = preprocess_all(&test_raw, &config.preprocess).at(Stage::Preprocess)?;

    if config.segmentation.levels > 0 {
        let seg = &config.segmentation;
        let seg_dir = dir.join(SEGMENTS_DIR);
        let dump = if seg.dump {
            if !seg_dir.exists() {
                outputs.paths.push(seg_dir.clone());
                fs::create_dir_all(&seg_dir).at(Stage::Write)?;
            }
            true
        } else {
            false
        };
        let run = |data: &Dataset, prefix: &str| {
            apply_segmentation(data, seg, dump.then_some((seg_dir.as_path(), prefix))).map_err(|source| PipelineError {
                stage: Stage::Segment,
                source,
            })
        };
        train_set = run(&train_set, "train")?;
        test_set = run(&test_set, "test")?;
    }

    let (h, w) = train_set.resize_to;
    let base = NetworkSpec {
        conv_blocks: config.conv_blocks,
        dense_units: config.dense_units,
        padding: config.padding,
        ..NetworkSpec::new((train_set.channels(), h, w), train_set.num_classes())
    };
    let tuned = woa_tune(&train_set, base, &config.search, &config.tune).at(Stage::Tune)?;

    let (network, train_report) = train(
        tuned.spec,
        &train_set.to_examples(),
        &test_set.to_examples(),
        &config.train,
    )
    .at(Stage::Train)?;

    let (mut metrics, roc) = evaluate(&network, &test_set).at(Stage::Evaluate)?;
    metrics.wall_time_seconds = started.elapsed().as_secs_f64();
    let time_s = if config.record_wall_time {
        metrics.wall_time_seconds
    } else {
        0.0
    };

    outputs
        .write_with(dir.join(METRICS_FILE), |o| metrics.write_csv(o, time_s))
        .at(Stage::Write)?;
    outputs
        .write_with(dir.join(ROC_FILE), |o| roc.write_csv(o))
        .at(Stage::Write)?;
    outputs
        .write_with(dir.join(TRACE_FILE), |o| tuned.result.write_trace_csv(o))
        .at(Stage::Write)?;
    outputs
        .write_with(dir.join(TRAIN_REPORT_FILE), |o| train_report.write_csv(o))
        .at(Stage::Write)?;
    let ckpt = dir.join(CHECKPOINT_FILE);
    outputs.paths.push(ckpt.clone());
    checkpoint::save(&network, &ckpt).at(Stage::Write)?;

    Ok(RunReport {
        spec: tuned.spec,
        tune: tuned,
        train: train_report,
        metrics,
        roc,
        network,
        outputs: outputs.paths.clone(),
    })
}
