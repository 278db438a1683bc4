use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use hodcnn::imagecore::{histogram, load_image, save_image, to_grayscale};
use hodcnn::micronet::checkpoint;
use hodcnn::pipeline::{
    evaluate, gen_synthetic, load_folder_dataset, preprocess_all, run_pipeline, segment_dataset, AtStage,
    PipelineError, PreprocessParams, RunConfig, SegmentStrategy, SegmentationParams, Stage, SyntheticKind,
    SyntheticSpec, METRICS_FILE, ROC_FILE,
};
use hodcnn::preprocess::{
    background_subtract, contrast_normalize, gaussian_filter, GaussianConfig, DEFAULT_CN_EPSILON,
};
use hodcnn::segmentation::{optimal_thresholds, segment, Strategy};
use hodcnn::woa::WoaConfig;

#[derive(Parser)]
#[command(
    name = "hodcnn",
    version,
    about = "Image pre-processing, thresholding and a WOA-tuned CNN classifier"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    Shapes,
    Blobs,
}

#[derive(Clone, Copy, ValueEnum)]
enum StrategyArg {
    Exhaustive,
    Woa,
}

#[derive(Subcommand)]
enum Command {
    /// Run the full pipeline from a key=value config file.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Overrides `output_dir` from the config.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Zero the background band of each image before it reaches the
        /// network; same as `segmentation.mask_input = true`.
        #[arg(long)]
        seg_mask_input: bool,
    },
    /// Write a synthetic two-class dataset as one PGM folder per class.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "shapes")]
        kind: Kind,
        #[arg(long, default_value_t = 200)]
        per_class: usize,
        #[arg(long, default_value_t = 16)]
        size: usize,
        #[arg(long, default_value_t = 0.05)]
        noise: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Filter, optionally subtract a background, and contrast-normalize one
    /// image. The output is rescaled to [0, 1] for saving.
    Preprocess {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        sigma: f64,
        #[arg(long)]
        radius: Option<usize>,
        #[arg(long)]
        background: Option<PathBuf>,
        #[arg(long, default_value_t = DEFAULT_CN_EPSILON)]
        cn_epsilon: f64,
    },
    /// Entropy-threshold one image and print the thresholds.
    Segment {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        levels: usize,
        #[arg(long, value_enum, default_value = "exhaustive")]
        strategy: StrategyArg,
        /// Save the label map (bands spread over the gray range).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 20)]
        population: usize,
        #[arg(long, default_value_t = 50)]
        iterations: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Score a checkpoint on a class-per-folder dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Reuse the pre-processing and segmentation settings of a run config.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Also write metrics.csv and roc.csv here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn run(command: Command) -> Result<(), PipelineError> {
    match command {
        Command::Run {
            config,
            out,
            seg_mask_input,
        } => {
            let mut config = RunConfig::load(&config).at(Stage::Config)?;
            if let Some(out) = out {
                config.output_dir = out;
            }
            if seg_mask_input {
                config.segmentation.mask_input = true;
            }
            let report = run_pipeline(&config)?;
            let m = &report.metrics;
            eprintln!(
                "kernel {} feature maps {} pooling {:?}; accuracy {} sensitivity {} specificity {} auc {} time {:.2}s",
                report.spec.kernel_size,
                report.spec.feature_maps,
                report.spec.pooling,
                m.accuracy,
                m.sensitivity,
                m.specificity,
                report.roc.auc,
                m.wall_time_seconds
            );
            println!("{}", config.output_dir.display());
        }
        Command::Synth {
            out,
            kind,
            per_class,
            size,
            noise,
            seed,
        } => {
            let spec = SyntheticSpec {
                kind: match kind {
                    Kind::Shapes => SyntheticKind::Shapes,
                    Kind::Blobs => SyntheticKind::Blobs,
                },
                n_per_class: per_class,
                size,
                noise_sigma: noise,
                seed,
            };
            let data = gen_synthetic(&spec).at(Stage::Ingest)?;
            let dirs: Vec<PathBuf> = data
                .class_names
                .iter()
                .enumerate()
                .map(|(i, name)| out.join(format!("{i}_{name}")))
                .collect();
            for d in &dirs {
                fs::create_dir_all(d).at(Stage::Write)?;
            }
            for (i, (img, label)) in data.samples.iter().enumerate() {
                save_image(img, dirs[*label].join(format!("{i:05}.pgm"))).at(Stage::Write)?;
            }
        }
        Command::Preprocess {
            input,
            out,
            sigma,
            radius,
            background,
            cn_epsilon,
        } => {
            let gaussian = match radius {
                Some(r) => GaussianConfig::new(sigma, r),
                None => GaussianConfig::with_sigma(sigma),
            }
            .at(Stage::Config)?;
            let img = load_image(&input).at(Stage::Ingest)?;
            let mut done = gaussian_filter(&img, &gaussian).at(Stage::Preprocess)?;
            if let Some(bg) = background {
                let bg = load_image(&bg).at(Stage::Ingest)?;
                done = background_subtract(&done, &bg).at(Stage::Preprocess)?;
            }
            let done = contrast_normalize(&done, cn_epsilon).at(Stage::Preprocess)?;
            save_image(&done.rescale_to_unit(), &out).at(Stage::Write)?;
        }
        Command::Segment {
            input,
            levels,
            strategy,
            out,
            population,
            iterations,
            seed,
        } => {
            let img = to_grayscale(&load_image(&input).at(Stage::Ingest)?);
            let strategy = match strategy {
                StrategyArg::Exhaustive => Strategy::Exhaustive,
                StrategyArg::Woa => Strategy::Woa(WoaConfig {
                    population_size: population,
                    max_iterations: iterations,
                    seed,
                    ..WoaConfig::default()
                }),
            };
            let hist = histogram(&img).at(Stage::Segment)?;
            let result = optimal_thresholds(&hist, levels, strategy).at(Stage::Segment)?;
            let levels: Vec<String> = result.thresholds.levels().iter().map(|t| t.to_string()).collect();
            println!("thresholds,{}", levels.join(","));
            println!("objective,{}", result.objective);
            if let Some(out) = out {
                let map = segment(&img, &result.thresholds).at(Stage::Segment)?;
                save_image(&map.to_image(), &out).at(Stage::Write)?;
            }
        }
        Command::Eval {
            checkpoint: ckpt,
            data,
            config,
            out,
        } => {
            let network = checkpoint::load(&ckpt).at(Stage::Ingest)?;
            let (params, seg) = match config {
                Some(path) => {
                    let c = RunConfig::load(&path).at(Stage::Config)?;
                    (c.preprocess, c.segmentation)
                }
                None => (
                    PreprocessParams::default(),
                    SegmentationParams {
                        levels: 0,
                        strategy: SegmentStrategy::Exhaustive,
                        ..SegmentationParams::default()
                    },
                ),
            };
            let spec = network.spec;
            let raw = load_folder_dataset(&data, (spec.input_height, spec.input_width)).at(Stage::Ingest)?;
            let mut set = preprocess_all(&raw, &params).at(Stage::Preprocess)?;
            if seg.levels > 0 && seg.mask_input {
                let maps = segment_dataset(&set, &seg).map_err(|source| PipelineError {
                    stage: Stage::Segment,
                    source,
                })?;
                for ((img, _), (map, _)) in set.samples.iter_mut().zip(&maps) {
                    *img = hodcnn::pipeline::mask_background(img, map);
                }
            }
            let (metrics, roc) = evaluate(&network, &set).at(Stage::Evaluate)?;
            let mut csv = Vec::new();
            metrics.write_csv(&mut csv, 0.0).at(Stage::Write)?;
            print!("{}", String::from_utf8_lossy(&csv));
            println!("auc,{}", roc.auc);
            if let Some(out) = out {
                fs::create_dir_all(&out).at(Stage::Write)?;
                fs::write(out.join(METRICS_FILE), &csv).at(Stage::Write)?;
                let mut roc_csv = Vec::new();
                roc.write_csv(&mut roc_csv).at(Stage::Write)?;
                fs::write(out.join(ROC_FILE), roc_csv).at(Stage::Write)?;
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("hodcnn: {e}");
            ExitCode::FAILURE
        }
    }
}
