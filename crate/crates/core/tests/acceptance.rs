//! Acceptance suite. Runs without the libtest harness so that every
//! criterion prints exactly one PASS/FAIL line; the process exits nonzero
//! if any criterion fails.

mod common;

use std::cell::Cell;
use std::fs;
use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use hodcnn::imagecore::{load_image, save_image, Histogram, Image, GRAY_LEVELS};
use hodcnn::micronet::checkpoint;
use hodcnn::micronet::{conv2d_forward, pool_forward, Padding, PoolKind};
use hodcnn::pipeline::{roc_curve, Counts, Metrics};
use hodcnn::preprocess::{contrast_normalize, gaussian_filter, gaussian_kernel, GaussianConfig};
use hodcnn::segmentation::{entropy_objective, optimal_thresholds, Strategy, ThresholdSet};
use hodcnn::woa::{optimize, SearchSpace, WoaConfig};
use rand::Rng;

use common::{gradient_check, random_network, random_spec, random_targets, random_tensor, seeded};

type Outcome = Result<String, String>;
type Criterion<'a> = (&'static str, Box<dyn FnOnce() -> Outcome + 'a>);

fn check(ok: bool, msg: impl Into<String>) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn within(elapsed: Duration, limit_s: u64) -> Result<(), String> {
    check(
        elapsed < Duration::from_secs(limit_s),
        format!("took {:.1}s, limit {limit_s}s", elapsed.as_secs_f64()),
    )
}

fn gradients() -> Outcome {
    let start = Instant::now();
    let mut rng = seeded(1001);
    let (mut checked, mut skipped, mut worst) = (0, 0, 0.0f64);
    let mut seen = [false; 8];
    for draw in 0..100 {
        let spec = random_spec(&mut rng);
        seen[spec.pooling as usize] = true;
        seen[2 + spec.padding as usize] = true;
        seen[4 + (spec.dense_units > 0) as usize] = true;
        seen[6 + (spec.conv_blocks > 1) as usize] = true;
        let net = random_network(spec, &mut rng);
        let n = rng.random_range(2..=4);
        let [c, h, w] = spec.input_shape();
        let batch = random_tensor(&[n, c, h, w], &mut rng);
        let targets = random_targets(n, spec.num_classes, &mut rng);
        let r = gradient_check(&net, &batch, &targets, 1e-5);
        check(
            r.max_rel_error < 1e-4,
            format!("draw {draw}: relative error {:e}", r.max_rel_error),
        )?;
        checked += r.checked;
        skipped += r.skipped;
        worst = worst.max(r.max_rel_error);
    }
    check(seen.iter().all(|&s| s), "not every layer variant was drawn")?;
    check(
        skipped * 20 < checked,
        format!("{skipped} of {} perturbations crossed a kink", checked + skipped),
    )?;
    within(start.elapsed(), 60)?;
    Ok(format!(
        "100 draws, {checked} values checked ({skipped} at kinks skipped), max rel error {worst:.2e}, {:.1}s",
        start.elapsed().as_secs_f64()
    ))
}

fn conv_pool_oracles() -> Outcome {
    let mut rng = seeded(1002);
    let (mut convs, mut pools, mut worst) = (0, 0, 0.0f64);
    for h in 1..=8 {
        for w in 1..=8 {
            for kh in 1..=5.min(h) {
                for kw in 1..=5.min(w) {
                    for padding in [Padding::Valid, Padding::Same] {
                        let x = random_tensor(&[2, 2, h, w], &mut rng);
                        let wt = random_tensor(&[3, 2, kh, kw], &mut rng);
                        let b = random_tensor(&[3], &mut rng);
                        let got = conv2d_forward(&x, &wt, &b, padding)
                            .map_err(|e| format!("conv {h}x{w} k{kh}x{kw}: {e}"))?;
                        let pad = (padding.amount(kh), padding.amount(kw));
                        let want = common::conv_oracle(&x, &wt, &b, pad);
                        check(
                            got.len() == want.len(),
                            format!("conv {h}x{w} k{kh}x{kw}: size mismatch"),
                        )?;
                        for (a, e) in got.data().iter().zip(want) {
                            worst = worst.max((a - e.max(0.0)).abs());
                        }
                        convs += 1;
                    }
                    for kind in [PoolKind::Max, PoolKind::Average] {
                        let x = random_tensor(&[2, 3, h, w], &mut rng);
                        let got =
                            pool_forward(&x, (kh, kw), kind).map_err(|e| format!("pool {h}x{w} f{kh}x{kw}: {e}"))?;
                        let want = common::pool_oracle(&x, (kh, kw), kind);
                        check(
                            got.len() == want.len(),
                            format!("pool {h}x{w} f{kh}x{kw}: size mismatch"),
                        )?;
                        for (a, e) in got.data().iter().zip(want) {
                            worst = worst.max((a - e).abs());
                        }
                        pools += 1;
                    }
                }
            }
        }
    }
    check(worst < 1e-12, format!("max deviation {worst:e}"))?;
    Ok(format!(
        "{convs} conv and {pools} pool cases, max deviation {worst:.1e}"
    ))
}

/// Mixes dense, sparse and plateau-heavy histograms so ties occur.
fn random_histogram(rng: &mut impl Rng, i: usize) -> Histogram {
    let mut bins = [0u64; GRAY_LEVELS];
    match i % 3 {
        0 => bins.iter_mut().for_each(|b| *b = rng.random_range(0..1000)),
        1 => {
            for _ in 0..rng.random_range(1..12) {
                bins[rng.random_range(0..GRAY_LEVELS)] += rng.random_range(1..500);
            }
        }
        _ => {
            let value = rng.random_range(1..50);
            for _ in 0..rng.random_range(2..40) {
                bins[rng.random_range(0..GRAY_LEVELS)] = value;
            }
        }
    }
    if bins.iter().all(|&b| b == 0) {
        bins[0] = 1;
    }
    Histogram::from_bins(bins)
}

/// Lexicographic scan keeping the first strictly better tuple.
fn enumerate_best(hist: &Histogram, tuples: impl Iterator<Item = Vec<usize>>) -> (f64, Vec<usize>) {
    let mut best: Option<(f64, Vec<usize>)> = None;
    for t in tuples {
        let v = entropy_objective(hist, &ThresholdSet::new(t.clone()).unwrap()).unwrap();
        if best.as_ref().is_none_or(|(b, _)| v > *b) {
            best = Some((v, t));
        }
    }
    best.unwrap()
}

fn threshold_oracles() -> Outcome {
    let start = Instant::now();
    let mut rng = seeded(1003);
    let top = GRAY_LEVELS - 1;
    let mut ties = 0;
    for i in 0..50 {
        let hist = random_histogram(&mut rng, i);
        let singles = enumerate_best(&hist, (1..=top).map(|t| vec![t]));
        let pairs = enumerate_best(&hist, (1..=top).flat_map(|a| (a + 1..=top).map(move |b| vec![a, b])));
        for (count, (value, tuple)) in [(1, singles), (2, pairs)] {
            let got = optimal_thresholds(&hist, count, Strategy::Exhaustive).map_err(|e| e.to_string())?;
            check(
                got.objective.to_bits() == value.to_bits() && got.thresholds.levels() == tuple.as_slice(),
                format!(
                    "histogram {i}, L={count}: got {:?} = {}, enumeration {tuple:?} = {value}",
                    got.thresholds.levels(),
                    got.objective
                ),
            )?;
        }
        let values: Vec<f64> = (1..=top)
            .map(|t| entropy_objective(&hist, &ThresholdSet::new(vec![t]).unwrap()).unwrap())
            .collect();
        let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if values.iter().filter(|&&v| v == max).count() > 1 {
            ties += 1;
        }
    }
    within(start.elapsed(), 30)?;
    Ok(format!(
        "50 histograms ({ties} with tied single thresholds), L=1 and L=2 exact, {:.1}s",
        start.elapsed().as_secs_f64()
    ))
}

fn woa_sphere() -> Outcome {
    let start = Instant::now();
    let space = SearchSpace::uniform(5, -10.0, 10.0).map_err(|e| e.to_string())?;
    let mut bests = Vec::new();
    for seed in 0..10 {
        let config = WoaConfig {
            population_size: 30,
            max_iterations: 200,
            seed,
            ..WoaConfig::default()
        };
        let mut calls = 0;
        let r = optimize(&space, &config, |x| {
            calls += 1;
            x.iter().map(|v| v * v).sum()
        })
        .map_err(|e| e.to_string())?;
        check(
            r.trace.windows(2).all(|w| w[1].best_fitness <= w[0].best_fitness),
            format!("seed {seed}: trace not monotone"),
        )?;
        check(
            r.evaluations == 30 * 201 && calls == 30 * 201,
            format!("seed {seed}: {} evaluations reported, {calls} made", r.evaluations),
        )?;
        bests.push(r.best_fitness);
    }
    bests.sort_by(f64::total_cmp);
    let median = (bests[4] + bests[5]) / 2.0;
    let max = bests[9];
    check(median < 1e-3 && max < 1e-2, format!("median {median:e}, max {max:e}"))?;
    within(start.elapsed(), 10)?;
    Ok(format!(
        "10 seeds, median {median:.2e}, max {max:.2e}, {} evaluations each, {:.2}s",
        30 * 201,
        start.elapsed().as_secs_f64()
    ))
}

fn random_image(rng: &mut impl Rng, grid: bool) -> Image {
    let w = rng.random_range(1..=20);
    let h = rng.random_range(1..=20);
    let c = [1, 3][rng.random_range(0..2)];
    let px = (0..w * h * c)
        .map(|_| {
            if grid {
                rng.random_range(0..=255u32) as f64 / 255.0
            } else {
                rng.random_range(-3.0..5.0)
            }
        })
        .collect();
    Image::new(w, h, c, px).unwrap()
}

fn preprocessing() -> Outcome {
    let mut rng = seeded(1005);
    let (mut kernel_dev, mut fixed_dev, mut mean_dev, mut std_dev) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for _ in 0..20 {
        let g = GaussianConfig::new(rng.random_range(0.1..4.0), rng.random_range(1..=8)).map_err(|e| e.to_string())?;
        let k = gaussian_kernel(&g).map_err(|e| e.to_string())?;
        kernel_dev = kernel_dev.max((k.weights().iter().sum::<f64>() - 1.0).abs());
        let value = rng.random_range(-5.0..5.0);
        let img = Image::filled(rng.random_range(1..12), rng.random_range(1..12), 1, value).unwrap();
        let out = gaussian_filter(&img, &g).map_err(|e| e.to_string())?;
        for &v in out.pixels() {
            fixed_dev = fixed_dev.max((v - value).abs());
        }
    }
    let mut n = 0;
    while n < 20 {
        let img = random_image(&mut rng, false);
        if img.width() * img.height() < 2 {
            continue;
        }
        let out = contrast_normalize(&img, 1e-12).map_err(|e| e.to_string())?;
        for c in 0..out.channels() {
            let ch = out.channel(c);
            let len = ch.len() as f64;
            let mean = ch.iter().sum::<f64>() / len;
            let std = (ch.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / len).sqrt();
            mean_dev = mean_dev.max(mean.abs());
            std_dev = std_dev.max((std - 1.0).abs());
        }
        n += 1;
    }
    check(kernel_dev < 1e-12, format!("kernel sum off by {kernel_dev:e}"))?;
    check(fixed_dev < 1e-12, format!("constant image moved by {fixed_dev:e}"))?;
    check(
        mean_dev < 1e-9 && std_dev < 1e-9,
        format!("|mean| {mean_dev:e}, |std-1| {std_dev:e}"),
    )?;
    Ok(format!(
        "kernel sum {kernel_dev:.1e}, fixed point {fixed_dev:.1e}, |mean| {mean_dev:.1e}, |std-1| {std_dev:.1e}"
    ))
}

const SURROGATE_CONFIG: &str = "\
seed = 42
output_dir = out
dataset.source = synthetic
synthetic.kind = shapes
synthetic.per_class = 200
synthetic.size = 16
synthetic.noise = 0.05
woa.population = 6
woa.iterations = 5
train.epochs = 30
output.record_wall_time = false
";

fn run_cli(dir: &Path) -> Result<Duration, String> {
    let start = Instant::now();
    let out = Command::new(env!("CARGO_BIN_EXE_hodcnn"))
        .args(["run", "--config"])
        .arg(dir.join("run.conf"))
        .output()
        .map_err(|e| e.to_string())?;
    check(
        out.status.success(),
        format!("exit {:?}: {}", out.status.code(), String::from_utf8_lossy(&out.stderr)),
    )?;
    Ok(start.elapsed())
}

fn csv_rows(path: &Path) -> Result<Vec<Vec<String>>, String> {
    let text = fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    Ok(text
        .lines()
        .map(|l| l.split(',').map(str::to_owned).collect())
        .collect())
}

fn number(s: &str) -> Result<f64, String> {
    s.parse().map_err(|_| format!("not a number: {s:?}"))
}

fn end_to_end(dir: &Path) -> Outcome {
    fs::write(dir.join("run.conf"), SURROGATE_CONFIG).map_err(|e| e.to_string())?;
    let elapsed = run_cli(dir)?;
    let out = dir.join("out");
    let metrics = csv_rows(&out.join("metrics.csv"))?;
    check(
        metrics[0].join(",") == "accuracy,specificity,sensitivity,time_s,error",
        "metrics header",
    )?;
    let accuracy = number(&metrics[1][0])?;
    let report = csv_rows(&out.join("train_report.csv"))?;
    let initial = number(&report[1][1])?;
    let last = number(&report[report.len() - 1][1])?;
    let roc = csv_rows(&out.join("roc.csv"))?;
    let auc_row = roc.last().ok_or("empty roc.csv")?;
    check(auc_row[0] == "auc", "roc.csv lacks the auc row")?;
    let auc = number(&auc_row[1])?;
    let summary = format!(
        "accuracy {accuracy}, loss {initial:.4} -> {last:.4}, auc {auc}, {:.1}s",
        elapsed.as_secs_f64()
    );
    check(accuracy >= 0.95, format!("{summary}: accuracy below 0.95"))?;
    check(last < 0.5 * initial, format!("{summary}: loss did not halve"))?;
    check(auc >= 0.98, format!("{summary}: auc below 0.98"))?;
    within(elapsed, 300)?;
    Ok(summary)
}

fn determinism(first: &Path, second: &Path) -> Outcome {
    fs::write(second.join("run.conf"), SURROGATE_CONFIG).map_err(|e| e.to_string())?;
    run_cli(second)?;
    for name in ["metrics.csv", "woa_trace.csv", "model.ckpt"] {
        let a = fs::read(first.join("out").join(name)).map_err(|e| format!("{name}: {e}"))?;
        let b = fs::read(second.join("out").join(name)).map_err(|e| format!("{name}: {e}"))?;
        check(a == b, format!("{name} differs between runs"))?;
    }
    Ok("metrics.csv, woa_trace.csv and model.ckpt byte-identical across two runs".into())
}

fn trapezoid(points: &[(f64, f64)]) -> f64 {
    let mut area = 0.0;
    for i in 1..points.len() {
        let (x0, y0) = points[i - 1];
        let (x1, y1) = points[i];
        area += (x1 - x0) * (y0 + y1) / 2.0;
    }
    area
}

fn ratio_or_one(num: u64, den: u64) -> f64 {
    if den == 0 {
        1.0
    } else {
        num as f64 / den as f64
    }
}

fn metric_identities() -> Outcome {
    let mut rng = seeded(1008);
    let (mut curves, mut worst) = (0, 0.0f64);
    for i in 0..500 {
        let k = Counts {
            tp: rng.random_range(0..60),
            tn: rng.random_range(0..60),
            fp: rng.random_range(0..60),
            fn_: rng.random_range(0..60),
        };
        let m = Metrics::from_counts(k);
        check(m.error == 1.0 - m.accuracy, format!("matrix {i}: error identity"))?;
        check(
            m.sensitivity == ratio_or_one(k.tp, k.tp + k.fn_),
            format!("matrix {i}: sensitivity"),
        )?;
        check(
            m.specificity == ratio_or_one(k.tn, k.tn + k.fp),
            format!("matrix {i}: specificity"),
        )?;
        check(
            m.accuracy == ratio_or_one(k.tp + k.tn, k.total()),
            format!("matrix {i}: accuracy"),
        )?;

        let mut truth = Vec::new();
        let mut predicted = Vec::new();
        for (count, t, p) in [(k.tp, 1, 1), (k.tn, 0, 0), (k.fp, 0, 1), (k.fn_, 1, 0)] {
            truth.extend(std::iter::repeat_n(t, count as usize));
            predicted.extend(std::iter::repeat_n(p, count as usize));
        }
        let from_labels = Metrics::from_predictions(&truth, &predicted, 2);
        check(
            from_labels.headline == k,
            format!("matrix {i}: counts from labels {:?}", from_labels.headline),
        )?;
        check(
            from_labels.error == 1.0 - from_labels.accuracy,
            format!("matrix {i}: error identity from labels"),
        )?;

        let positive: Vec<bool> = truth.iter().map(|&t| t == 1).collect();
        if positive.iter().all(|&p| p) || !positive.iter().any(|&p| p) {
            continue;
        }
        let levels = rng.random_range(2..30);
        let scores: Vec<f64> = positive
            .iter()
            .map(|_| rng.random_range(0..levels) as f64 / levels as f64)
            .collect();
        let roc = roc_curve(&scores, &positive).map_err(|e| e.to_string())?;
        check(
            roc.points.first() == Some(&(0.0, 0.0)),
            format!("matrix {i}: ROC does not start at (0,0)"),
        )?;
        check(
            roc.points.last() == Some(&(1.0, 1.0)),
            format!("matrix {i}: ROC does not end at (1,1)"),
        )?;
        let dev = (roc.auc - trapezoid(&roc.points)).abs();
        worst = worst.max(dev);
        check(dev < 1e-12, format!("matrix {i}: auc off by {dev:e}"))?;
        curves += 1;
    }
    Ok(format!(
        "500 matrices, {curves} ROC curves, max auc deviation {worst:.1e}"
    ))
}

fn round_trips(dir: &Path) -> Outcome {
    let mut rng = seeded(1009);
    for i in 0..50 {
        let img = random_image(&mut rng, true);
        let ext = if img.channels() == 1 { "pgm" } else { "ppm" };
        let path = dir.join(format!("img_{i}.{ext}"));
        save_image(&img, &path).map_err(|e| e.to_string())?;
        let back = load_image(&path).map_err(|e| e.to_string())?;
        check(back == img, format!("image {i} changed on the round trip"))?;
    }
    for i in 0..10 {
        let spec = random_spec(&mut rng);
        let net = random_network(spec, &mut rng);
        let path = dir.join(format!("net_{i}.ckpt"));
        checkpoint::save(&net, &path).map_err(|e| e.to_string())?;
        let back = checkpoint::load(&path).map_err(|e| e.to_string())?;
        check(back.spec == net.spec, format!("network {i}: spec changed"))?;
        check(
            back.params.bitwise_eq(&net.params),
            format!("network {i}: parameters changed"),
        )?;
        let again = checkpoint::encode(&back);
        check(
            again == fs::read(&path).unwrap(),
            format!("network {i}: re-encoding differs"),
        )?;
    }
    Ok("50 images and 10 checkpoints round-trip exactly".into())
}

fn main() -> ExitCode {
    let scratch = tempfile::tempdir().expect("temporary directory");
    let first = scratch.path().join("run1");
    let second = scratch.path().join("run2");
    let files = scratch.path().join("files");
    for d in [&first, &second, &files] {
        fs::create_dir_all(d).expect("scratch directory");
    }

    let e2e_ok = Cell::new(false);
    let criteria: Vec<Criterion> = vec![
        ("gradient correctness", Box::new(gradients)),
        ("convolution/pooling oracles", Box::new(conv_pool_oracles)),
        ("entropy threshold oracles", Box::new(threshold_oracles)),
        ("whale optimizer on the sphere", Box::new(woa_sphere)),
        ("pre-processing invariants", Box::new(preprocessing)),
        (
            "end-to-end synthetic run",
            Box::new(|| {
                let r = end_to_end(&first);
                e2e_ok.set(first.join("out").join("model.ckpt").is_file());
                r
            }),
        ),
        (
            "determinism",
            Box::new(|| {
                if !e2e_ok.get() {
                    return Err("the first run produced no outputs".into());
                }
                determinism(&first, &second)
            }),
        ),
        ("metrics identities", Box::new(metric_identities)),
        ("file-format round trips", Box::new(|| round_trips(&files))),
    ];

    let total = criteria.len();
    let mut failed = 0;
    for (i, (name, run)) in criteria.into_iter().enumerate() {
        match run() {
            Ok(detail) => println!("PASS criterion {} ({name}): {detail}", i + 1),
            Err(why) => {
                failed += 1;
                println!("FAIL criterion {} ({name}): {why}", i + 1);
            }
        }
    }
    if failed == 0 {
        println!("all {total} acceptance criteria passed");
        ExitCode::SUCCESS
    } else {
        println!("{failed} of {total} acceptance criteria failed");
        ExitCode::FAILURE
    }
}
