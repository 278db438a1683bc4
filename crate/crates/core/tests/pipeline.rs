use std::fs;
use std::path::Path;

use hodcnn::imagecore::{load_image, save_image, Image};
use hodcnn::micronet::checkpoint;
use hodcnn::pipeline::{
    run_pipeline, RunConfig, Stage, CHECKPOINT_FILE, METRICS_FILE, ROC_FILE, SEGMENTS_DIR, TRACE_FILE,
    TRAIN_REPORT_FILE,
};

const SMALL: &str = "\
seed = 3
synthetic.per_class = 12
synthetic.size = 12
woa.population = 2
woa.iterations = 1
search.kernel_sizes = 3, 5
search.feature_maps = 2
search.pooling = max
network.dense_units = 0
fitness.epochs = 1
train.epochs = 4
output.record_wall_time = false
";

fn config(dir: &Path, extra: &str) -> RunConfig {
    let text = format!("{SMALL}output_dir = out\n{extra}");
    RunConfig::parse(&text, dir).unwrap()
}

fn read(dir: &Path, name: &str) -> Vec<u8> {
    fs::read(dir.join(name)).unwrap()
}

#[test]
fn writes_every_report() {
    let tmp = tempfile::tempdir().unwrap();
    let c = config(tmp.path(), "segmentation.levels = 1\n");
    let report = run_pipeline(&c).unwrap();
    let out = tmp.path().join("out");

    let metrics = String::from_utf8(read(&out, METRICS_FILE)).unwrap();
    let lines: Vec<&str> = metrics.lines().collect();
    assert_eq!(lines[0], "accuracy,specificity,sensitivity,time_s,error");
    let fields: Vec<f64> = lines[1].split(',').map(|v| v.parse().unwrap()).collect();
    assert_eq!(fields[0], report.metrics.accuracy);
    assert_eq!(fields[3], 0.0);

    let roc = String::from_utf8(read(&out, ROC_FILE)).unwrap();
    assert!(roc.starts_with("fpr,tpr\n0,0\n"));
    assert!(roc.ends_with(&format!("auc,{}\n", report.roc.auc)));

    let trace = String::from_utf8(read(&out, TRACE_FILE)).unwrap();
    assert_eq!(trace.lines().next(), Some("iteration,best_fitness,mean_fitness"));
    assert_eq!(trace.lines().count(), 1 + report.tune.result.trace.len());
    let trace_min = report
        .tune
        .result
        .trace
        .iter()
        .map(|p| p.best_fitness)
        .fold(f64::INFINITY, f64::min);
    assert!(report.tune.result.best_fitness <= trace_min);

    let train = String::from_utf8(read(&out, TRAIN_REPORT_FILE)).unwrap();
    assert_eq!(train.lines().count(), 5);
    assert!(train.lines().nth(1).unwrap().split(',').all(|v| !v.is_empty()));

    let net = checkpoint::load(out.join(CHECKPOINT_FILE)).unwrap();
    assert_eq!(net.spec, report.spec);
    assert!(net.params.bitwise_eq(&report.network.params));

    // 12 per class at 0.8 keeps 9 for training: 18 train and 6 test label maps.
    let segs = out.join(SEGMENTS_DIR);
    let mut names: Vec<String> = fs::read_dir(&segs)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    names.sort();
    assert_eq!(names.len(), 24);
    assert_eq!(names[0], "test_00000.pgm");
    assert_eq!(names[6], "train_00000.pgm");
    let map = load_image(segs.join("train_00000.pgm")).unwrap();
    assert_eq!((map.width(), map.height()), (12, 12));
    assert!(map.pixels().iter().all(|&v| v == 0.0 || v == 1.0));
}

#[test]
fn repeated_runs_are_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let mut a = config(tmp.path(), "");
    a.output_dir = tmp.path().join("a");
    let mut b = a.clone();
    b.output_dir = tmp.path().join("b");
    run_pipeline(&a).unwrap();
    run_pipeline(&b).unwrap();
    for name in [METRICS_FILE, ROC_FILE, TRACE_FILE, TRAIN_REPORT_FILE, CHECKPOINT_FILE] {
        assert_eq!(read(&a.output_dir, name), read(&b.output_dir, name), "{name}");
    }
    let segs = |dir: &Path| {
        let mut files: Vec<_> = fs::read_dir(dir.join(SEGMENTS_DIR))
            .unwrap()
            .map(|e| {
                let e = e.unwrap();
                (e.file_name(), fs::read(e.path()).unwrap())
            })
            .collect();
        files.sort();
        files
    };
    assert_eq!(segs(&a.output_dir), segs(&b.output_dir));

    let mut c = a.clone();
    c.output_dir = tmp.path().join("c");
    c.train.seed += 1;
    run_pipeline(&c).unwrap();
    assert_ne!(
        read(&a.output_dir, CHECKPOINT_FILE),
        read(&c.output_dir, CHECKPOINT_FILE)
    );
}

#[test]
fn masking_changes_what_the_network_sees() {
    let tmp = tempfile::tempdir().unwrap();
    let plain = run_pipeline(&config(
        tmp.path(),
        "segmentation.levels = 1\nsegmentation.dump = false\n",
    ))
    .unwrap();
    let mut masked = config(tmp.path(), "segmentation.levels = 1\nsegmentation.mask_input = true\n");
    masked.output_dir = tmp.path().join("masked");
    let masked = run_pipeline(&masked).unwrap();
    assert!(!plain.network.params.bitwise_eq(&masked.network.params));
    assert!(!tmp.path().join("out").join(SEGMENTS_DIR).exists());
    assert!(tmp.path().join("masked").join(SEGMENTS_DIR).is_dir());
}

#[test]
fn folder_datasets_are_read_per_class() {
    let tmp = tempfile::tempdir().unwrap();
    for (class, value) in [("a_dark", 0.1), ("b_light", 0.9)] {
        let d = tmp.path().join("data").join(class);
        fs::create_dir_all(&d).unwrap();
        for i in 0..6 {
            let px = (0..100).map(|p| if (p + i) % 7 == 0 { 0.5 } else { value }).collect();
            save_image(&Image::new(10, 10, 1, px).unwrap(), d.join(format!("{i}.pgm"))).unwrap();
        }
    }
    let c = config(
        tmp.path(),
        "dataset.source = folder\ndataset.path = data\ndataset.resize = 12x12\n",
    );
    let report = run_pipeline(&c).unwrap();
    assert_eq!(report.spec.input_height, 12);
    assert_eq!(report.spec.num_classes, 2);
    assert!(tmp.path().join("out").join(METRICS_FILE).is_file());
}

#[test]
fn ingest_errors_are_tagged_and_leave_nothing_behind() {
    let tmp = tempfile::tempdir().unwrap();
    let c = config(tmp.path(), "dataset.source = folder\ndataset.path = missing\n");
    let err = run_pipeline(&c).unwrap_err();
    assert_eq!(err.stage, Stage::Ingest);
    assert!(err.to_string().starts_with("[ingest] "));
    assert!(!tmp.path().join("out").exists());
}

#[test]
fn late_failures_remove_earlier_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let keep = tmp.path().join("out");
    fs::create_dir_all(&keep).unwrap();
    fs::write(keep.join("unrelated.txt"), "keep").unwrap();
    // Three valid-padded blocks with 5x5 kernels cannot fit 12x12 inputs.
    let mut c = config(
        tmp.path(),
        "segmentation.levels = 1\nnetwork.conv_blocks = 3\nnetwork.padding = valid\n",
    );
    c.search.kernel_sizes = vec![5];
    let err = run_pipeline(&c).unwrap_err();
    assert!(matches!(err.stage, Stage::Tune | Stage::Train), "{err}");
    assert!(!keep.join(SEGMENTS_DIR).exists());
    assert_eq!(fs::read_to_string(keep.join("unrelated.txt")).unwrap(), "keep");
    assert_eq!(fs::read_dir(&keep).unwrap().count(), 1);
}

#[test]
fn invalid_configs_fail_at_the_config_stage() {
    let tmp = tempfile::tempdir().unwrap();
    let mut c = config(tmp.path(), "");
    c.conv_blocks = 0;
    let err = run_pipeline(&c).unwrap_err();
    assert_eq!(err.stage, Stage::Config);
    assert!(!tmp.path().join("out").exists());
}
