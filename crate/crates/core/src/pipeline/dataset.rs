use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::imagecore::{load_image, to_grayscale, Image, ImageError};
use crate::micronet::{Example, Tensor};
use crate::preprocess::{
    background_subtract, contrast_normalize, gaussian_filter, GaussianConfig, PreprocessError, DEFAULT_CN_EPSILON,
};

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("cannot read directory {path}: {source}")]
    ReadDir {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{0} has no class subdirectories")]
    NoClasses(PathBuf),
    #[error("class directory {0} contains no PGM/PPM files")]
    EmptyClass(PathBuf),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error("synthetic images must be at least 8x8, got {0}")]
    TooSmall(usize),
    #[error("n_per_class must be at least 1")]
    NoSamples,
    #[error("noise sigma must be finite and non-negative, got {0}")]
    Noise(f64),
    #[error("train fraction must lie strictly between 0 and 1, got {0}")]
    Fraction(f64),
    #[error("class {0:?} has {1} sample(s); a stratified split needs at least 2")]
    ClassTooSmall(String, usize),
    #[error("dataset has {0} sample(s); a split needs at least 2")]
    TooFewSamples(usize),
    #[error("invalid dataset: {0}")]
    Invalid(String),
    #[error(transparent)]
    Preprocess(#[from] PreprocessError),
}

/// Labelled images sharing one size.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub samples: Vec<(Image, usize)>,
    pub class_names: Vec<String>,
    /// `(height, width)` every image was resized to.
    pub resize_to: (usize, usize),
}

impl Dataset {
    /// Checks labels, sizes and that every class has a sample.
    pub fn new(
        samples: Vec<(Image, usize)>,
        class_names: Vec<String>,
        resize_to: (usize, usize),
    ) -> Result<Self, DatasetError> {
        let ds = Self {
            samples,
            class_names,
            resize_to,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<(), DatasetError> {
        let c = self.class_names.len();
        let (h, w) = self.resize_to;
        for (i, (img, label)) in self.samples.iter().enumerate() {
            if *label >= c {
                return Err(DatasetError::Invalid(format!(
                    "sample {i} has label {label} but there are {c} classes"
                )));
            }
            if img.height() != h || img.width() != w {
                return Err(DatasetError::Invalid(format!(
                    "sample {i} is {}x{}, expected {w}x{h}",
                    img.width(),
                    img.height()
                )));
            }
        }
        for (class, count) in self.class_counts().iter().enumerate() {
            if *count == 0 {
                return Err(DatasetError::Invalid(format!(
                    "class {:?} has no samples",
                    self.class_names[class]
                )));
            }
        }
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.samples.first().map_or(1, |(img, _)| img.channels())
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes()];
        for (_, label) in &self.samples {
            counts[*label] += 1;
        }
        counts
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|(_, l)| *l).collect()
    }

    fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
            class_names: self.class_names.clone(),
            resize_to: self.resize_to,
        }
    }

    /// Channel-first network inputs.
    pub fn to_examples(&self) -> Vec<Example> {
        self.samples
            .iter()
            .map(|(img, label)| Example {
                input: image_to_tensor(img),
                label: *label,
            })
            .collect()
    }
}

/// `[channels, height, width]` view of an interleaved image.
pub fn image_to_tensor(img: &Image) -> Tensor {
    let c = img.channels();
    let mut data = Vec::with_capacity(img.pixels().len());
    for ch in 0..c {
        data.extend(img.channel(ch));
    }
    Tensor::new(vec![c, img.height(), img.width()], data).expect("image pixels are finite")
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>, DatasetError> {
    let read_err = |source| DatasetError::ReadDir {
        path: dir.to_path_buf(),
        source,
    };
    let mut entries = fs::read_dir(dir)
        .map_err(read_err)?
        .map(|e| e.map(|e| e.path()))
        .collect::<Result<Vec<_>, _>>()
        .map_err(read_err)?;
    entries.sort();
    Ok(entries)
}

fn is_netpbm(path: &Path) -> bool {
    path.is_file()
        && path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "pgm" | "ppm" | "pnm"))
}

/// One subdirectory per class, labelled in sorted name order. Images are
/// converted to grayscale and resized to `resize_to = (height, width)`.
pub fn load_folder_dataset(root: impl AsRef<Path>, resize_to: (usize, usize)) -> Result<Dataset, DatasetError> {
    let root = root.as_ref();
    let (h, w) = resize_to;
    let class_dirs: Vec<PathBuf> = sorted_entries(root)?.into_iter().filter(|p| p.is_dir()).collect();
    if class_dirs.is_empty() {
        return Err(DatasetError::NoClasses(root.to_path_buf()));
    }
    let mut samples = Vec::new();
    let mut class_names = Vec::with_capacity(class_dirs.len());
    for (label, dir) in class_dirs.iter().enumerate() {
        let files: Vec<PathBuf> = sorted_entries(dir)?.into_iter().filter(|p| is_netpbm(p)).collect();
        if files.is_empty() {
            return Err(DatasetError::EmptyClass(dir.clone()));
        }
        for file in files {
            let img = to_grayscale(&load_image(&file)?).resize_nearest(w, h)?;
            samples.push((img, label));
        }
        class_names.push(
            dir.file_name()
                .map_or_else(String::new, |n| n.to_string_lossy().into_owned()),
        );
    }
    Dataset::new(samples, class_names, resize_to)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SyntheticKind {
    /// Class 0: filled axis-aligned square. Class 1: filled disc.
    Shapes,
    /// Class 0: one Gaussian blob. Class 1: two Gaussian blobs.
    Blobs,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticSpec {
    pub kind: SyntheticKind,
    pub n_per_class: usize,
    pub size: usize,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            kind: SyntheticKind::Shapes,
            n_per_class: 200,
            size: 16,
            noise_sigma: 0.05,
            seed: 0,
        }
    }
}

fn square(size: usize, rng: &mut impl Rng) -> Vec<f64> {
    let side = rng.random_range(size / 4 + 1..=size * 5 / 8);
    let x0 = rng.random_range(0..=size - side);
    let y0 = rng.random_range(0..=size - side);
    let mut px = vec![0.0; size * size];
    for y in y0..y0 + side {
        px[y * size + x0..y * size + x0 + side].fill(1.0);
    }
    px
}

fn disc(size: usize, rng: &mut impl Rng) -> Vec<f64> {
    let r = rng.random_range(size / 8 + 1..=size * 3 / 8);
    let cx = rng.random_range(r..size - r) as isize;
    let cy = rng.random_range(r..size - r) as isize;
    let r2 = (r * r) as isize;
    let mut px = vec![0.0; size * size];
    for y in 0..size as isize {
        for x in 0..size as isize {
            if (x - cx).pow(2) + (y - cy).pow(2) <= r2 {
                px[y as usize * size + x as usize] = 1.0;
            }
        }
    }
    px
}

fn blobs(size: usize, count: usize, rng: &mut impl Rng) -> Vec<f64> {
    let s = size as f64;
    let mut px = vec![0.0; size * size];
    for _ in 0..count {
        let sigma = rng.random_range(s / 12.0..s / 8.0);
        let cx = rng.random_range(0.2 * s..0.8 * s);
        let cy = rng.random_range(0.2 * s..0.8 * s);
        for y in 0..size {
            for x in 0..size {
                let d2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
                let v = &mut px[y * size + x];
                *v = f64::max(*v, (-d2 / (2.0 * sigma * sigma)).exp());
            }
        }
    }
    px
}

/// Deterministic two-class image set. Samples alternate class 0, class 1.
pub fn gen_synthetic(spec: &SyntheticSpec) -> Result<Dataset, DatasetError> {
    if spec.size < 8 {
        return Err(DatasetError::TooSmall(spec.size));
    }
    if spec.n_per_class == 0 {
        return Err(DatasetError::NoSamples);
    }
    if !(spec.noise_sigma >= 0.0 && spec.noise_sigma.is_finite()) {
        return Err(DatasetError::Noise(spec.noise_sigma));
    }
    let size = spec.size;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise = Normal::new(0.0, spec.noise_sigma).map_err(|_| DatasetError::Noise(spec.noise_sigma))?;
    let mut samples = Vec::with_capacity(2 * spec.n_per_class);
    for _ in 0..spec.n_per_class {
        for label in 0..2 {
            let mut px = match (spec.kind, label) {
                (SyntheticKind::Shapes, 0) => square(size, &mut rng),
                (SyntheticKind::Shapes, _) => disc(size, &mut rng),
                (SyntheticKind::Blobs, l) => blobs(size, l + 1, &mut rng),
            };
            if spec.noise_sigma > 0.0 {
                for v in &mut px {
                    *v = (*v + noise.sample(&mut rng)).clamp(0.0, 1.0);
                }
            }
            samples.push((Image::new(size, size, 1, px)?, label));
        }
    }
    let class_names = match spec.kind {
        SyntheticKind::Shapes => vec!["square".to_string(), "disc".to_string()],
        SyntheticKind::Blobs => vec!["one_blob".to_string(), "two_blobs".to_string()],
    };
    Dataset::new(samples, class_names, (size, size))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitSpec {
    pub train_fraction: f64,
    pub seed: u64,
    pub stratified: bool,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            train_fraction: 0.8,
            seed: 0,
            stratified: true,
        }
    }
}

/// Training share of `n` samples: `floor(n * fraction)`, kept within
/// `1..=n-1` so both sides are non-empty.
fn train_count(n: usize, fraction: f64) -> usize {
    ((n as f64 * fraction).floor() as usize).clamp(1, n - 1)
}

/// Seeded shuffle, then a per-class (or global) cut at `train_fraction`.
/// Both halves keep the original sample order.
pub fn split(dataset: &Dataset, spec: &SplitSpec) -> Result<(Dataset, Dataset), DatasetError> {
    if !(spec.train_fraction > 0.0 && spec.train_fraction < 1.0) {
        return Err(DatasetError::Fraction(spec.train_fraction));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut train = Vec::new();
    let mut test = Vec::new();
    if spec.stratified {
        for class in 0..dataset.num_classes() {
            let mut idx: Vec<usize> = (0..dataset.len()).filter(|&i| dataset.samples[i].1 == class).collect();
            if idx.len() < 2 {
                return Err(DatasetError::ClassTooSmall(
                    dataset.class_names[class].clone(),
                    idx.len(),
                ));
            }
            idx.shuffle(&mut rng);
            let k = train_count(idx.len(), spec.train_fraction);
            train.extend_from_slice(&idx[..k]);
            test.extend_from_slice(&idx[k..]);
        }
    } else {
        if dataset.len() < 2 {
            return Err(DatasetError::TooFewSamples(dataset.len()));
        }
        let mut idx: Vec<usize> = (0..dataset.len()).collect();
        idx.shuffle(&mut rng);
        let k = train_count(idx.len(), spec.train_fraction);
        train.extend_from_slice(&idx[..k]);
        test.extend_from_slice(&idx[k..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok((dataset.subset(&train), dataset.subset(&test)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct PreprocessParams {
    pub gaussian: GaussianConfig,
    pub background: Option<Image>,
    pub cn_epsilon: f64,
}

impl Default for PreprocessParams {
    fn default() -> Self {
        Self {
            gaussian: GaussianConfig::with_sigma(0.8).expect("valid sigma"),
            background: None,
            cn_epsilon: DEFAULT_CN_EPSILON,
        }
    }
}

/// Gaussian filter, background subtraction when a background is set, then
/// contrast normalization.
pub fn preprocess_image(image: &Image, params: &PreprocessParams) -> Result<Image, PreprocessError> {
    let mut img = gaussian_filter(image, &params.gaussian)?;
    if let Some(bg) = &params.background {
        img = background_subtract(&img, bg)?;
    }
    contrast_normalize(&img, params.cn_epsilon)
}

pub fn preprocess_all(dataset: &Dataset, params: &PreprocessParams) -> Result<Dataset, DatasetError> {
    let samples = dataset
        .samples
        .iter()
        .map(|(img, label)| Ok((preprocess_image(img, params)?, *label)))
        .collect::<Result<Vec<_>, DatasetError>>()?;
    Ok(Dataset {
        samples,
        class_names: dataset.class_names.clone(),
        resize_to: dataset.resize_to,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imagecore::save_image;
    use proptest::prelude::*;

    fn synth(n: usize, noise: f64, seed: u64) -> Dataset {
        gen_synthetic(&SyntheticSpec {
            kind: SyntheticKind::Shapes,
            n_per_class: n,
            size: 16,
            noise_sigma: noise,
            seed,
        })
        .unwrap()
    }

    fn bounding_corners(img: &Image) -> [f64; 4] {
        let on: Vec<(usize, usize)> = (0..img.height())
            .flat_map(|y| (0..img.width()).map(move |x| (x, y)))
            .filter(|&(x, y)| img.get(x, y, 0) > 0.5)
            .collect();
        let x0 = on.iter().map(|p| p.0).min().unwrap();
        let x1 = on.iter().map(|p| p.0).max().unwrap();
        let y0 = on.iter().map(|p| p.1).min().unwrap();
        let y1 = on.iter().map(|p| p.1).max().unwrap();
        [
            img.get(x0, y0, 0),
            img.get(x1, y0, 0),
            img.get(x0, y1, 0),
            img.get(x1, y1, 0),
        ]
    }

    #[test]
    fn noiseless_shapes() {
        let ds = synth(10, 0.0, 3);
        assert_eq!(ds.len(), 20);
        assert_eq!(ds.class_counts(), vec![10, 10]);
        for (img, label) in &ds.samples {
            assert!(img.pixels().iter().all(|&v| v == 0.0 || v == 1.0));
            let corners = bounding_corners(img);
            if *label == 0 {
                assert!(corners.iter().all(|&v| v == 1.0));
            } else {
                assert!(corners.iter().all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn synthetic_determinism_and_clamp() {
        assert_eq!(synth(5, 0.1, 9), synth(5, 0.1, 9));
        assert_ne!(synth(5, 0.1, 9), synth(5, 0.1, 10));
        let ds = synth(20, 0.1, 1);
        assert!(ds
            .samples
            .iter()
            .all(|(img, _)| img.pixels().iter().all(|v| (0.0..=1.0).contains(v))));
        let blobs = gen_synthetic(&SyntheticSpec {
            kind: SyntheticKind::Blobs,
            ..SyntheticSpec::default()
        })
        .unwrap();
        assert_eq!(blobs.len(), 400);
    }

    #[test]
    fn synthetic_rejects_tiny_images() {
        let spec = SyntheticSpec {
            size: 7,
            ..SyntheticSpec::default()
        };
        assert!(matches!(gen_synthetic(&spec), Err(DatasetError::TooSmall(7))));
    }

    #[test]
    fn split_counts() {
        let ds = synth(10, 0.0, 0);
        let (train, test) = split(&ds, &SplitSpec::default()).unwrap();
        assert_eq!(train.class_counts(), vec![8, 8]);
        assert_eq!(test.class_counts(), vec![2, 2]);

        let ds = synth(2, 0.0, 0);
        let spec = SplitSpec {
            train_fraction: 0.5,
            ..SplitSpec::default()
        };
        let (train, test) = split(&ds, &spec).unwrap();
        assert_eq!(train.class_counts(), vec![1, 1]);
        assert_eq!(test.class_counts(), vec![1, 1]);

        let again = split(&ds, &spec).unwrap();
        assert_eq!(again.0, train);
        assert_eq!(again.1, test);
    }

    #[test]
    fn split_is_a_partition() {
        let ds = synth(13, 0.05, 4);
        for stratified in [true, false] {
            let spec = SplitSpec {
                train_fraction: 0.7,
                seed: 5,
                stratified,
            };
            let (train, test) = split(&ds, &spec).unwrap();
            assert_eq!(train.len() + test.len(), ds.len());
            let mut all: Vec<_> = train.samples.iter().chain(&test.samples).cloned().collect();
            let mut orig = ds.samples.clone();
            let key = |s: &(Image, usize)| format!("{:?}{}", s.0.pixels(), s.1);
            all.sort_by_key(key);
            orig.sort_by_key(key);
            assert_eq!(all, orig);
        }
    }

    #[test]
    fn split_rejects_singleton_class() {
        let img = Image::filled(8, 8, 1, 0.0).unwrap();
        let ds = Dataset::new(
            vec![(img.clone(), 0), (img.clone(), 0), (img, 1)],
            vec!["a".into(), "b".into()],
            (8, 8),
        )
        .unwrap();
        assert!(matches!(
            split(&ds, &SplitSpec::default()),
            Err(DatasetError::ClassTooSmall(_, 1))
        ));
    }

    #[test]
    fn folder_loading() {
        let dir = tempfile::tempdir().unwrap();
        for (class, sizes) in [
            ("dog", [(5, 7), (20, 20), (16, 9)]),
            ("cat", [(16, 16), (3, 3), (30, 10)]),
        ] {
            fs::create_dir(dir.path().join(class)).unwrap();
            for (i, (w, h)) in sizes.into_iter().enumerate() {
                let img = Image::filled(w, h, 3, 0.5).unwrap();
                save_image(&img, dir.path().join(class).join(format!("{i}.ppm"))).unwrap();
            }
        }
        fs::write(dir.path().join("cat").join("notes.txt"), "ignored").unwrap();
        let ds = load_folder_dataset(dir.path(), (16, 16)).unwrap();
        assert_eq!(ds.class_names, vec!["cat", "dog"]);
        assert_eq!(ds.len(), 6);
        assert_eq!(ds.labels(), vec![0, 0, 0, 1, 1, 1]);
        assert!(ds
            .samples
            .iter()
            .all(|(img, _)| img.width() == 16 && img.height() == 16 && img.channels() == 1));

        fs::create_dir(dir.path().join("empty")).unwrap();
        let err = load_folder_dataset(dir.path(), (16, 16)).unwrap_err();
        assert!(err.to_string().contains("empty"));
    }

    #[test]
    fn unreadable_file_names_its_path() {
        let dir = tempfile::tempdir().unwrap();
        fs::create_dir(dir.path().join("a")).unwrap();
        fs::write(dir.path().join("a").join("bad.pgm"), b"P5\n2 2\n255\n").unwrap();
        let err = load_folder_dataset(dir.path(), (4, 4)).unwrap_err();
        assert!(err.to_string().contains("bad.pgm"));
    }

    #[test]
    fn preprocessing_stages() {
        let constant = Dataset::new(
            vec![
                (Image::filled(8, 8, 1, 0.3).unwrap(), 0),
                (Image::filled(8, 8, 1, 0.9).unwrap(), 1),
            ],
            vec!["a".into(), "b".into()],
            (8, 8),
        )
        .unwrap();
        let out = preprocess_all(&constant, &PreprocessParams::default()).unwrap();
        assert!(out
            .samples
            .iter()
            .all(|(img, _)| img.pixels().iter().all(|&v| v == 0.0)));

        let ds = synth(4, 0.1, 2);
        let params = PreprocessParams::default();
        let out = preprocess_all(&ds, &params).unwrap();
        for ((raw, _), (done, _)) in ds.samples.iter().zip(&out.samples) {
            let two_stage =
                contrast_normalize(&gaussian_filter(raw, &params.gaussian).unwrap(), params.cn_epsilon).unwrap();
            assert_eq!(&two_stage, done);
            let mean = done.pixels().iter().sum::<f64>() / done.pixels().len() as f64;
            assert!(mean.abs() < 1e-9);
        }

        let bad = PreprocessParams {
            background: Some(Image::filled(4, 4, 1, 0.0).unwrap()),
            ..PreprocessParams::default()
        };
        assert!(matches!(
            preprocess_all(&ds, &bad),
            Err(DatasetError::Preprocess(PreprocessError::ShapeMismatch { .. }))
        ));
    }

    proptest! {
        #[test]
        fn split_partitions_and_keeps_classes(
            counts in proptest::collection::vec(2usize..15, 2..4),
            fraction in 0.05f64..0.95,
            seed in any::<u64>(),
            stratified in any::<bool>(),
        ) {
            let mut samples = Vec::new();
            for (class, &n) in counts.iter().enumerate() {
                for _ in 0..n {
                    let id = samples.len() as f64 / 1000.0;
                    samples.push((Image::filled(4, 4, 1, id).unwrap(), class));
                }
            }
            let names = (0..counts.len()).map(|c| c.to_string()).collect();
            let ds = Dataset::new(samples, names, (4, 4)).unwrap();
            let spec = SplitSpec { train_fraction: fraction, seed, stratified };
            let (train, test) = split(&ds, &spec).unwrap();
            let mut ids: Vec<u64> = train
                .samples
                .iter()
                .chain(&test.samples)
                .map(|(img, _)| (img.pixels()[0] * 1000.0).round() as u64)
                .collect();
            ids.sort_unstable();
            prop_assert_eq!(ids, (0..ds.len() as u64).collect::<Vec<_>>());
            if stratified {
                prop_assert!(train.class_counts().iter().all(|&n| n > 0));
                prop_assert!(test.class_counts().iter().all(|&n| n > 0));
            }
        }
    }
}
