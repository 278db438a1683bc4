//! Image, histogram and label-map types plus binary PGM/PPM I/O.
//!
//! Pixels are stored as `f64`, row-major and channel-interleaved. Files are
//! read as 8-bit netpbm (`P5` grayscale, `P6` RGB, maxval 255) and each byte
//! `v` maps to `v / 255`.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use thiserror::Error;

/// Number of quantized gray levels used by [`histogram`] and segmentation.
pub const GRAY_LEVELS: usize = 256;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("file not found: {0}")]
    NotFound(PathBuf),
    #[error("malformed header in {path}: {reason}")]
    MalformedHeader { path: PathBuf, reason: String },
    #[error("truncated pixel data in {path}: expected {expected} bytes, found {found}")]
    Truncated {
        path: PathBuf,
        expected: usize,
        found: usize,
    },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("invalid image: {0}")]
    Invalid(String),
    #[error("expected a grayscale image, got {0} channels")]
    NotGrayscale(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    channels: usize,
    pixels: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize, pixels: Vec<f64>) -> Result<Self, ImageError> {
        if width == 0 || height == 0 {
            return Err(ImageError::Invalid(format!(
                "dimensions must be positive, got {width}x{height}"
            )));
        }
        if channels != 1 && channels != 3 {
            return Err(ImageError::Invalid(format!("channels must be 1 or 3, got {channels}")));
        }
        if pixels.len() != width * height * channels {
            return Err(ImageError::Invalid(format!(
                "pixel buffer has {} values, expected {}",
                pixels.len(),
                width * height * channels
            )));
        }
        if let Some(bad) = pixels.iter().position(|v| !v.is_finite()) {
            return Err(ImageError::Invalid(format!("non-finite pixel value at index {bad}")));
        }
        Ok(Self {
            width,
            height,
            channels,
            pixels,
        })
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: f64) -> Result<Self, ImageError> {
        Self::new(width, height, channels, vec![value; width * height * channels])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn into_pixels(self) -> Vec<f64> {
        self.pixels
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.pixels[(y * self.width + x) * self.channels + c]
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.width == other.width && self.height == other.height && self.channels == other.channels
    }

    /// Builds a new image of the same shape from a per-value map.
    ///
    /// Fails if the map produces a non-finite value.
    pub fn map(&self, mut f: impl FnMut(f64) -> f64) -> Result<Image, ImageError> {
        Image::new(
            self.width,
            self.height,
            self.channels,
            self.pixels.iter().map(|&v| f(v)).collect(),
        )
    }

    /// Values of one channel in row-major order.
    pub fn channel(&self, c: usize) -> Vec<f64> {
        self.pixels.iter().skip(c).step_by(self.channels).copied().collect()
    }

    /// Linearly rescales so the minimum maps to 0 and the maximum to 1.
    /// Constant images map to all zeros.
    pub fn rescale_to_unit(&self) -> Image {
        let (lo, hi) = self
            .pixels
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            });
        let span = hi - lo;
        let pixels = if span > 0.0 {
            self.pixels.iter().map(|&v| (v - lo) / span).collect()
        } else {
            vec![0.0; self.pixels.len()]
        };
        Image { pixels, ..self.clone() }
    }

    /// Nearest-neighbour resampling to `width` x `height`.
    pub fn resize_nearest(&self, width: usize, height: usize) -> Result<Image, ImageError> {
        if width == 0 || height == 0 {
            return Err(ImageError::Invalid(format!(
                "resize target must be positive, got {width}x{height}"
            )));
        }
        let mut pixels = Vec::with_capacity(width * height * self.channels);
        for y in 0..height {
            let sy = (y * self.height) / height;
            for x in 0..width {
                let sx = (x * self.width) / width;
                for c in 0..self.channels {
                    pixels.push(self.get(sx, sy, c));
                }
            }
        }
        Image::new(width, height, self.channels, pixels)
    }
}

/// 256-bin gray-level histogram.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Histogram {
    bins: [u64; GRAY_LEVELS],
    total: u64,
}

impl Histogram {
    pub fn from_bins(bins: [u64; GRAY_LEVELS]) -> Self {
        let total = bins.iter().sum();
        Self { bins, total }
    }

    pub fn bins(&self) -> &[u64; GRAY_LEVELS] {
        &self.bins
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    /// Normalized probability of gray level `level`.
    pub fn probability(&self, level: usize) -> f64 {
        self.bins[level] as f64 / self.total as f64
    }
}

/// Per-pixel segment index.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    pub width: usize,
    pub height: usize,
    pub levels: usize,
    pub labels: Vec<u8>,
}

impl LabelMap {
    /// Renders labels as a gray image with `label / levels` intensities.
    pub fn to_image(&self) -> Image {
        let scale = if self.levels == 0 {
            0.0
        } else {
            1.0 / self.levels as f64
        };
        Image {
            width: self.width,
            height: self.height,
            channels: 1,
            pixels: self.labels.iter().map(|&l| l as f64 * scale).collect(),
        }
    }

    pub fn counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.levels + 1];
        for &l in &self.labels {
            counts[l as usize] += 1;
        }
        counts
    }
}

/// Maps a pixel value to its 8-bit gray level: `min(floor(v * 256), 255)`,
/// with values below zero mapped to level 0.
#[inline]
pub fn quantize_level(v: f64) -> usize {
    let scaled = (v * GRAY_LEVELS as f64).floor();
    if scaled <= 0.0 {
        0
    } else if scaled >= (GRAY_LEVELS - 1) as f64 {
        GRAY_LEVELS - 1
    } else {
        scaled as usize
    }
}

/// Clamp to [0, 1] and round half up onto the 8-bit grid.
#[inline]
pub fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8
}

pub fn histogram(image: &Image) -> Result<Histogram, ImageError> {
    if image.channels != 1 {
        return Err(ImageError::NotGrayscale(image.channels));
    }
    let mut bins = [0u64; GRAY_LEVELS];
    for &v in &image.pixels {
        bins[quantize_level(v)] += 1;
    }
    Ok(Histogram::from_bins(bins))
}

pub fn to_grayscale(image: &Image) -> Image {
    if image.channels == 1 {
        return image.clone();
    }
    let pixels = image
        .pixels
        .chunks_exact(3)
        .map(|rgb| 0.299 * rgb[0] + 0.587 * rgb[1] + 0.114 * rgb[2])
        .collect();
    Image {
        width: image.width,
        height: image.height,
        channels: 1,
        pixels,
    }
}

struct HeaderCursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl HeaderCursor<'_> {
    fn skip_space_and_comments(&mut self) {
        while self.pos < self.bytes.len() {
            let b = self.bytes[self.pos];
            if b.is_ascii_whitespace() {
                self.pos += 1;
            } else if b == b'#' {
                while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                    self.pos += 1;
                }
            } else {
                break;
            }
        }
    }

    fn token(&mut self) -> Option<&[u8]> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.pos < self.bytes.len() && !self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        (self.pos > start).then(|| &self.bytes[start..self.pos])
    }

    fn number(&mut self, what: &str) -> Result<usize, String> {
        let tok = self.token().ok_or_else(|| format!("missing {what}"))?;
        std::str::from_utf8(tok)
            .ok()
            .and_then(|s| s.parse::<usize>().ok())
            .ok_or_else(|| format!("invalid {what} {:?}", String::from_utf8_lossy(tok)))
    }
}

/// Decodes an in-memory `P5`/`P6` file. `path` is only used in errors.
pub fn decode_pnm(bytes: &[u8], path: &Path) -> Result<Image, ImageError> {
    let malformed = |reason: String| ImageError::MalformedHeader {
        path: path.to_path_buf(),
        reason,
    };
    let mut cur = HeaderCursor { bytes, pos: 0 };
    let channels = match cur.token() {
        Some(b"P5") => 1,
        Some(b"P6") => 3,
        Some(other) => {
            return Err(malformed(format!(
                "unsupported magic {:?}",
                String::from_utf8_lossy(other)
            )))
        }
        None => return Err(malformed("empty file".into())),
    };
    let width = cur.number("width").map_err(malformed)?;
    let height = cur.number("height").map_err(malformed)?;
    let maxval = cur.number("maxval").map_err(malformed)?;
    if width == 0 || height == 0 {
        return Err(malformed(format!("zero dimension {width}x{height}")));
    }
    if maxval != 255 {
        return Err(malformed(format!("maxval must be 255, got {maxval}")));
    }
    // Exactly one whitespace byte separates the header from the raster.
    match bytes.get(cur.pos) {
        Some(b) if b.is_ascii_whitespace() => cur.pos += 1,
        _ => return Err(malformed("missing whitespace after maxval".into())),
    }
    let expected = width * height * channels;
    let raster = &bytes[cur.pos..];
    if raster.len() < expected {
        return Err(ImageError::Truncated {
            path: path.to_path_buf(),
            expected,
            found: raster.len(),
        });
    }
    let pixels = raster[..expected].iter().map(|&b| b as f64 / 255.0).collect();
    Ok(Image {
        width,
        height,
        channels,
        pixels,
    })
}

/// Encodes as `P5` (1 channel) or `P6` (3 channels).
pub fn encode_pnm(image: &Image) -> Vec<u8> {
    let magic = if image.channels == 1 { "P5" } else { "P6" };
    let mut out = format!("{magic}\n{} {}\n255\n", image.width, image.height).into_bytes();
    out.extend(image.pixels.iter().map(|&v| to_byte(v)));
    out
}

pub fn load_image(path: impl AsRef<Path>) -> Result<Image, ImageError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|source| {
        if source.kind() == io::ErrorKind::NotFound {
            ImageError::NotFound(path.to_path_buf())
        } else {
            ImageError::Io {
                path: path.to_path_buf(),
                source,
            }
        }
    })?;
    decode_pnm(&bytes, path)
}

pub fn save_image(image: &Image, path: impl AsRef<Path>) -> Result<(), ImageError> {
    let path = path.as_ref();
    let io_err = |source| ImageError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut file = fs::File::create(path).map_err(io_err)?;
    file.write_all(&encode_pnm(image)).map_err(io_err)?;
    Ok(())
}
