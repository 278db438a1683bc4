//! Noise filtering, background subtraction and contrast normalization.

use thiserror::Error;

use crate::imagecore::{Image, ImageError};

/// Floor applied to a channel's standard deviation by default.
pub const DEFAULT_CN_EPSILON: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum PreprocessError {
    #[error("gaussian sigma must be positive and finite, got {0}")]
    Sigma(f64),
    #[error("gaussian radius must be at least 1, got {0}")]
    Radius(usize),
    #[error("contrast normalization epsilon must be positive, got {0}")]
    Epsilon(f64),
    #[error("shape mismatch: frame {frame:?} vs background {background:?}")]
    ShapeMismatch {
        frame: (usize, usize, usize),
        background: (usize, usize, usize),
    },
    #[error(transparent)]
    Image(#[from] ImageError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianConfig {
    pub sigma: f64,
    pub radius: usize,
}

impl GaussianConfig {
    /// Truncates the kernel at `ceil(3 sigma)` (at least 1).
    pub fn with_sigma(sigma: f64) -> Result<Self, PreprocessError> {
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(PreprocessError::Sigma(sigma));
        }
        let radius = ((3.0 * sigma).ceil() as usize).max(1);
        Self::new(sigma, radius)
    }

    pub fn new(sigma: f64, radius: usize) -> Result<Self, PreprocessError> {
        let config = Self { sigma, radius };
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), PreprocessError> {
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(PreprocessError::Sigma(self.sigma));
        }
        if self.radius < 1 {
            return Err(PreprocessError::Radius(self.radius));
        }
        Ok(())
    }
}

/// Square, unit-sum Gaussian kernel of side `2 * radius + 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct Kernel {
    radius: usize,
    weights: Vec<f64>,
}

impl Kernel {
    pub fn radius(&self) -> usize {
        self.radius
    }

    pub fn side(&self) -> usize {
        2 * self.radius + 1
    }

    /// Row-major weights; `weights()[(dy + r) * side + (dx + r)]`.
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn at(&self, dx: isize, dy: isize) -> f64 {
        let r = self.radius as isize;
        self.weights[((dy + r) * self.side() as isize + (dx + r)) as usize]
    }
}

pub fn gaussian_kernel(config: &GaussianConfig) -> Result<Kernel, PreprocessError> {
    config.validate()?;
    let r = config.radius as isize;
    let two_sigma_sq = 2.0 * config.sigma * config.sigma;
    let mut weights = Vec::with_capacity((2 * config.radius + 1).pow(2));
    for dy in -r..=r {
        for dx in -r..=r {
            weights.push((-((dx * dx + dy * dy) as f64) / two_sigma_sq).exp());
        }
    }
    let total: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|w| *w /= total);
    Ok(Kernel {
        radius: config.radius,
        weights,
    })
}

/// Per-channel 2-D convolution with the Gaussian kernel. Out-of-range
/// samples replicate the nearest edge pixel.
pub fn gaussian_filter(image: &Image, config: &GaussianConfig) -> Result<Image, PreprocessError> {
    let kernel = gaussian_kernel(config)?;
    let (w, h, ch) = (image.width(), image.height(), image.channels());
    let r = kernel.radius as isize;
    let side = kernel.side();
    let src = image.pixels();

    let mut out = vec![0.0; src.len()];
    for y in 0..h {
        for x in 0..w {
            for c in 0..ch {
                let mut acc = 0.0;
                for (ky, row) in kernel.weights.chunks_exact(side).enumerate() {
                    let sy = (y as isize + ky as isize - r).clamp(0, h as isize - 1) as usize;
                    for (kx, &wgt) in row.iter().enumerate() {
                        let sx = (x as isize + kx as isize - r).clamp(0, w as isize - 1) as usize;
                        acc += wgt * src[(sy * w + sx) * ch + c];
                    }
                }
                out[(y * w + x) * ch + c] = acc;
            }
        }
    }
    Ok(Image::new(w, h, ch, out)?)
}

fn dims(image: &Image) -> (usize, usize, usize) {
    (image.width(), image.height(), image.channels())
}

/// Absolute per-pixel difference against a reference background.
pub fn background_subtract(frame: &Image, background: &Image) -> Result<Image, PreprocessError> {
    if !frame.same_shape(background) {
        return Err(PreprocessError::ShapeMismatch {
            frame: dims(frame),
            background: dims(background),
        });
    }
    let pixels = frame
        .pixels()
        .iter()
        .zip(background.pixels())
        .map(|(a, b)| (a - b).abs())
        .collect();
    Ok(Image::new(frame.width(), frame.height(), frame.channels(), pixels)?)
}

/// Standardizes each channel to zero mean and unit population standard
/// deviation. The deviation is floored at `epsilon`.
pub fn contrast_normalize(image: &Image, epsilon: f64) -> Result<Image, PreprocessError> {
    if epsilon.is_nan() || epsilon <= 0.0 {
        return Err(PreprocessError::Epsilon(epsilon));
    }
    let ch = image.channels();
    let n = (image.width() * image.height()) as f64;
    let mut out = image.pixels().to_vec();
    for c in 0..ch {
        let pivot = image.pixels()[c];
        let mean = pivot
            + image
                .pixels()
                .iter()
                .skip(c)
                .step_by(ch)
                .map(|v| v - pivot)
                .sum::<f64>()
                / n;
        let var = image
            .pixels()
            .iter()
            .skip(c)
            .step_by(ch)
            .map(|v| (v - mean).powi(2))
            .sum::<f64>()
            / n;
        let std = var.sqrt().max(epsilon);
        for v in out.iter_mut().skip(c).step_by(ch) {
            *v = (*v - mean) / std;
        }
    }
    Ok(Image::new(image.width(), image.height(), ch, out)?)
}
