use crate::data::ImageArray;
use crate::error::{Error, Result};

const MIN_STD: f64 = 1e-12;

/// Affine bridge between raw intensities and the zero-mean, unit-variance
/// space the network operates in.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormStats {
    pub mean: f64,
    pub std: f64,
}

impl NormStats {
    pub fn new(mean: f64, std: f64) -> Result<Self> {
        if !mean.is_finite() || !std.is_finite() || std <= 0.0 {
            return Err(Error::InvalidConfig(format!("normalization needs finite mean and std > 0, got ({mean}, {std})")));
        }
        Ok(NormStats { mean, std })
    }

    #[inline]
    pub fn standardize(&self, raw: f64) -> f64 {
        (raw - self.mean) / self.std
    }

    #[inline]
    pub fn destandardize(&self, value: f64) -> f64 {
        value * self.std + self.mean
    }

    pub fn standardize_image(&self, img: &ImageArray) -> ImageArray {
        img.map(|v| self.standardize(v as f64) as f32).expect("finite affine map of a finite image")
    }

    pub fn destandardize_image(&self, img: &ImageArray) -> ImageArray {
        img.map(|v| self.destandardize(v as f64) as f32).expect("finite affine map of a finite image")
    }
}

/// Mean and population standard deviation over every pixel of every image.
/// A standard deviation below 1e-12 is replaced by 1.
pub fn compute_stats(images: &[ImageArray]) -> Result<NormStats> {
    if images.is_empty() {
        return Err(Error::EmptyInput("compute_stats needs at least one image"));
    }
    let n: usize = images.iter().map(ImageArray::len).sum();
    let mean = images.iter().flat_map(|i| i.pixels()).map(|&v| v as f64).sum::<f64>() / n as f64;
    let var = images
        .iter()
        .flat_map(|i| i.pixels())
        .map(|&v| (v as f64 - mean).powi(2))
        .sum::<f64>()
        / n as f64;
    let std = var.sqrt();
    NormStats::new(mean, if std < MIN_STD { 1.0 } else { std })
}
