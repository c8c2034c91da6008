//! Image-quality metrics and their aggregation over a test set.

use std::fmt::{self, Write as _};
use std::str::FromStr;

use rayon::prelude::*;

use crate::data::ImageArray;
use crate::error::{Error, Result};
use crate::scalar::{pairwise_sum, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MetricKind {
    Psnr,
    /// PSNR after the least-squares affine fit of the prediction onto the
    /// ground truth.
    SiPsnr,
}

impl fmt::Display for MetricKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MetricKind::Psnr => "psnr",
            MetricKind::SiPsnr => "si_psnr",
        })
    }
}

impl FromStr for MetricKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "psnr" => Ok(MetricKind::Psnr),
            "si_psnr" => Ok(MetricKind::SiPsnr),
            _ => Err(Error::InvalidConfig(format!("unknown metric `{s}` (psnr, si_psnr)"))),
        }
    }
}

fn check_pair<T>(pred: &[T], gt: &[T]) -> Result<()> {
    if pred.len() != gt.len() {
        return Err(Error::ShapeMismatch(format!("{} predicted values for {} ground-truth values", pred.len(), gt.len())));
    }
    if gt.is_empty() {
        return Err(Error::EmptyInput("metric needs at least one pixel"));
    }
    Ok(())
}

fn dynamic_range<T: Scalar>(gt: &[T]) -> f64 {
    let (lo, hi) = gt.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v.f64()), b.max(v.f64())));
    hi - lo
}

fn mse_to_db(peak: f64, mse: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (peak * peak / mse).log10()
    }
}

fn resolve_peak<T: Scalar>(gt: &[T], peak: Option<f64>) -> Result<f64> {
    let peak = match peak {
        Some(p) => p,
        None => {
            let range = dynamic_range(gt);
            if range == 0.0 {
                return Err(Error::InvalidConfig("constant ground truth needs an explicit peak".into()));
            }
            range
        }
    };
    if !(peak.is_finite() && peak > 0.0) {
        return Err(Error::InvalidConfig(format!("peak must be positive and finite, got {peak}")));
    }
    Ok(peak)
}

/// `10 log10(peak^2 / MSE)` in dB; `peak` defaults to the ground-truth range.
/// Identical inputs give `+inf`.
pub fn psnr<T: Scalar>(pred: &[T], gt: &[T], peak: Option<f64>) -> Result<f64> {
    check_pair(pred, gt)?;
    let peak = resolve_peak(gt, peak)?;
    let sq: Vec<f64> = pred.iter().zip(gt).map(|(p, g)| (p.f64() - g.f64()).powi(2)).collect();
    Ok(mse_to_db(peak, pairwise_sum(&sq) / sq.len() as f64))
}

/// PSNR of `a * pred + b` against `gt`, where `a, b` minimize the squared
/// error. Any affine change of `pred` with nonzero scale leaves it unchanged.
pub fn si_psnr<T: Scalar>(pred: &[T], gt: &[T]) -> Result<f64> {
    check_pair(pred, gt)?;
    let peak = resolve_peak(gt, None)?;
    let n = pred.len() as f64;
    let p: Vec<f64> = pred.iter().map(|v| v.f64()).collect();
    let g: Vec<f64> = gt.iter().map(|v| v.f64()).collect();
    let (mp, mg) = (pairwise_sum(&p) / n, pairwise_sum(&g) / n);
    let pc: Vec<f64> = p.iter().map(|v| v - mp).collect();
    let var = pairwise_sum(&pc.iter().map(|v| v * v).collect::<Vec<_>>());
    if var == 0.0 {
        return Err(Error::InvalidConfig("constant prediction has no affine fit".into()));
    }
    let cov = pairwise_sum(&pc.iter().zip(&g).map(|(a, b)| a * (b - mg)).collect::<Vec<_>>());
    let a = cov / var;
    // Residual of the fit a * (p - mp) + mg, centred form for accuracy.
    let sq: Vec<f64> = pc.iter().zip(&g).map(|(c, gv)| (a * c + mg - gv).powi(2)).collect();
    let mse = pairwise_sum(&sq) / n;
    // A residual at rounding level means the fit is exact.
    let rounding = (64.0 * f64::EPSILON * peak).powi(2);
    Ok(if mse <= rounding { f64::INFINITY } else { mse_to_db(peak, mse) })
}

fn image_metric(pred: &ImageArray, gt: &ImageArray, metric: MetricKind) -> Result<f64> {
    if pred.shape() != gt.shape() {
        return Err(Error::ShapeMismatch(format!("prediction {:?} vs ground truth {:?}", pred.shape(), gt.shape())));
    }
    match metric {
        MetricKind::Psnr => psnr(pred.pixels(), gt.pixels(), None),
        MetricKind::SiPsnr => si_psnr(pred.pixels(), gt.pixels()),
    }
}

/// Per-image values with their mean and twice the standard error.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub values: Vec<f64>,
    pub mean: f64,
    /// `2 * s / sqrt(n)` with the `n - 1` sample standard deviation.
    pub two_sem: f64,
    pub metric: MetricKind,
    pub warnings: Vec<String>,
}

impl EvalReport {
    pub fn from_values(values: Vec<f64>, metric: MetricKind) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::EmptyInput("report needs at least one value"));
        }
        let n = values.len() as f64;
        let mean = pairwise_sum(&values) / n;
        let mut warnings = Vec::new();
        let two_sem = if values.len() == 1 {
            warnings.push("single image: standard error undefined, reported as 0".to_owned());
            0.0
        } else {
            let dev: Vec<f64> = values.iter().map(|v| (v - mean).powi(2)).collect();
            2.0 * (pairwise_sum(&dev) / (n - 1.0)).sqrt() / n.sqrt()
        };
        Ok(EvalReport { values, mean, two_sem, metric, warnings })
    }

    /// `mean ± 2SEM` with two decimals.
    pub fn summary(&self) -> String {
        format!("{:.2} ± {:.2}", self.mean, self.two_sem)
    }

    /// Aligned text table, one row per image plus a summary row.
    pub fn table(&self, names: &[String]) -> String {
        let label = |i: usize| names.get(i).cloned().unwrap_or_else(|| i.to_string());
        let width = (0..self.values.len()).map(|i| label(i).len()).max().unwrap_or(0).max("mean ± 2SEM".len());
        let metric = self.metric.to_string();
        let mut out = String::new();
        let _ = writeln!(out, "{:<width$}  {:>12}", "image", metric);
        for (i, v) in self.values.iter().enumerate() {
            let _ = writeln!(out, "{:<width$}  {:>12.4}", label(i), v);
        }
        let _ = writeln!(out, "{:<width$}  {:>12}", "mean ± 2SEM", self.summary());
        out
    }

    /// CSV with header `image,value,metric`.
    pub fn records(&self, names: &[String]) -> String {
        let mut out = String::from("image,value,metric\n");
        for (i, v) in self.values.iter().enumerate() {
            let name = names.get(i).cloned().unwrap_or_else(|| i.to_string());
            let _ = writeln!(out, "{name},{v:?},{}", self.metric);
        }
        out
    }
}

/// Scores each prediction against its ground truth. Errors name the image
/// index that caused them.
pub fn evaluate_set(preds: &[ImageArray], gts: &[ImageArray], metric: MetricKind) -> Result<EvalReport> {
    if preds.is_empty() {
        return Err(Error::EmptyInput("evaluation needs at least one image"));
    }
    if preds.len() != gts.len() {
        return Err(Error::ShapeMismatch(format!("{} predictions for {} ground-truth images", preds.len(), gts.len())));
    }
    let values = preds
        .par_iter()
        .zip(gts)
        .enumerate()
        .map(|(i, (p, g))| image_metric(p, g, metric).map_err(|e| e.at_image(i)))
        .collect::<Result<Vec<_>>>()?;
    EvalReport::from_values(values, metric)
}
