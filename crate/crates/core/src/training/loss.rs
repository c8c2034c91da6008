//! Objectives evaluated at target pixels only. Each returns the mean loss and
//! its gradient with respect to the network outputs it was given.

use crate::data::NormStats;
use crate::error::{Error, Result};
use crate::noise_model::NoiseModel;
use crate::scalar::{pairwise_sum, Scalar};

fn check_finite<T: Scalar>(values: &[T], what: &str) -> Result<()> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(i) => Err(Error::NonFinite(format!("{what}[{i}] = {}", values[i]))),
        None => Ok(()),
    }
}

/// Negative log of the mean likelihood of each observation under the `K`
/// predicted signal samples, averaged over pixels.
///
/// `samples` is pixel-major (`targets.len() x k`) in standardized units;
/// `targets` are raw observations.
pub fn pn2v_loss<T: Scalar>(
    samples: &[T],
    k: usize,
    targets: &[f64],
    model: &NoiseModel,
    stats: &NormStats,
) -> Result<(f64, Vec<T>)> {
    if k == 0 {
        return Err(Error::InvalidConfig("need at least one sample per pixel".into()));
    }
    if samples.len() != targets.len() * k {
        return Err(Error::ShapeMismatch(format!(
            "{} samples for {} pixels at K={k}",
            samples.len(),
            targets.len()
        )));
    }
    if targets.is_empty() {
        return Err(Error::EmptyInput("loss needs at least one target pixel"));
    }
    check_finite(samples, "sample")?;
    let n = targets.len() as f64;
    let ln_k = (k as f64).ln();
    let mut per_pixel = Vec::with_capacity(targets.len());
    let mut grad = vec![T::zero(); samples.len()];
    let mut p = vec![0.0; k];
    let mut dp = vec![0.0; k];
    let mut w = vec![0.0; k];
    for (i, &x) in targets.iter().enumerate() {
        let col = model.column(x);
        let row = &samples[i * k..(i + 1) * k];
        for j in 0..k {
            let s = stats.destandardize(row[j].f64());
            (p[j], dp[j]) = model.likelihood_and_grad_at(col, s);
        }
        let m = p.iter().fold(f64::NEG_INFINITY, |a, &v| a.max(v.ln()));
        for j in 0..k {
            w[j] = (p[j].ln() - m).exp();
        }
        let z = pairwise_sum(&w);
        per_pixel.push(ln_k - m - z.ln());
        for j in 0..k {
            // d/ds_j of -ln sum p = -p'_j / sum p = -(p'_j / p_j) * (w_j / z).
            let g = -(dp[j] / p[j]) * (w[j] / z) * stats.std / n;
            grad[i * k + j] = T::of(g);
        }
    }
    let loss = pairwise_sum(&per_pixel) / n;
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!("pn2v loss = {loss}")));
    }
    Ok((loss, grad))
}

fn mse<T: Scalar>(pred: &[T], targets: &[T]) -> Result<(f64, Vec<T>)> {
    if pred.len() != targets.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} predictions for {} targets",
            pred.len(),
            targets.len()
        )));
    }
    if pred.is_empty() {
        return Err(Error::EmptyInput("loss needs at least one target pixel"));
    }
    check_finite(pred, "prediction")?;
    let n = pred.len() as f64;
    let diff: Vec<f64> = pred.iter().zip(targets).map(|(a, b)| a.f64() - b.f64()).collect();
    let sq: Vec<f64> = diff.iter().map(|d| d * d).collect();
    let grad = diff.iter().map(|d| T::of(2.0 * d / n)).collect();
    Ok((pairwise_sum(&sq) / n, grad))
}

/// Mean squared error between predictions and the hidden observations at
/// blind-spots, both standardized.
pub fn n2v_loss<T: Scalar>(pred: &[T], targets: &[T]) -> Result<(f64, Vec<T>)> {
    mse(pred, targets)
}

/// Mean squared error against clean signal over every patch pixel.
pub fn supervised_loss<T: Scalar>(pred: &[T], clean: &[T]) -> Result<(f64, Vec<T>)> {
    mse(pred, clean)
}
