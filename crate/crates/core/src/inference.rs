//! Per-pixel estimates from predicted samples and tiled whole-image denoising.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;

use crate::data::ImageArray;
use crate::error::{Error, Result};
use crate::network::{Tensor, UNetConfig};
use crate::noise_model::NoiseModel;
use crate::scalar::{pairwise_sum, Scalar};
use crate::training::{Checkpoint, TrainMode};

/// Weighted mean of `samples`, clamped into their range so rounding can
/// never push it outside the convex hull.
pub fn weighted_mean(samples: &[f64], weights: &[f64]) -> f64 {
    debug_assert_eq!(samples.len(), weights.len());
    let num: Vec<f64> = samples.iter().zip(weights).map(|(s, w)| s * w).collect();
    let est = pairwise_sum(&num) / pairwise_sum(weights);
    let (lo, hi) = samples.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &s| (a.min(s), b.max(s)));
    est.clamp(lo, hi)
}

/// Likelihood weights `p(x | s_k)` of each raw-domain sample.
pub fn posterior_weights(samples: &[f64], x: f64, model: &NoiseModel) -> Vec<f64> {
    let col = model.column(x);
    samples.iter().map(|&s| model.likelihood_at(col, s)).collect()
}

/// Posterior mean of the signal given raw-domain prior samples and the
/// observation `x`: each sample weighted by its likelihood.
///
/// Panics if `samples` is empty.
pub fn mmse_estimate(samples: &[f64], x: f64, model: &NoiseModel) -> f64 {
    assert!(!samples.is_empty(), "mmse_estimate needs at least one sample");
    weighted_mean(samples, &posterior_weights(samples, x, model))
}

/// Mean of the prior samples, ignoring the observation.
///
/// Panics if `samples` is empty.
pub fn prior_mean(samples: &[f64]) -> f64 {
    assert!(!samples.is_empty(), "prior_mean needs at least one sample");
    pairwise_sum(samples) / samples.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DenoiseMode {
    /// Likelihood-weighted sample mean; needs a pn2v checkpoint and noise model.
    Mmse,
    /// Plain sample mean.
    PriorMean,
    /// The single prediction of an n2v or supervised network.
    N2vDirect,
}

impl fmt::Display for DenoiseMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DenoiseMode::Mmse => "mmse",
            DenoiseMode::PriorMean => "prior_mean",
            DenoiseMode::N2vDirect => "n2v_direct",
        })
    }
}

impl FromStr for DenoiseMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mmse" => Ok(DenoiseMode::Mmse),
            "prior_mean" => Ok(DenoiseMode::PriorMean),
            "n2v_direct" => Ok(DenoiseMode::N2vDirect),
            _ => Err(Error::InvalidConfig(format!("unknown denoise mode `{s}` (mmse, prior_mean, n2v_direct)"))),
        }
    }
}

/// Square tiles of side `tile`; the outer `overlap` pixels of each tile are
/// context only and never written.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TilingConfig {
    pub tile: usize,
    pub overlap: usize,
}

impl TilingConfig {
    /// Smallest valid overlap for `net` and a tile with a `core`-pixel interior.
    pub fn for_network(net: &UNetConfig, core: usize) -> Self {
        let m = net.size_multiple();
        let overlap = net.receptive_field_radius().div_ceil(m) * m;
        TilingConfig { tile: core.div_ceil(m) * m + 2 * overlap, overlap }
    }

    /// Tiles and overlaps must keep the pooling grid aligned with the image,
    /// and the overlap must hide every zero-padded tile edge from the
    /// receptive field of written pixels.
    pub fn validate(&self, net: &UNetConfig) -> Result<()> {
        let m = net.size_multiple();
        let radius = net.receptive_field_radius();
        if self.tile % m != 0 || self.overlap % m != 0 {
            return Err(Error::InvalidConfig(format!(
                "tile {} and overlap {} must be multiples of {m}",
                self.tile, self.overlap
            )));
        }
        if self.overlap < radius {
            return Err(Error::InvalidConfig(format!(
                "overlap {} is below the receptive-field radius {radius}",
                self.overlap
            )));
        }
        if self.tile <= 2 * self.overlap {
            return Err(Error::InvalidConfig(format!(
                "tile {} leaves no interior with overlap {}",
                self.tile, self.overlap
            )));
        }
        Ok(())
    }

    fn core(&self) -> usize {
        self.tile - 2 * self.overlap
    }
}

/// Samples and likelihood weights behind one output pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelPosterior {
    pub row: usize,
    pub col: usize,
    /// Raw observation.
    pub x: f64,
    /// Raw-domain signal samples.
    pub samples: Vec<f64>,
    /// Unnormalized weights; all ones when the mode ignores the observation.
    pub weights: Vec<f64>,
}

impl PixelPosterior {
    /// The estimate these samples and weights produce.
    pub fn estimate(&self) -> f64 {
        weighted_mean(&self.samples, &self.weights)
    }
}

fn join(values: &[f64]) -> String {
    values.iter().map(|v| format!("{v:?}")).collect::<Vec<_>>().join(",")
}

/// One line: `row=R col=C x=X samples=s1,s2,... weights=w1,w2,...`. Values
/// are printed so they parse back exactly.
impl fmt::Display for PixelPosterior {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "row={} col={} x={:?} samples={} weights={}",
            self.row,
            self.col,
            self.x,
            join(&self.samples),
            join(&self.weights)
        )
    }
}

impl FromStr for PixelPosterior {
    type Err = Error;

    fn from_str(line: &str) -> Result<Self> {
        let bad = || Error::Format(format!("bad posterior record `{line}`"));
        let mut fields = std::collections::HashMap::new();
        for part in line.split_whitespace() {
            let (k, v) = part.split_once('=').ok_or_else(bad)?;
            fields.insert(k, v);
        }
        let get = |k: &str| fields.get(k).copied().ok_or_else(bad);
        let list = |k: &str| -> Result<Vec<f64>> {
            get(k)?.split(',').map(|v| v.parse().map_err(|_| bad())).collect()
        };
        let rec = PixelPosterior {
            row: get("row")?.parse().map_err(|_| bad())?,
            col: get("col")?.parse().map_err(|_| bad())?,
            x: get("x")?.parse().map_err(|_| bad())?,
            samples: list("samples")?,
            weights: list("weights")?,
        };
        if rec.samples.is_empty() || rec.samples.len() != rec.weights.len() {
            return Err(bad());
        }
        Ok(rec)
    }
}

#[derive(Debug, Clone)]
pub struct Denoised {
    pub image: ImageArray,
    /// One record per requested coordinate, in request order.
    pub posteriors: Vec<PixelPosterior>,
    pub warnings: Vec<String>,
}

/// Index into `0..n` of position `i` after mirror padding (edge pixel not
/// repeated), for any integer `i`.
fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    (if m < n as isize { m } else { period - m }) as usize
}

/// Checks that `mode` is usable with `ck` and `model`; returns warnings.
pub fn check_mode<T: Scalar>(ck: &Checkpoint<T>, mode: DenoiseMode, model: Option<&NoiseModel>) -> Result<Vec<String>> {
    let mut warnings = Vec::new();
    match mode {
        DenoiseMode::Mmse => {
            let model = model.ok_or_else(|| Error::ModeMismatch("noise model required for mmse denoising".into()))?;
            warnings.extend(ck.check_noise_model(model)?);
        }
        DenoiseMode::PriorMean => {
            if ck.mode != TrainMode::Pn2v {
                return Err(Error::ModeMismatch(format!(
                    "prior_mean needs a pn2v checkpoint, got {}",
                    ck.mode
                )));
            }
        }
        DenoiseMode::N2vDirect => {
            if ck.mode == TrainMode::Pn2v {
                return Err(Error::ModeMismatch("n2v_direct needs an n2v or supervised checkpoint, got pn2v".into()));
            }
        }
    }
    Ok(warnings)
}

/// Denoises `image` tile by tile.
///
/// The image is standardized and mirror-padded; each tile's network output
/// is turned into raw-domain estimates and only its interior is written, so
/// every output pixel comes from exactly one tile. `dump` lists pixel
/// coordinates whose posteriors are returned.
pub fn denoise_image<T: Scalar>(
    ck: &Checkpoint<T>,
    image: &ImageArray,
    tiling: &TilingConfig,
    mode: DenoiseMode,
    model: Option<&NoiseModel>,
    dump: &[(usize, usize)],
) -> Result<Denoised> {
    let warnings = check_mode(ck, mode, model)?;
    let net_cfg = ck.net.config();
    tiling.validate(net_cfg)?;
    let (h, w) = image.shape();
    if let Some(&(r, c)) = dump.iter().find(|&&(r, c)| r >= h || c >= w) {
        return Err(Error::ShapeMismatch(format!("posterior coordinate ({r}, {c}) outside {h}x{w} image")));
    }
    let (core, pad) = (tiling.core(), tiling.overlap);
    let (tiles_r, tiles_c) = (h.div_ceil(core), w.div_ceil(core));
    let std_img = ck.stats.standardize_image(image);
    let k = net_cfg.out_channels;

    let tiles: Vec<(usize, usize)> = (0..tiles_r).flat_map(|i| (0..tiles_c).map(move |j| (i, j))).collect();
    type TileResult = (Vec<(usize, Vec<f32>)>, Vec<(usize, PixelPosterior)>);
    let results: Vec<Result<TileResult>> = tiles
        .par_iter()
        .map(|&(ti, tj)| {
            let out = run_tile(ck, &std_img, tiling, ti, tj)?;
            let owned = dump
                .iter()
                .enumerate()
                .filter(|(_, &(r, c))| (r / core, c / core) == (ti, tj))
                .map(|(i, &(r, c))| (i, posterior_at(ck, &out, image, tiling, mode, model, r, c)))
                .collect();
            let mut rows = Vec::new();
            let mut samples = vec![0.0; k];
            for y in 0..core.min(h - ti * core) {
                let row = ti * core + y;
                let cols = core.min(w - tj * core);
                let mut vals = Vec::with_capacity(cols);
                for x in 0..cols {
                    let col = tj * core + x;
                    for (j, s) in samples.iter_mut().enumerate() {
                        *s = ck.stats.destandardize(out.at(0, j, y + pad, x + pad).f64());
                    }
                    let est = match mode {
                        DenoiseMode::Mmse => mmse_estimate(&samples, image.get(row, col) as f64, model.expect("checked")),
                        DenoiseMode::PriorMean | DenoiseMode::N2vDirect => prior_mean(&samples),
                    };
                    vals.push(est as f32);
                }
                rows.push((row, vals));
            }
            Ok((rows, owned))
        })
        .collect();

    let mut pixels = vec![0.0f32; h * w];
    let mut found = Vec::with_capacity(dump.len());
    for (t, res) in tiles.iter().zip(results) {
        let (rows, owned) = res?;
        for (row, vals) in rows {
            let c0 = t.1 * core;
            pixels[row * w + c0..row * w + c0 + vals.len()].copy_from_slice(&vals);
        }
        found.extend(owned);
    }
    found.sort_by_key(|(i, _)| *i);
    let posteriors = found.into_iter().map(|(_, p)| p).collect();
    Ok(Denoised { image: ImageArray::new(h, w, pixels)?, posteriors, warnings })
}

/// Network output for tile `(ti, tj)`; its interior starts at image pixel
/// `(ti * core, tj * core)`.
fn run_tile<T: Scalar>(
    ck: &Checkpoint<T>,
    std_img: &ImageArray,
    tiling: &TilingConfig,
    ti: usize,
    tj: usize,
) -> Result<Tensor<T>> {
    let (h, w) = std_img.shape();
    let (core, pad, n) = (tiling.core(), tiling.overlap as isize, tiling.tile);
    let (r0, c0) = ((ti * core) as isize - pad, (tj * core) as isize - pad);
    let tile: Vec<T> = (0..n * n)
        .map(|p| T::of(std_img.get(reflect(r0 + (p / n) as isize, h), reflect(c0 + (p % n) as isize, w)) as f64))
        .collect();
    ck.net.forward(&Tensor::new([1, 1, n, n], tile)?)
}

/// Posterior of `(row, col)` read from the output of the tile that owns it.
#[allow(clippy::too_many_arguments)]
fn posterior_at<T: Scalar>(
    ck: &Checkpoint<T>,
    out: &Tensor<T>,
    image: &ImageArray,
    tiling: &TilingConfig,
    mode: DenoiseMode,
    model: Option<&NoiseModel>,
    row: usize,
    col: usize,
) -> PixelPosterior {
    let (core, pad) = (tiling.core(), tiling.overlap);
    let (ti, tj) = (row / core, col / core);
    let (y, x) = (row - ti * core + pad, col - tj * core + pad);
    let samples: Vec<f64> =
        (0..out.channels()).map(|j| ck.stats.destandardize(out.at(0, j, y, x).f64())).collect();
    let obs = image.get(row, col) as f64;
    let weights = match mode {
        DenoiseMode::Mmse => posterior_weights(&samples, obs, model.expect("checked")),
        _ => vec![1.0; samples.len()],
    };
    PixelPosterior { row, col, x: obs, samples, weights }
}
