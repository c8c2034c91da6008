//! Histogram observation likelihood `p(x | s)`.
//!
//! Rows index the clean signal `s`, columns the noisy observation `x`. Each
//! row is a density over `x` (per unit raw intensity). Queries interpolate
//! linearly between row centres, which makes the likelihood continuous and
//! piecewise-linear in `s`.

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::container::{self, Header};
use crate::data::ImageArray;
use crate::error::{Error, Result};

/// Smallest density any bin may hold, so `-ln p` stays finite.
pub const DENSITY_FLOOR: f64 = 1e-10;
/// Row-sum tolerance enforced on construction and load.
pub const ROW_SUM_TOLERANCE: f64 = 1e-6;
pub const DEFAULT_BINS: usize = 256;
/// Relative margin added on both sides of a data-derived range.
pub const RANGE_MARGIN: f64 = 1e-3;

const MAGIC: &str = "PN2V-NOISEMODEL";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseModel {
    bins_s: usize,
    bins_x: usize,
    range_min: f64,
    range_max: f64,
    /// Row-major `bins_s x bins_x`.
    density: Vec<f64>,
}

impl NoiseModel {
    /// Wraps a density matrix after checking every invariant.
    pub fn from_density(bins_s: usize, bins_x: usize, range: (f64, f64), density: Vec<f64>) -> Result<Self> {
        let model = NoiseModel { bins_s, bins_x, range_min: range.0, range_max: range.1, density };
        model.validate()?;
        Ok(model)
    }

    /// Density `1 / (range_max - range_min)` everywhere.
    pub fn uniform(bins_s: usize, bins_x: usize, range: (f64, f64)) -> Result<Self> {
        let width = range.1 - range.0;
        Self::from_density(bins_s, bins_x, range, vec![1.0 / width; bins_s * bins_x])
    }

    /// Tabulates `pdf(s, x)` at bin centres, normalizes each row and mixes
    /// in the density floor the same way [`build_histogram`] does.
    pub fn from_fn(
        bins_s: usize,
        bins_x: usize,
        range: (f64, f64),
        pdf: impl Fn(f64, f64) -> f64,
    ) -> Result<Self> {
        let grid = Self::uniform(bins_s, bins_x, range)?;
        let bw = grid.bin_width_x();
        let floor_mass = floor_mass(bins_x, bw)?;
        let mut density = Vec::with_capacity(bins_s * bins_x);
        for r in 0..bins_s {
            let s = grid.row_center(r);
            let row: Vec<f64> = (0..bins_x).map(|c| pdf(s, grid.column_center(c)).max(0.0)).collect();
            let total = row.iter().sum::<f64>() * bw;
            if !(total.is_finite() && total > 0.0) {
                return Err(Error::Validation(format!("density row {r} has mass {total}")));
            }
            density.extend(row.iter().map(|d| d / total * (1.0 - floor_mass) + DENSITY_FLOOR));
        }
        Self::from_density(bins_s, bins_x, range, density)
    }

    fn validate(&self) -> Result<()> {
        if self.bins_s == 0 || self.bins_x == 0 {
            return Err(Error::Validation("noise model needs at least one bin per axis".into()));
        }
        if !(self.range_min.is_finite() && self.range_max.is_finite() && self.range_max > self.range_min) {
            return Err(Error::DegenerateRange { min: self.range_min, max: self.range_max });
        }
        if self.density.len() != self.bins_s * self.bins_x {
            return Err(Error::Validation(format!(
                "density has {} entries, expected {}",
                self.density.len(),
                self.bins_s * self.bins_x
            )));
        }
        let bw = self.bin_width_x();
        for r in 0..self.bins_s {
            let row = self.row(r);
            if let Some(c) = row.iter().position(|d| !(d.is_finite() && *d >= DENSITY_FLOOR)) {
                return Err(Error::Validation(format!("row {r}, column {c}: density {} below floor", row[c])));
            }
            let sum: f64 = row.iter().sum::<f64>() * bw;
            if (sum - 1.0).abs() > ROW_SUM_TOLERANCE {
                return Err(Error::Validation(format!("row {r} integrates to {sum}, expected 1")));
            }
        }
        Ok(())
    }

    pub fn bins_s(&self) -> usize {
        self.bins_s
    }

    pub fn bins_x(&self) -> usize {
        self.bins_x
    }

    pub fn range(&self) -> (f64, f64) {
        (self.range_min, self.range_max)
    }

    pub fn bin_width_x(&self) -> f64 {
        (self.range_max - self.range_min) / self.bins_x as f64
    }

    /// Distance between adjacent row centres.
    pub fn row_spacing(&self) -> f64 {
        (self.range_max - self.range_min) / self.bins_s as f64
    }

    pub fn row_center(&self, r: usize) -> f64 {
        self.range_min + (r as f64 + 0.5) * self.row_spacing()
    }

    pub fn column_center(&self, c: usize) -> f64 {
        self.range_min + (c as f64 + 0.5) * self.bin_width_x()
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.density[r * self.bins_x..(r + 1) * self.bins_x]
    }

    pub fn density(&self) -> &[f64] {
        &self.density
    }

    /// Column holding observation `x`, clamped to the outermost bins.
    #[inline]
    pub fn column(&self, x: f64) -> usize {
        bin_index(x, self.range_min, self.bin_width_x(), self.bins_x)
    }

    /// Segment lookup along the signal axis: lower row, interpolation weight
    /// of the upper row, and whether `s` lies strictly inside the row centres
    /// (where the derivative is non-zero). At a knot the segment to the right
    /// is returned.
    #[inline]
    fn segment(&self, s: f64) -> (usize, f64, bool) {
        let t = (s - self.range_min) / self.row_spacing() - 0.5;
        let last = (self.bins_s - 1) as f64;
        if !(t >= 0.0) {
            (0, 0.0, false)
        } else if t >= last {
            (self.bins_s - 1, 0.0, false)
        } else {
            let r = t.floor() as usize;
            (r, t - r as f64, true)
        }
    }

    /// `p(x | s)` for a pre-computed column.
    #[inline]
    pub fn likelihood_at(&self, col: usize, s: f64) -> f64 {
        let (r, frac, inside) = self.segment(s);
        let lo = self.density[r * self.bins_x + col];
        if !inside {
            return lo;
        }
        let hi = self.density[(r + 1) * self.bins_x + col];
        lo + frac * (hi - lo)
    }

    /// `(p(x | s), dp/ds)` for a pre-computed column.
    #[inline]
    pub fn likelihood_and_grad_at(&self, col: usize, s: f64) -> (f64, f64) {
        let (r, frac, inside) = self.segment(s);
        let lo = self.density[r * self.bins_x + col];
        if !inside {
            return (lo, 0.0);
        }
        let hi = self.density[(r + 1) * self.bins_x + col];
        (lo + frac * (hi - lo), (hi - lo) / self.row_spacing())
    }

    /// `p(x | s)`, linear in `s` between row centres and constant beyond them.
    pub fn likelihood(&self, x: f64, s: f64) -> f64 {
        self.likelihood_at(self.column(x), s)
    }

    /// Exact derivative of [`likelihood`](Self::likelihood) in `s`; the
    /// right-hand derivative at knots, zero beyond the outermost row centres.
    pub fn likelihood_grad_s(&self, x: f64, s: f64) -> f64 {
        self.likelihood_and_grad_at(self.column(x), s).1
    }

    /// Whether `s` sits within `tol` (in row-spacing units) of an
    /// interpolation knot.
    pub fn near_knot(&self, s: f64, tol: f64) -> bool {
        let t = (s - self.range_min) / self.row_spacing() - 0.5;
        (t - t.round()).abs() < tol
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut payload = Vec::with_capacity(self.density.len() * 8);
        for d in &self.density {
            payload.extend_from_slice(&d.to_le_bytes());
        }
        let mut h = Header::new();
        h.put("version", VERSION)
            .put("bins_s", self.bins_s)
            .put("bins_x", self.bins_x)
            .put("range_min", self.range_min)
            .put("range_max", self.range_max)
            .put("payload", "f64le");
        h.encode(MAGIC, &payload)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let p = container::decode(bytes, MAGIC)?;
        p.check_version(VERSION)?;
        if p.raw("payload")? != "f64le" {
            return Err(Error::Format(format!("unsupported payload encoding `{}`", p.raw("payload")?)));
        }
        let bins_s: usize = p.get("bins_s")?;
        let bins_x: usize = p.get("bins_x")?;
        let payload = p.payload_exact(bins_s * bins_x * 8)?;
        let density = payload
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8-byte chunk")))
            .collect();
        Self::from_density(bins_s, bins_x, (p.get("range_min")?, p.get("range_max")?), density)
    }

    /// Hex SHA-256 of the serialized model.
    pub fn digest(&self) -> String {
        hex_digest(&self.to_bytes())
    }
}

pub(crate) fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[inline]
fn bin_index(v: f64, min: f64, width: f64, bins: usize) -> usize {
    let t = ((v - min) / width).floor();
    if !(t >= 0.0) {
        0
    } else if t >= bins as f64 {
        bins - 1
    } else {
        t as usize
    }
}

pub fn save_noise_model(model: &NoiseModel, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, model.to_bytes()).map_err(|e| Error::from(e).at_path(path))
}

pub fn load_noise_model(path: impl AsRef<Path>) -> Result<NoiseModel> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::from(e).at_path(path))?;
    NoiseModel::from_bytes(&bytes).map_err(|e| e.at_path(path))
}

/// Summary of how well the calibration data covered the signal axis.
#[derive(Debug, Clone, PartialEq)]
pub struct HistogramBuild {
    pub model: NoiseModel,
    pub filled_rows: usize,
    pub samples: u64,
}

impl HistogramBuild {
    pub fn row_coverage(&self) -> f64 {
        self.filled_rows as f64 / self.model.bins_s as f64
    }
}

/// Accumulates a 2D histogram from clean/noisy pairs (clean value picks the
/// row, noisy value the column) and turns it into a row-normalized density.
///
/// Without an explicit `range`, both axes share the union of all pixel
/// values widened by 0.1% on each side. Empty rows copy the nearest
/// non-empty row (the lower one on ties).
pub fn build_histogram(
    pairs: &[(ImageArray, ImageArray)],
    bins_s: usize,
    bins_x: usize,
    range: Option<(f64, f64)>,
) -> Result<HistogramBuild> {
    if pairs.is_empty() {
        return Err(Error::EmptyInput("noise model needs at least one clean/noisy pair"));
    }
    if bins_s == 0 || bins_x == 0 {
        return Err(Error::InvalidConfig("histogram needs at least one bin per axis".into()));
    }
    for (i, (s, x)) in pairs.iter().enumerate() {
        if s.shape() != x.shape() {
            return Err(Error::ShapeMismatch(format!(
                "pair {i}: clean {:?} vs noisy {:?}",
                s.shape(),
                x.shape()
            )));
        }
    }
    let (min, max) = match range {
        Some(r) => r,
        None => {
            let (lo, hi) = pairs
                .iter()
                .flat_map(|(s, x)| s.pixels().iter().chain(x.pixels()))
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v as f64), b.max(v as f64)));
            let margin = (hi - lo) * RANGE_MARGIN;
            (lo - margin, hi + margin)
        }
    };
    if !(min.is_finite() && max.is_finite() && max > min) {
        return Err(Error::DegenerateRange { min, max });
    }

    let bw_s = (max - min) / bins_s as f64;
    let bw_x = (max - min) / bins_x as f64;
    let mut counts = vec![0u64; bins_s * bins_x];
    for (s, x) in pairs {
        for (&sv, &xv) in s.pixels().iter().zip(x.pixels()) {
            let r = bin_index(sv as f64, min, bw_s, bins_s);
            let c = bin_index(xv as f64, min, bw_x, bins_x);
            counts[r * bins_x + c] += 1;
        }
    }
    let samples: u64 = counts.iter().sum();
    if samples == 0 {
        return Err(Error::EmptyInput("histogram received no samples"));
    }

    let row_totals: Vec<u64> = (0..bins_s).map(|r| counts[r * bins_x..(r + 1) * bins_x].iter().sum()).collect();
    let filled: Vec<usize> = (0..bins_s).filter(|&r| row_totals[r] > 0).collect();
    let floor_mass = floor_mass(bins_x, bw_x)?;
    let mut density = vec![0.0; bins_s * bins_x];
    for r in 0..bins_s {
        let src = nearest(&filled, r);
        let total = row_totals[src] as f64;
        let from = &counts[src * bins_x..(src + 1) * bins_x];
        for (d, &k) in density[r * bins_x..(r + 1) * bins_x].iter_mut().zip(from) {
            *d = (k as f64 / (total * bw_x)) * (1.0 - floor_mass) + DENSITY_FLOOR;
        }
    }
    let model = NoiseModel::from_density(bins_s, bins_x, (min, max), density)?;
    Ok(HistogramBuild { model, filled_rows: filled.len(), samples })
}

// Floor mixing keeps every bin >= DENSITY_FLOOR while preserving the row
// integral: d' = d (1 - n f w) + f.
fn floor_mass(bins_x: usize, bin_width: f64) -> Result<f64> {
    let mass = bins_x as f64 * DENSITY_FLOOR * bin_width;
    if mass >= 1.0 {
        return Err(Error::InvalidConfig(format!(
            "range width {} too large for the density floor",
            bins_x as f64 * bin_width
        )));
    }
    Ok(mass)
}

fn nearest(sorted: &[usize], r: usize) -> usize {
    match sorted.binary_search(&r) {
        Ok(_) => r,
        Err(i) if i == 0 => sorted[0],
        Err(i) if i == sorted.len() => sorted[i - 1],
        Err(i) => {
            let (lo, hi) = (sorted[i - 1], sorted[i]);
            if r - lo <= hi - r {
                lo
            } else {
                hi
            }
        }
    }
}
