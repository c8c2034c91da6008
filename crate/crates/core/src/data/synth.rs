//! Synthetic clean/noisy image pairs for calibration and benchmarking.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};

use crate::data::ImageArray;
use crate::error::{Error, Result};
use crate::seeded_rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NoiseKind {
    /// `x = s + N(0, sigma^2)`
    Gaussian,
    /// `x = gain * Poisson(s / gain) + N(0, sigma^2)`
    PoissonGaussian,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pattern {
    /// Smooth mixture of oriented 2D sinusoids.
    Sinusoids,
    /// Random overlapping flat disks on a dark background.
    Disks,
    /// Flat vertical bands stepping through the whole intensity range.
    Wedges,
    /// Every pixel at `level`.
    Constant,
}

macro_rules! string_enum {
    ($t:ty, $what:literal, { $($v:path => $s:literal),+ $(,)? }) => {
        impl FromStr for $t {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($s => Ok($v),)+
                    other => Err(Error::InvalidConfig(format!(concat!("unknown ", $what, " `{}`"), other))),
                }
            }
        }
        impl fmt::Display for $t {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self { $($v => $s,)+ })
            }
        }
    };
}

string_enum!(NoiseKind, "noise kind", { NoiseKind::Gaussian => "gaussian", NoiseKind::PoissonGaussian => "poisson_gaussian" });
string_enum!(Pattern, "pattern", {
    Pattern::Sinusoids => "sinusoids",
    Pattern::Disks => "disks",
    Pattern::Wedges => "wedges",
    Pattern::Constant => "constant",
});

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub kind: NoiseKind,
    pub pattern: Pattern,
    pub size: usize,
    pub n_images: usize,
    pub sigma: f64,
    pub gain: f64,
    /// Signal range covered by the non-constant patterns.
    pub low: f64,
    pub high: f64,
    /// Signal value for [`Pattern::Constant`].
    pub level: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            kind: NoiseKind::Gaussian,
            pattern: Pattern::Sinusoids,
            size: 128,
            n_images: 20,
            sigma: 25.0,
            gain: 1.0,
            low: 0.0,
            high: 255.0,
            level: 100.0,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.size == 0 || self.n_images == 0 {
            return bad("size and image count must be positive".into());
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return bad(format!("sigma must be >= 0, got {}", self.sigma));
        }
        if !(self.low.is_finite() && self.high.is_finite() && self.low < self.high) {
            return bad(format!("signal range [{}, {}] is empty", self.low, self.high));
        }
        if self.kind == NoiseKind::PoissonGaussian {
            if !(self.gain > 0.0 && self.gain.is_finite()) {
                return bad(format!("gain must be > 0, got {}", self.gain));
            }
            let lowest = if self.pattern == Pattern::Constant { self.level } else { self.low };
            if lowest < 0.0 {
                return bad(format!("poisson_gaussian needs a non-negative signal, got {lowest}"));
            }
        }
        Ok(())
    }
}

/// Generates `n_images` clean patterns and their noisy observations.
pub fn synth_dataset(spec: &SynthSpec) -> Result<(Vec<ImageArray>, Vec<ImageArray>)> {
    spec.validate()?;
    let mut rng = seeded_rng(spec.seed, 0);
    let mut clean = Vec::with_capacity(spec.n_images);
    let mut noisy = Vec::with_capacity(spec.n_images);
    for _ in 0..spec.n_images {
        let s = clean_pattern(spec, &mut rng)?;
        let x = corrupt(&s, spec, &mut rng)?;
        clean.push(s);
        noisy.push(x);
    }
    Ok((clean, noisy))
}

fn clean_pattern<R: Rng>(spec: &SynthSpec, rng: &mut R) -> Result<ImageArray> {
    let n = spec.size;
    let (lo, hi) = (spec.low, spec.high);
    match spec.pattern {
        Pattern::Constant => ImageArray::filled(n, n, spec.level as f32),
        Pattern::Sinusoids => {
            let waves: Vec<(f64, f64, f64, f64)> = (0..4)
                .map(|_| {
                    let angle = rng.random::<f64>() * PI;
                    let period = rng.random_range(12.0..64.0);
                    let k = 2.0 * PI / period;
                    (k * angle.cos(), k * angle.sin(), rng.random::<f64>() * 2.0 * PI, rng.random_range(0.5..1.0))
                })
                .collect();
            let field: Vec<f64> = (0..n * n)
                .map(|i| {
                    let (r, c) = ((i / n) as f64, (i % n) as f64);
                    waves.iter().map(|&(ky, kx, ph, a)| a * (ky * r + kx * c + ph).sin()).sum()
                })
                .collect();
            let (fmin, fmax) = field.iter().fold((f64::MAX, f64::MIN), |(a, b), &v| (a.min(v), b.max(v)));
            let span = (fmax - fmin).max(1e-12);
            ImageArray::new(n, n, field.iter().map(|&v| (lo + (v - fmin) / span * (hi - lo)) as f32).collect())
        }
        Pattern::Disks => {
            let mut px = vec![lo; n * n];
            let count = (n * n / 300).max(3);
            for _ in 0..count {
                let cy = rng.random_range(0.0..n as f64);
                let cx = rng.random_range(0.0..n as f64);
                let rad = rng.random_range(2.0..(n as f64 / 6.0).max(3.0));
                let val = rng.random_range(lo..=hi);
                for (i, p) in px.iter_mut().enumerate() {
                    let (r, c) = ((i / n) as f64, (i % n) as f64);
                    if (r - cy).powi(2) + (c - cx).powi(2) <= rad * rad {
                        *p = val;
                    }
                }
            }
            ImageArray::new(n, n, px.into_iter().map(|v| v as f32).collect())
        }
        Pattern::Wedges => {
            let steps = n.clamp(2, 64);
            let mut order: Vec<usize> = (0..steps).collect();
            // Random band order, so every image still spans the full range.
            for i in (1..steps).rev() {
                order.swap(i, rng.random_range(0..=i));
            }
            ImageArray::from_fn(n, n, |_, c| {
                let band = order[c * steps / n];
                (lo + band as f64 / (steps - 1) as f64 * (hi - lo)) as f32
            })
        }
    }
}

fn corrupt<R: Rng>(clean: &ImageArray, spec: &SynthSpec, rng: &mut R) -> Result<ImageArray> {
    let mut out = Vec::with_capacity(clean.len());
    for &s in clean.pixels() {
        let s = s as f64;
        let base = match spec.kind {
            NoiseKind::Gaussian => s,
            NoiseKind::PoissonGaussian => {
                let lambda = s / spec.gain;
                let k = if lambda > 0.0 {
                    Poisson::new(lambda)
                        .map_err(|e| Error::InvalidConfig(format!("poisson rate {lambda}: {e}")))?
                        .sample(rng)
                } else {
                    0.0
                };
                spec.gain * k
            }
        };
        let noise = if spec.sigma > 0.0 { spec.sigma * rng.sample::<f64, _>(StandardNormal) } else { 0.0 };
        out.push((base + noise) as f32);
    }
    ImageArray::new(clean.height(), clean.width(), out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn moments(imgs: &[ImageArray]) -> (f64, f64) {
        let v: Vec<f64> = imgs.iter().flat_map(|i| i.pixels()).map(|&p| p as f64).collect();
        let m = v.iter().sum::<f64>() / v.len() as f64;
        let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64;
        (m, var)
    }

    #[test]
    fn zero_sigma_gaussian_is_noiseless() {
        for pattern in [Pattern::Sinusoids, Pattern::Disks, Pattern::Wedges] {
            let spec = SynthSpec { sigma: 0.0, size: 32, n_images: 2, pattern, ..Default::default() };
            let (c, n) = synth_dataset(&spec).unwrap();
            assert_eq!(c, n);
        }
    }

    #[test]
    fn gaussian_moments_on_constant_signal() {
        let spec = SynthSpec { pattern: Pattern::Constant, level: 100.0, sigma: 10.0, size: 1000, n_images: 1, seed: 11, ..Default::default() };
        let (_, noisy) = synth_dataset(&spec).unwrap();
        let (m, var) = moments(&noisy);
        assert!((m - 100.0).abs() < 0.05, "mean {m}");
        assert!((var.sqrt() - 10.0).abs() < 0.1, "std {}", var.sqrt());
    }

    #[test]
    fn poisson_variance_scales_with_gain() {
        let spec = SynthSpec {
            kind: NoiseKind::PoissonGaussian,
            pattern: Pattern::Constant,
            level: 50.0,
            gain: 2.0,
            sigma: 0.0,
            size: 500,
            n_images: 1,
            seed: 3,
            ..Default::default()
        };
        let (_, noisy) = synth_dataset(&spec).unwrap();
        let (m, var) = moments(&noisy);
        assert!((m - 50.0).abs() < 0.1);
        assert!((var - 100.0).abs() < 2.0, "variance {var}");
    }

    #[test]
    fn patterns_cover_the_range() {
        for pattern in [Pattern::Sinusoids, Pattern::Wedges] {
            let spec = SynthSpec { sigma: 0.0, size: 64, n_images: 1, pattern, ..Default::default() };
            let (c, _) = synth_dataset(&spec).unwrap();
            let (lo, hi) = c[0].pixels().iter().fold((f32::MAX, f32::MIN), |(a, b), &v| (a.min(v), b.max(v)));
            assert!(lo.abs() < 1e-3 && (hi - 255.0).abs() < 1e-3, "{pattern}: [{lo}, {hi}]");
        }
    }

    #[test]
    fn invalid_specs_are_rejected() {
        assert!(synth_dataset(&SynthSpec { sigma: -1.0, ..Default::default() }).is_err());
        let neg = SynthSpec { kind: NoiseKind::PoissonGaussian, low: -5.0, ..Default::default() };
        assert!(synth_dataset(&neg).is_err());
        let gain = SynthSpec { kind: NoiseKind::PoissonGaussian, gain: 0.0, ..Default::default() };
        assert!(synth_dataset(&gain).is_err());
        assert!("plaid".parse::<Pattern>().is_err());
        assert_eq!("poisson_gaussian".parse::<NoiseKind>().unwrap(), NoiseKind::PoissonGaussian);
    }

    #[test]
    fn deterministic_given_seed() {
        let spec = SynthSpec { size: 32, n_images: 3, pattern: Pattern::Disks, seed: 5, ..Default::default() };
        assert_eq!(synth_dataset(&spec).unwrap(), synth_dataset(&spec).unwrap());
    }
}
