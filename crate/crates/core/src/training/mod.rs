//! Training objectives, the optimization loop and checkpoints.

mod checkpoint;
mod loss;

use std::fmt;
use std::str::FromStr;

use rand_chacha::ChaCha8Rng;

use crate::data::{compute_stats, crop_patch, mask_patch, ImageArray, MaskConfig, NormStats, PatchSampler};
use crate::error::{Error, Result};
use crate::network::{Tensor, UNet, UNetConfig};
use crate::noise_model::NoiseModel;
use crate::scalar::{pairwise_sum, Scalar};
use crate::seeded_rng;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_VERSION};
pub use loss::{n2v_loss, pn2v_loss, supervised_loss};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TrainMode {
    /// Blind-spot training of `K` signal samples against a noise model.
    Pn2v,
    /// Blind-spot training of a single prediction with squared error.
    N2v,
    /// Squared error against clean targets.
    Supervised,
}

impl fmt::Display for TrainMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TrainMode::Pn2v => "pn2v",
            TrainMode::N2v => "n2v",
            TrainMode::Supervised => "supervised",
        })
    }
}

impl FromStr for TrainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pn2v" => Ok(TrainMode::Pn2v),
            "n2v" => Ok(TrainMode::N2v),
            "supervised" => Ok(TrainMode::Supervised),
            _ => Err(Error::InvalidConfig(format!("unknown training mode `{s}` (pn2v, n2v, supervised)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub batch_size: usize,
    pub patch_size: usize,
    pub learning_rate: f64,
    /// Learning-rate multiplier applied when validation stalls.
    pub plateau_factor: f64,
    /// Epochs without a new best validation loss before the rate drops.
    pub plateau_patience: usize,
    /// Blind-spots per patch; ignored in supervised mode.
    pub n_masked: usize,
    pub window: usize,
    pub seed: u64,
    /// Fraction of images held out for validation.
    pub val_fraction: f64,
    /// Fixed validation patches drawn once from the held-out images.
    pub val_patches: usize,
    /// Random flips and transposes of training patches.
    pub augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: TrainMode::Pn2v,
            epochs: 20,
            steps_per_epoch: 50,
            batch_size: 8,
            patch_size: 64,
            learning_rate: 1e-3,
            plateau_factor: 0.5,
            plateau_patience: 3,
            n_masked: 64,
            window: 5,
            seed: 0,
            val_fraction: 0.1,
            val_patches: 32,
            augment: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, net: &UNetConfig) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        for (name, v) in [
            ("epochs", self.epochs),
            ("steps_per_epoch", self.steps_per_epoch),
            ("batch_size", self.batch_size),
            ("patch_size", self.patch_size),
            ("val_patches", self.val_patches),
        ] {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return bad(format!("learning rate must be finite and non-negative, got {}", self.learning_rate));
        }
        if !(self.plateau_factor > 0.0 && self.plateau_factor <= 1.0) {
            return bad(format!("plateau factor must lie in (0, 1], got {}", self.plateau_factor));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return bad(format!("validation fraction must lie in [0, 1), got {}", self.val_fraction));
        }
        net.validate()?;
        if self.patch_size % net.size_multiple() != 0 {
            return bad(format!(
                "patch size {} is not a multiple of {} required by depth {}",
                self.patch_size,
                net.size_multiple(),
                net.depth
            ));
        }
        if self.mode != TrainMode::Supervised {
            self.mask_config().validate(self.patch_size, self.patch_size)?;
            if self.n_masked == 0 {
                return bad("blind-spot training needs n_masked >= 1".into());
            }
        }
        if self.mode != TrainMode::Pn2v && net.out_channels != 1 {
            return bad(format!("{} predicts one value per pixel; out_channels is {}", self.mode, net.out_channels));
        }
        Ok(())
    }

    fn mask_config(&self) -> MaskConfig {
        MaskConfig { n_masked: self.n_masked, window: self.window }
    }
}

/// Inputs to [`train`]: noisy images always, clean images for supervised
/// training, a noise model for pn2v.
#[derive(Debug, Clone, Copy)]
pub struct TrainData<'a> {
    pub noisy: &'a [ImageArray],
    pub clean: Option<&'a [ImageArray]>,
    pub noise_model: Option<&'a NoiseModel>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
}

impl fmt::Display for EpochLog {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "epoch={} train_loss={:.6} val_loss={:.6} lr={:e}",
            self.epoch, self.train_loss, self.val_loss, self.lr
        )
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    /// Parameters from the epoch with the lowest validation loss.
    pub checkpoint: Checkpoint<T>,
    pub log: Vec<EpochLog>,
}

/// Per-parameter adaptive moment estimation with bias correction.
#[derive(Debug, Clone)]
struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(n: usize) -> Self {
        Adam { m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    fn step<T: Scalar>(&mut self, params: &mut [T], grads: &[T], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - Self::BETA1.powi(self.t);
        let c2 = 1.0 - Self::BETA2.powi(self.t);
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            let g = g.f64();
            *m = Self::BETA1 * *m + (1.0 - Self::BETA1) * g;
            *v = Self::BETA2 * *v + (1.0 - Self::BETA2) * g * g;
            let update = lr * (*m / c1) / ((*v / c2).sqrt() + Self::EPS);
            *p = T::of(p.f64() - update);
        }
    }
}

/// One batch of training or validation data in network form.
struct Batch<T> {
    input: Tensor<T>,
    target: Target<T>,
}

enum Target<T> {
    /// `(item, row, col, raw, standardized)` per blind-spot.
    Masked(Vec<(usize, usize, usize, f64, T)>),
    /// Standardized clean patches, same layout as the input.
    Dense(Vec<T>),
}

struct Objective<'a> {
    mode: TrainMode,
    stats: NormStats,
    model: Option<&'a NoiseModel>,
}

impl Objective<'_> {
    /// Loss and its gradient with respect to the full network output.
    fn eval<T: Scalar>(&self, out: &Tensor<T>, target: &Target<T>) -> Result<(f64, Tensor<T>)> {
        let k = out.channels();
        let mut upstream = Tensor::zeros(out.shape());
        let loss = match target {
            Target::Masked(points) => {
                let mut gathered = Vec::with_capacity(points.len() * k);
                for &(b, r, c, _, _) in points {
                    gathered.extend((0..k).map(|j| out.at(b, j, r, c)));
                }
                let (loss, grad) = match self.mode {
                    TrainMode::Pn2v => {
                        let raw: Vec<f64> = points.iter().map(|p| p.3).collect();
                        let model = self.model.expect("validated: pn2v has a noise model");
                        pn2v_loss(&gathered, k, &raw, model, &self.stats)?
                    }
                    _ => {
                        let std: Vec<T> = points.iter().map(|p| p.4).collect();
                        n2v_loss(&gathered, &std)?
                    }
                };
                for (i, &(b, r, c, _, _)) in points.iter().enumerate() {
                    for j in 0..k {
                        let idx = upstream.index(b, j, r, c);
                        upstream.data_mut()[idx] = grad[i * k + j];
                    }
                }
                loss
            }
            Target::Dense(clean) => {
                let (loss, grad) = supervised_loss(out.data(), clean)?;
                upstream.data_mut().copy_from_slice(&grad);
                loss
            }
        };
        Ok((loss, upstream))
    }
}

struct BatchMaker {
    mode: TrainMode,
    noisy: Vec<ImageArray>,
    clean: Option<Vec<ImageArray>>,
    stats: NormStats,
    mask: MaskConfig,
    sampler: PatchSampler,
}

impl BatchMaker {
    fn new(cfg: &TrainConfig, noisy: Vec<ImageArray>, clean: Option<Vec<ImageArray>>, stats: NormStats, rng: ChaCha8Rng, augment: bool) -> Result<Self> {
        let sampler = PatchSampler::new(&noisy, cfg.patch_size, augment, rng)?;
        Ok(BatchMaker {
            mode: cfg.mode,
            noisy,
            clean,
            stats,
            mask: cfg.mask_config(),
            sampler,
        })
    }

    fn next<T: Scalar>(&mut self, n: usize) -> Result<Batch<T>> {
        let size = self.sampler.size();
        let mut planes = Vec::with_capacity(n);
        let mut points = Vec::new();
        let mut dense = Vec::new();
        for b in 0..n {
            let spec = self.sampler.next_spec();
            let raw = crop_patch(&self.noisy, spec, size)?;
            match self.mode {
                TrainMode::Supervised => {
                    let clean = crop_patch(self.clean.as_deref().expect("validated"), spec, size)?;
                    dense.extend(clean.pixels().iter().map(|&v| T::of(self.stats.standardize(v as f64))));
                    planes.push(self.stats.standardize_image(&raw).into_pixels());
                }
                _ => {
                    let masked = mask_patch(&raw, &self.stats, self.mask, self.sampler.rng_mut())?;
                    points.extend(
                        masked.targets.iter().map(|t| (b, t.row, t.col, t.raw as f64, T::of(t.value as f64))),
                    );
                    planes.push(masked.input.into_pixels());
                }
            }
        }
        let refs: Vec<&[f32]> = planes.iter().map(Vec::as_slice).collect();
        let input = Tensor::from_planes(size, size, &refs)?;
        let target = if self.mode == TrainMode::Supervised { Target::Dense(dense) } else { Target::Masked(points) };
        Ok(Batch { input, target })
    }
}

/// Splits off the last `round(n * fraction)` images (at least one when
/// `n >= 2` and the fraction is positive) for validation. A single image
/// serves both roles.
fn split_indices(n: usize, fraction: f64) -> (Vec<usize>, Vec<usize>) {
    if n < 2 || fraction == 0.0 {
        return ((0..n).collect(), (0..n).collect());
    }
    let n_val = ((n as f64 * fraction).round() as usize).clamp(1, n - 1);
    ((0..n - n_val).collect(), (n - n_val..n).collect())
}

/// Trains a network from `net_config` and returns its best-validation
/// checkpoint. `on_epoch` sees each log line as it is produced.
///
/// Patches, masks and their order derive from `cfg.seed` alone, so equal
/// inputs give bit-identical checkpoints.
pub fn train<T: Scalar>(
    cfg: &TrainConfig,
    net_config: UNetConfig,
    data: TrainData<'_>,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome<T>> {
    cfg.validate(&net_config)?;
    if data.noisy.is_empty() {
        return Err(Error::EmptyInput("training needs at least one image"));
    }
    if cfg.mode == TrainMode::Pn2v && data.noise_model.is_none() {
        return Err(Error::ModeMismatch("pn2v training requires a noise model".into()));
    }
    let clean = match (cfg.mode, data.clean) {
        (TrainMode::Supervised, None) => {
            return Err(Error::ModeMismatch("supervised training requires clean images".into()))
        }
        (TrainMode::Supervised, Some(c)) => {
            if c.len() != data.noisy.len() {
                return Err(Error::ShapeMismatch(format!("{} clean images for {} noisy", c.len(), data.noisy.len())));
            }
            for (i, (a, b)) in c.iter().zip(data.noisy).enumerate() {
                if a.shape() != b.shape() {
                    return Err(Error::ShapeMismatch(format!("image pair {i}: {:?} vs {:?}", a.shape(), b.shape())));
                }
            }
            Some(c)
        }
        _ => None,
    };

    let (train_idx, val_idx) = split_indices(data.noisy.len(), cfg.val_fraction);
    let pick = |imgs: &[ImageArray], idx: &[usize]| idx.iter().map(|&i| imgs[i].clone()).collect::<Vec<_>>();
    let train_noisy = pick(data.noisy, &train_idx);
    let stats = compute_stats(&train_noisy)?;
    let mut maker = BatchMaker::new(
        cfg,
        train_noisy,
        clean.map(|c| pick(c, &train_idx)),
        stats,
        seeded_rng(cfg.seed, 1),
        cfg.augment,
    )?;
    let mut val_maker = BatchMaker::new(
        cfg,
        pick(data.noisy, &val_idx),
        clean.map(|c| pick(c, &val_idx)),
        stats,
        seeded_rng(cfg.seed, 2),
        false,
    )?;
    let val_batches = (0..cfg.val_patches.div_ceil(cfg.batch_size))
        .map(|i| val_maker.next::<T>(cfg.batch_size.min(cfg.val_patches - i * cfg.batch_size)))
        .collect::<Result<Vec<_>>>()?;

    let objective = Objective { mode: cfg.mode, stats, model: data.noise_model };
    let mut net = UNet::<T>::new(net_config)?;
    let mut adam = Adam::new(net.param_count());
    let mut lr = cfg.learning_rate;
    let mut best: Option<(usize, f64, Vec<T>)> = None;
    let mut stalled = 0;
    let mut log = Vec::with_capacity(cfg.epochs);

    for epoch in 1..=cfg.epochs {
        let mut losses = Vec::with_capacity(cfg.steps_per_epoch);
        for step in 0..cfg.steps_per_epoch {
            let diverged = |loss: f64| Error::Diverged { epoch, step, loss };
            let batch = maker.next::<T>(cfg.batch_size)?;
            let (out, tape) = net.forward_train(&batch.input)?;
            let (loss, upstream) = match objective.eval(&out, &batch.target) {
                Err(Error::NonFinite(_)) => return Err(diverged(f64::NAN)),
                r => r?,
            };
            if !loss.is_finite() {
                return Err(diverged(loss));
            }
            let grads = net.backward(&tape, &upstream)?;
            if grads.params.iter().any(|g| !g.is_finite()) {
                return Err(diverged(loss));
            }
            adam.step(net.params_mut(), &grads.params, lr);
            losses.push(loss);
        }
        let train_loss = pairwise_sum(&losses) / losses.len() as f64;

        let mut val = Vec::with_capacity(val_batches.len());
        let mut weights = Vec::with_capacity(val_batches.len());
        for b in &val_batches {
            let out = net.forward(&b.input)?;
            let (loss, _) = match objective.eval(&out, &b.target) {
                Err(Error::NonFinite(_)) => return Err(Error::Diverged { epoch, step: cfg.steps_per_epoch, loss: f64::NAN }),
                r => r?,
            };
            let w = b.input.batch() as f64;
            val.push(loss * w);
            weights.push(w);
        }
        let val_loss = pairwise_sum(&val) / pairwise_sum(&weights);
        if !val_loss.is_finite() {
            return Err(Error::Diverged { epoch, step: cfg.steps_per_epoch, loss: val_loss });
        }

        let entry = EpochLog { epoch, train_loss, val_loss, lr };
        on_epoch(&entry);
        log.push(entry);

        if best.as_ref().is_none_or(|b| val_loss < b.1) {
            best = Some((epoch, val_loss, net.params().to_vec()));
            stalled = 0;
        } else {
            stalled += 1;
            if stalled >= cfg.plateau_patience.max(1) {
                lr *= cfg.plateau_factor;
                stalled = 0;
            }
        }
    }

    let (epoch, best_val, params) = best.expect("at least one epoch ran");
    net.set_params(params)?;
    let checkpoint = Checkpoint {
        net,
        stats,
        mode: cfg.mode,
        noise_model_digest: data.noise_model.filter(|_| cfg.mode == TrainMode::Pn2v).map(NoiseModel::digest),
        epoch,
        best_val,
    };
    Ok(TrainOutcome { checkpoint, log })
}
