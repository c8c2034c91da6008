use std::fs;
use std::path::Path;

use crate::container::{decode, Header};
use crate::data::NormStats;
use crate::error::{Error, Result};
use crate::network::{UNet, UNetConfig};
use crate::noise_model::NoiseModel;
use crate::scalar::Scalar;
use crate::training::TrainMode;

const MAGIC: &str = "PN2V-CHECKPOINT";
pub const CHECKPOINT_VERSION: u32 = 1;

/// A trained network together with everything inference needs to use it.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T> {
    pub net: UNet<T>,
    pub stats: NormStats,
    pub mode: TrainMode,
    /// Digest of the noise model the network was trained against; present
    /// exactly when `mode` is [`TrainMode::Pn2v`].
    pub noise_model_digest: Option<String>,
    /// Epoch (1-based) whose parameters these are.
    pub epoch: usize,
    pub best_val: f64,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn validate(&self) -> Result<()> {
        if (self.mode == TrainMode::Pn2v) != self.noise_model_digest.is_some() {
            return Err(Error::Validation(format!(
                "{} checkpoint {} a noise-model digest",
                self.mode,
                if self.noise_model_digest.is_some() { "must not carry" } else { "requires" }
            )));
        }
        if self.mode != TrainMode::Pn2v && self.net.config().out_channels != 1 {
            return Err(Error::Validation(format!(
                "{} checkpoint must predict one channel, has {}",
                self.mode,
                self.net.config().out_channels
            )));
        }
        Ok(())
    }

    /// Checks that `model` may be used with this checkpoint. Returns a
    /// warning when it is not the model the network was trained against.
    pub fn check_noise_model(&self, model: &NoiseModel) -> Result<Option<String>> {
        let Some(expected) = &self.noise_model_digest else {
            return Err(Error::ModeMismatch(format!(
                "noise model required, but this is a {} checkpoint",
                self.mode
            )));
        };
        let found = model.digest();
        Ok((found != *expected).then(|| {
            format!("noise model digest {found} differs from the one used in training ({expected})")
        }))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let c = self.net.config();
        let mut payload = Vec::with_capacity(self.net.param_count() * T::BYTES);
        for &p in self.net.params() {
            p.write_le(&mut payload);
        }
        let mut h = Header::new();
        h.put("version", CHECKPOINT_VERSION)
            .put("dtype", T::DTYPE)
            .put("mode", self.mode)
            .put("depth", c.depth)
            .put("in_channels", c.in_channels)
            .put("out_channels", c.out_channels)
            .put("base_features", c.base_features)
            .put("kernel_size", c.kernel_size)
            .put("init_seed", c.seed)
            // `{:?}` on f64 prints the shortest string that parses back exactly.
            .put("mean", format!("{:?}", self.stats.mean))
            .put("std", format!("{:?}", self.stats.std))
            .put("noise_model_digest", self.noise_model_digest.as_deref().unwrap_or("none"))
            .put("epoch", self.epoch)
            .put("best_val", format!("{:?}", self.best_val))
            .put("param_count", self.net.param_count());
        h.encode(MAGIC, &payload)
    }

    /// Parses a checkpoint; parameters stored at another precision are converted.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let f = decode(bytes, MAGIC)?;
        f.check_version(CHECKPOINT_VERSION)?;
        let config = UNetConfig {
            depth: f.get("depth")?,
            in_channels: f.get("in_channels")?,
            out_channels: f.get("out_channels")?,
            base_features: f.get("base_features")?,
            kernel_size: f.get("kernel_size")?,
            seed: f.get("init_seed")?,
        };
        let mut net = UNet::<T>::zeros(config)?;
        let count: usize = f.get("param_count")?;
        if count != net.param_count() {
            return Err(Error::ShapeMismatch(format!(
                "checkpoint declares {count} parameters, its network config has {}",
                net.param_count()
            )));
        }
        let params: Vec<T> = match f.raw("dtype")? {
            "f32" => f.payload_exact(count * 4)?.chunks_exact(4).map(|b| T::of(f32::read_le(b) as f64)).collect(),
            "f64" => f.payload_exact(count * 8)?.chunks_exact(8).map(|b| T::of(f64::read_le(b))).collect(),
            other => return Err(Error::Format(format!("unknown dtype `{other}`"))),
        };
        net.set_params(params)?;
        let digest: String = f.get("noise_model_digest")?;
        let ck = Checkpoint {
            net,
            stats: NormStats::new(f.get("mean")?, f.get("std")?)?,
            mode: f.get("mode")?,
            noise_model_digest: (digest != "none").then_some(digest),
            epoch: f.get("epoch")?,
            best_val: f.get("best_val")?,
        };
        ck.validate()?;
        Ok(ck)
    }
}

pub fn save_checkpoint<T: Scalar>(ck: &Checkpoint<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, ck.to_bytes()).map_err(|e| Error::from(e).at_path(path))
}

pub fn load_checkpoint<T: Scalar>(path: impl AsRef<Path>) -> Result<Checkpoint<T>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::from(e).at_path(path))?;
    Checkpoint::from_bytes(&bytes).map_err(|e| e.at_path(path))
}
