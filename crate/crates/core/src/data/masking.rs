//! Blind-spot masking: selected pixels are overwritten with a random
//! neighbour so the network never sees the value it is asked to explain.

use rand::Rng;

use crate::data::{ImageArray, NormStats};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MaskConfig {
    /// Expected number of blind-spots per patch.
    pub n_masked: usize,
    /// Odd side length of the donor neighbourhood.
    pub window: usize,
}

impl MaskConfig {
    /// One blind-spot per 64 pixels, 5x5 donor window.
    pub fn for_patch(patch_size: usize) -> Self {
        MaskConfig { n_masked: (patch_size * patch_size / 64).max(1), window: 5 }
    }

    pub fn validate(&self, height: usize, width: usize) -> Result<()> {
        if self.window < 3 || self.window % 2 == 0 {
            return Err(Error::InvalidConfig(format!(
                "replacement window must be odd and at least 3, got {}",
                self.window
            )));
        }
        if self.n_masked > height * width {
            return Err(Error::InvalidConfig(format!(
                "cannot mask {} pixels in a {height}x{width} patch",
                self.n_masked
            )));
        }
        if self.n_masked > 0 && height * width < 2 {
            return Err(Error::InvalidConfig("a 1x1 patch has no donor pixels".into()));
        }
        Ok(())
    }
}

/// A blind-spot position with the observation it hid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaskTarget {
    pub row: usize,
    pub col: usize,
    /// Original value in standardized units.
    pub value: f32,
    /// Original raw observation `x_i`.
    pub raw: f32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskedPatch {
    /// Standardized patch with blind-spots replaced.
    pub input: ImageArray,
    pub targets: Vec<MaskTarget>,
}

/// Stratified blind-spot positions: the patch is tiled into square cells of
/// area `H*W / n_masked` and one uniformly jittered point is drawn per cell.
/// Points falling outside the patch or onto an already chosen pixel are
/// dropped, so the expected count is `n_masked` and positions are unique.
pub fn blind_spot_positions<R: Rng>(height: usize, width: usize, n_masked: usize, rng: &mut R) -> Vec<(usize, usize)> {
    if n_masked == 0 {
        return Vec::new();
    }
    let side = ((height * width) as f64 / n_masked as f64).sqrt();
    let cells_r = (height as f64 / side).ceil() as usize;
    let cells_c = (width as f64 / side).ceil() as usize;
    let mut taken = vec![false; height * width];
    let mut out = Vec::with_capacity(n_masked);
    for i in 0..cells_r {
        for j in 0..cells_c {
            let r = ((i as f64 + rng.random::<f64>()) * side) as usize;
            let c = ((j as f64 + rng.random::<f64>()) * side) as usize;
            if r < height && c < width && !taken[r * width + c] {
                taken[r * width + c] = true;
                out.push((r, c));
            }
        }
    }
    out
}

/// Standardizes `raw` and hides blind-spots in it. Each replacement is drawn
/// uniformly from the in-bounds `window x window` neighbourhood of the
/// original patch, centre excluded.
pub fn mask_patch<R: Rng>(raw: &ImageArray, stats: &NormStats, cfg: MaskConfig, rng: &mut R) -> Result<MaskedPatch> {
    let (h, w) = raw.shape();
    cfg.validate(h, w)?;
    let standardized = stats.standardize_image(raw);
    let mut input = standardized.clone().into_pixels();
    let half = (cfg.window / 2) as isize;
    let mut donors = Vec::with_capacity(cfg.window * cfg.window);
    let mut targets = Vec::new();
    for (r, c) in blind_spot_positions(h, w, cfg.n_masked, rng) {
        donors.clear();
        for dr in -half..=half {
            for dc in -half..=half {
                let (rr, cc) = (r as isize + dr, c as isize + dc);
                if (dr, dc) != (0, 0) && rr >= 0 && cc >= 0 && (rr as usize) < h && (cc as usize) < w {
                    donors.push((rr as usize, cc as usize));
                }
            }
        }
        let (dr, dc) = donors[rng.random_range(0..donors.len())];
        input[r * w + c] = standardized.get(dr, dc);
        targets.push(MaskTarget { row: r, col: c, value: standardized.get(r, c), raw: raw.get(r, c) });
    }
    Ok(MaskedPatch { input: ImageArray::new(h, w, input)?, targets })
}

/// A stack of equally sized masked patches ready for the network.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedBatch {
    pub height: usize,
    pub width: usize,
    /// `B x H x W` standardized inputs.
    pub inputs: Vec<f32>,
    pub targets: Vec<Vec<MaskTarget>>,
}

impl MaskedBatch {
    pub fn from_patches(patches: Vec<MaskedPatch>) -> Result<Self> {
        let first = patches.first().ok_or(Error::EmptyInput("batch needs at least one patch"))?;
        let (height, width) = first.input.shape();
        let mut inputs = Vec::with_capacity(patches.len() * height * width);
        let mut targets = Vec::with_capacity(patches.len());
        for p in patches {
            if p.input.shape() != (height, width) {
                return Err(Error::ShapeMismatch("patches in a batch must share a shape".into()));
            }
            inputs.extend_from_slice(p.input.pixels());
            targets.push(p.targets);
        }
        Ok(MaskedBatch { height, width, inputs, targets })
    }

    pub fn batch_size(&self) -> usize {
        self.targets.len()
    }

    pub fn mask_count(&self) -> usize {
        self.targets.iter().map(Vec::len).sum()
    }
}
