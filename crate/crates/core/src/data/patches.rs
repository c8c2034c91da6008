use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::data::ImageArray;
use crate::error::{Error, Result};
use crate::seeded_rng;

/// Where one square training patch comes from and which of the eight
/// dihedral transforms is applied to it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchSpec {
    pub image: usize,
    pub row: usize,
    pub col: usize,
    pub transform: u8,
}

/// Draws patch locations: image uniformly, then a uniformly random valid
/// top-left offset inside it.
#[derive(Debug, Clone)]
pub struct PatchSampler {
    shapes: Vec<(usize, usize)>,
    size: usize,
    augment: bool,
    rng: ChaCha8Rng,
}

impl PatchSampler {
    pub fn new(images: &[ImageArray], size: usize, augment: bool, rng: ChaCha8Rng) -> Result<Self> {
        if images.is_empty() {
            return Err(Error::EmptyInput("patch extraction needs at least one image"));
        }
        if size == 0 {
            return Err(Error::InvalidConfig("patch size must be positive".into()));
        }
        for (i, img) in images.iter().enumerate() {
            if size > img.height().min(img.width()) {
                return Err(Error::ShapeMismatch(format!(
                    "patch {size} larger than image {i} ({}x{})",
                    img.height(),
                    img.width()
                )));
            }
        }
        Ok(PatchSampler { shapes: images.iter().map(ImageArray::shape).collect(), size, augment, rng })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn rng_mut(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    pub fn next_spec(&mut self) -> PatchSpec {
        let image = self.rng.random_range(0..self.shapes.len());
        let (h, w) = self.shapes[image];
        let row = self.rng.random_range(0..=h - self.size);
        let col = self.rng.random_range(0..=w - self.size);
        let transform = if self.augment { self.rng.random_range(0..8u8) } else { 0 };
        PatchSpec { image, row, col, transform }
    }
}

/// Crops the patch described by `spec` out of `images[spec.image]`.
pub fn crop_patch(images: &[ImageArray], spec: PatchSpec, size: usize) -> Result<ImageArray> {
    let img = images
        .get(spec.image)
        .ok_or_else(|| Error::ShapeMismatch(format!("patch refers to missing image {}", spec.image)))?;
    let patch = img.crop((spec.row, spec.col), (size, size))?;
    Ok(dihedral(&patch, spec.transform))
}

/// One of the eight symmetries of the square: bit 2 transposes, bit 0 flips
/// rows, bit 1 flips columns.
pub fn dihedral(patch: &ImageArray, transform: u8) -> ImageArray {
    if transform == 0 {
        return patch.clone();
    }
    let n = patch.height();
    debug_assert_eq!(n, patch.width());
    ImageArray::from_fn(n, n, |r, c| {
        let (mut r, mut c) = if transform & 4 != 0 { (c, r) } else { (r, c) };
        if transform & 1 != 0 {
            r = n - 1 - r;
        }
        if transform & 2 != 0 {
            c = n - 1 - c;
        }
        patch.get(r, c)
    })
    .expect("permutation of a valid patch")
}

/// `count` random square crops, reproducible for a given seed.
pub fn extract_patches(
    images: &[ImageArray],
    patch_size: usize,
    count: usize,
    seed: u64,
    augment: bool,
) -> Result<Vec<ImageArray>> {
    let mut sampler = PatchSampler::new(images, patch_size, augment, seeded_rng(seed, 0))?;
    (0..count).map(|_| crop_patch(images, sampler.next_spec(), patch_size)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(h: usize, w: usize) -> ImageArray {
        ImageArray::from_fn(h, w, |r, c| (r * w + c) as f32).unwrap()
    }

    #[test]
    fn full_size_patch_is_the_image() {
        let img = ramp(8, 8);
        let p = extract_patches(std::slice::from_ref(&img), 8, 1, 1, false).unwrap();
        assert_eq!(p[0], img);
    }

    #[test]
    fn same_seed_same_patches() {
        let imgs = vec![ramp(20, 30), ramp(16, 16)];
        let a = extract_patches(&imgs, 8, 50, 9, true).unwrap();
        let b = extract_patches(&imgs, 8, 50, 9, true).unwrap();
        assert_eq!(a, b);
        let c = extract_patches(&imgs, 8, 50, 10, true).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn oversized_patch_is_an_error() {
        assert!(extract_patches(&[ramp(8, 20)], 9, 1, 0, false).is_err());
    }

    #[test]
    fn offsets_are_uniform() {
        // 12x12 image, 8x8 patch: 25 valid offsets.
        let img = ramp(12, 12);
        let mut sampler = PatchSampler::new(std::slice::from_ref(&img), 8, false, seeded_rng(4, 0)).unwrap();
        let n = 10_000;
        let mut counts = [0usize; 25];
        for _ in 0..n {
            let s = sampler.next_spec();
            counts[s.row * 5 + s.col] += 1;
        }
        let p = 1.0 / 25.0;
        let expected = n as f64 * p;
        let sigma = (n as f64 * p * (1.0 - p)).sqrt();
        for c in counts {
            assert!((c as f64 - expected).abs() < 3.0 * sigma + 1.0, "{counts:?}");
        }
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
        // chi-square with 24 dof: 99.9% quantile is about 51.2.
        assert!(chi2 < 51.2, "chi2 = {chi2}");
    }

    #[test]
    fn dihedral_group_is_closed_and_distinct() {
        let img = ramp(3, 3);
        let all: Vec<ImageArray> = (0..8).map(|t| dihedral(&img, t)).collect();
        for i in 0..8 {
            for j in i + 1..8 {
                assert_ne!(all[i], all[j], "{i} vs {j}");
            }
            let mut sorted = all[i].pixels().to_vec();
            sorted.sort_by(f32::total_cmp);
            assert_eq!(sorted, img.pixels());
        }
    }
}
