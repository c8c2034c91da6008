//! Images, normalization, patch sampling, blind-spot masking and synthetic
//! datasets.

mod image;
mod masking;
mod patches;
mod stats;
mod synth;

pub use self::image::{list_images, load_image, save_image, ImageArray, RAW_EXTENSION};
pub use self::masking::{blind_spot_positions, mask_patch, MaskConfig, MaskTarget, MaskedBatch, MaskedPatch};
pub use self::patches::{crop_patch, dihedral, extract_patches, PatchSampler, PatchSpec};
pub use self::stats::{compute_stats, NormStats};
pub use self::synth::{synth_dataset, NoiseKind, Pattern, SynthSpec};
