//! Synthetic haze, procedural scenes, patch sampling, quality metrics and
//! image I/O.

pub mod haze;
pub mod io;
pub mod metrics;
pub mod patches;
pub mod procedural;

pub use haze::{invert_haze, synthesize_haze, HazeParams, HazeRecipe, Inversion};
pub use metrics::{psnr, ssim, PSNR_CAP};
pub use patches::{
    augment, sample_patches, sample_patches_with, Augment, ImagePair, PatchBatch, PatchOrigin,
};
pub use procedural::{procedural_image, synthetic_pairs};
