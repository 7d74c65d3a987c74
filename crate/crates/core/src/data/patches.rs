//! Aligned random crops with 90-degree rotations and horizontal flips.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A hazy/clean pair of `1×3×H×W` images.
#[derive(Clone, Debug)]
pub struct ImagePair {
    pub id: String,
    pub hazy: Tensor<f32>,
    pub clean: Tensor<f32>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Augment {
    /// Counter-clockwise quarter turns, 0..4.
    pub quarter_turns: u8,
    /// Mirror left-right after rotating.
    pub flip: bool,
}

impl Augment {
    pub const NONE: Augment = Augment {
        quarter_turns: 0,
        flip: false,
    };

    pub fn tag(&self) -> String {
        format!(
            "rot{}{}",
            90 * self.quarter_turns as u32,
            if self.flip { "+flip" } else { "" }
        )
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PatchOrigin {
    pub image: usize,
    pub id: String,
    pub top: usize,
    pub left: usize,
    pub augment: Augment,
}

#[derive(Clone, Debug, Default)]
pub struct PatchBatch {
    pub hazy: Vec<Tensor<f32>>,
    pub clean: Vec<Tensor<f32>>,
    pub origins: Vec<PatchOrigin>,
}

impl PatchBatch {
    pub fn len(&self) -> usize {
        self.hazy.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hazy.is_empty()
    }

    /// Stack into `(hazy, clean)` tensors of shape `N×3×S×S`.
    pub fn stacked(&self) -> Result<(Tensor<f32>, Tensor<f32>)> {
        if self.is_empty() {
            return Err(Error::contract("cannot stack an empty patch batch"));
        }
        Ok((Tensor::stack(&self.hazy)?, Tensor::stack(&self.clean)?))
    }
}

/// Rotate by `quarter_turns * 90` degrees counter-clockwise, then flip.
pub fn augment(x: &Tensor<f32>, a: Augment) -> Tensor<f32> {
    let s = x.shape();
    let turns = a.quarter_turns % 4;
    let (oh, ow) = if turns % 2 == 1 {
        (s.width, s.height)
    } else {
        (s.height, s.width)
    };
    let (h, w) = (s.height, s.width);
    Tensor::from_fn(s.with_spatial(oh, ow), |b, c, i, j| {
        let j = if a.flip { ow - 1 - j } else { j };
        // Output pixel (i, j) of a CCW rotation reads from the source:
        let (si, sj) = match turns {
            0 => (i, j),
            1 => (j, w - 1 - i),
            2 => (h - 1 - i, w - 1 - j),
            _ => (h - 1 - j, i),
        };
        x.at(b, c, si, sj)
    })
}

pub fn sample_patches_with<R: Rng + ?Sized>(
    pool: &[ImagePair],
    n: usize,
    size: usize,
    rng: &mut R,
) -> Result<PatchBatch> {
    let mut batch = PatchBatch::default();
    if n == 0 {
        return Ok(batch);
    }
    if size == 0 {
        return Err(Error::contract("patch size must be positive"));
    }
    let usable: Vec<usize> = pool
        .iter()
        .enumerate()
        .filter(|(_, p)| {
            let s = p.clean.shape();
            let ok = s.height >= size && s.width >= size && p.hazy.shape() == s;
            if !ok {
                log::warn!(
                    "skipping {}: {} is smaller than {size}x{size} or unpaired",
                    p.id,
                    s
                );
            }
            ok
        })
        .map(|(i, _)| i)
        .collect();
    if usable.is_empty() {
        return Err(Error::contract(format!(
            "no image in the pool is at least {size}x{size}"
        )));
    }
    for _ in 0..n {
        let image = usable[rng.random_range(0..usable.len())];
        let pair = &pool[image];
        let s = pair.clean.shape();
        let top = rng.random_range(0..=s.height - size);
        let left = rng.random_range(0..=s.width - size);
        let aug = Augment {
            quarter_turns: rng.random_range(0..4),
            flip: rng.random_bool(0.5),
        };
        let crop = |t: &Tensor<f32>| t.crop(top, left, size, size).map(|c| augment(&c, aug));
        batch.hazy.push(crop(&pair.hazy)?);
        batch.clean.push(crop(&pair.clean)?);
        batch.origins.push(PatchOrigin {
            image,
            id: pair.id.clone(),
            top,
            left,
            augment: aug,
        });
    }
    Ok(batch)
}

/// `n` aligned patches of `size×size`, deterministic in `seed`. Images
/// smaller than the patch are skipped with a warning.
pub fn sample_patches(pool: &[ImagePair], n: usize, size: usize, seed: u64) -> Result<PatchBatch> {
    sample_patches_with(pool, n, size, &mut ChaCha8Rng::seed_from_u64(seed))
}
