//! Whole-image inference: pad to the size the network accepts, run it,
//! crop back and clamp.

use crate::error::Result;
use crate::network::{ErraNet, REQUIRED_MULTIPLE};
use crate::tensor::Tensor;

/// Mirror index that keeps folding for pads longer than the image.
fn fold_index(i: isize, len: usize) -> usize {
    if len == 1 {
        return 0;
    }
    let period = 2 * (len as isize - 1);
    let m = i.rem_euclid(period);
    (if m >= len as isize { period - m } else { m }) as usize
}

/// Reflection-pad bottom and right up to the next multiple of `multiple`.
pub fn pad_to_multiple(x: &Tensor<f32>, multiple: usize) -> Tensor<f32> {
    let s = x.shape();
    let up = |n: usize| n.div_ceil(multiple) * multiple;
    let (h, w) = (up(s.height), up(s.width));
    if (h, w) == (s.height, s.width) {
        return x.clone();
    }
    Tensor::from_fn(s.with_spatial(h, w), |b, c, i, j| {
        x.at(
            b,
            c,
            fold_index(i as isize, s.height),
            fold_index(j as isize, s.width),
        )
    })
}

/// Restore `x` with `model`; any input size is accepted. BN layers always
/// use their running statistics here.
pub fn dehaze(model: &ErraNet<f32>, x: &Tensor<f32>) -> Result<Tensor<f32>> {
    let s = x.shape();
    let padded = pad_to_multiple(x, REQUIRED_MULTIPLE);
    let y = if model.is_training() {
        let mut eval = model.clone();
        eval.set_training(false);
        eval.infer(&padded)?
    } else {
        model.infer(&padded)?
    };
    Ok(y.crop(0, 0, s.height, s.width)?.map(|v| v.clamp(0.0, 1.0)))
}
