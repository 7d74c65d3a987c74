//! Procedurally generated clean scenes: a colour gradient background with
//! filled shapes and a low-amplitude value-noise texture.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::haze::{synthesize_haze, HazeParams, HazeRecipe};
use crate::data::patches::ImagePair;
use crate::error::Result;
use crate::tensor::{Shape, Tensor};

fn random_color<R: Rng + ?Sized>(rng: &mut R) -> [f64; 3] {
    // Saturated colours: one channel high, one low, one anywhere.
    let mut c = [
        rng.random_range(0.6..1.0),
        rng.random_range(0.0..0.35),
        rng.random_range(0.0..1.0),
    ];
    for i in (1..3).rev() {
        let j = rng.random_range(0..=i);
        c.swap(i, j);
    }
    c
}

enum Figure {
    Rect { y0: f64, x0: f64, y1: f64, x1: f64 },
    Disc { cy: f64, cx: f64, r: f64 },
}

impl Figure {
    fn contains(&self, y: f64, x: f64) -> bool {
        match *self {
            Figure::Rect { y0, x0, y1, x1 } => y >= y0 && y < y1 && x >= x0 && x < x1,
            Figure::Disc { cy, cx, r } => (y - cy).powi(2) + (x - cx).powi(2) <= r * r,
        }
    }
}

/// A `1×3×H×W` image with values in `[0, 1]`.
pub fn procedural_image<R: Rng + ?Sized>(height: usize, width: usize, rng: &mut R) -> Tensor<f32> {
    let (h, w) = (height as f64, width as f64);
    let c0 = random_color(rng);
    let c1 = random_color(rng);
    let angle: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let (dy, dx) = angle.sin_cos();

    let n_shapes = rng.random_range(3..=9);
    let shapes: Vec<(Figure, [f64; 3])> = (0..n_shapes)
        .map(|_| {
            let s = if rng.random_bool(0.5) {
                let (y0, x0) = (rng.random_range(0.0..h), rng.random_range(0.0..w));
                Figure::Rect {
                    y0,
                    x0,
                    y1: y0 + rng.random_range(0.1..0.5) * h,
                    x1: x0 + rng.random_range(0.1..0.5) * w,
                }
            } else {
                Figure::Disc {
                    cy: rng.random_range(0.0..h),
                    cx: rng.random_range(0.0..w),
                    r: rng.random_range(0.05..0.3) * h.min(w),
                }
            };
            (s, random_color(rng))
        })
        .collect();

    // Value noise on a coarse lattice, bilinearly interpolated.
    let cell = rng.random_range(4.0..16.0f64);
    let (gh, gw) = ((h / cell) as usize + 2, (w / cell) as usize + 2);
    let lattice: Vec<f64> = (0..gh * gw).map(|_| rng.random_range(-1.0..1.0)).collect();
    let amp = rng.random_range(0.02..0.08);
    let noise = |y: f64, x: f64| {
        let (fy, fx) = (y / cell, x / cell);
        let (iy, ix) = (fy as usize, fx as usize);
        let (ty, tx) = (fy - iy as f64, fx - ix as f64);
        let g = |a: usize, b: usize| lattice[a * gw + b];
        let top = g(iy, ix) * (1.0 - tx) + g(iy, ix + 1) * tx;
        let bot = g(iy + 1, ix) * (1.0 - tx) + g(iy + 1, ix + 1) * tx;
        top * (1.0 - ty) + bot * ty
    };

    let norm = (h * dy.abs() + w * dx.abs()).max(1.0);
    let offset = (if dy < 0.0 { -dy * h } else { 0.0 }) + (if dx < 0.0 { -dx * w } else { 0.0 });
    let mut data = vec![0f32; 3 * height * width];
    for i in 0..height {
        for j in 0..width {
            let (y, x) = (i as f64 + 0.5, j as f64 + 0.5);
            let s = ((y * dy + x * dx + offset) / norm).clamp(0.0, 1.0);
            let mut px = [0.0; 3];
            for c in 0..3 {
                px[c] = c0[c] * (1.0 - s) + c1[c] * s;
            }
            for (shape, color) in &shapes {
                if shape.contains(y, x) {
                    px = *color;
                }
            }
            let n = amp * noise(y, x);
            for c in 0..3 {
                data[(c * height + i) * width + j] = (px[c] + n).clamp(0.0, 1.0) as f32;
            }
        }
    }
    Tensor::from_vec(Shape::new(1, 3, height, width), data).expect("sized buffer")
}

/// `count` procedural clean images with synthetic haze, deterministic in
/// `seed`.
pub fn synthetic_pairs(
    count: usize,
    height: usize,
    width: usize,
    params: &HazeParams,
    seed: u64,
) -> Result<Vec<ImagePair>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|i| {
            let clean = procedural_image(height, width, &mut rng);
            let recipe = HazeRecipe::random(height, width, params, rng.random())?;
            let hazy = synthesize_haze(&clean, &recipe)?;
            Ok(ImagePair {
                id: format!("synthetic_{i:04}"),
                hazy,
                clean,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn images_are_in_range_and_deterministic() {
        let a = procedural_image(37, 53, &mut ChaCha8Rng::seed_from_u64(4));
        let b = procedural_image(37, 53, &mut ChaCha8Rng::seed_from_u64(4));
        assert_eq!(a, b);
        assert_eq!(a.shape(), Shape::new(1, 3, 37, 53));
        assert!(a.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        let pairs = synthetic_pairs(2, 32, 32, &HazeParams::default(), 5).unwrap();
        assert_eq!(pairs.len(), 2);
        assert_ne!(pairs[0].clean, pairs[1].clean);
    }
}
