//! Atmospheric scattering model `I = J t + A (1 - t)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

pub const AIRLIGHT_RANGE: (f64, f64) = (0.6, 1.0);
/// Transmission below this is too small to invert reliably.
pub const UNSTABLE_T: f64 = 1e-3;

/// Knobs for random transmission fields.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HazeParams {
    pub t_min: f64,
    pub blobs_min: usize,
    pub blobs_max: usize,
    /// Scales how far the field reaches towards `t_min`, in `[0, 1]`.
    pub density: f64,
    /// Draw one airlight value per channel instead of one shared value.
    pub per_channel_airlight: bool,
}

impl Default for HazeParams {
    fn default() -> Self {
        HazeParams {
            t_min: 0.15,
            blobs_min: 3,
            blobs_max: 8,
            density: 1.0,
            per_channel_airlight: true,
        }
    }
}

#[derive(Clone, Debug)]
pub struct HazeRecipe {
    /// Per-channel atmospheric light, each in `[0.6, 1]`.
    pub airlight: [f64; 3],
    /// `B×1×H×W` (or `1×1×H×W`, shared over the batch), values in `(0, 1]`.
    pub transmission: Tensor<f32>,
    pub seed: u64,
}

impl HazeRecipe {
    pub fn new(airlight: [f64; 3], transmission: Tensor<f32>, seed: u64) -> Result<Self> {
        let r = HazeRecipe {
            airlight,
            transmission,
            seed,
        };
        r.validate()?;
        Ok(r)
    }

    /// Spatially constant transmission.
    pub fn uniform(height: usize, width: usize, t: f64, airlight: [f64; 3]) -> Result<Self> {
        Self::new(
            airlight,
            Tensor::full(Shape::new(1, 1, height, width), t as f32),
            0,
        )
    }

    /// Smooth random transmission from a sum of Gaussian blobs, rescaled so
    /// the densest point reaches `1 - density * (1 - t_min)`.
    pub fn random(height: usize, width: usize, params: &HazeParams, seed: u64) -> Result<Self> {
        if !(params.t_min > 0.0 && params.t_min <= 1.0) {
            return Err(Error::config(format!(
                "t_min must lie in (0, 1], got {}",
                params.t_min
            )));
        }
        if !(0.0..=1.0).contains(&params.density) {
            return Err(Error::config(format!(
                "density must lie in [0, 1], got {}",
                params.density
            )));
        }
        if params.blobs_min == 0 || params.blobs_min > params.blobs_max {
            return Err(Error::config(
                "blob count range must be non-empty and start at 1 or more",
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.random_range(params.blobs_min..=params.blobs_max);
        let scale = height.min(width) as f64;
        let blobs: Vec<(f64, f64, f64, f64)> = (0..n)
            .map(|_| {
                (
                    rng.random_range(0.0..height as f64),
                    rng.random_range(0.0..width as f64),
                    rng.random_range(0.1..0.5) * scale,
                    rng.random_range(0.4..1.0),
                )
            })
            .collect();
        let field: Vec<f64> = (0..height * width)
            .map(|i| {
                let (y, x) = ((i / width) as f64, (i % width) as f64);
                blobs
                    .iter()
                    .map(|&(cy, cx, s, a)| {
                        a * (-((y - cy).powi(2) + (x - cx).powi(2)) / (2.0 * s * s)).exp()
                    })
                    .sum()
            })
            .collect();
        let lo = field.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = field.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let span = (hi - lo).max(1e-12);
        let reach = params.density * (1.0 - params.t_min);
        let t = field
            .iter()
            .map(|&f| (1.0 - reach * (f - lo) / span) as f32)
            .collect();
        let airlight = if params.per_channel_airlight {
            [0; 3].map(|_| rng.random_range(AIRLIGHT_RANGE.0..=AIRLIGHT_RANGE.1))
        } else {
            [rng.random_range(AIRLIGHT_RANGE.0..=AIRLIGHT_RANGE.1); 3]
        };
        Self::new(
            airlight,
            Tensor::from_vec(Shape::new(1, 1, height, width), t)?,
            seed,
        )
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(a) = self
            .airlight
            .iter()
            .find(|a| !(AIRLIGHT_RANGE.0..=AIRLIGHT_RANGE.1).contains(*a))
        {
            return Err(Error::contract(format!("airlight {a} outside [0.6, 1]")));
        }
        if self.transmission.shape().channels != 1 {
            return Err(Error::contract("transmission must have one channel"));
        }
        if let Some(t) = self
            .transmission
            .data()
            .iter()
            .find(|&&t| !(t > 0.0 && t <= 1.0))
        {
            return Err(Error::contract(format!(
                "transmission value {t} outside (0, 1]"
            )));
        }
        Ok(())
    }

    pub fn mean_transmission(&self) -> f64 {
        self.transmission.mean_f64()
    }

    fn check_against(&self, image: &Tensor<f32>) -> Result<()> {
        let s = image.shape();
        let ts = self.transmission.shape();
        if s.channels != 3
            || ts.height != s.height
            || ts.width != s.width
            || !(ts.batch == 1 || ts.batch == s.batch)
        {
            return Err(Error::Shape {
                op: "haze recipe",
                lhs: s,
                rhs: ts,
            });
        }
        Ok(())
    }

    fn t_at(&self, b: usize, h: usize, w: usize) -> f64 {
        let bb = if self.transmission.shape().batch == 1 {
            0
        } else {
            b
        };
        self.transmission.at(bb, 0, h, w) as f64
    }
}

/// `I = J t + A (1 - t)`, clamped to `[0, 1]`.
pub fn synthesize_haze(clean: &Tensor<f32>, recipe: &HazeRecipe) -> Result<Tensor<f32>> {
    recipe.validate()?;
    recipe.check_against(clean)?;
    Ok(Tensor::from_fn(clean.shape(), |b, c, h, w| {
        let t = recipe.t_at(b, h, w);
        let j = clean.at(b, c, h, w) as f64;
        (j * t + recipe.airlight[c] * (1.0 - t)).clamp(0.0, 1.0) as f32
    }))
}

#[derive(Clone, Debug)]
pub struct Inversion {
    pub clean: Tensor<f32>,
    /// `B×1×H×W`; 1 where `t < 1e-3` and the pixel was set to 0 instead of
    /// being divided out.
    pub unstable: Tensor<f32>,
}

impl Inversion {
    pub fn unstable_count(&self) -> usize {
        self.unstable.data().iter().filter(|&&m| m != 0.0).count()
    }
}

/// `J = (I - A (1 - t)) / t`. The result is not clamped.
pub fn invert_haze(hazy: &Tensor<f32>, recipe: &HazeRecipe) -> Result<Inversion> {
    recipe.check_against(hazy)?;
    let s = hazy.shape();
    let clean = Tensor::from_fn(s, |b, c, h, w| {
        let t = recipe.t_at(b, h, w);
        if t < UNSTABLE_T {
            0.0
        } else {
            ((hazy.at(b, c, h, w) as f64 - recipe.airlight[c] * (1.0 - t)) / t) as f32
        }
    });
    let unstable = Tensor::from_fn(s.with_channels(1), |b, _, h, w| {
        if recipe.t_at(b, h, w) < UNSTABLE_T {
            1.0
        } else {
            0.0
        }
    });
    Ok(Inversion { clean, unstable })
}
