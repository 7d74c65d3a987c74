//! Training objective: L1 reconstruction plus colour-attenuation and
//! Laplacian-pyramid terms.

mod hsv;
mod pyramid;

pub use hsv::{color_attenuation_loss, haze_density, rgb_to_sv};
pub use pyramid::{
    build_laplacian_pyramid, collapse, laplace_pyramid_loss, PyramidLevels, PYRAMID_BANDS,
};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Float;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    /// Weight of the colour-attenuation term.
    pub alpha1: f64,
    /// Weight of the pyramid term.
    pub alpha2: f64,
    /// Saturation weight inside the colour-attenuation term.
    pub ca_alpha: f64,
    /// Value weight inside the colour-attenuation term.
    pub ca_beta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha1: 0.5,
            alpha2: 5.0,
            ca_alpha: 1.0,
            ca_beta: 0.5,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.alpha1, self.alpha2, self.ca_alpha, self.ca_beta];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::config(format!(
                "loss weights must be finite and >= 0, got {self:?}"
            )));
        }
        Ok(())
    }
}

/// The individual terms of one evaluation of [`total_loss`].
#[derive(Clone, Debug)]
pub struct LossTerms<T: Float = f32> {
    pub l1: Var<T>,
    pub color: Var<T>,
    pub laplace: Var<T>,
    pub total: Var<T>,
}

impl<T: Float> LossTerms<T> {
    /// `(l1, l_ca, l_laplace, total)` as f64.
    pub fn values(&self) -> (f64, f64, f64, f64) {
        let f = |v: &Var<T>| v.value().item().as_f64();
        (
            f(&self.l1),
            f(&self.color),
            f(&self.laplace),
            f(&self.total),
        )
    }
}

pub fn l1_loss<T: Float>(tape: &mut Tape<T>, pred: &Var<T>, gt: &Var<T>) -> Result<Var<T>> {
    if pred.shape() != gt.shape() {
        return Err(Error::Shape {
            op: "l1_loss",
            lhs: pred.shape(),
            rhs: gt.shape(),
        });
    }
    let d = tape.sub(pred, gt)?;
    let d = tape.abs(&d);
    Ok(tape.mean(&d))
}

/// `mean|pred - gt| + alpha1 * L_ca + alpha2 * L_laplace`.
pub fn total_loss<T: Float>(
    tape: &mut Tape<T>,
    pred: &Var<T>,
    gt: &Var<T>,
    w: &LossWeights,
) -> Result<LossTerms<T>> {
    let l1 = l1_loss(tape, pred, gt)?;
    let color = color_attenuation_loss(tape, pred, gt, w)?;
    let laplace = laplace_pyramid_loss(tape, pred, gt)?;
    let a = tape.scale(&color, w.alpha1);
    let b = tape.scale(&laplace, w.alpha2);
    let total = tape.add(&l1, &a)?;
    let total = tape.add(&total, &b)?;
    Ok(LossTerms {
        l1,
        color,
        laplace,
        total,
    })
}
