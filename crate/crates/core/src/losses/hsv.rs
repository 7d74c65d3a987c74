use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::tensor::Float;

fn expect_rgb<T: Float>(x: &Var<T>, op: &'static str) -> Result<()> {
    if x.shape().channels != 3 {
        return Err(Error::Shape {
            op,
            lhs: x.shape(),
            rhs: x.shape().with_channels(3),
        });
    }
    Ok(())
}

/// Saturation and value of an RGB batch, each B×1×H×W.
///
/// `V = max(r, g, b)` and `S = (V - min(r, g, b)) / V`, with `S = 0` where
/// `V = 0`. The caller is responsible for clamping the input to `[0, 1]`.
pub fn rgb_to_sv<T: Float>(tape: &mut Tape<T>, x: &Var<T>) -> Result<(Var<T>, Var<T>)> {
    expect_rgb(x, "rgb_to_sv")?;
    let v = tape.channel_max(x);
    let mn = tape.channel_min(x);
    let chroma = tape.sub(&v, &mn)?;
    let s = tape.div_or_zero(&chroma, &v)?;
    Ok((s, v))
}

/// Colour-attenuation haze density `|V - S|`, B×1×H×W. Larger values
/// indicate bright, washed-out pixels.
pub fn haze_density<T: Float>(tape: &mut Tape<T>, x: &Var<T>) -> Result<Var<T>> {
    let (s, v) = rgb_to_sv(tape, x)?;
    let d = tape.sub(&v, &s)?;
    Ok(tape.abs(&d))
}

/// `ca_alpha * mean|S(gt) - S(pred)| + ca_beta * mean((V(gt) - V(pred))^2)`.
///
/// The saturation term is an L1 mean and the value term a squared mean;
/// the asymmetry is intentional. Both inputs are clamped to `[0, 1]` first.
pub fn color_attenuation_loss<T: Float>(
    tape: &mut Tape<T>,
    pred: &Var<T>,
    gt: &Var<T>,
    w: &LossWeights,
) -> Result<Var<T>> {
    if pred.shape() != gt.shape() {
        return Err(Error::Shape {
            op: "color_attenuation_loss",
            lhs: pred.shape(),
            rhs: gt.shape(),
        });
    }
    let p = tape.clamp(pred, 0.0, 1.0);
    let g = tape.clamp(gt, 0.0, 1.0);
    let (sp, vp) = rgb_to_sv(tape, &p)?;
    let (sg, vg) = rgb_to_sv(tape, &g)?;
    let ds = tape.sub(&sg, &sp)?;
    let ds = tape.abs(&ds);
    let ls = tape.mean(&ds);
    let dv = tape.sub(&vg, &vp)?;
    let dv = tape.square(&dv);
    let lv = tape.mean(&dv);
    let ls = tape.scale(&ls, w.ca_alpha);
    let lv = tape.scale(&lv, w.ca_beta);
    tape.add(&ls, &lv)
}
