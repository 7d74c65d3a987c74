use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Float;

pub const PYRAMID_BANDS: usize = 3;

/// Band-pass decomposition `x = up(up(up(lowpass) + b3) + b2) + b1`, written
/// recursively as `G_{k-1} = up(G_k) + LP_k`.
#[derive(Clone, Debug)]
pub struct PyramidLevels<T: Float = f32> {
    /// `LP_1..LP_3` at full, half and quarter resolution.
    pub bands: Vec<Var<T>>,
    /// `G_3`, eighth resolution.
    pub lowpass: Var<T>,
}

/// `G_0 = x`, `G_k = down2(blur(G_{k-1}))`, `LP_k = G_{k-1} - up2(G_k)`.
///
/// H and W must be multiples of 8 and at least 16 so that the coarsest
/// level that is blurred still admits the 2-pixel reflection border.
pub fn build_laplacian_pyramid<T: Float>(
    tape: &mut Tape<T>,
    x: &Var<T>,
) -> Result<PyramidLevels<T>> {
    let s = x.shape();
    let m = 1 << PYRAMID_BANDS;
    if s.height % m != 0 || s.width % m != 0 || s.height < 2 * m || s.width < 2 * m {
        return Err(Error::contract(format!(
            "pyramid needs H and W divisible by {m} and at least {}, got {}x{}",
            2 * m,
            s.height,
            s.width
        )));
    }
    let mut bands = Vec::with_capacity(PYRAMID_BANDS);
    let mut g = x.clone();
    for _ in 0..PYRAMID_BANDS {
        let blurred = tape.gaussian_blur(&g)?;
        let next = tape.downsample2(&blurred)?;
        let up = tape.bilinear_upsample(&next, 2)?;
        bands.push(tape.sub(&g, &up)?);
        g = next;
    }
    Ok(PyramidLevels { bands, lowpass: g })
}

/// Invert [`build_laplacian_pyramid`].
pub fn collapse<T: Float>(tape: &mut Tape<T>, p: &PyramidLevels<T>) -> Result<Var<T>> {
    let mut g = p.lowpass.clone();
    for band in p.bands.iter().rev() {
        let up = tape.bilinear_upsample(&g, 2)?;
        g = tape.add(&up, band)?;
    }
    Ok(g)
}

/// `sum_k mean((LP_k(pred) - LP_k(gt))^2)` over the three bands. The
/// lowpass residual is not compared, so a global offset costs nothing.
pub fn laplace_pyramid_loss<T: Float>(
    tape: &mut Tape<T>,
    pred: &Var<T>,
    gt: &Var<T>,
) -> Result<Var<T>> {
    if pred.shape() != gt.shape() {
        return Err(Error::Shape {
            op: "laplace_pyramid_loss",
            lhs: pred.shape(),
            rhs: gt.shape(),
        });
    }
    let pp = build_laplacian_pyramid(tape, pred)?;
    let pg = build_laplacian_pyramid(tape, gt)?;
    let mut total: Option<Var<T>> = None;
    for (a, b) in pp.bands.iter().zip(&pg.bands) {
        let d = tape.sub(a, b)?;
        let d = tape.square(&d);
        let m = tape.mean(&d);
        total = Some(match total {
            None => m,
            Some(t) => tape.add(&t, &m)?,
        });
    }
    Ok(total.expect("at least one band"))
}
