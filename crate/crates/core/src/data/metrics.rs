//! Full-reference image quality metrics for images in `[0, 1]`.

use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

/// Reported PSNR for identical images.
pub const PSNR_CAP: f64 = 100.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn same_shape<T: Float>(a: &Tensor<T>, b: &Tensor<T>, op: &'static str) -> Result<()> {
    a.expect_shape(b, op)
}

/// `10 log10(1 / MSE)` over all elements, capped at [`PSNR_CAP`].
pub fn psnr<T: Float>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    same_shape(a, b, "psnr")?;
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x.as_f64() - y.as_f64()).powi(2))
        .sum::<f64>()
        / a.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP))
}

/// Normalised 1-D Gaussian taps of the SSIM window.
pub fn ssim_taps() -> [f64; SSIM_WINDOW] {
    let r = (SSIM_WINDOW / 2) as f64;
    let mut k = [0.0; SSIM_WINDOW];
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - r;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = k.iter().sum();
    k.map(|v| v / s)
}

/// Separable valid-mode filtering of one plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (oh, ow) = (h - n + 1, w - n + 1);
    let mut rows = vec![0.0; h * ow];
    for i in 0..h {
        let row = &plane[i * w..(i + 1) * w];
        for j in 0..ow {
            rows[i * ow + j] = row[j..j + n].iter().zip(k).map(|(a, b)| a * b).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for i in 0..oh {
        for j in 0..ow {
            out[i * ow + j] = (0..n).map(|t| rows[(i + t) * ow + j] * k[t]).sum();
        }
    }
    out
}

/// Single-scale SSIM with an 11×11 Gaussian window (sigma 1.5), evaluated
/// only where the window fits and averaged over every channel and pixel of
/// the batch.
pub fn ssim<T: Float>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    same_shape(a, b, "ssim")?;
    let s = a.shape();
    if s.height < SSIM_WINDOW || s.width < SSIM_WINDOW {
        return Err(Error::contract(format!(
            "ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {}x{}",
            s.height, s.width
        )));
    }
    let k = ssim_taps();
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let plane = s.plane();
    let mut total = 0.0;
    let mut count = 0usize;
    for (pa, pb) in a.data().chunks(plane).zip(b.data().chunks(plane)) {
        let x: Vec<f64> = pa.iter().map(|v| v.as_f64()).collect();
        let y: Vec<f64> = pb.iter().map(|v| v.as_f64()).collect();
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(&y).map(|(p, q)| p * q).collect();
        let f = |v: &[f64]| filter_valid(v, s.height, s.width, &k);
        let (mx, my, exx, eyy, exy) = (f(&x), f(&y), f(&xx), f(&yy), f(&xy));
        for i in 0..mx.len() {
            let (ux, uy) = (mx[i], my[i]);
            let vx = exx[i] - ux * ux;
            let vy = eyy[i] - uy * uy;
            let cov = exy[i] - ux * uy;
            let num = (2.0 * ux * uy + c1) * (2.0 * cov + c2);
            let den = (ux * ux + uy * uy + c1) * (vx + vy + c2);
            total += num / den;
        }
        count += mx.len();
    }
    Ok(total / count as f64)
}
