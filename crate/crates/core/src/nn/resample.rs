//! Padding, resampling and blur operators.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

/// 1-D binomial taps; the blur kernel is their outer product.
pub const BINOMIAL_5: [f64; 5] = [1.0 / 16.0, 4.0 / 16.0, 6.0 / 16.0, 4.0 / 16.0, 1.0 / 16.0];

/// Mirror index for reflection padding (edge pixel not repeated).
/// Valid for `-len < i < 2*len - 1`.
#[inline]
pub fn reflect_index(i: isize, len: usize) -> usize {
    let n = len as isize;
    let r = if i < 0 {
        -i
    } else if i >= n {
        2 * (n - 1) - i
    } else {
        i
    };
    r as usize
}

/// One linear-interpolation tap pair along an axis.
#[derive(Clone, Copy)]
struct Tap {
    i0: usize,
    i1: usize,
    w0: f64,
    w1: f64,
}

/// Half-pixel (align-corners = false) sampling positions for upscaling
/// `len` by `factor`; sources left of the first centre clamp to index 0.
fn bilinear_taps(len: usize, factor: usize) -> Vec<Tap> {
    (0..len * factor)
        .map(|dst| {
            let src = ((dst as f64 + 0.5) / factor as f64 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(len - 1);
            let i1 = (i0 + 1).min(len - 1);
            let w1 = src - i0 as f64;
            Tap {
                i0,
                i1,
                w0: 1.0 - w1,
                w1,
            }
        })
        .collect()
}

impl<T: Float> Tape<T> {
    /// Reflection padding by `pad` pixels on every spatial side.
    pub fn reflection_pad(&mut self, x: &Var<T>, pad: usize) -> Result<Var<T>> {
        let s = x.shape();
        if pad == 0 {
            return Ok(x.clone());
        }
        if pad >= s.height || pad >= s.width {
            return Err(Error::contract(format!(
                "reflection pad {pad} needs spatial size above {pad}, got {}x{}",
                s.height, s.width
            )));
        }
        let (oh, ow) = (s.height + 2 * pad, s.width + 2 * pad);
        let rows: Vec<usize> = (0..oh)
            .map(|i| reflect_index(i as isize - pad as isize, s.height))
            .collect();
        let cols: Vec<usize> = (0..ow)
            .map(|i| reflect_index(i as isize - pad as isize, s.width))
            .collect();
        let d = x.value().data();
        let mut out = Vec::with_capacity(s.batch * s.channels * oh * ow);
        for plane in d.chunks(s.plane()) {
            for &r in &rows {
                let src = &plane[r * s.width..(r + 1) * s.width];
                out.extend(cols.iter().map(|&c| src[c]));
            }
        }
        let out = Tensor::from_parts(s.with_spatial(oh, ow), out);
        Ok(self.record("reflection_pad", out, &[x], move |g, _| {
            let mut dx = vec![T::zero(); s.numel()];
            for (gp, dp) in g.data().chunks(oh * ow).zip(dx.chunks_mut(s.plane())) {
                for (i, &r) in rows.iter().enumerate() {
                    for (j, &c) in cols.iter().enumerate() {
                        dp[r * s.width + c] += gp[i * ow + j];
                    }
                }
            }
            vec![Some(Tensor::from_parts(s, dx))]
        }))
    }

    /// Bilinear upsampling by an integer factor (align-corners = false).
    pub fn bilinear_upsample(&mut self, x: &Var<T>, factor: usize) -> Result<Var<T>> {
        if factor == 0 {
            return Err(Error::contract("upsample factor must be at least 1"));
        }
        if factor == 1 {
            return Ok(x.clone());
        }
        let s = x.shape();
        let (oh, ow) = (s.height * factor, s.width * factor);
        let ty = bilinear_taps(s.height, factor);
        let tx = bilinear_taps(s.width, factor);
        let mut out = Vec::with_capacity(s.batch * s.channels * oh * ow);
        // Horizontal pass over every source row, then blend row pairs.
        let wx: Vec<(T, T)> = tx.iter().map(|t| (T::lit(t.w0), T::lit(t.w1))).collect();
        let mut rows = vec![T::zero(); s.height * ow];
        for plane in x.value().data().chunks(s.plane()) {
            for (src, dst) in plane.chunks(s.width).zip(rows.chunks_mut(ow)) {
                for ((d, t), &(w0, w1)) in dst.iter_mut().zip(&tx).zip(&wx) {
                    *d = src[t.i0] * w0 + src[t.i1] * w1;
                }
            }
            for ry in &ty {
                let (w0, w1) = (T::lit(ry.w0), T::lit(ry.w1));
                let r0 = &rows[ry.i0 * ow..(ry.i0 + 1) * ow];
                let r1 = &rows[ry.i1 * ow..(ry.i1 + 1) * ow];
                out.extend(r0.iter().zip(r1).map(|(&a, &b)| a * w0 + b * w1));
            }
        }
        let out = Tensor::from_parts(s.with_spatial(oh, ow), out);
        Ok(self.record("bilinear_upsample", out, &[x], move |g, _| {
            let mut dx = vec![0.0f64; s.numel()];
            for (gp, dp) in g.data().chunks(oh * ow).zip(dx.chunks_mut(s.plane())) {
                for (i, ry) in ty.iter().enumerate() {
                    for (j, cx) in tx.iter().enumerate() {
                        let v = gp[i * ow + j].as_f64();
                        dp[ry.i0 * s.width + cx.i0] += v * ry.w0 * cx.w0;
                        dp[ry.i0 * s.width + cx.i1] += v * ry.w0 * cx.w1;
                        dp[ry.i1 * s.width + cx.i0] += v * ry.w1 * cx.w0;
                        dp[ry.i1 * s.width + cx.i1] += v * ry.w1 * cx.w1;
                    }
                }
            }
            vec![Some(Tensor::from_parts(
                s,
                dx.into_iter().map(T::lit).collect(),
            ))]
        }))
    }

    /// Keep every second pixel starting at index 0. Both spatial extents
    /// must be even.
    pub fn downsample2(&mut self, x: &Var<T>) -> Result<Var<T>> {
        let s = x.shape();
        if s.height % 2 != 0 || s.width % 2 != 0 {
            return Err(Error::contract(format!(
                "downsample2 needs even spatial size, got {}x{}",
                s.height, s.width
            )));
        }
        let (oh, ow) = (s.height / 2, s.width / 2);
        let mut out = Vec::with_capacity(s.batch * s.channels * oh * ow);
        for plane in x.value().data().chunks(s.plane()) {
            for i in 0..oh {
                let row = &plane[2 * i * s.width..(2 * i + 1) * s.width];
                out.extend(row.iter().step_by(2).copied());
            }
        }
        let out = Tensor::from_parts(s.with_spatial(oh, ow), out);
        Ok(self.record("downsample2", out, &[x], move |g, _| {
            let mut dx = vec![T::zero(); s.numel()];
            for (gp, dp) in g.data().chunks(oh * ow).zip(dx.chunks_mut(s.plane())) {
                for i in 0..oh {
                    for j in 0..ow {
                        dp[2 * i * s.width + 2 * j] = gp[i * ow + j];
                    }
                }
            }
            vec![Some(Tensor::from_parts(s, dx))]
        }))
    }

    /// Depthwise 5×5 binomial blur with reflection padding of 2; channels
    /// never mix. Needs at least 3 pixels per spatial axis.
    pub fn gaussian_blur(&mut self, x: &Var<T>) -> Result<Var<T>> {
        let padded = self.reflection_pad(x, 2)?;
        Ok(self.depthwise_binomial_valid(&padded))
    }

    fn depthwise_binomial_valid(&mut self, x: &Var<T>) -> Var<T> {
        let s = x.shape();
        let (oh, ow) = (s.height - 4, s.width - 4);
        let k = BINOMIAL_5;
        let mut out = Vec::with_capacity(s.batch * s.channels * oh * ow);
        for plane in x.value().data().chunks(s.plane()) {
            for i in 0..oh {
                for j in 0..ow {
                    let mut acc = 0.0f64;
                    for (dy, ky) in k.iter().enumerate() {
                        let row = &plane[(i + dy) * s.width + j..(i + dy) * s.width + j + 5];
                        let mut r = 0.0;
                        for (v, kx) in row.iter().zip(k.iter()) {
                            r += v.as_f64() * kx;
                        }
                        acc += r * ky;
                    }
                    out.push(T::lit(acc));
                }
            }
        }
        let out = Tensor::from_parts(s.with_spatial(oh, ow), out);
        self.record("binomial_blur", out, &[x], move |g, _| {
            let mut dx = vec![0.0f64; s.numel()];
            for (gp, dp) in g.data().chunks(oh * ow).zip(dx.chunks_mut(s.plane())) {
                for i in 0..oh {
                    for j in 0..ow {
                        let v = gp[i * ow + j].as_f64();
                        for (dy, ky) in k.iter().enumerate() {
                            let base = (i + dy) * s.width + j;
                            for (dx_, kx) in k.iter().enumerate() {
                                dp[base + dx_] += v * ky * kx;
                            }
                        }
                    }
                }
            }
            vec![Some(Tensor::from_parts(
                s,
                dx.into_iter().map(T::lit).collect(),
            ))]
        })
    }
}
