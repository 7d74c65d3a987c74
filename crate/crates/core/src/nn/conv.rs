use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::linalg::{gemm, MatMut, MatRef};
use crate::tensor::{Float, Shape, Tensor};

/// Target number of output pixels per im2col panel. Keeps the column buffer
/// cache resident for the GEMM that consumes it.
const PANEL_COLS: usize = 512;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PaddingMode {
    Zeros,
    Reflection,
}

/// Weights and geometry of one 2-D convolution.
#[derive(Clone, Debug)]
pub struct ConvParams<T: Float = f32> {
    /// `(out_channels, in_channels, k, k)`
    pub weight: Tensor<T>,
    /// `(1, out_channels, 1, 1)`
    pub bias: Tensor<T>,
    pub stride: usize,
    pub padding: usize,
    pub padding_mode: PaddingMode,
}

impl<T: Float> ConvParams<T> {
    pub fn new(
        weight: Tensor<T>,
        bias: Tensor<T>,
        stride: usize,
        padding: usize,
        padding_mode: PaddingMode,
    ) -> Result<Self> {
        let ws = weight.shape();
        if ws.height != ws.width || ![1, 3, 7].contains(&ws.height) {
            return Err(Error::config(format!(
                "kernel must be square with size 1, 3 or 7, got {}x{}",
                ws.height, ws.width
            )));
        }
        if bias.shape() != Shape::new(1, ws.batch, 1, 1) {
            return Err(Error::Shape {
                op: "conv bias",
                lhs: ws,
                rhs: bias.shape(),
            });
        }
        if stride == 0 {
            return Err(Error::config("stride must be positive"));
        }
        Ok(ConvParams {
            weight,
            bias,
            stride,
            padding,
            padding_mode,
        })
    }

    /// Uniform fan-in initialisation, `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`
    /// for both weight and bias.
    pub fn init<R: Rng + ?Sized>(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        padding_mode: PaddingMode,
        rng: &mut R,
    ) -> Result<Self> {
        let bound = 1.0 / ((in_channels * kernel * kernel) as f64).sqrt();
        let weight = Tensor::uniform(
            Shape::new(out_channels, in_channels, kernel, kernel),
            -bound,
            bound,
            rng,
        );
        let bias = Tensor::uniform(Shape::new(1, out_channels, 1, 1), -bound, bound, rng);
        Self::new(weight, bias, stride, padding, padding_mode)
    }

    pub fn zeros(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        padding_mode: PaddingMode,
    ) -> Result<Self> {
        Self::new(
            Tensor::zeros(Shape::new(out_channels, in_channels, kernel, kernel)),
            Tensor::zeros(Shape::new(1, out_channels, 1, 1)),
            stride,
            padding,
            padding_mode,
        )
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape().channels
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape().batch
    }

    pub fn kernel_size(&self) -> usize {
        self.weight.shape().height
    }

    pub fn num_params(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    pub fn output_size(&self, height: usize, width: usize) -> Option<(usize, usize)> {
        out_size(height, width, self.kernel_size(), self.stride, self.padding)
    }

    pub fn forward(&self, tape: &mut Tape<T>, x: &Var<T>) -> Result<Var<T>> {
        let w = tape.param(&self.weight);
        let b = tape.param(&self.bias);
        match self.padding_mode {
            PaddingMode::Zeros => tape.conv2d(x, &w, Some(&b), self.stride, self.padding),
            PaddingMode::Reflection => {
                let padded = tape.reflection_pad(x, self.padding)?;
                tape.conv2d(&padded, &w, Some(&b), self.stride, 0)
            }
        }
    }
}

fn out_size(h: usize, w: usize, k: usize, stride: usize, pad: usize) -> Option<(usize, usize)> {
    let (hp, wp) = (h + 2 * pad, w + 2 * pad);
    if hp < k || wp < k {
        return None;
    }
    Some(((hp - k) / stride + 1, (wp - k) / stride + 1))
}

#[derive(Clone, Copy)]
struct Geometry {
    cin: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl Geometry {
    fn pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    fn panel_rows(&self) -> usize {
        (PANEL_COLS / self.ow).clamp(1, self.oh)
    }
}

/// Fill `col` (`cin*k*k` rows by `(oy1-oy0)*ow` columns) from one image.
fn im2col<T: Float>(x: &[T], g: &Geometry, oy0: usize, oy1: usize, col: &mut [T]) {
    let ncols = (oy1 - oy0) * g.ow;
    let mut row = 0;
    for c in 0..g.cin {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let dst = &mut col[row * ncols..(row + 1) * ncols];
                for (r, oy) in (oy0..oy1).enumerate() {
                    let seg = &mut dst[r * g.ow..(r + 1) * g.ow];
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        seg.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    if g.stride == 1 {
                        // valid ox satisfy 0 <= ox + kx - pad < w
                        let lo = g.pad.saturating_sub(kx).min(g.ow);
                        let hi = (g.w + g.pad).saturating_sub(kx).min(g.ow).max(lo);
                        seg[..lo].fill(T::zero());
                        seg[hi..].fill(T::zero());
                        if hi > lo {
                            let start = lo + kx - g.pad;
                            seg[lo..hi].copy_from_slice(&src[start..start + hi - lo]);
                        }
                    } else {
                        for (ox, v) in seg.iter_mut().enumerate() {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            *v = if ix < 0 || ix >= g.w as isize {
                                T::zero()
                            } else {
                                src[ix as usize]
                            };
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add `col` back into `dx`.
fn col2im<T: Float>(col: &[T], g: &Geometry, oy0: usize, oy1: usize, dx: &mut [T]) {
    let ncols = (oy1 - oy0) * g.ow;
    let mut row = 0;
    for c in 0..g.cin {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let src = &col[row * ncols..(row + 1) * ncols];
                for (r, oy) in (oy0..oy1).enumerate() {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let seg = &src[r * g.ow..(r + 1) * g.ow];
                    for (ox, &v) in seg.iter().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && (ix as usize) < g.w {
                            dst[ix as usize] += v;
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// Below this many output channels a GEMM wastes most of its register
/// tile, so stride-1 convolutions accumulate shifted rows directly.
const DIRECT_MAX_COUT: usize = 4;

fn direct_stride1<T: Float>(x: &[T], w: &[T], g: &Geometry, cout: usize, out: &mut [T]) {
    let plane_in = g.h * g.w;
    let plane_out = g.oh * g.ow;
    for o in 0..cout {
        let dst = &mut out[o * plane_out..(o + 1) * plane_out];
        for c in 0..g.cin {
            let src = &x[c * plane_in..(c + 1) * plane_in];
            for ky in 0..g.k {
                for kx in 0..g.k {
                    let wv = w[((o * g.cin + c) * g.k + ky) * g.k + kx];
                    let lo = g.pad.saturating_sub(kx).min(g.ow);
                    let hi = (g.w + g.pad).saturating_sub(kx).min(g.ow).max(lo);
                    if hi == lo {
                        continue;
                    }
                    let start = lo + kx - g.pad;
                    for oy in 0..g.oh {
                        let iy = (oy + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let row =
                            &src[iy as usize * g.w + start..iy as usize * g.w + start + hi - lo];
                        let acc = &mut dst[oy * g.ow + lo..oy * g.ow + hi];
                        for (a, &v) in acc.iter_mut().zip(row) {
                            *a += wv * v;
                        }
                    }
                }
            }
        }
    }
}

fn conv_forward<T: Float>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    g: &Geometry,
) -> Tensor<T> {
    let s = x.shape();
    let cout = w.shape().batch;
    let kk = g.cin * g.k * g.k;
    let plane_out = g.oh * g.ow;
    let mut out = vec![T::zero(); s.batch * cout * plane_out];
    if let Some(b) = bias {
        for n in 0..s.batch {
            for (co, &bv) in b.data().iter().enumerate() {
                let base = (n * cout + co) * plane_out;
                out[base..base + plane_out].fill(bv);
            }
        }
    }
    let wmat = MatRef::row_major(w.data(), cout, kk);
    let in_len = g.cin * g.h * g.w;
    let mut col = Vec::new();
    for n in 0..s.batch {
        let xn = &x.data()[n * in_len..(n + 1) * in_len];
        let on = &mut out[n * cout * plane_out..(n + 1) * cout * plane_out];
        if cout <= DIRECT_MAX_COUT && g.stride == 1 && !g.pointwise() {
            direct_stride1(xn, w.data(), g, cout, on);
            continue;
        }
        if g.pointwise() {
            gemm(
                T::one(),
                wmat,
                MatRef::row_major(xn, g.cin, plane_out),
                T::one(),
                MatMut::row_major(on, cout, plane_out),
            );
            continue;
        }
        let rows = g.panel_rows();
        let mut oy0 = 0;
        while oy0 < g.oh {
            let oy1 = (oy0 + rows).min(g.oh);
            let ncols = (oy1 - oy0) * g.ow;
            col.resize(kk * ncols, T::zero());
            im2col(xn, g, oy0, oy1, &mut col);
            gemm(
                T::one(),
                wmat,
                MatRef::row_major(&col, kk, ncols),
                T::one(),
                MatMut::new(&mut on[oy0 * g.ow..], cout, ncols, plane_out, 1),
            );
            oy0 = oy1;
        }
    }
    Tensor::from_parts(Shape::new(s.batch, cout, g.oh, g.ow), out)
}

struct ConvGrads<T: Float> {
    dx: Option<Tensor<T>>,
    dw: Option<Tensor<T>>,
    db: Option<Tensor<T>>,
}

fn conv_backward<T: Float>(
    grad: &Tensor<T>,
    x: &Tensor<T>,
    w: &Tensor<T>,
    g: &Geometry,
    need: [bool; 3],
) -> ConvGrads<T> {
    let s = x.shape();
    let cout = w.shape().batch;
    let kk = g.cin * g.k * g.k;
    let plane_out = g.oh * g.ow;
    let in_len = g.cin * g.h * g.w;
    let wmat = MatRef::row_major(w.data(), cout, kk);

    let mut dx = need[0].then(|| vec![T::zero(); x.len()]);
    let mut dw = need[1].then(|| vec![T::zero(); w.len()]);
    let db = need[2].then(|| {
        let mut acc = vec![0.0f64; cout];
        for (i, chunk) in grad.data().chunks(plane_out).enumerate() {
            acc[i % cout] += chunk.iter().map(|v| v.as_f64()).sum::<f64>();
        }
        Tensor::from_parts(
            Shape::new(1, cout, 1, 1),
            acc.into_iter().map(T::lit).collect(),
        )
    });

    if dx.is_some() || dw.is_some() {
        let mut col = Vec::new();
        let mut dcol = Vec::new();
        for n in 0..s.batch {
            let xn = &x.data()[n * in_len..(n + 1) * in_len];
            let gn = &grad.data()[n * cout * plane_out..(n + 1) * cout * plane_out];
            if g.pointwise() {
                if let Some(dw) = dw.as_mut() {
                    gemm(
                        T::one(),
                        MatRef::row_major(gn, cout, plane_out),
                        MatRef::row_major(xn, g.cin, plane_out).t(),
                        T::one(),
                        MatMut::row_major(dw, cout, kk),
                    );
                }
                if let Some(dx) = dx.as_mut() {
                    gemm(
                        T::one(),
                        wmat.t(),
                        MatRef::row_major(gn, cout, plane_out),
                        T::zero(),
                        MatMut::row_major(&mut dx[n * in_len..(n + 1) * in_len], g.cin, plane_out),
                    );
                }
                continue;
            }
            let rows = g.panel_rows();
            let mut oy0 = 0;
            while oy0 < g.oh {
                let oy1 = (oy0 + rows).min(g.oh);
                let ncols = (oy1 - oy0) * g.ow;
                let gpanel = MatRef::new(&gn[oy0 * g.ow..], cout, ncols, plane_out, 1);
                if let Some(dw) = dw.as_mut() {
                    col.resize(kk * ncols, T::zero());
                    im2col(xn, g, oy0, oy1, &mut col);
                    gemm(
                        T::one(),
                        gpanel,
                        MatRef::row_major(&col, kk, ncols).t(),
                        T::one(),
                        MatMut::row_major(dw, cout, kk),
                    );
                }
                if let Some(dx) = dx.as_mut() {
                    dcol.resize(kk * ncols, T::zero());
                    gemm(
                        T::one(),
                        wmat.t(),
                        gpanel,
                        T::zero(),
                        MatMut::row_major(&mut dcol, kk, ncols),
                    );
                    col2im(&dcol, g, oy0, oy1, &mut dx[n * in_len..(n + 1) * in_len]);
                }
                oy0 = oy1;
            }
        }
    }
    ConvGrads {
        dx: dx.map(|d| Tensor::from_parts(s, d)),
        dw: dw.map(|d| Tensor::from_parts(w.shape(), d)),
        db,
    }
}

impl<T: Float> Tape<T> {
    /// Cross-correlation with zero padding. `weight` is
    /// `(out, in, k, k)`, `bias` is `(1, out, 1, 1)`.
    pub fn conv2d(
        &mut self,
        x: &Var<T>,
        weight: &Var<T>,
        bias: Option<&Var<T>>,
        stride: usize,
        padding: usize,
    ) -> Result<Var<T>> {
        let s = x.shape();
        let ws = weight.shape();
        if ws.channels != s.channels {
            return Err(Error::Shape {
                op: "conv2d",
                lhs: s,
                rhs: ws,
            });
        }
        if ws.height != ws.width {
            return Err(Error::contract("conv2d kernels must be square"));
        }
        if let Some(b) = bias {
            if b.shape() != Shape::new(1, ws.batch, 1, 1) {
                return Err(Error::Shape {
                    op: "conv2d bias",
                    lhs: ws,
                    rhs: b.shape(),
                });
            }
        }
        if stride == 0 {
            return Err(Error::contract("conv2d stride must be positive"));
        }
        let (oh, ow) =
            out_size(s.height, s.width, ws.height, stride, padding).ok_or_else(|| {
                Error::contract(format!(
                    "input {s} too small for {}x{} kernel with padding {padding}",
                    ws.height, ws.width
                ))
            })?;
        let geom = Geometry {
            cin: s.channels,
            h: s.height,
            w: s.width,
            k: ws.height,
            stride,
            pad: padding,
            oh,
            ow,
        };
        let out = conv_forward(x.value(), weight.value(), bias.map(|b| b.value()), &geom);
        let (xv, wv) = (x.value().clone(), weight.value().clone());
        let mut parents = vec![x, weight];
        if let Some(b) = bias {
            parents.push(b);
        }
        let has_bias = bias.is_some();
        Ok(self.record("conv2d", out, &parents, move |g, mask| {
            let need = [mask[0], mask[1], has_bias && mask[2]];
            let grads = conv_backward(g, &xv, &wv, &geom, need);
            let mut v = vec![grads.dx, grads.dw];
            if has_bias {
                v.push(grads.db);
            }
            v
        }))
    }
}
