//! Scalar reference implementations shared by the integration tests. Each
//! one is written straight from the defining formula with plain loops and
//! no code from the library beyond the tensor container.
#![allow(dead_code)]

use erra::{Shape, Tensor};
use rand::seq::SliceRandom;
use rand::Rng;

pub fn naive_conv(
    x: &Tensor<f64>,
    w: &Tensor<f64>,
    b: Option<&Tensor<f64>>,
    stride: usize,
    pad: usize,
) -> Tensor<f64> {
    let s = x.shape();
    let ws = w.shape();
    let k = ws.height;
    let oh = (s.height + 2 * pad - k) / stride + 1;
    let ow = (s.width + 2 * pad - k) / stride + 1;
    Tensor::from_fn(Shape::new(s.batch, ws.batch, oh, ow), |n, o, i, j| {
        let mut acc = b.map_or(0.0, |b| b.data()[o]);
        for c in 0..s.channels {
            for ky in 0..k {
                for kx in 0..k {
                    let y = (i * stride + ky) as isize - pad as isize;
                    let xx = (j * stride + kx) as isize - pad as isize;
                    if y < 0 || xx < 0 || y >= s.height as isize || xx >= s.width as isize {
                        continue;
                    }
                    acc += w.at(o, c, ky, kx) * x.at(n, c, y as usize, xx as usize);
                }
            }
        }
        acc
    })
}

pub fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// Central differences of a scalar function of one tensor.
pub fn fd_grad(x: &Tensor<f64>, h: f64, f: impl Fn(&Tensor<f64>) -> f64) -> Tensor<f64> {
    let mut g = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let mut p = x.clone();
        p.make_mut()[i] += h;
        let mut m = x.clone();
        m.make_mut()[i] -= h;
        g.push((f(&p) - f(&m)) / (2.0 * h));
    }
    Tensor::from_vec(x.shape(), g).unwrap()
}

/// `|a - n|_2 / max(|a|_2, |n|_2)`; 0 when both vanish.
pub fn rel_error(analytic: &Tensor<f64>, numeric: &Tensor<f64>) -> f64 {
    let norm = |t: &[f64]| t.iter().map(|v| v * v).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(a, b)| a - b)
        .collect();
    let scale = norm(analytic.data()).max(norm(numeric.data()));
    if scale == 0.0 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

/// A shuffled evenly spaced grid over `[low, high]`, so no two entries are
/// closer than `(high - low) / numel`. Keeps max/min away from ties within
/// a finite-difference step.
pub fn separated(shape: Shape, low: f64, high: f64, rng: &mut impl Rng) -> Tensor<f64> {
    let n = shape.numel();
    let step = (high - low) / n as f64;
    let mut v: Vec<f64> = (0..n).map(|i| low + step * (i as f64 + 0.5)).collect();
    v.shuffle(rng);
    Tensor::from_vec(shape, v).unwrap()
}

pub fn rgb_sv(r: f64, g: f64, b: f64) -> (f64, f64) {
    let v = r.max(g).max(b);
    let mn = r.min(g).min(b);
    let s = if v == 0.0 { 0.0 } else { (v - mn) / v };
    (s, v)
}

/// Colour-attenuation loss with saturation weight `wa` and value weight `wb`.
pub fn color_loss(pred: &Tensor<f64>, gt: &Tensor<f64>, wa: f64, wb: f64) -> f64 {
    let s = pred.shape();
    let mut ls = 0.0;
    let mut lv = 0.0;
    let px = (s.batch * s.height * s.width) as f64;
    for n in 0..s.batch {
        for i in 0..s.height {
            for j in 0..s.width {
                let c = |t: &Tensor<f64>, ch| t.at(n, ch, i, j).clamp(0.0, 1.0);
                let (sp, vp) = rgb_sv(c(pred, 0), c(pred, 1), c(pred, 2));
                let (sg, vg) = rgb_sv(c(gt, 0), c(gt, 1), c(gt, 2));
                ls += (sg - sp).abs();
                lv += (vg - vp).powi(2);
            }
        }
    }
    wa * ls / px + wb * lv / px
}

pub fn mse(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    let mut acc = 0.0;
    for (x, y) in a.data().iter().zip(b.data()) {
        acc += (x - y) * (x - y);
    }
    acc / a.len() as f64
}

pub fn psnr_oracle(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    let m = mse(a, b);
    if m == 0.0 {
        100.0
    } else {
        (10.0 * (1.0 / m).log10()).min(100.0)
    }
}

/// SSIM with the 2-D Gaussian window evaluated directly at every valid
/// position.
pub fn ssim_oracle(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    let s = a.shape();
    let n = 11usize;
    let sigma = 1.5f64;
    let mut win = vec![0.0; n * n];
    let mut total = 0.0;
    for y in 0..n {
        for x in 0..n {
            let dy = y as f64 - 5.0;
            let dx = x as f64 - 5.0;
            win[y * n + x] = (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp();
            total += win[y * n + x];
        }
    }
    for v in &mut win {
        *v /= total;
    }
    let c1 = 0.01f64.powi(2);
    let c2 = 0.03f64.powi(2);
    let mut sum = 0.0;
    let mut count = 0usize;
    for bt in 0..s.batch {
        for c in 0..s.channels {
            for i in 0..=s.height - n {
                for j in 0..=s.width - n {
                    let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                    for y in 0..n {
                        for x in 0..n {
                            let w = win[y * n + x];
                            let p = a.at(bt, c, i + y, j + x);
                            let q = b.at(bt, c, i + y, j + x);
                            mx += w * p;
                            my += w * q;
                            sxx += w * p * p;
                            syy += w * q * q;
                            sxy += w * p * q;
                        }
                    }
                    let vx = sxx - mx * mx;
                    let vy = syy - my * my;
                    let cov = sxy - mx * my;
                    sum += (2.0 * mx * my + c1) * (2.0 * cov + c2)
                        / ((mx * mx + my * my + c1) * (vx + vy + c2));
                    count += 1;
                }
            }
        }
    }
    sum / count as f64
}

/// `I = J t + A (1 - t)` per element, unclamped.
pub fn scatter(j: f64, t: f64, a: f64) -> f64 {
    j * t + a * (1.0 - t)
}

pub fn random_image(shape: Shape, rng: &mut impl Rng) -> Tensor<f64> {
    Tensor::uniform(shape, 0.0, 1.0, rng)
}

/// Gradient of `sum(f(x) * r)` with respect to `x`, from the tape and from
/// central differences, for a fixed random projection `r`.
pub fn input_grads(
    x: &Tensor<f64>,
    h: f64,
    seed: u64,
    f: impl Fn(&mut erra::Tape<f64>, &erra::Var<f64>) -> erra::Var<f64>,
) -> (Tensor<f64>, Tensor<f64>) {
    use rand::SeedableRng;
    let out_shape = {
        let mut tape = erra::Tape::no_grad();
        let xv = tape.constant(x);
        f(&mut tape, &xv).shape()
    };
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let r = Tensor::<f64>::randn(out_shape, &mut rng);
    let project = |tape: &mut erra::Tape<f64>, y: &erra::Var<f64>| {
        let rv = tape.constant(&r);
        let p = tape.mul(y, &rv).unwrap();
        tape.sum(&p)
    };
    let mut tape = erra::Tape::new();
    let xv = tape.leaf(x.clone(), true);
    let y = f(&mut tape, &xv);
    let loss = project(&mut tape, &y);
    tape.backward(&loss).unwrap();
    let analytic = tape
        .grad(&xv)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(x.shape()));
    let numeric = fd_grad(x, h, |xp| {
        let mut tape = erra::Tape::no_grad();
        let xv = tape.constant(xp);
        let y = f(&mut tape, &xv);
        project(&mut tape, &y).value().item()
    });
    (analytic, numeric)
}
