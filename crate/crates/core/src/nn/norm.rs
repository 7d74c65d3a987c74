use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Float, Shape, Tensor};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Batch normalisation over the channel axis.
///
/// In training mode the batch statistics normalise the input and are
/// reported back so the owner can fold them into the running averages; in
/// evaluation mode the running statistics are used and the layer is a fixed
/// per-channel affine map `a*x + b`.
#[derive(Clone, Debug)]
pub struct BatchNorm<T: Float = f32> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    pub eps: f64,
    pub momentum: f64,
    pub training: bool,
}

/// Per-channel statistics of one training-mode batch.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Biased (population) variance.
    pub var: Vec<f64>,
    pub count: usize,
}

impl<T: Float> BatchNorm<T> {
    pub fn new(channels: usize) -> Self {
        let shape = Shape::new(1, channels, 1, 1);
        BatchNorm {
            gamma: Tensor::ones(shape),
            beta: Tensor::zeros(shape),
            running_mean: Tensor::zeros(shape),
            running_var: Tensor::ones(shape),
            eps: BN_EPS,
            momentum: BN_MOMENTUM,
            training: true,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.shape().channels
    }

    pub fn num_params(&self) -> usize {
        self.gamma.len() + self.beta.len()
    }

    /// Coefficients `(a, b)` of the evaluation-mode map `y = a*x + b`.
    pub fn affine(&self) -> (Vec<f64>, Vec<f64>) {
        let c = self.channels();
        let mut scale = Vec::with_capacity(c);
        let mut shift = Vec::with_capacity(c);
        for i in 0..c {
            let s = self.gamma.data()[i].as_f64()
                / (self.running_var.data()[i].as_f64() + self.eps).sqrt();
            scale.push(s);
            shift.push(self.beta.data()[i].as_f64() - s * self.running_mean.data()[i].as_f64());
        }
        (scale, shift)
    }

    pub fn forward(&self, tape: &mut Tape<T>, x: &Var<T>) -> Result<(Var<T>, Option<BatchStats>)> {
        if x.shape().channels != self.channels() {
            return Err(Error::Shape {
                op: "batch_norm",
                lhs: x.shape(),
                rhs: self.gamma.shape(),
            });
        }
        let gamma = tape.param(&self.gamma);
        let beta = tape.param(&self.beta);
        if self.training {
            let (y, stats) = tape.batch_norm_train(x, &gamma, &beta, self.eps)?;
            Ok((y, Some(stats)))
        } else {
            let y = tape.batch_norm_eval(
                x,
                &gamma,
                &beta,
                &self.running_mean,
                &self.running_var,
                self.eps,
            )?;
            Ok((y, None))
        }
    }

    /// Blend batch statistics into the running averages (unbiased variance).
    pub fn update_running(&mut self, stats: &BatchStats) {
        let m = self.momentum;
        let unbias = if stats.count > 1 {
            stats.count as f64 / (stats.count - 1) as f64
        } else {
            1.0
        };
        let rm = self.running_mean.make_mut();
        for (r, &v) in rm.iter_mut().zip(&stats.mean) {
            *r = T::lit((1.0 - m) * r.as_f64() + m * v);
        }
        let rv = self.running_var.make_mut();
        for (r, &v) in rv.iter_mut().zip(&stats.var) {
            *r = T::lit((1.0 - m) * r.as_f64() + m * v * unbias);
        }
    }
}

fn channel_stats<T: Float>(x: &Tensor<T>) -> BatchStats {
    let s = x.shape();
    let plane = s.plane();
    let count = s.batch * plane;
    let mut mean = vec![0.0f64; s.channels];
    let mut var = vec![0.0f64; s.channels];
    for (i, chunk) in x.data().chunks(plane).enumerate() {
        mean[i % s.channels] += chunk.iter().map(|v| v.as_f64()).sum::<f64>();
    }
    for m in &mut mean {
        *m /= count as f64;
    }
    for (i, chunk) in x.data().chunks(plane).enumerate() {
        let mu = mean[i % s.channels];
        var[i % s.channels] += chunk
            .iter()
            .map(|v| {
                let d = v.as_f64() - mu;
                d * d
            })
            .sum::<f64>();
    }
    for v in &mut var {
        *v /= count as f64;
    }
    BatchStats { mean, var, count }
}

fn check_affine<T: Float>(x: &Var<T>, p: &Var<T>) -> Result<()> {
    if p.shape() != Shape::new(1, x.shape().channels, 1, 1) {
        return Err(Error::Shape {
            op: "batch_norm",
            lhs: x.shape(),
            rhs: p.shape(),
        });
    }
    Ok(())
}

impl<T: Float> Tape<T> {
    /// Normalise with the batch's own statistics.
    pub fn batch_norm_train(
        &mut self,
        x: &Var<T>,
        gamma: &Var<T>,
        beta: &Var<T>,
        eps: f64,
    ) -> Result<(Var<T>, BatchStats)> {
        check_affine(x, gamma)?;
        check_affine(x, beta)?;
        let s = x.shape();
        let plane = s.plane();
        let stats = channel_stats(x.value());
        let inv_std: Vec<f64> = stats.var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (gd, bd) = (gamma.value().data(), beta.value().data());
        let mut xhat = Vec::with_capacity(s.numel());
        let mut y = Vec::with_capacity(s.numel());
        for (i, chunk) in x.value().data().chunks(plane).enumerate() {
            let c = i % s.channels;
            let (mu, is) = (stats.mean[c], inv_std[c]);
            let (g, b) = (gd[c].as_f64(), bd[c].as_f64());
            for &v in chunk {
                let xh = (v.as_f64() - mu) * is;
                xhat.push(T::lit(xh));
                y.push(T::lit(g * xh + b));
            }
        }
        let xhat = Tensor::from_parts(s, xhat);
        let gval = gamma.value().clone();
        let count = stats.count as f64;
        let out = self.record(
            "batch_norm_train",
            Tensor::from_parts(s, y),
            &[x, gamma, beta],
            move |g, mask| {
                // per-channel sums of dy and dy*xhat
                let c_n = s.channels;
                let mut sum_dy = vec![0.0f64; c_n];
                let mut sum_dy_xh = vec![0.0f64; c_n];
                for (i, (gc, xc)) in g
                    .data()
                    .chunks(plane)
                    .zip(xhat.data().chunks(plane))
                    .enumerate()
                {
                    let c = i % c_n;
                    for (&gi, &xi) in gc.iter().zip(xc) {
                        sum_dy[c] += gi.as_f64();
                        sum_dy_xh[c] += gi.as_f64() * xi.as_f64();
                    }
                }
                let dx = mask[0].then(|| {
                    let mut dx = Vec::with_capacity(s.numel());
                    for (i, (gc, xc)) in g
                        .data()
                        .chunks(plane)
                        .zip(xhat.data().chunks(plane))
                        .enumerate()
                    {
                        let c = i % c_n;
                        let k = gval.data()[c].as_f64() * inv_std[c] / count;
                        for (&gi, &xi) in gc.iter().zip(xc) {
                            dx.push(T::lit(
                                k * (count * gi.as_f64() - sum_dy[c] - xi.as_f64() * sum_dy_xh[c]),
                            ));
                        }
                    }
                    Tensor::from_parts(s, dx)
                });
                let pshape = Shape::new(1, c_n, 1, 1);
                let to_t =
                    |v: &[f64]| Tensor::from_parts(pshape, v.iter().map(|&x| T::lit(x)).collect());
                vec![
                    dx,
                    mask[1].then(|| to_t(&sum_dy_xh)),
                    mask[2].then(|| to_t(&sum_dy)),
                ]
            },
        );
        Ok((out, stats))
    }

    /// Normalise with fixed running statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: &Var<T>,
        gamma: &Var<T>,
        beta: &Var<T>,
        mean: &Tensor<T>,
        var: &Tensor<T>,
        eps: f64,
    ) -> Result<Var<T>> {
        check_affine(x, gamma)?;
        check_affine(x, beta)?;
        let s = x.shape();
        let plane = s.plane();
        let inv_std: Vec<f64> = var
            .data()
            .iter()
            .map(|v| 1.0 / (v.as_f64() + eps).sqrt())
            .collect();
        let mu: Vec<f64> = mean.data().iter().map(|v| v.as_f64()).collect();
        let (gd, bd) = (gamma.value().data(), beta.value().data());
        let mut y = Vec::with_capacity(s.numel());
        for (i, chunk) in x.value().data().chunks(plane).enumerate() {
            let c = i % s.channels;
            let a = gd[c].as_f64() * inv_std[c];
            let b = bd[c].as_f64() - a * mu[c];
            let (a, b) = (T::lit(a), T::lit(b));
            y.extend(chunk.iter().map(|&v| a * v + b));
        }
        let xv = x.value().clone();
        let gval = gamma.value().clone();
        Ok(self.record(
            "batch_norm_eval",
            Tensor::from_parts(s, y),
            &[x, gamma, beta],
            move |g, mask| {
                let c_n = s.channels;
                let mut sum_dy = vec![0.0f64; c_n];
                let mut sum_dy_xh = vec![0.0f64; c_n];
                let mut dx = mask[0].then(|| Vec::with_capacity(s.numel()));
                for (i, (gc, xc)) in g
                    .data()
                    .chunks(plane)
                    .zip(xv.data().chunks(plane))
                    .enumerate()
                {
                    let c = i % c_n;
                    let a = T::lit(gval.data()[c].as_f64() * inv_std[c]);
                    for (&gi, &xi) in gc.iter().zip(xc) {
                        sum_dy[c] += gi.as_f64();
                        sum_dy_xh[c] += gi.as_f64() * (xi.as_f64() - mu[c]) * inv_std[c];
                        if let Some(d) = dx.as_mut() {
                            d.push(gi * a);
                        }
                    }
                }
                let pshape = Shape::new(1, c_n, 1, 1);
                let to_t =
                    |v: &[f64]| Tensor::from_parts(pshape, v.iter().map(|&x| T::lit(x)).collect());
                vec![
                    dx.map(|d| Tensor::from_parts(s, d)),
                    mask[1].then(|| to_t(&sum_dy_xh)),
                    mask[2].then(|| to_t(&sum_dy)),
                ]
            },
        ))
    }
}
