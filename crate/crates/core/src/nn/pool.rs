use crate::autodiff::{Tape, Var};
use crate::tensor::{Float, Shape, Tensor};

/// Reduce over channels with `pick(candidate, best)`; returns values and
/// the winning channel per pixel (first index on ties).
fn channel_reduce<T: Float>(x: &Tensor<T>, better: impl Fn(T, T) -> bool) -> (Tensor<T>, Vec<u32>) {
    let s = x.shape();
    let plane = s.plane();
    let mut out = Vec::with_capacity(s.batch * plane);
    let mut arg = vec![0u32; s.batch * plane];
    for (b, image) in x.data().chunks(s.channels * plane).enumerate() {
        let start = out.len();
        out.extend_from_slice(&image[..plane]);
        let best = &mut out[start..];
        let idx = &mut arg[b * plane..(b + 1) * plane];
        for (c, src) in image.chunks(plane).enumerate().skip(1) {
            for ((m, i), &v) in best.iter_mut().zip(idx.iter_mut()).zip(src) {
                if better(v, *m) {
                    *m = v;
                    *i = c as u32;
                }
            }
        }
    }
    (Tensor::from_parts(s.with_channels(1), out), arg)
}

fn route_to_arg<T: Float>(g: &Tensor<T>, arg: &[u32], in_shape: Shape) -> Tensor<T> {
    let plane = in_shape.plane();
    let mut dx = vec![T::zero(); in_shape.numel()];
    for b in 0..in_shape.batch {
        for p in 0..plane {
            let c = arg[b * plane + p] as usize;
            dx[(b * in_shape.channels + c) * plane + p] = g.data()[b * plane + p];
        }
    }
    Tensor::from_parts(in_shape, dx)
}

impl<T: Float> Tape<T> {
    /// Max over the channel axis: B×C×H×W → B×1×H×W. The gradient goes to
    /// the first maximising channel.
    pub fn channel_max(&mut self, x: &Var<T>) -> Var<T> {
        let (out, arg) = channel_reduce(x.value(), |v, best| v > best);
        let s = x.shape();
        self.record("channel_max", out, &[x], move |g, _| {
            vec![Some(route_to_arg(g, &arg, s))]
        })
    }

    /// Min over the channel axis, mirror of [`Tape::channel_max`].
    pub fn channel_min(&mut self, x: &Var<T>) -> Var<T> {
        let (out, arg) = channel_reduce(x.value(), |v, best| v < best);
        let s = x.shape();
        self.record("channel_min", out, &[x], move |g, _| {
            vec![Some(route_to_arg(g, &arg, s))]
        })
    }

    /// Spatial mean per channel: B×C×H×W → B×C×1×1.
    pub fn global_avg_pool(&mut self, x: &Var<T>) -> Var<T> {
        let s = x.shape();
        let plane = s.plane();
        let out: Vec<T> = x
            .value()
            .data()
            .chunks(plane)
            .map(|c| T::lit(c.iter().map(|v| v.as_f64()).sum::<f64>() / plane as f64))
            .collect();
        let out = Tensor::from_parts(s.with_spatial(1, 1), out);
        self.record("global_avg_pool", out, &[x], move |g, _| {
            let inv = 1.0 / plane as f64;
            let mut dx = Vec::with_capacity(s.numel());
            for &gi in g.data() {
                let v = T::lit(gi.as_f64() * inv);
                dx.extend(std::iter::repeat_n(v, plane));
            }
            vec![Some(Tensor::from_parts(s, dx))]
        })
    }
}
