//! Spatial and channel attention sub-blocks.
//!
//! Spatial attention collapses the channels with a max, runs the resulting
//! single-channel map through `1x1 conv -> ReLU -> 1x1 conv -> sigmoid`, and
//! rescales every channel by that per-pixel weight. Channel attention is the
//! squeeze-and-excitation form: global average pool, a bottleneck of two
//! 1x1 convs, sigmoid, and a per-channel rescale. Both weights lie in
//! (0, 1), so neither block can amplify its input.

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{join, ConvParams, Module, PaddingMode, ParamKind};
use crate::tensor::{Float, Tensor};

pub const DEFAULT_SA_HIDDEN: usize = 8;
pub const DEFAULT_CA_REDUCTION: usize = 16;

#[derive(Clone, Debug)]
pub struct SpatialAttention<T: Float = f32> {
    /// 1 -> hidden, 1x1
    pub conv1: ConvParams<T>,
    /// hidden -> 1, 1x1
    pub conv2: ConvParams<T>,
}

impl<T: Float> SpatialAttention<T> {
    pub fn init<R: Rng + ?Sized>(hidden: usize, rng: &mut R) -> Result<Self> {
        if hidden == 0 {
            return Err(Error::config(
                "spatial attention hidden width must be positive",
            ));
        }
        Ok(SpatialAttention {
            conv1: ConvParams::init(1, hidden, 1, 1, 0, PaddingMode::Zeros, rng)?,
            conv2: ConvParams::init(hidden, 1, 1, 1, 0, PaddingMode::Zeros, rng)?,
        })
    }

    pub fn zeros(hidden: usize) -> Result<Self> {
        Ok(SpatialAttention {
            conv1: ConvParams::zeros(1, hidden, 1, 1, 0, PaddingMode::Zeros)?,
            conv2: ConvParams::zeros(hidden, 1, 1, 1, 0, PaddingMode::Zeros)?,
        })
    }

    pub fn hidden(&self) -> usize {
        self.conv1.out_channels()
    }

    /// The B×1×H×W weight map.
    pub fn map(&self, tape: &mut Tape<T>, x: &Var<T>) -> Result<Var<T>> {
        let pooled = tape.channel_max(x);
        let h = self.conv1.forward(tape, &pooled)?;
        let h = tape.relu(&h);
        let h = self.conv2.forward(tape, &h)?;
        Ok(tape.sigmoid(&h))
    }

    pub fn forward(&self, tape: &mut Tape<T>, x: &Var<T>) -> Result<Var<T>> {
        let m = self.map(tape, x)?;
        tape.mul(x, &m)
    }
}

impl<T: Float> Module<T> for SpatialAttention<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>, ParamKind)) {
        self.conv1.visit(&join(prefix, "conv1"), f);
        self.conv2.visit(&join(prefix, "conv2"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>, ParamKind)) {
        self.conv1.visit_mut(&join(prefix, "conv1"), f);
        self.conv2.visit_mut(&join(prefix, "conv2"), f);
    }
}

#[derive(Clone, Debug)]
pub struct ChannelAttention<T: Float = f32> {
    /// C -> C/r, 1x1
    pub conv1: ConvParams<T>,
    /// C/r -> C, 1x1
    pub conv2: ConvParams<T>,
}

fn bottleneck(channels: usize, reduction: usize) -> Result<usize> {
    if reduction == 0 || channels % reduction != 0 {
        return Err(Error::config(format!(
            "channel count {channels} not divisible by reduction ratio {reduction}"
        )));
    }
    Ok(channels / reduction)
}

impl<T: Float> ChannelAttention<T> {
    pub fn init<R: Rng + ?Sized>(channels: usize, reduction: usize, rng: &mut R) -> Result<Self> {
        let mid = bottleneck(channels, reduction)?;
        Ok(ChannelAttention {
            conv1: ConvParams::init(channels, mid, 1, 1, 0, PaddingMode::Zeros, rng)?,
            conv2: ConvParams::init(mid, channels, 1, 1, 0, PaddingMode::Zeros, rng)?,
        })
    }

    pub fn zeros(channels: usize, reduction: usize) -> Result<Self> {
        let mid = bottleneck(channels, reduction)?;
        Ok(ChannelAttention {
            conv1: ConvParams::zeros(channels, mid, 1, 1, 0, PaddingMode::Zeros)?,
            conv2: ConvParams::zeros(mid, channels, 1, 1, 0, PaddingMode::Zeros)?,
        })
    }

    pub fn channels(&self) -> usize {
        self.conv1.in_channels()
    }

    pub fn reduction(&self) -> usize {
        self.conv1.in_channels() / self.conv1.out_channels()
    }

    /// The B×C×1×1 channel weights.
    pub fn weights(&self, tape: &mut Tape<T>, x: &Var<T>) -> Result<Var<T>> {
        let pooled = tape.global_avg_pool(x);
        let h = self.conv1.forward(tape, &pooled)?;
        let h = tape.relu(&h);
        let h = self.conv2.forward(tape, &h)?;
        Ok(tape.sigmoid(&h))
    }

    pub fn forward(&self, tape: &mut Tape<T>, x: &Var<T>) -> Result<Var<T>> {
        if x.shape().channels != self.channels() {
            return Err(Error::Shape {
                op: "channel_attention",
                lhs: x.shape(),
                rhs: self.conv1.weight.shape(),
            });
        }
        let w = self.weights(tape, x)?;
        tape.mul(x, &w)
    }
}

impl<T: Float> Module<T> for ChannelAttention<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>, ParamKind)) {
        self.conv1.visit(&join(prefix, "conv1"), f);
        self.conv2.visit(&join(prefix, "conv2"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>, ParamKind)) {
        self.conv1.visit_mut(&join(prefix, "conv1"), f);
        self.conv2.visit_mut(&join(prefix, "conv2"), f);
    }
}
