//! Collapse each multi-branch block body into a single 3x3 convolution.
//!
//! Convolution is linear in its kernel, so for zero padding 1
//!
//! ```text
//! conv(W3, b3; x) + conv(W1, b1; x) + x = conv(W3 + P(W1) + I, b3 + b1; x)
//! ```
//!
//! where `P` places the 1x1 kernel at the centre tap of a zero 3x3 kernel
//! and `I` is the 3x3 identity kernel (`I[c, c, 1, 1] = 1`). An eval-mode
//! batch norm is the per-channel affine map `s_c * (y - mu_c) + beta_c` with
//! `s_c = gamma_c / sqrt(var_c + eps)`, which folds into the preceding
//! convolution as `W'[c] = s_c W[c]` and `b'_c = s_c (b_c - mu_c) + beta_c`.
//! Arithmetic is carried out in f64 and rounded once.
//!
//! Attention, local residual and the single-path convolutions outside the
//! blocks are copied unchanged.

use std::fmt::Write as _;
use std::time::{Duration, Instant};

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::network::{BlockBody, BranchNorm, ErraNet, Form};
use crate::nn::{BatchNorm, ConvParams, PaddingMode};
use crate::tensor::{Float, Shape, Tensor};

fn require_fusable<T: Float>(conv: &ConvParams<T>, kernel: usize, what: &str) -> Result<()> {
    if conv.kernel_size() != kernel || conv.stride != 1 || conv.padding_mode != PaddingMode::Zeros {
        return Err(Error::contract(format!(
            "{what} must be a {k}x{k} stride-1 zero-padded convolution, got {k2}x{k2} stride {s}",
            k = kernel,
            k2 = conv.kernel_size(),
            s = conv.stride
        )));
    }
    if conv.padding != kernel / 2 {
        return Err(Error::contract(format!(
            "{what} must use same padding {}, got {}",
            kernel / 2,
            conv.padding
        )));
    }
    Ok(())
}

/// Embed a 1x1 kernel at the centre of a zero 3x3 kernel.
pub fn pad_1x1_to_3x3<T: Float>(w1: &ConvParams<T>) -> Result<ConvParams<T>> {
    require_fusable(w1, 1, "branch to pad")?;
    let ws = w1.weight.shape();
    let src = w1.weight.data();
    let weight = Tensor::from_fn(Shape::new(ws.batch, ws.channels, 3, 3), |o, i, h, w| {
        if h == 1 && w == 1 {
            src[o * ws.channels + i]
        } else {
            T::zero()
        }
    });
    ConvParams::new(weight, w1.bias.clone(), 1, 1, PaddingMode::Zeros)
}

/// The 3x3 kernel that maps every input to itself.
pub fn identity_as_3x3<T: Float>(channels: usize) -> Result<ConvParams<T>> {
    if channels == 0 {
        return Err(Error::contract(
            "identity kernel needs at least one channel",
        ));
    }
    let weight = Tensor::from_fn(Shape::new(channels, channels, 3, 3), |o, i, h, w| {
        if o == i && h == 1 && w == 1 {
            T::one()
        } else {
            T::zero()
        }
    });
    ConvParams::new(
        weight,
        Tensor::zeros(Shape::new(1, channels, 1, 1)),
        1,
        1,
        PaddingMode::Zeros,
    )
}

/// Merge `conv3(x) + conv1(x) + x` into one 3x3 convolution.
pub fn fuse_branches<T: Float>(
    branch3: &ConvParams<T>,
    branch1: &ConvParams<T>,
    channels: usize,
) -> Result<ConvParams<T>> {
    require_fusable(branch3, 3, "3x3 branch")?;
    let padded = pad_1x1_to_3x3(branch1)?;
    let want = Shape::new(channels, channels, 3, 3);
    for (name, w) in [
        ("3x3 branch", &branch3.weight),
        ("1x1 branch", &padded.weight),
    ] {
        if w.shape() != want {
            return Err(Error::contract(format!(
                "{name} kernel is {}, expected {want}",
                w.shape()
            )));
        }
    }
    let w3 = branch3.weight.data();
    let w1 = padded.weight.data();
    let weight = Tensor::from_fn(want, |o, i, h, w| {
        let idx = ((o * channels + i) * 3 + h) * 3 + w;
        let id = if o == i && h == 1 && w == 1 { 1.0 } else { 0.0 };
        T::lit(w3[idx].as_f64() + w1[idx].as_f64() + id)
    });
    let bias = branch3
        .bias
        .zip_map(&branch1.bias, |a, b| T::lit(a.as_f64() + b.as_f64()))?;
    ConvParams::new(weight, bias, 1, 1, PaddingMode::Zeros)
}

/// Absorb an eval-mode batch norm into the convolution that feeds it.
pub fn fold_bn<T: Float>(conv: &ConvParams<T>, bn: &BatchNorm<T>) -> Result<ConvParams<T>> {
    if bn.training {
        return Err(Error::state(
            "cannot fold a batch norm that is in training mode",
        ));
    }
    let out = conv.out_channels();
    if bn.channels() != out {
        return Err(Error::Shape {
            op: "fold_bn",
            lhs: conv.weight.shape(),
            rhs: bn.gamma.shape(),
        });
    }
    let (scale, _) = bn.affine();
    let per_out = conv.weight.len() / out;
    let mut weight = conv.weight.clone();
    for (o, chunk) in weight.make_mut().chunks_mut(per_out).enumerate() {
        for v in chunk {
            *v = T::lit(scale[o] * v.as_f64());
        }
    }
    let mean = bn.running_mean.data();
    let beta = bn.beta.data();
    let bias = Tensor::from_fn(conv.bias.shape(), |_, c, _, _| {
        T::lit(scale[c] * (conv.bias.data()[c].as_f64() - mean[c].as_f64()) + beta[c].as_f64())
    });
    ConvParams::new(weight, bias, conv.stride, conv.padding, conv.padding_mode)
}

#[derive(Clone, Debug)]
pub struct FusionReport {
    /// Max abs output difference of each block on the probe activations.
    pub block_deviation: Vec<f64>,
    pub end_to_end_deviation: f64,
    pub params_before: usize,
    pub params_after: usize,
    pub time_before: Duration,
    pub time_after: Duration,
    /// Number of BN layers that were in training mode and were switched to
    /// evaluation mode before folding.
    pub bn_switched_to_eval: usize,
}

impl FusionReport {
    pub fn max_block_deviation(&self) -> f64 {
        self.block_deviation.iter().copied().fold(0.0, f64::max)
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let ms = |d: Duration| d.as_secs_f64() * 1e3;
        let _ = writeln!(s, "{:<24} {:>16}", "quantity", "value");
        let _ = writeln!(s, "{:-<24} {:->16}", "", "");
        for (i, d) in self.block_deviation.iter().enumerate() {
            let _ = writeln!(s, "{:<24} {:>16.3e}", format!("block {i} max |diff|"), d);
        }
        let _ = writeln!(
            s,
            "{:<24} {:>16.3e}",
            "end-to-end max |diff|", self.end_to_end_deviation
        );
        let _ = writeln!(s, "{:<24} {:>16}", "parameters before", self.params_before);
        let _ = writeln!(s, "{:<24} {:>16}", "parameters after", self.params_after);
        let _ = writeln!(
            s,
            "{:<24} {:>16.3}",
            "forward ms before",
            ms(self.time_before)
        );
        let _ = writeln!(
            s,
            "{:<24} {:>16.3}",
            "forward ms after",
            ms(self.time_after)
        );
        let _ = writeln!(
            s,
            "{:<24} {:>16}",
            "bn set to eval", self.bn_switched_to_eval
        );
        s
    }

    pub fn to_key_values(&self) -> String {
        let mut s = String::new();
        for (i, d) in self.block_deviation.iter().enumerate() {
            let _ = writeln!(s, "block.{i}.max_abs_deviation={d:e}");
        }
        let _ = writeln!(
            s,
            "end_to_end.max_abs_deviation={:e}",
            self.end_to_end_deviation
        );
        let _ = writeln!(s, "params.before={}", self.params_before);
        let _ = writeln!(s, "params.after={}", self.params_after);
        let _ = writeln!(s, "time.before_seconds={}", self.time_before.as_secs_f64());
        let _ = writeln!(s, "time.after_seconds={}", self.time_after.as_secs_f64());
        let _ = writeln!(s, "bn.switched_to_eval={}", self.bn_switched_to_eval);
        s
    }
}

/// Fuse every block of a training-form model and measure the result on
/// `probe`. BN layers still in training mode are switched to evaluation
/// mode first; their running statistics are taken as final.
pub fn reparameterize_model<T: Float>(
    model: &ErraNet<T>,
    probe: &Tensor<T>,
) -> Result<(ErraNet<T>, FusionReport)> {
    if model.form() == Form::Fused {
        return Err(Error::state("model is already fused"));
    }
    if model.config.flags.bn_per_branch {
        return Err(Error::state(
            "blocks with one batch norm per branch cannot be fused: the branch-wise \
             normalisation of a training-mode model is not a single affine map of the branch sum",
        ));
    }
    let bn_switched_to_eval = count_training_bns(model);
    let mut source = model.clone();
    source.set_training(false);

    let mut fused = source.clone();
    for block in &mut fused.blocks {
        let body = match &block.body {
            BlockBody::MultiBranch {
                branch3,
                branch1,
                norm,
            } => {
                let merged = fuse_branches(branch3, branch1, block.channels())?;
                match norm {
                    BranchNorm::None => merged,
                    BranchNorm::PostSum(bn) => fold_bn(&merged, bn)?,
                    BranchNorm::PerBranch { .. } => {
                        return Err(Error::state("per-branch batch norm cannot be fused"))
                    }
                }
            }
            BlockBody::Fused(_) => return Err(Error::state("model is partially fused")),
        };
        block.body = BlockBody::Fused(body);
    }

    let started = Instant::now();
    let reference = source.infer(probe)?;
    let time_before = started.elapsed();
    let started = Instant::now();
    let output = fused.infer(probe)?;
    let time_after = started.elapsed();
    let end_to_end_deviation = reference.max_abs_diff(&output)?;

    let block_deviation = block_deviations(&source, &fused, probe)?;
    let report = FusionReport {
        block_deviation,
        end_to_end_deviation,
        params_before: source.count_parameters(),
        params_after: fused.count_parameters(),
        time_before,
        time_after,
        bn_switched_to_eval,
    };
    Ok((fused, report))
}

fn count_training_bns<T: Float>(model: &ErraNet<T>) -> usize {
    let mut n = 0;
    for b in &model.blocks {
        if let BlockBody::MultiBranch { norm, .. } = &b.body {
            n += match norm {
                BranchNorm::None => 0,
                BranchNorm::PostSum(bn) => bn.training as usize,
                BranchNorm::PerBranch { bn3, bn1, bn_id } => {
                    bn3.training as usize + bn1.training as usize + bn_id.training as usize
                }
            };
        }
    }
    n
}

/// Run both block stacks on the same trunk activations of the reference
/// model and compare block by block.
fn block_deviations<T: Float>(
    source: &ErraNet<T>,
    fused: &ErraNet<T>,
    probe: &Tensor<T>,
) -> Result<Vec<f64>> {
    let mut tape = Tape::no_grad();
    let x = tape.constant(probe);
    let f0 = source.head.forward(&mut tape, &x)?;
    let f0 = tape.relu(&f0);
    let d = source.down.forward(&mut tape, &f0)?;
    let mut d = tape.relu(&d);
    let mut out = Vec::with_capacity(source.blocks.len());
    for (a, b) in source.blocks.iter().zip(&fused.blocks) {
        let (ya, _) = a.forward(&mut tape, &d)?;
        let (yb, _) = b.forward(&mut tape, &d)?;
        out.push(ya.value().max_abs_diff(yb.value())?);
        d = ya;
    }
    Ok(out)
}
