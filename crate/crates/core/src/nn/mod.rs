//! Convolution, normalisation, pooling and resampling layers.
//!
//! Every operator is a method on [`Tape`](crate::autodiff::Tape) and is
//! differentiable with respect to all of its tensor inputs.

mod conv;
mod module;
mod norm;
mod pool;
mod resample;

pub use conv::{ConvParams, PaddingMode};
pub use module::{join, Module, ParamKind};
pub use norm::{BatchNorm, BatchStats, BN_EPS, BN_MOMENTUM};
pub use resample::{reflect_index, BINOMIAL_5};
