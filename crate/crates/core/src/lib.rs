//! Re-parameterizable residual attention network for nonhomogeneous image
//! dehazing.
//!
//! The crate contains a small reverse-mode autodiff engine ([`autodiff`]),
//! the layers the network needs ([`nn`], [`attention`]), the network in its
//! multi-branch training form and its fused single-path inference form
//! ([`network`], [`reparam`]), the training objective ([`losses`]), synthetic
//! haze data and quality metrics ([`data`]) and an Adam/cyclical-LR trainer
//! ([`train`]).

pub mod attention;
pub mod autodiff;
pub mod data;
pub mod error;
mod linalg;
pub mod losses;
pub mod network;
pub mod nn;
pub mod pipeline;
pub mod reparam;
pub mod serialize;
pub mod tensor;
pub mod train;

pub use autodiff::{Tape, Var};
pub use error::{Error, Result};
pub use network::{BlockFlags, ErraNet, Form, MaBlock, NetConfig};
pub use tensor::{Float, Shape, Tensor};
