//! Desk-scale toolkit for rectified-flow feature distillation.
//!
//! Numerics are generic over [`Scalar`] (`f32`/`f64`); `f64` is the default
//! everywhere and the aliases below name the two concrete instantiations.

pub mod aniso_diffusion;
pub mod autodiff;
pub mod error;
pub mod flexloss;
pub mod harness;
pub mod hvi_color;
pub mod ndtensor;
pub mod nn_blocks;
pub mod rectflow;
pub mod scalar;

pub use error::{Error, Result};
pub use ndtensor::{Rng, Tensor};
pub use scalar::Scalar;

pub type Tensor64 = Tensor<f64>;
pub type Tensor32 = Tensor<f32>;
pub type Tape64 = autodiff::Tape<f64>;
pub type Tape32 = autodiff::Tape<f32>;
pub type ParamSet64 = autodiff::ParamSet<f64>;
pub type ParamSet32 = autodiff::ParamSet<f32>;
