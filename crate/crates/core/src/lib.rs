//! Action-conditioned video world models on a synthetic latent world:
//! masked-token generation and flow matching, with four transformer block
//! variants and parameter sharing.

pub mod blocks;
pub mod error;
pub mod evalbench;
pub mod flow_hwm;
pub mod latentworld;
pub mod masked_hwm;
pub mod numcore;
pub mod rng;
pub mod rope;
pub mod run;
pub mod scalar;
pub mod train;

pub use error::{HwmError, Result};
pub use scalar::Scalar;

pub type Tensor32 = numcore::Tensor<f32>;
pub type Tensor64 = numcore::Tensor<f64>;
pub type ParamStore32 = numcore::ParamStore<f32>;
pub type ParamStore64 = numcore::ParamStore<f64>;
pub type Tape32 = numcore::Tape<f32>;
pub type Tape64 = numcore::Tape<f64>;
