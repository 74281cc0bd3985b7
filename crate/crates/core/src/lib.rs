//! Joint optical-flow and scene-flow estimation from RGB frames, point
//! clouds and event streams, with cross-modal channel-attention fusion and
//! mutual-information regularization.
//!
//! Everything numeric is generic over [`Real`]; the aliases below pin the
//! two supported precisions.

pub mod dataset;
pub mod error;
pub mod events;
pub mod fusion;
pub mod geometry;
pub mod mireg;
pub mod model;
pub mod objectives;
pub mod optim;
pub mod scenegen;
pub mod scalar;
pub mod tensor;
pub mod train;
pub mod viz;

pub use error::{Error, Result};
pub use scalar::Real;

pub type Tensor32 = tensor::Tensor<f32>;
pub type Tensor64 = tensor::Tensor<f64>;
pub type Tape32 = tensor::Tape<f32>;
pub type Tape64 = tensor::Tape<f64>;
pub type ParamStore32 = tensor::ParamStore<f32>;
pub type ParamStore64 = tensor::ParamStore<f64>;
