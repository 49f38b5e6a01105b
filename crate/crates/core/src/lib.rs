//! SegFormer: a hierarchical Mix Transformer encoder with an All-MLP decoder.

pub mod checkpoint;
pub mod config;
pub mod cost;
pub mod data;
pub mod decoder;
pub mod encoder;
pub mod erf;
pub mod error;
pub mod gradcheck;
pub mod kernels;
pub mod model;
pub mod netpbm;
pub mod params;
pub mod selftest;
pub mod tensor;
pub mod train;

pub use error::{CheckpointError, Error, Result};
pub use kernels::{Tape, Var};
pub use model::SegFormer;
pub use params::ParamStore;
pub use tensor::{Float, Tensor};
