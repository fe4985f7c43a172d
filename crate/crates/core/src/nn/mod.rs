//! Tiny decoder-only transformer with exact gradients.
//!
//! Student and teacher forward passes share one [`ModelState`]; the only
//! difference between them is the context they are conditioned on.

mod adam;
pub mod checkpoint;
mod config;
mod kernels;
mod model;
mod params;
mod sample;
mod scalar;

pub use adam::{BETA1, BETA2, EPS as ADAM_EPS};
pub use checkpoint::AnyState;
pub use config::{DType, ModelConfig, PosEncoding};
pub use model::LogProbRow;
pub use params::{Layout, ModelState, ParamSpec};
pub use sample::{argmax, sample_index, Generation, RowCache, SampleParams, EOS};
pub use scalar::Scalar;

#[cfg(test)]
pub(crate) use config::tiny_config;
