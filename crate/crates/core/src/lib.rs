// Numeric kernels take many slice arguments, index parallel arrays and
// reject NaN through negated comparisons.
#![allow(clippy::too_many_arguments, clippy::needless_range_loop, clippy::neg_cmp_op_on_partial_ord)]

pub mod attention;
pub mod cli;
pub mod config;
pub mod container;
pub mod denoiser;
mod engine;
pub mod error;
pub mod frames;
pub mod inversion;
pub mod metrics;
pub mod pipeline;
pub mod schedule;
pub mod tensor;
pub mod toyworld;

pub use engine::{Adam, ParamEntry, ParamStore};
pub use error::{Error, Result};
pub use tensor::VideoTensor;
