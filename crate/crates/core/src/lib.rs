// `!(x > 0.0)` style checks reject NaN along with out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod blockcodec;
pub mod error;
pub mod image;
pub mod net;
pub mod pipeline;
pub mod tensor;
pub mod trainer;
pub mod wucodec;

pub use error::{Error, Result};
