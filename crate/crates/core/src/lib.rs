// `!(x > 0.0)` style checks are deliberate: they reject NaN as well.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bbox;
pub mod config;
pub mod curriculum;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod frame;
pub mod gradsuite;
pub mod head;
pub mod losses;
pub mod ssm;
pub mod synth;
pub mod tensor;
pub mod train;

pub use bbox::BBox;
pub use error::{Error, Result};
