// `!(x > 0.0)` style checks are deliberate: they reject NaN as well.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
#![allow(clippy::needless_range_loop)]

pub mod cli;
pub mod config;
pub mod diagnostics;
pub mod error;
pub mod init;
pub mod matrix;
pub mod nn;
pub mod oracle;
pub mod quantizer;
pub mod rng;
pub mod synth;
pub mod textfmt;
pub mod trainer;

pub use error::{Error, Result};
pub use matrix::Matrix;
