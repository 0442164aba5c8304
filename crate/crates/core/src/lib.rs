#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop, clippy::large_enum_variant)]

pub mod afua;
pub mod analog;
pub mod cli;
pub mod datapipe;
pub mod error;
pub mod fem;
pub mod geometry;
pub mod phantom;
pub mod quantizer;
pub mod rng;
pub mod trainer;

mod binio;

pub use error::{Error, Result};
