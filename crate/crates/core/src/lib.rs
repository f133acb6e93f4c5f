#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop, clippy::type_complexity)]

pub mod cir;
pub mod config;
pub mod error;
pub mod field;
pub mod io;
pub mod linalg;
pub mod model;
pub mod orchestrator;
pub mod particles;
pub mod rng;
pub mod smoothing;
pub mod spde1d;
pub mod spde2d;
pub mod util;

pub use error::{Error, Result};
