// `!(x > 0.0)` is used on purpose: it also rejects NaN
#![allow(clippy::neg_cmp_op_on_partial_ord)]

//! Driven-dissipative Josephson junction array toolkit.

pub mod cli;
pub mod config;
pub mod error;
pub mod lindblad;
pub mod meanfield;
pub mod model;
pub mod ode;
pub mod output;
pub mod record;
pub mod sweep;
pub mod twomode;

pub use error::{Error, Result};
