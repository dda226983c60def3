//! Digital-twin control co-design of a full-vehicle active suspension.
//!
//! The crate simulates a seven-degree-of-freedom vehicle over synthetic roads
//! and driver profiles, co-optimises the passive spring/damper hardware with a
//! neural control policy by clipped-surrogate policy optimisation, learns a
//! quantile discrepancy model against an emulated physical vehicle and
//! re-optimises with the corrected model.

// `!(x > 0.0)` is used on purpose so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod config;
pub mod discrepancy;
pub mod error;
pub mod io;
pub mod nn;
pub mod pipeline;
pub mod profile;
pub mod road;
pub mod seed;
pub mod trainer;
pub mod vehicle;

pub use error::{CcdError, Result};
