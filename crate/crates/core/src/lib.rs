//! Rectified-flow inversion with fixed-point refinement and per-step compensation.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod compare;
pub mod editing;
pub mod error;
pub mod fields;
pub mod inversion;
pub mod io;
pub mod nn;
pub mod numerics;
pub mod samplers;
pub mod training;

pub use error::{FlowError, Result};
