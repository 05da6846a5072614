//! Ginzburg-Landau approximation of the harmonic map heat flow into spheres,
//! with the weighted-energy and singular-set diagnostics used to study it.

// validation negates comparisons so that NaN inputs are rejected
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod diagnostics;
pub mod elliptic;
pub mod error;
pub mod field;
pub mod flow;
pub mod geometry;
pub mod io;
pub mod singular;
pub mod stereo;

pub use error::{Error, Result};
