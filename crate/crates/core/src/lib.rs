//! Signed distance fields represented as blends of adaptive local basis
//! functions.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod diff;
pub mod field;
pub mod fit;
pub mod geom;
pub mod gradcheck;
pub mod io;
pub mod metrics;
pub mod objective;
pub mod surface;
