//! Reverse-mode differentiation, Adam, and finite-difference checking.

mod adam;
mod check;
mod params;
mod tape;

pub use adam::{adam_step, AdamState};
pub use check::{finite_diff_check, finite_diff_check_with, GradCheckReport};
pub use params::{ParamEntry, ParamVector};
pub use tape::{backward, Tape, Var};

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum DiffError {
    #[error("node {node} is not on this tape (tape has {len} nodes)")]
    ForeignNode { node: usize, len: usize },
    #[error("length mismatch: {what} has {got} entries, expected {expected}")]
    Length {
        what: &'static str,
        got: usize,
        expected: usize,
    },
    #[error("objective is not finite ({value}) at coordinate {coordinate:?}")]
    NonFinite {
        value: f64,
        coordinate: Option<usize>,
    },
    #[error("finite difference step must be > 0, got {0}")]
    Step(f64),
    #[error("unknown parameter block `{0}`")]
    UnknownBlock(String),
}
