//! Control-oriented meta-learning of adaptive trajectory-tracking
//! controllers for a planar fully-actuated rotorcraft in wind.

// Index loops mirror the matrix formulas; negated comparisons are how NaN
// fails validation.
#![allow(clippy::needless_range_loop, clippy::neg_cmp_op_on_partial_ord)]

pub mod acmrr;
pub mod autodiff;
pub mod controllers;
pub mod dynamics;
pub mod ensemble;
pub mod eval;
pub mod meta;
pub mod nn;
pub mod prng;
pub mod rollout;
pub mod trajgen;
