//! Few-step diffusion generators trained with reinforcement from
//! non-differentiable rewards, on 2-D toy distributions.

// `!(x > 0.0)` is used on purpose so NaN inputs are rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod pipeline;
pub mod rewards;
pub mod schedule;
pub mod student;
pub mod surrogate;
pub mod teacher;
pub mod trainer;
pub mod verify;

pub use error::{Error, Result};
