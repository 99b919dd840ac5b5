//! Optimal drift control of a reflected Ornstein-Uhlenbeck diffusion and
//! validation against the single-server abandonment queue it approximates.
//!
//! - [`cost`]: cost functions and their Legendre-Fenchel conjugates.
//! - [`hjb`]: shooting solver for the free-boundary HJB equation.
//! - [`diffusion`]: Monte Carlo for the controlled reflected diffusion.
//! - [`queue`]: discrete-event simulation of the scaled queueing system.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cost;
pub mod diffusion;
pub mod error;
pub mod estimate;
pub mod hjb;
pub mod queue;
pub mod skorokhod;

pub use error::{Error, Result};
