//! Core of the latent-loop trainer: a human (or a scripted policy) edits a
//! frozen 2D projection of a model's latent space between epochs, and the
//! edits steer training through a composite guidance loss.
//!
//! Everything here is `no_std` + `alloc`; file formats, the HTTP/WebSocket
//! service and the command line live in the `latentloop` crate.

#![no_std]
// `!(x > 0.0)` and friends are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;
#[cfg(any(test, feature = "std"))]
extern crate std;

pub mod data;
pub mod diffcore;
pub mod guidance;
pub mod models;
pub mod projection;
pub mod snapshot;
pub mod strategies;
pub mod tensor;
pub mod trainer;

pub use tensor::{Real, Tensor};
