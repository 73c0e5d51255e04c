//! Regularized sparse coding of block-structured signals.
//!
//! Each block of signals `Y` (a `d x N` matrix) is coded against a fixed
//! dictionary `D` through a half-quadratic-splitting iteration map whose
//! proximal step is a learned convolutional denoiser. The map is trained
//! either by unrolling `K` applications ([`du`]) or as a deep equilibrium
//! model whose fixed point is found by Anderson acceleration and
//! differentiated implicitly ([`deq`]).

pub mod anderson;
pub mod autodiff;
pub mod baseline;
pub mod checkpoint;
pub mod data;
pub mod deq;
pub mod denoiser;
pub mod dictionary;
pub mod du;
pub mod hqs;
pub mod metrics;
pub mod model;
pub mod train;
pub mod error;

pub use error::{Error, Result};
