//! Differentiable operations, grouped by kind. All operations are methods on
//! [`Tape`](super::Tape); results are recorded when any operand is tracked.

mod conv;
mod elementwise;
mod matmul;
mod norm;
mod patch;
mod reduce;
mod sample;
mod shape;
mod wavelet;

pub use sample::bilinear_sample;
