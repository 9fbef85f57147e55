//! Dense numeric kernels for the hand-built transformer.

pub mod ops;
pub mod scalar;

pub use scalar::Scalar;
