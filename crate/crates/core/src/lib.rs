//! Gradient-guided bit-flip attacks on float32 neural network weights.
//!
//! The crate bundles a small CNN engine ([`nn`]), IEEE-754 bit addressing and
//! exponent-bit gradient scoring ([`bits`]), the attack procedures
//! ([`attacks`]), MNIST loading ([`datasets`]), a bit-exact model file format
//! ([`store`]) and the experiment harness ([`harness`]).

pub mod attacks;
pub mod bits;
pub mod datasets;
pub mod error;
pub mod harness;
pub mod nn;
pub mod store;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
