//! Forward/backward kernels for every layer primitive. Pure functions over
//! tensors; the autograd graph in [`crate::graph`] wires them together.

pub mod batchnorm;
pub mod conv;
pub mod linear;
pub mod pool;
pub mod softmax;
