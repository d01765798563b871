//! Slice-level forward and backward kernels. The tape in [`crate::tape`] wires
//! these together; they carry no graph state of their own.

pub mod activation;
pub mod conv;
pub mod dense;
pub mod norm;
pub mod pool;
