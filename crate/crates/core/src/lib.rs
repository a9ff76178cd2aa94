//! Symbolic regression with LIES networks.
//!
//! A small fixed-architecture network whose neurons apply clipped logarithm,
//! identity, clipped exponential and sine is trained in log space, sparsified
//! with ADMM, node gates and output-sensitivity pruning, and then read back
//! as a closed-form expression whose constants are rounded and refit.

pub mod admm;
pub mod autodiff;
pub mod bench;
pub mod deadline;
pub mod expr;
pub mod extraction;
pub mod losses;
pub mod net;
pub mod pruning;
pub mod sampling;
pub mod tensor;
