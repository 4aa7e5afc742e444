//! Tensor primitives and reverse-mode automatic differentiation.
//!
//! Computations are recorded on a [`Graph`]; [`Graph::backward`] walks the
//! tape in reverse and returns gradients for the leaves that asked for
//! them. [`ops`] exposes the same primitives as plain tensor functions, and
//! [`gradcheck`] holds the central-difference oracle used to validate every
//! backward rule.

mod graph;
pub(crate) mod kernels;

pub mod gradcheck;
pub mod ops;

pub use graph::{BnOptions, BnStats, Gradients, Graph, Mode, Var, PROB_FLOOR};
pub use kernels::{ConvGeometry, Padding, PoolMode};
