//! Graph convolutional deep kernel machines.
//!
//! This crate implements infinite-width graph networks in kernel form:
//!
//! - fixed-kernel graph NNGP recursions over Gram matrices ([`nngp`]),
//! - the graph DKM objective whose per-layer KL terms act as a tunable
//!   regularizer towards the NNGP ([`dkm`]),
//! - sparse inducing-point training with a Cholesky parameterization of
//!   the inducing Gram matrices ([`dkm`], [`train`]),
//! - a closed-form solution for the linear-kernel case ([`dkm::linear_closed_form`]),
//! - graph utilities (normalized adjacencies, homophily, synthetic graphs)
//!   and the metrics (CKA, accuracy) used by the experiment harness.
//!
//! Everything is dense 64-bit linear algebra sized for desk-scale graphs
//! (a few thousand nodes); adjacencies are kept sparse.

pub mod dataio;
pub mod dkm;
pub mod graphops;
pub mod kernels;
pub mod nngp;
pub mod numerics;
pub mod tape;
pub mod train;

pub use numerics::Mat;
