//! Generalized fast dual gradient methods for strongly convex, separable
//! optimization with sparse equality coupling.
//!
//! The crate provides:
//!
//! - [`block_model`]: block-partitioned problem instances, neighbor sets,
//!   gather/scatter between global and neighborhood-local vectors;
//! - [`metrics`]: construction and verification of the positive definite
//!   matrices that shape the dual quadratic bound, from exact sparse-factored
//!   Gram matrices to distributed block-diagonal selections;
//! - [`prox`]: generalized proximal operators under a metric, the
//!   generalized Moreau decomposition, and closed-form inner minimizers;
//! - [`solvers`]: the generalized fast gradient method, its dual
//!   instantiation, and the parallel dual variant;
//! - [`simnet`]: a synchronous-round message-passing simulator for the
//!   distributed solver and the distributed metric initialization, with
//!   communication accounting and plug-and-play reconfiguration;
//! - [`dmpc`]: condensation of coupled linear MPC problems, a random
//!   benchmark generator, and a comparison harness;
//! - [`io`]: problem, metric, and config file formats plus the benchmark
//!   CSV schema.

pub mod block_model;
pub mod dmpc;
pub mod error;
pub mod io;
pub mod metrics;
pub mod prox;
pub mod sdp;
pub mod simnet;
pub mod solvers;
pub mod sparse;

pub use error::{Error, Result};
