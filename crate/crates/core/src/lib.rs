//! Return-conditioned policy generation.
//!
//! A hypernetwork generator maps a scalar "desired return" command to the
//! full weight set of an MLP policy; a fingerprinting-based value function
//! evaluates generated policies from their probing actions; both are trained
//! by supervised regression so that commanding higher returns yields better
//! policies. The crate also ships an Augmented Random Search baseline,
//! built-in continuous-control environments, and post-hoc analysis tools
//! (command/return identity sweeps, PCA projection of policy fingerprints).

pub mod analysis;
pub mod ars;
pub mod buffer;
pub mod checkpoint;
pub mod config;
pub mod diffcore;
pub mod envs;
pub mod error;
pub mod fingerprint;
pub mod hypergen;
pub mod nn;
pub mod policy;
pub mod rng;
pub mod trainer;

pub use error::{Error, Result};
