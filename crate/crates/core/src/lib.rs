//! Deterministic annealing for controller mappings in decentralized
//! stochastic control.
//!
//! The [`engine`] is problem independent. [`wce`] and [`side_channel`]
//! plug Witsenhausen's counterexample and its side-information variant
//! into it; [`cli`] drives experiments from configuration files.

pub mod cli;
pub mod engine;
pub mod error;
pub mod lattice;
pub mod quadrature;
pub mod side_channel;
pub mod wce;

pub use error::{Error, Result};
