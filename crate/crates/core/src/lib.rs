//! Ensembles of binary classifiers trained toward local independence:
//! members are penalized for having aligned input gradients on the data,
//! so they extrapolate differently away from it.
//!
//! The crate contains a small symbolic differentiation engine
//! ([`diffcore`]), one-hidden-layer MLPs ([`models`]), the joint objectives
//! ([`objectives`]), ensemble trainers and the grid harness ([`training`]),
//! diversity metrics ([`diversity`]), dataset construction ([`data`]) and
//! evaluation ([`eval`]).

pub mod data;
pub mod diffcore;
pub mod diversity;
pub mod error;
pub mod eval;
pub mod models;
pub mod objectives;
pub mod rng;
pub mod textfmt;
pub mod training;

pub use error::{Error, Result};
