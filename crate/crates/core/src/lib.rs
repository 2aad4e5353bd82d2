//! Numerical laboratory for small-noise diffusions: tamed-Euler simulation,
//! Freidlin–Wentzell actions and quasi-potentials, W-graph hierarchies of
//! equivalent sets, and empirical invariant measures.

pub mod action;
pub mod cost;
pub mod dynamics;
pub mod error;
pub mod grid;
pub mod hierarchy;
pub mod mam;
pub mod measure;
pub mod optim;
pub mod simulate;

pub use error::{Error, Result};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
