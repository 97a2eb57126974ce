//! Monotone finite-difference schemes and policy iteration for periodic
//! Hamilton-Jacobi-Isaacs equations.

pub mod analysis;
mod error;
pub mod grid;
pub mod pi;
pub mod problem;
pub mod scheme;

pub use error::{Error, Result};
