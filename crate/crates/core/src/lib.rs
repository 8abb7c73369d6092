//! Effective Hamiltonians for atom–field models built on polynomially
//! deformed su(N) algebras, obtained by small nonlinear rotations and checked
//! against exact diagonalization and exact time evolution.

pub mod algebra;
pub mod blocks;
pub mod cli;
pub mod dynamics;
pub mod error;
pub mod hilbert;
pub mod linalg;
pub mod models;
pub mod operator;
pub mod rotations;
pub mod sweep;

pub use error::{Error, Result};
