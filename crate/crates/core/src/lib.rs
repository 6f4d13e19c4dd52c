//! Finite element solvers for the streamfunction formulation of the
//! stationary quasi-geostrophic equations, discretized with C1 Argyris
//! triangles. Provides the standard one-level Newton solver, a two-level
//! (coarse nonlinear / fine linearized) solver, and the convergence and
//! efficiency studies built on them.

pub mod analysis;
pub mod assembly;
pub mod element;
pub mod error;
pub mod mesh;
pub mod quadrature;
pub mod solver;
pub mod studies;

pub use error::{Error, Result};
