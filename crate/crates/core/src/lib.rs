//! Mollified particle approximations of evolution equations
//! `dy/dt = A(t, y) y + f(t, y)` on tagged partitions of a bounded domain.

pub mod analysis;
pub mod error;
pub mod field;
pub mod geometry;
pub mod integral_evolution;
pub mod kernel;
pub mod pde_model;
pub mod mollifier;
pub mod particle;
pub mod quadrature;
pub mod reference;

pub use error::{Error, Result};
