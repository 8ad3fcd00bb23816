//! Isogeometric boundary-element / Kirchhoff-Love shell coupling for thin
//! elastic structures immersed in Stokes flow.

pub mod dynamics;
pub mod error;
pub mod linalg;
pub mod nurbs;
pub mod quadrature;
pub mod shell;
pub mod stokes;

pub use error::{Error, Result};
