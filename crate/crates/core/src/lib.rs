//! Immersed finite element fluid-structure interaction on a background Q2/Q1 grid.

pub mod bench;
pub mod constitutive;
pub mod coupling;
pub mod fem;
pub mod linalg;
pub mod mesh;
pub mod schemes;
