//! Brake orbits, geodesics of the degenerate Jacobi metric ½(E − V)g,
//! distance from the boundary of a potential well, and Morse index theory
//! for boundary-starting geodesics.

pub mod distance;
pub mod dynamics;
pub mod error;
pub mod geometry;
pub mod jacobi_geodesic;
pub mod morse;
pub mod numerics;
pub mod verify;

pub use error::{Error, Result};
pub use geometry::{Matrix, PotentialSystem, Vector};
