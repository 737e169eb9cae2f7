pub mod band;
pub mod ode;
pub mod quad;
pub mod roots;

pub use band::{Inertia, SymBand};
pub use ode::{Dopri5, Event, Solution};
pub use quad::Rule;
