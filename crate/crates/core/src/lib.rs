//! Koopman-von Neumann simulation of classical dynamics on a discretized
//! phase space.

pub mod dynamics;
pub mod error;
pub mod expr;
pub mod grid;
pub mod linalg;
pub mod observables;
pub mod operator;
pub mod propagation;
pub mod sampling;
pub mod semiclassical;
pub mod stats;

pub use error::{KvnError, Result};
pub use grid::{build_grid, AxisSpec, PhaseSpaceGrid};
pub use num_complex::Complex64 as C64;
