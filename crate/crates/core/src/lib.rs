//! Multivariate ordered discrete response ("lattice") models.

pub mod diagnostics;
pub mod distributions;
pub mod io;
mod error;
pub mod lattice;
pub mod metrics;
pub mod montecarlo;
pub mod optim;
pub mod parametric;
pub mod semiparametric;
pub mod simulation;

pub use distributions::{Correlation, Law};
pub use error::{Error, Result};
pub use lattice::{CellIndex, Dataset, DesignMatrix, IndexModel, LatticeSpec, Rectangle};
