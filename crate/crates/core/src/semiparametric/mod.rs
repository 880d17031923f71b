//! Estimators of the joint error CDF that leave its form unrestricted.
//!
//! Grid inversion and kernel smoothing take the index parameters from a
//! first stage; the sieve estimator fits everything in one step.

mod bspline;
mod design;
mod grid;
mod grid_inversion;
mod kernel;
mod shape;
mod sieve;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::lattice::{IndexModel, LatticeSpec};
use crate::parametric::ParamVector;

pub use bspline::BSplineBasis;
pub use design::{build_design_system, grid_axes, implied_bounds, thin, DesignRow, DesignSystem, GridSource};
pub use grid::{evaluation_axis, linspace, CdfGrid, GRID_TOL};
pub use grid_inversion::{grid_inversion_fit, solve, FeasibleSet, GridInversionConfig, GridInversionFit};
pub use kernel::{kernel_cdf, kernel_smoothing_fit, pooled_draws, silverman, Bandwidth, KernelConfig, KernelFit};
pub use sieve::{average_loglik, sieve_mle_fit, PinnedThreshold, SieveConfig, SieveFit, SplineCdf};

/// Index parameters supplied to a two-step estimator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FirstStage {
    pub thresholds: Vec<Vec<f64>>,
    pub beta: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rho: Option<f64>,
}

impl FirstStage {
    pub fn lattice(&self) -> Result<LatticeSpec> {
        LatticeSpec::new(self.thresholds.clone())
    }

    pub fn model(&self) -> Result<IndexModel> {
        IndexModel::new(self.beta.clone())
    }
}

impl From<&ParamVector> for FirstStage {
    fn from(p: &ParamVector) -> Self {
        FirstStage {
            thresholds: p.thresholds.clone(),
            beta: p.beta.clone(),
            rho: Some(p.rho.value()),
        }
    }
}
