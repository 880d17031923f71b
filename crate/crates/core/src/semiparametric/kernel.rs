//! Simulated-rectangle kernel smoothing of the joint error CDF.

use std::collections::HashMap;

use nalgebra::DMatrix;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::grid::{evaluation_axis, CdfGrid};
use crate::distributions::{derive_seed, normal_cdf, rng_from_seed};
use crate::error::{Error, Result};
use crate::lattice::{implied_rectangle, Dataset, IndexModel, LatticeSpec};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "rule", rename_all = "kebab-case")]
pub enum Bandwidth {
    /// sigma_d * m^(-1/6) on the m pooled points, per coordinate.
    #[default]
    Silverman,
    Fixed { h1: f64, h2: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KernelConfig {
    pub draws_per_obs: usize,
    pub bandwidth: Bandwidth,
    /// Infinite rectangle sides are cut at -truncation / +truncation.
    pub truncation: f64,
    pub seed: u64,
}

impl Default for KernelConfig {
    fn default() -> Self {
        KernelConfig {
            draws_per_obs: 10,
            bandwidth: Bandwidth::Silverman,
            truncation: 4.0,
            seed: 0,
        }
    }
}

impl KernelConfig {
    fn validate(&self) -> Result<()> {
        if self.draws_per_obs == 0 {
            return Err(Error::InvalidConfig("draws_per_obs must be at least 1".into()));
        }
        if let Bandwidth::Fixed { h1, h2 } = self.bandwidth {
            if !(h1 > 0.0 && h2 > 0.0 && h1.is_finite() && h2.is_finite()) {
                return Err(Error::InvalidConfig("bandwidths must be positive".into()));
            }
        }
        if !(self.truncation > 0.0 && self.truncation.is_finite()) {
            return Err(Error::InvalidConfig("truncation must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelFit {
    pub grid: CdfGrid,
    pub bandwidth: [f64; 2],
    pub pooled_points: usize,
}

/// Finite sampling interval for one rectangle side pair.
fn truncate(lo: f64, hi: f64, box_: f64) -> (f64, f64) {
    let lo = if lo.is_finite() {
        lo
    } else if hi > -box_ {
        -box_
    } else {
        // the whole interval lies below the box; keep a unit-width piece
        hi - 1.0
    };
    let hi = if hi.is_finite() {
        hi
    } else if lo < box_ {
        box_
    } else {
        lo + 1.0
    };
    (lo, hi)
}

/// Uniform draws from every observation's implied rectangle, sorted so the
/// result does not depend on observation order.
pub fn pooled_draws(data: &Dataset, spec: &LatticeSpec, model: &IndexModel, config: &KernelConfig) -> Result<Vec<[f64; 2]>> {
    config.validate()?;
    if spec.dims() != 2 {
        return Err(Error::DimensionMismatch("kernel smoothing is implemented for two dimensions".into()));
    }
    let rects = (0..data.n())
        .map(|i| implied_rectangle(data, i, spec, model))
        .collect::<Result<Vec<_>>>()?;
    // identical rectangles get distinct streams through an occurrence count
    let mut seen: HashMap<[u64; 4], u64> = HashMap::new();
    let keyed: Vec<(u64, [(f64, f64); 2])> = rects
        .iter()
        .map(|r| {
            let key = [r.lower[0].to_bits(), r.upper[0].to_bits(), r.lower[1].to_bits(), r.upper[1].to_bits()];
            let occurrence = seen.entry(key).or_insert(0);
            let mut h = derive_seed(config.seed, *occurrence);
            for k in key {
                h = derive_seed(h, k);
            }
            *occurrence += 1;
            let box_ = config.truncation;
            (h, [truncate(r.lower[0], r.upper[0], box_), truncate(r.lower[1], r.upper[1], box_)])
        })
        .collect();
    let s = config.draws_per_obs;
    let mut points: Vec<[f64; 2]> = keyed
        .par_iter()
        .flat_map_iter(|(seed, b)| {
            let mut rng = rng_from_seed(*seed);
            (0..s)
                .map(|_| {
                    let u1: f64 = rng.random();
                    let u2: f64 = rng.random();
                    [b[0].0 + (b[0].1 - b[0].0) * u1, b[1].0 + (b[1].1 - b[1].0) * u2]
                })
                .collect::<Vec<_>>()
        })
        .collect();
    points.sort_by(|a, b| a[0].total_cmp(&b[0]).then(a[1].total_cmp(&b[1])));
    Ok(points)
}

fn sd(v: impl Iterator<Item = f64> + Clone) -> f64 {
    let n = v.clone().count() as f64;
    let mean = v.clone().sum::<f64>() / n;
    (v.map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0)).sqrt()
}

pub fn silverman(points: &[[f64; 2]]) -> [f64; 2] {
    let factor = (points.len() as f64).powf(-1.0 / 6.0);
    [0, 1].map(|d| sd(points.iter().map(move |p| p[d])) * factor)
}

/// Mean over points of Phi((e1 - p1)/h1) Phi((e2 - p2)/h2) on the grid.
pub fn kernel_cdf(points: &[[f64; 2]], h: [f64; 2], axis1: &[f64], axis2: &[f64]) -> Result<CdfGrid> {
    if points.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let m = points.len();
    let k1 = DMatrix::from_fn(axis1.len(), m, |i, p| normal_cdf((axis1[i] - points[p][0]) / h[0]));
    let k2 = DMatrix::from_fn(m, axis2.len(), |p, j| normal_cdf((axis2[j] - points[p][1]) / h[1]));
    let f = k1 * k2 / m as f64;
    let values: Vec<f64> = (0..axis1.len())
        .flat_map(|i| (0..axis2.len()).map(move |j| (i, j)))
        .map(|(i, j)| f[(i, j)].clamp(0.0, 1.0))
        .collect();
    CdfGrid::new(axis1.to_vec(), axis2.to_vec(), values)
}

/// Kernel estimate on the given axes (default: the 80 x 80 evaluation grid).
pub fn kernel_smoothing_fit(
    data: &Dataset,
    spec: &LatticeSpec,
    model: &IndexModel,
    config: &KernelConfig,
    axes: Option<(&[f64], &[f64])>,
) -> Result<KernelFit> {
    let points = pooled_draws(data, spec, model, config)?;
    let h = match config.bandwidth {
        Bandwidth::Silverman => silverman(&points),
        Bandwidth::Fixed { h1, h2 } => [h1, h2],
    };
    if !(h[0] > 0.0 && h[1] > 0.0) {
        return Err(Error::InvalidConfig(format!("degenerate bandwidth {h:?}")));
    }
    let default_axis = evaluation_axis();
    let (a1, a2) = axes.unwrap_or((&default_axis, &default_axis));
    Ok(KernelFit {
        grid: kernel_cdf(&points, h, a1, a2)?,
        bandwidth: h,
        pooled_points: points.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distributions::normal_pdf;
    use crate::semiparametric::grid::linspace;
    use crate::simulation::{builtin_dgp, BuiltinDgp};

    #[test]
    fn truncation_rules() {
        assert_eq!(truncate(f64::NEG_INFINITY, 0.5, 4.0), (-4.0, 0.5));
        assert_eq!(truncate(-0.5, f64::INFINITY, 4.0), (-0.5, 4.0));
        assert_eq!(truncate(f64::NEG_INFINITY, -6.0, 4.0), (-7.0, -6.0));
        assert_eq!(truncate(5.0, f64::INFINITY, 4.0), (5.0, 6.0));
    }

    #[test]
    fn draws_stay_in_rectangles() {
        let (spec, data) = builtin_dgp(BuiltinDgp::TwoStep, 200, 1).unwrap();
        let cfg = KernelConfig::default();
        let pts = pooled_draws(&data, &spec.lattice, &spec.model, &cfg).unwrap();
        assert_eq!(pts.len(), 2000);
        let rects: Vec<_> = (0..data.n())
            .map(|i| implied_rectangle(&data, i, &spec.lattice, &spec.model).unwrap())
            .collect();
        for p in &pts {
            assert!(rects.iter().any(|r| r.contains(&p[..])), "{p:?}");
        }
    }

    #[test]
    fn order_invariant() {
        let (spec, data) = builtin_dgp(BuiltinDgp::TwoStep, 300, 2).unwrap();
        let rev: Vec<usize> = (0..data.n()).rev().collect();
        let shuffled = data.select(&rev);
        let cfg = KernelConfig {
            seed: 9,
            ..Default::default()
        };
        let a = kernel_smoothing_fit(&data, &spec.lattice, &spec.model, &cfg, None).unwrap();
        let b = kernel_smoothing_fit(&shuffled, &spec.lattice, &spec.model, &cfg, None).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn tiny_bandwidth_gives_empirical_cdf() {
        let pts = vec![[0.1, 0.2], [-0.7, 0.4], [0.3, -1.1], [1.2, 0.9]];
        let axis = linspace(-2.0, 2.0, 17);
        let g = kernel_cdf(&pts, [1e-6, 1e-6], &axis, &axis).unwrap();
        for (k, &a) in axis.iter().enumerate() {
            for (l, &b) in axis.iter().enumerate() {
                let emp = pts.iter().filter(|p| p[0] <= a && p[1] <= b).count() as f64 / 4.0;
                assert!((g.value(k, l) - emp).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn closed_form_matches_integrated_density() {
        let pts = vec![[0.1, 0.2], [-0.7, 0.4], [0.3, -1.1]];
        let h = [0.4, 0.3];
        let axis = vec![-1.0, 0.0, 0.7];
        let g = kernel_cdf(&pts, h, &axis, &axis).unwrap();
        let density = |x: f64, y: f64| {
            pts.iter()
                .map(|p| normal_pdf((x - p[0]) / h[0]) * normal_pdf((y - p[1]) / h[1]) / (h[0] * h[1]))
                .sum::<f64>()
                / pts.len() as f64
        };
        // trapezoid rule on two meshes, combined by Richardson extrapolation
        let lo = -6.0;
        let trapezoid = |a: f64, b: f64, steps: usize| {
            let (dx, dy) = ((a - lo) / steps as f64, (b - lo) / steps as f64);
            let mut s = 0.0;
            for i in 0..=steps {
                let wx = if i == 0 || i == steps { 0.5 } else { 1.0 };
                for j in 0..=steps {
                    let wy = if j == 0 || j == steps { 0.5 } else { 1.0 };
                    s += wx * wy * density(lo + i as f64 * dx, lo + j as f64 * dy);
                }
            }
            s * dx * dy
        };
        for (k, &a) in axis.iter().enumerate() {
            for (l, &b) in axis.iter().enumerate() {
                let coarse = trapezoid(a, b, 300);
                let fine = trapezoid(a, b, 600);
                let s = (4.0 * fine - coarse) / 3.0;
                assert!((s - g.value(k, l)).abs() < 1e-6, "({a},{b})");
            }
        }
    }
}
