//! Linear system linking cell frequencies to joint-CDF values on a grid.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lattice::{Dataset, IndexModel, LatticeSpec};

/// Where the grid-inversion nodes come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum GridSource {
    /// Finite implied rectangle bounds. With `max_nodes`, thinned to that
    /// many empirical quantiles (always keeping the extremes).
    ImpliedBounds { max_nodes: Option<usize> },
    /// Fixed axes; every finite implied bound must lie inside their hull.
    Fixed { axis1: Vec<f64>, axis2: Vec<f64> },
}

impl Default for GridSource {
    fn default() -> Self {
        GridSource::ImpliedBounds { max_nodes: Some(80) }
    }
}

/// Unknowns are CDF values on the finite nodes augmented by a +inf node
/// per axis (which carries the marginals); the (+inf, +inf) entry is 1.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignSystem {
    pub axis1: Vec<f64>,
    pub axis2: Vec<f64>,
    pub rows: Vec<DesignRow>,
    /// Sum of row weights divided by the number of cells per observation,
    /// i.e. the number of observations.
    pub total_weight: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DesignRow {
    /// (unknown index, coefficient); unknown index = k * (n2 + 1) + l.
    pub entries: Vec<(usize, f64)>,
    pub target: f64,
    pub weight: f64,
}

impl DesignSystem {
    /// Rows and columns of the augmented unknown matrix.
    pub fn unknown_shape(&self) -> (usize, usize) {
        (self.axis1.len() + 1, self.axis2.len() + 1)
    }

    pub fn unknowns(&self) -> usize {
        let (r, c) = self.unknown_shape();
        r * c
    }

    /// Index of the fixed (+inf, +inf) entry.
    pub fn top_corner(&self) -> usize {
        self.unknowns() - 1
    }

    /// Weighted residual sum of squares divided by the number of observations.
    pub fn data_loss(&self, phi: &[f64]) -> f64 {
        let s: f64 = self.rows.iter().map(|r| r.weight * (row_dot(r, phi) - r.target).powi(2)).sum();
        s / self.total_weight
    }

    /// A phi into `out` (length = number of rows).
    pub fn apply(&self, phi: &[f64], out: &mut [f64]) {
        for (o, r) in out.iter_mut().zip(&self.rows) {
            *o = row_dot(r, phi);
        }
    }
}

#[inline]
fn row_dot(r: &DesignRow, phi: &[f64]) -> f64 {
    r.entries.iter().map(|&(i, a)| a * phi[i]).sum()
}

/// Observations sharing covariates exactly, with their cell frequencies.
struct Group {
    first: usize,
    count: usize,
    cells: HashMap<Vec<usize>, usize>,
}

fn group_observations(data: &Dataset) -> Vec<Group> {
    let mut index: HashMap<Vec<u64>, usize> = HashMap::new();
    let mut groups: Vec<Group> = Vec::new();
    for i in 0..data.n() {
        let key: Vec<u64> = (0..data.dims()).flat_map(|d| data.x(i, d).iter().map(|v| v.to_bits())).collect();
        let g = *index.entry(key).or_insert_with(|| {
            groups.push(Group {
                first: i,
                count: 0,
                cells: HashMap::new(),
            });
            groups.len() - 1
        });
        groups[g].count += 1;
        *groups[g].cells.entry(data.outcome(i).0.clone()).or_insert(0) += 1;
    }
    groups
}

fn check_bivariate(data: &Dataset, spec: &LatticeSpec, model: &IndexModel) -> Result<()> {
    if spec.dims() != 2 || data.dims() != 2 {
        return Err(Error::DimensionMismatch(
            "the joint-CDF estimators are implemented for two dimensions".into(),
        ));
    }
    data.check_model(model)?;
    data.validate(spec)
}

/// Sorted distinct finite bounds alpha_j - x beta over all observations
/// and thresholds, per dimension.
pub fn implied_bounds(data: &Dataset, spec: &LatticeSpec, model: &IndexModel) -> [Vec<f64>; 2] {
    let mut out = [Vec::new(), Vec::new()];
    for (d, axis) in out.iter_mut().enumerate() {
        for i in 0..data.n() {
            let idx = model.index(d, data.x(i, d));
            axis.extend(spec.thresholds(d).iter().map(|a| a - idx));
        }
        axis.sort_by(f64::total_cmp);
        axis.dedup();
    }
    out
}

/// Keeps `max_nodes` empirical quantiles of `sorted`, including both ends.
pub fn thin(sorted: &[f64], max_nodes: usize) -> Vec<f64> {
    if sorted.len() <= max_nodes || max_nodes < 2 {
        return sorted.to_vec();
    }
    let last = sorted.len() - 1;
    let mut out: Vec<f64> = (0..max_nodes)
        .map(|k| sorted[((k as f64) * last as f64 / (max_nodes - 1) as f64).round() as usize])
        .collect();
    out.dedup();
    out
}

pub fn grid_axes(data: &Dataset, spec: &LatticeSpec, model: &IndexModel, source: &GridSource) -> Result<[Vec<f64>; 2]> {
    match source {
        GridSource::ImpliedBounds { max_nodes } => {
            let [a, b] = implied_bounds(data, spec, model);
            if let Some(m) = max_nodes {
                if *m < 2 {
                    return Err(Error::InvalidConfig("max_nodes must be at least 2".into()));
                }
            }
            Ok(match max_nodes {
                Some(m) => [thin(&a, *m), thin(&b, *m)],
                None => [a, b],
            })
        }
        GridSource::Fixed { axis1, axis2 } => {
            for axis in [axis1, axis2] {
                if axis.is_empty() || axis.iter().any(|v| !v.is_finite()) || axis.windows(2).any(|w| w[0] >= w[1]) {
                    return Err(Error::InvalidConfig("fixed grid axes must be finite and strictly increasing".into()));
                }
            }
            Ok([axis1.clone(), axis2.clone()])
        }
    }
}

/// Interpolation weights of a finite coordinate on `axis`.
fn axis_weights(axis: &[f64], v: f64, dim: usize) -> Result<Vec<(usize, f64)>> {
    let (lo, hi) = (axis[0], axis[axis.len() - 1]);
    if v < lo || v > hi {
        return Err(Error::BoundOutsideGrid { dim, value: v, lo, hi });
    }
    let k = axis.partition_point(|a| *a < v);
    if axis[k] == v {
        return Ok(vec![(k, 1.0)]);
    }
    let t = (v - axis[k - 1]) / (axis[k] - axis[k - 1]);
    Ok(vec![(k - 1, 1.0 - t), (k, t)])
}

/// Builds one row per (covariate group, cell) with the group's cell
/// frequency as target and the group size as weight.
pub fn build_design_system(
    data: &Dataset,
    spec: &LatticeSpec,
    model: &IndexModel,
    axes: [Vec<f64>; 2],
) -> Result<DesignSystem> {
    check_bivariate(data, spec, model)?;
    let [axis1, axis2] = axes;
    let n2a = axis2.len() + 1;
    let cells = spec.cells();
    let mut rows = Vec::with_capacity(cells.len() * data.n());
    for g in group_observations(data) {
        let idx = [model.index(0, data.x(g.first, 0)), model.index(1, data.x(g.first, 1))];
        for cell in &cells {
            let mut entries: Vec<(usize, f64)> = Vec::with_capacity(16);
            for (m1, s1) in [(0usize, 1.0), (1, -1.0)] {
                for (m2, s2) in [(0usize, 1.0), (1, -1.0)] {
                    let c1 = spec.threshold(0, cell.get(0) - m1) - idx[0];
                    let c2 = spec.threshold(1, cell.get(1) - m2) - idx[1];
                    if c1 == f64::NEG_INFINITY || c2 == f64::NEG_INFINITY {
                        continue;
                    }
                    let w1 = if c1 == f64::INFINITY { vec![(axis1.len(), 1.0)] } else { axis_weights(&axis1, c1, 1)? };
                    let w2 = if c2 == f64::INFINITY { vec![(axis2.len(), 1.0)] } else { axis_weights(&axis2, c2, 2)? };
                    for &(a, wa) in &w1 {
                        for &(b, wb) in &w2 {
                            let col = a * n2a + b;
                            let v = s1 * s2 * wa * wb;
                            match entries.iter_mut().find(|e| e.0 == col) {
                                Some(e) => e.1 += v,
                                None => entries.push((col, v)),
                            }
                        }
                    }
                }
            }
            entries.retain(|e| e.1 != 0.0);
            entries.sort_by_key(|e| e.0);
            let hits = g.cells.get(&cell.0).copied().unwrap_or(0);
            rows.push(DesignRow {
                entries,
                target: hits as f64 / g.count as f64,
                weight: g.count as f64,
            });
        }
    }
    Ok(DesignSystem {
        axis1,
        axis2,
        rows,
        total_weight: data.n() as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distributions::{bvn_cdf, normal_cdf};
    use crate::lattice::{CellIndex, DesignMatrix};
    use crate::simulation::{builtin_dgp, BuiltinDgp};

    fn tiny(x1: f64, x2: f64, cell: [usize; 2]) -> (Dataset, LatticeSpec, IndexModel) {
        let data = Dataset::new(
            vec![DesignMatrix::from_rows(&[vec![x1]]).unwrap(), DesignMatrix::from_rows(&[vec![x2]]).unwrap()],
            vec![CellIndex(cell.to_vec())],
            None,
        )
        .unwrap();
        let spec = LatticeSpec::new(vec![vec![-1.0, 1.0], vec![-0.8, 0.8]]).unwrap();
        let model = IndexModel::new(vec![vec![0.8], vec![-0.5]]).unwrap();
        (data, spec, model)
    }

    #[test]
    fn interior_cell_has_four_corners() {
        let (data, spec, model) = tiny(0.3, 0.1, [2, 2]);
        let axes = grid_axes(&data, &spec, &model, &GridSource::ImpliedBounds { max_nodes: None }).unwrap();
        let sys = build_design_system(&data, &spec, &model, axes).unwrap();
        assert_eq!(sys.rows.len(), 9);
        let row = sys.rows.iter().find(|r| r.target == 1.0).unwrap();
        let mut signs: Vec<f64> = row.entries.iter().map(|e| e.1).collect();
        signs.sort_by(f64::total_cmp);
        assert_eq!(signs, vec![-1.0, -1.0, 1.0, 1.0]);
    }

    #[test]
    fn bottom_left_cell_single_entry() {
        let (data, spec, model) = tiny(0.3, 0.1, [1, 1]);
        let axes = grid_axes(&data, &spec, &model, &GridSource::ImpliedBounds { max_nodes: None }).unwrap();
        let sys = build_design_system(&data, &spec, &model, axes).unwrap();
        let row = sys.rows.iter().find(|r| r.target == 1.0).unwrap();
        assert_eq!(row.entries.len(), 1);
        assert_eq!(row.entries[0].1, 1.0);
    }

    #[test]
    fn out_of_hull_bound_is_named() {
        let (data, spec, model) = tiny(0.3, 0.1, [1, 1]);
        let src = GridSource::Fixed {
            axis1: vec![-1.0, 0.0],
            axis2: vec![-3.0, 3.0],
        };
        let axes = grid_axes(&data, &spec, &model, &src).unwrap();
        match build_design_system(&data, &spec, &model, axes) {
            Err(Error::BoundOutsideGrid { dim: 1, value, .. }) => assert!((value + 1.24).abs() < 1e-12),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn true_cdf_reproduces_cell_probabilities() {
        let (spec, data) = builtin_dgp(BuiltinDgp::TwoStep, 300, 8).unwrap();
        let src = GridSource::ImpliedBounds { max_nodes: Some(80) };
        let axes = grid_axes(&data, &spec.lattice, &spec.model, &src).unwrap();
        let sys = build_design_system(&data, &spec.lattice, &spec.model, axes).unwrap();
        let (r, c) = sys.unknown_shape();
        let mut phi = vec![0.0; r * c];
        for k in 0..r {
            for l in 0..c {
                let a = sys.axis1.get(k).copied().unwrap_or(f64::INFINITY);
                let b = sys.axis2.get(l).copied().unwrap_or(f64::INFINITY);
                phi[k * c + l] = match (a.is_finite(), b.is_finite()) {
                    (true, true) => bvn_cdf(a, b, 0.6),
                    (true, false) => normal_cdf(a),
                    (false, true) => normal_cdf(b),
                    _ => 1.0,
                };
            }
        }
        let cells = spec.lattice.cells();
        let f = crate::lattice::GaussianCdf::new(0.6).unwrap();
        let mut worst: f64 = 0.0;
        for (i, row) in sys.rows.iter().enumerate() {
            let obs = i / cells.len();
            let cell = &cells[i % cells.len()];
            let x: [&[f64]; 2] = [data.x(obs, 0), data.x(obs, 1)];
            let p = crate::lattice::cell_probability(cell, &x, &spec.lattice, &spec.model, &f).unwrap();
            worst = worst.max((row.entries.iter().map(|&(j, a)| a * phi[j]).sum::<f64>() - p).abs());
        }
        assert!(worst <= 5e-3, "{worst}");
    }

    #[test]
    fn groups_pool_identical_covariates() {
        let data = Dataset::new(
            vec![
                DesignMatrix::from_rows(&[vec![0.0], vec![0.0], vec![1.0]]).unwrap(),
                DesignMatrix::from_rows(&[vec![0.0], vec![0.0], vec![1.0]]).unwrap(),
            ],
            vec![CellIndex(vec![1, 1]), CellIndex(vec![2, 1]), CellIndex(vec![1, 1])],
            None,
        )
        .unwrap();
        let spec = LatticeSpec::new(vec![vec![0.0], vec![0.0]]).unwrap();
        let model = IndexModel::new(vec![vec![1.0], vec![1.0]]).unwrap();
        let axes = grid_axes(&data, &spec, &model, &GridSource::ImpliedBounds { max_nodes: None }).unwrap();
        let sys = build_design_system(&data, &spec, &model, axes).unwrap();
        assert_eq!(sys.rows.len(), 8);
        assert_eq!(sys.rows[0].weight, 2.0);
        assert_eq!(sys.rows[0].target, 0.5);
        assert_eq!(sys.total_weight, 3.0);
    }

    #[test]
    fn thinning_keeps_extremes() {
        let v: Vec<f64> = (0..1000).map(|i| i as f64).collect();
        let t = thin(&v, 80);
        assert_eq!(t.len(), 80);
        assert_eq!(t[0], 0.0);
        assert_eq!(*t.last().unwrap(), 999.0);
    }
}
