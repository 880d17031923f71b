//! Threshold lattices, latent-draw categorization, implied residual
//! rectangles and inclusion-exclusion cell probabilities.

use serde::{Deserialize, Serialize};

use crate::distributions::{bvn_cdf, normal_cdf, Correlation};
use crate::error::{Error, Result};

/// Per-dimension strictly increasing finite thresholds. The sentinels
/// alpha_0 = -inf and alpha_M = +inf are implicit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "LatticeSpecRaw")]
pub struct LatticeSpec {
    thresholds: Vec<Vec<f64>>,
}

#[derive(Deserialize)]
struct LatticeSpecRaw {
    thresholds: Vec<Vec<f64>>,
}

impl TryFrom<LatticeSpecRaw> for LatticeSpec {
    type Error = Error;
    fn try_from(raw: LatticeSpecRaw) -> Result<Self> {
        LatticeSpec::new(raw.thresholds)
    }
}

impl LatticeSpec {
    pub fn new(thresholds: Vec<Vec<f64>>) -> Result<Self> {
        if thresholds.len() < 2 {
            return Err(Error::InvalidLattice(format!(
                "need at least 2 dimensions, got {}",
                thresholds.len()
            )));
        }
        for (d, t) in thresholds.iter().enumerate() {
            if let Some(bad) = t.iter().find(|v| !v.is_finite()) {
                return Err(Error::InvalidLattice(format!(
                    "dimension {}: threshold {bad} is not finite",
                    d + 1
                )));
            }
            if t.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::InvalidLattice(format!(
                    "dimension {}: thresholds {t:?} are not strictly increasing",
                    d + 1
                )));
            }
        }
        Ok(LatticeSpec { thresholds })
    }

    pub fn dims(&self) -> usize {
        self.thresholds.len()
    }

    /// Number of categories M_d.
    pub fn categories(&self, d: usize) -> usize {
        self.thresholds[d].len() + 1
    }

    pub fn category_counts(&self) -> Vec<usize> {
        (0..self.dims()).map(|d| self.categories(d)).collect()
    }

    pub fn thresholds(&self, d: usize) -> &[f64] {
        &self.thresholds[d]
    }

    pub fn all_thresholds(&self) -> &[Vec<f64>] {
        &self.thresholds
    }

    /// alpha_j^(d) for j in 0..=M_d, including the infinite sentinels.
    #[inline]
    pub fn threshold(&self, d: usize, j: usize) -> f64 {
        threshold_with_sentinels(&self.thresholds[d], j)
    }

    /// Total number of cells, prod_d M_d.
    pub fn cell_count(&self) -> usize {
        (0..self.dims()).map(|d| self.categories(d)).product()
    }

    /// Every cell in row-major order (last dimension fastest).
    pub fn cells(&self) -> Vec<CellIndex> {
        let counts = self.category_counts();
        let mut out = Vec::with_capacity(self.cell_count());
        let mut cur = vec![1usize; counts.len()];
        loop {
            out.push(CellIndex(cur.clone()));
            let mut d = counts.len();
            loop {
                if d == 0 {
                    return out;
                }
                d -= 1;
                if cur[d] < counts[d] {
                    cur[d] += 1;
                    break;
                }
                cur[d] = 1;
            }
        }
    }
}

#[inline]
pub(crate) fn threshold_with_sentinels(t: &[f64], j: usize) -> f64 {
    if j == 0 {
        f64::NEG_INFINITY
    } else if j > t.len() {
        f64::INFINITY
    } else {
        t[j - 1]
    }
}

/// Index coefficients beta_d, one vector per dimension.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "IndexModelRaw")]
pub struct IndexModel {
    beta: Vec<Vec<f64>>,
}

#[derive(Deserialize)]
struct IndexModelRaw {
    beta: Vec<Vec<f64>>,
}

impl TryFrom<IndexModelRaw> for IndexModel {
    type Error = Error;
    fn try_from(raw: IndexModelRaw) -> Result<Self> {
        IndexModel::new(raw.beta)
    }
}

impl IndexModel {
    pub fn new(beta: Vec<Vec<f64>>) -> Result<Self> {
        for (d, b) in beta.iter().enumerate() {
            if b.is_empty() {
                return Err(Error::InvalidModel(format!("dimension {} has no coefficients", d + 1)));
            }
            if b.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidModel(format!("dimension {}: non-finite coefficient", d + 1)));
            }
        }
        Ok(IndexModel { beta })
    }

    pub fn dims(&self) -> usize {
        self.beta.len()
    }

    pub fn beta(&self, d: usize) -> &[f64] {
        &self.beta[d]
    }

    pub fn all_beta(&self) -> &[Vec<f64>] {
        &self.beta
    }

    /// x_d beta_d
    #[inline]
    pub fn index(&self, d: usize, x: &[f64]) -> f64 {
        dot(&self.beta[d], x)
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// 1-based category per dimension.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CellIndex(pub Vec<usize>);

impl CellIndex {
    pub fn new(j: Vec<usize>) -> Self {
        CellIndex(j)
    }

    #[inline]
    pub fn get(&self, d: usize) -> usize {
        self.0[d]
    }

    pub fn dims(&self) -> usize {
        self.0.len()
    }

    pub fn validate(&self, spec: &LatticeSpec) -> Result<()> {
        if self.0.len() != spec.dims() {
            return Err(Error::DimensionMismatch(format!(
                "cell {:?} has {} entries, lattice has {} dimensions",
                self.0,
                self.0.len(),
                spec.dims()
            )));
        }
        for (d, &j) in self.0.iter().enumerate() {
            if j == 0 || j > spec.categories(d) {
                return Err(Error::DimensionMismatch(format!(
                    "cell {:?}: category {j} outside 1..={} in dimension {}",
                    self.0,
                    spec.categories(d),
                    d + 1
                )));
            }
        }
        Ok(())
    }
}

/// Row-major covariate block for one dimension.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DesignMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::DimensionMismatch(format!(
                "{rows}x{cols} matrix needs {} entries, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(DesignMatrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::DimensionMismatch("ragged covariate rows".into()));
        }
        Ok(DesignMatrix {
            rows: rows.len(),
            cols,
            data: rows.concat(),
        })
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> impl Iterator<Item = f64> + '_ {
        (0..self.rows).map(move |i| self.data[i * self.cols + j])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }
}

/// Observations: per-dimension covariates plus the observed cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    covariates: Vec<DesignMatrix>,
    outcomes: Vec<CellIndex>,
    column_names: Vec<Vec<String>>,
}

impl Dataset {
    pub fn new(
        covariates: Vec<DesignMatrix>,
        outcomes: Vec<CellIndex>,
        column_names: Option<Vec<Vec<String>>>,
    ) -> Result<Self> {
        let n = outcomes.len();
        if n == 0 {
            return Err(Error::EmptyDataset);
        }
        for (d, m) in covariates.iter().enumerate() {
            if m.rows() != n {
                return Err(Error::DimensionMismatch(format!(
                    "dimension {} has {} covariate rows but there are {n} outcomes",
                    d + 1,
                    m.rows()
                )));
            }
        }
        if let Some(bad) = outcomes.iter().find(|c| c.dims() != covariates.len()) {
            return Err(Error::DimensionMismatch(format!(
                "outcome {:?} does not have {} entries",
                bad.0,
                covariates.len()
            )));
        }
        let column_names = match column_names {
            Some(names) => {
                if names.len() != covariates.len()
                    || names.iter().zip(&covariates).any(|(nm, m)| nm.len() != m.cols())
                {
                    return Err(Error::DimensionMismatch(
                        "column names do not match covariate shapes".into(),
                    ));
                }
                names
            }
            None => covariates
                .iter()
                .map(|m| (1..=m.cols()).map(|k| format!("v{k}")).collect())
                .collect(),
        };
        Ok(Dataset {
            covariates,
            outcomes,
            column_names,
        })
    }

    #[inline]
    pub fn n(&self) -> usize {
        self.outcomes.len()
    }

    pub fn dims(&self) -> usize {
        self.covariates.len()
    }

    #[inline]
    pub fn x(&self, i: usize, d: usize) -> &[f64] {
        self.covariates[d].row(i)
    }

    pub fn covariates(&self, d: usize) -> &DesignMatrix {
        &self.covariates[d]
    }

    #[inline]
    pub fn outcome(&self, i: usize) -> &CellIndex {
        &self.outcomes[i]
    }

    pub fn outcomes(&self) -> &[CellIndex] {
        &self.outcomes
    }

    pub fn column_names(&self) -> &[Vec<String>] {
        &self.column_names
    }

    /// Number of covariates per dimension.
    pub fn k(&self) -> Vec<usize> {
        self.covariates.iter().map(DesignMatrix::cols).collect()
    }

    /// Checks that every outcome is a valid cell of `spec`.
    pub fn validate(&self, spec: &LatticeSpec) -> Result<()> {
        if self.dims() != spec.dims() {
            return Err(Error::DimensionMismatch(format!(
                "dataset has {} dimensions, lattice has {}",
                self.dims(),
                spec.dims()
            )));
        }
        for (i, c) in self.outcomes.iter().enumerate() {
            c.validate(spec)
                .map_err(|e| Error::DimensionMismatch(format!("observation {i}: {e}")))?;
        }
        Ok(())
    }

    /// Largest category label per dimension.
    pub fn max_categories(&self) -> Vec<usize> {
        (0..self.dims())
            .map(|d| self.outcomes.iter().map(|c| c.get(d)).max().unwrap_or(1))
            .collect()
    }

    /// (dimension, category) pairs, both 1-based, with no observations.
    pub fn empty_categories(&self, counts: &[usize]) -> Vec<(usize, usize)> {
        let mut empty = Vec::new();
        for (d, &m) in counts.iter().enumerate() {
            let mut seen = vec![false; m];
            for c in &self.outcomes {
                if let Some(s) = seen.get_mut(c.get(d).wrapping_sub(1)) {
                    *s = true;
                }
            }
            empty.extend(seen.iter().enumerate().filter(|(_, s)| !**s).map(|(j, _)| (d + 1, j + 1)));
        }
        empty
    }

    /// Rows with the given indices, in that order.
    pub fn select(&self, rows: &[usize]) -> Dataset {
        let covariates = self
            .covariates
            .iter()
            .map(|m| {
                let data = rows.iter().flat_map(|&i| m.row(i).iter().copied()).collect();
                DesignMatrix {
                    rows: rows.len(),
                    cols: m.cols(),
                    data,
                }
            })
            .collect();
        Dataset {
            covariates,
            outcomes: rows.iter().map(|&i| self.outcomes[i].clone()).collect(),
            column_names: self.column_names.clone(),
        }
    }

    pub(crate) fn check_model(&self, model: &IndexModel) -> Result<()> {
        if model.dims() != self.dims() {
            return Err(Error::DimensionMismatch(format!(
                "index model has {} dimensions, dataset has {}",
                model.dims(),
                self.dims()
            )));
        }
        for d in 0..self.dims() {
            if model.beta(d).len() != self.covariates[d].cols() {
                return Err(Error::DimensionMismatch(format!(
                    "dimension {}: {} coefficients for {} covariates",
                    d + 1,
                    model.beta(d).len(),
                    self.covariates[d].cols()
                )));
            }
        }
        Ok(())
    }
}

/// Half-open box (lower, upper] in error space; sides may be infinite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rectangle {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl Rectangle {
    pub fn contains(&self, point: &[f64]) -> bool {
        point
            .iter()
            .zip(self.lower.iter().zip(&self.upper))
            .all(|(&p, (&lo, &hi))| p > lo && p <= hi)
    }
}

/// Maps a latent vector to the unique cell with alpha_{j-1} < y <= alpha_j.
pub fn categorize(latent: &[f64], spec: &LatticeSpec) -> CellIndex {
    CellIndex(
        latent
            .iter()
            .enumerate()
            .map(|(d, &y)| spec.thresholds(d).iter().take_while(|&&a| a < y).count() + 1)
            .collect(),
    )
}

/// The error-space rectangle implied by observation `i`.
pub fn implied_rectangle(
    data: &Dataset,
    i: usize,
    spec: &LatticeSpec,
    model: &IndexModel,
) -> Result<Rectangle> {
    data.check_model(model)?;
    if data.dims() != spec.dims() {
        return Err(Error::DimensionMismatch(format!(
            "dataset has {} dimensions, lattice has {}",
            data.dims(),
            spec.dims()
        )));
    }
    let cell = data.outcome(i);
    cell.validate(spec)?;
    Ok(rectangle_for(cell, |d| model.index(d, data.x(i, d)), spec))
}

pub(crate) fn rectangle_for(cell: &CellIndex, index: impl Fn(usize) -> f64, spec: &LatticeSpec) -> Rectangle {
    let dims = spec.dims();
    let mut lower = Vec::with_capacity(dims);
    let mut upper = Vec::with_capacity(dims);
    for d in 0..dims {
        let j = cell.get(d);
        let shift = index(d);
        lower.push(spec.threshold(d, j - 1) - shift);
        upper.push(spec.threshold(d, j) - shift);
    }
    Rectangle { lower, upper }
}

/// A joint CDF over extended-real points.
pub trait JointCdf: Sync {
    fn dims(&self) -> usize;
    fn cdf(&self, point: &[f64]) -> f64;
}

/// Bivariate standard normal with correlation rho.
#[derive(Debug, Clone, Copy)]
pub struct GaussianCdf {
    pub rho: Correlation,
}

impl GaussianCdf {
    pub fn new(rho: f64) -> Result<Self> {
        Ok(GaussianCdf {
            rho: Correlation::new(rho)?,
        })
    }
}

impl JointCdf for GaussianCdf {
    fn dims(&self) -> usize {
        2
    }

    fn cdf(&self, p: &[f64]) -> f64 {
        bvn_cdf(p[0], p[1], self.rho.value())
    }
}

/// Product of independent marginal CDFs.
pub struct ProductCdf<F: Fn(usize, f64) -> f64 + Sync> {
    pub dims: usize,
    pub marginal: F,
}

impl<F: Fn(usize, f64) -> f64 + Sync> JointCdf for ProductCdf<F> {
    fn dims(&self) -> usize {
        self.dims
    }

    fn cdf(&self, p: &[f64]) -> f64 {
        p.iter().enumerate().map(|(d, &v)| (self.marginal)(d, v)).product()
    }
}

/// Independent standard normal margins.
pub fn independent_normal(dims: usize) -> ProductCdf<impl Fn(usize, f64) -> f64 + Sync> {
    ProductCdf {
        dims,
        marginal: |_d: usize, v: f64| normal_cdf(v),
    }
}

/// P(Y in rectangle) by 2^D signed corner evaluations of `f`.
pub fn rectangle_probability(rect: &Rectangle, f: &dyn JointCdf) -> Result<f64> {
    let dims = rect.lower.len();
    let mut total = 0.0;
    let mut corner = vec![0.0; dims];
    'corners: for mask in 0..(1usize << dims) {
        let mut sign = 1.0;
        for d in 0..dims {
            if mask & (1 << d) != 0 {
                corner[d] = rect.lower[d];
                sign = -sign;
            } else {
                corner[d] = rect.upper[d];
            }
            if corner[d] == f64::NEG_INFINITY {
                continue 'corners;
            }
        }
        let value = if corner.iter().all(|&c| c == f64::INFINITY) {
            1.0
        } else {
            f.cdf(&corner)
        };
        if !(0.0..=1.0).contains(&value) {
            return Err(Error::CdfOutOfRange {
                point: corner.clone(),
                value,
            });
        }
        total += sign * value;
    }
    Ok(total)
}

/// Probability of `cell` given covariates `x` (one row per dimension).
pub fn cell_probability(
    cell: &CellIndex,
    x: &[&[f64]],
    spec: &LatticeSpec,
    model: &IndexModel,
    f: &dyn JointCdf,
) -> Result<f64> {
    cell.validate(spec)?;
    if x.len() != spec.dims() || model.dims() != spec.dims() || f.dims() != spec.dims() {
        return Err(Error::DimensionMismatch(
            "covariates, model, CDF and lattice must agree on the number of dimensions".into(),
        ));
    }
    let rect = rectangle_for(cell, |d| model.index(d, x[d]), spec);
    let p = rectangle_probability(&rect, f)?;
    if p < -1e-12 {
        return Err(Error::NegativeMass {
            cell: cell.0.clone(),
            mass: p,
        });
    }
    Ok(p.clamp(0.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> LatticeSpec {
        LatticeSpec::new(vec![vec![-1.0, 1.0], vec![-0.8, 0.8]]).unwrap()
    }

    #[test]
    fn categorize_examples() {
        let s = spec();
        assert_eq!(categorize(&[0.5, -1.2], &s).0, vec![2, 1]);
        assert_eq!(categorize(&[-1.0, 0.0], &s).0, vec![1, 2]);
        assert_eq!(categorize(&[10.0, 10.0], &s).0, vec![3, 3]);
    }

    #[test]
    fn lattice_validation() {
        assert!(LatticeSpec::new(vec![vec![1.0, 1.0], vec![0.0]]).is_err());
        assert!(LatticeSpec::new(vec![vec![0.0, f64::INFINITY], vec![0.0]]).is_err());
        assert!(LatticeSpec::new(vec![vec![0.0]]).is_err());
        // a dimension with a single category is allowed
        let s = LatticeSpec::new(vec![vec![], vec![0.0]]).unwrap();
        assert_eq!(s.categories(0), 1);
        assert_eq!(s.cells().len(), 2);
        let json = r#"{"thresholds":[[0.0,-1.0],[0.0]]}"#;
        assert!(serde_json::from_str::<LatticeSpec>(json).is_err());
    }

    #[test]
    fn implied_rectangle_examples() {
        let s = spec();
        let x = vec![
            DesignMatrix::from_rows(&[vec![0.0], vec![1.0]]).unwrap(),
            DesignMatrix::from_rows(&[vec![0.0], vec![0.0]]).unwrap(),
        ];
        let data = Dataset::new(x, vec![CellIndex(vec![1, 1]), CellIndex(vec![2, 1])], None).unwrap();
        let model = IndexModel::new(vec![vec![0.8], vec![-0.5]]).unwrap();
        let r0 = implied_rectangle(&data, 0, &s, &model).unwrap();
        assert_eq!(r0.lower, vec![f64::NEG_INFINITY, f64::NEG_INFINITY]);
        assert_eq!(r0.upper, vec![-1.0, -0.8]);
        let r1 = implied_rectangle(&data, 1, &s, &model).unwrap();
        assert!((r1.lower[0] + 1.8).abs() < 1e-15 && (r1.upper[0] - 0.2).abs() < 1e-15);

        let bad = IndexModel::new(vec![vec![0.8, 1.0], vec![-0.5]]).unwrap();
        assert!(implied_rectangle(&data, 0, &s, &bad).is_err());
    }

    #[test]
    fn independence_factorizes() {
        let s = spec();
        let model = IndexModel::new(vec![vec![0.8], vec![-0.5]]).unwrap();
        let f = GaussianCdf::new(0.0).unwrap();
        let (x1, x2) = ([0.3], [-1.1]);
        let x: [&[f64]; 2] = [&x1, &x2];
        let p = cell_probability(&CellIndex(vec![2, 3]), &x, &s, &model, &f).unwrap();
        let i1 = 0.8 * 0.3;
        let i2 = -0.5 * -1.1;
        let m1 = normal_cdf(1.0 - i1) - normal_cdf(-1.0 - i1);
        let m2 = 1.0 - normal_cdf(0.8 - i2);
        assert!((p - m1 * m2).abs() < 1e-14);
    }

    #[test]
    fn single_cell_lattice_has_unit_mass() {
        let s = LatticeSpec::new(vec![vec![], vec![]]).unwrap();
        let model = IndexModel::new(vec![vec![1.0], vec![1.0]]).unwrap();
        let f = GaussianCdf::new(0.3).unwrap();
        let x: [&[f64]; 2] = [&[2.0], &[-1.0]];
        let p = cell_probability(&CellIndex(vec![1, 1]), &x, &s, &model, &f).unwrap();
        assert_eq!(p, 1.0);
    }

    #[test]
    fn corner_cell_equals_bvn() {
        let s = spec();
        let model = IndexModel::new(vec![vec![0.8], vec![-0.5]]).unwrap();
        let f = GaussianCdf::new(0.6).unwrap();
        let x: [&[f64]; 2] = [&[0.0], &[0.0]];
        let p = cell_probability(&CellIndex(vec![1, 1]), &x, &s, &model, &f).unwrap();
        assert_eq!(p, bvn_cdf(-1.0, -0.8, 0.6));
    }

    #[test]
    fn out_of_range_cdf_is_rejected() {
        let s = spec();
        let model = IndexModel::new(vec![vec![0.0], vec![0.0]]).unwrap();
        let bad = ProductCdf {
            dims: 2,
            marginal: |_d: usize, _v: f64| 1.5,
        };
        let x: [&[f64]; 2] = [&[0.0], &[0.0]];
        assert!(matches!(
            cell_probability(&CellIndex(vec![2, 2]), &x, &s, &model, &bad),
            Err(Error::CdfOutOfRange { .. })
        ));
    }

    #[test]
    fn three_dimensional_partition() {
        let s = LatticeSpec::new(vec![vec![-0.5], vec![0.0, 1.0], vec![0.2]]).unwrap();
        let model = IndexModel::new(vec![vec![1.0], vec![1.0], vec![1.0]]).unwrap();
        let f = independent_normal(3);
        let x: [&[f64]; 3] = [&[0.1], &[-0.4], &[0.7]];
        let total: f64 = s
            .cells()
            .iter()
            .map(|c| cell_probability(c, &x, &s, &model, &f).unwrap())
            .sum();
        assert!((total - 1.0).abs() < 1e-12);
        assert_eq!(s.cells().len(), 12);
    }
}
