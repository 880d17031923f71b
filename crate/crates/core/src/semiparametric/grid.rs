use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Joint-CDF values on a rectangular grid, row-major with the first axis
/// as the slow index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "CdfGridRaw")]
pub struct CdfGrid {
    axis1: Vec<f64>,
    axis2: Vec<f64>,
    values: Vec<f64>,
}

#[derive(Deserialize)]
struct CdfGridRaw {
    axis1: Vec<f64>,
    axis2: Vec<f64>,
    values: Vec<f64>,
}

impl TryFrom<CdfGridRaw> for CdfGrid {
    type Error = Error;
    fn try_from(raw: CdfGridRaw) -> Result<Self> {
        CdfGrid::new(raw.axis1, raw.axis2, raw.values)
    }
}

/// Tolerance used when checking monotonicity and bounds.
pub const GRID_TOL: f64 = 1e-9;

fn check_axis(axis: &[f64], which: usize) -> Result<()> {
    if axis.is_empty() || axis.iter().any(|v| !v.is_finite()) || axis.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidConfig(format!(
            "grid axis {which} must be non-empty, finite and strictly increasing"
        )));
    }
    Ok(())
}

impl CdfGrid {
    pub fn new(axis1: Vec<f64>, axis2: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        check_axis(&axis1, 1)?;
        check_axis(&axis2, 2)?;
        if values.len() != axis1.len() * axis2.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} grid values for a {}x{} grid",
                values.len(),
                axis1.len(),
                axis2.len()
            )));
        }
        let grid = CdfGrid { axis1, axis2, values };
        grid.check_invariants(GRID_TOL)?;
        Ok(grid)
    }

    /// Evaluates `f` at every node.
    pub fn from_fn(axis1: Vec<f64>, axis2: Vec<f64>, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        let values = axis1.iter().flat_map(|&a| axis2.iter().map(move |&b| (a, b))).map(|(a, b)| f(a, b)).collect();
        CdfGrid::new(axis1, axis2, values)
    }

    pub fn axis1(&self) -> &[f64] {
        &self.axis1
    }

    pub fn axis2(&self) -> &[f64] {
        &self.axis2
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.axis1.len(), self.axis2.len())
    }

    #[inline]
    pub fn value(&self, k: usize, l: usize) -> f64 {
        self.values[k * self.axis2.len() + l]
    }

    /// Values in [0, 1] and nondecreasing along both axes, up to `tol`.
    pub fn check_invariants(&self, tol: f64) -> Result<()> {
        let (n1, n2) = self.shape();
        for k in 0..n1 {
            for l in 0..n2 {
                let v = self.value(k, l);
                let bad = |why: &str| {
                    Err(Error::InvalidConfig(format!(
                        "CDF grid value {v} at ({}, {}) {why}",
                        self.axis1[k], self.axis2[l]
                    )))
                };
                if !(v >= -tol && v <= 1.0 + tol) {
                    return bad("is outside [0, 1]");
                }
                if k > 0 && v < self.value(k - 1, l) - tol {
                    return bad("decreases along the first axis");
                }
                if l > 0 && v < self.value(k, l - 1) - tol {
                    return bad("decreases along the second axis");
                }
            }
        }
        Ok(())
    }

    /// Bilinear interpolation; 0 below the grid, nearest edge above.
    pub fn interpolate(&self, e1: f64, e2: f64) -> f64 {
        if e1 < self.axis1[0] || e2 < self.axis2[0] {
            return 0.0;
        }
        let (k, t1) = locate(&self.axis1, e1);
        let (l, t2) = locate(&self.axis2, e2);
        let v = |a: usize, b: usize| self.value(a, b);
        let (k1, l1) = ((k + 1).min(self.axis1.len() - 1), (l + 1).min(self.axis2.len() - 1));
        (1.0 - t1) * (1.0 - t2) * v(k, l) + t1 * (1.0 - t2) * v(k1, l) + (1.0 - t1) * t2 * v(k, l1) + t1 * t2 * v(k1, l1)
    }

    /// Long-form CSV with header `e1,e2,value`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from("e1,e2,value\n");
        for (k, a) in self.axis1.iter().enumerate() {
            for (l, b) in self.axis2.iter().enumerate() {
                out.push_str(&format!("{a},{b},{}\n", self.value(k, l)));
            }
        }
        let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        file.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
    }

    /// Reads the long-form CSV written by [`write_csv`](Self::write_csv).
    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut reader = csv::Reader::from_path(path)?;
        let headers = reader.headers()?.clone();
        if headers.iter().collect::<Vec<_>>() != ["e1", "e2", "value"] {
            return Err(Error::Schema(format!(
                "{}: expected header e1,e2,value",
                path.display()
            )));
        }
        let mut rows = Vec::new();
        for rec in reader.records() {
            let rec = rec?;
            let parse = |i: usize| -> Result<f64> {
                rec[i]
                    .trim()
                    .parse()
                    .map_err(|_| Error::Schema(format!("{}: bad number `{}`", path.display(), &rec[i])))
            };
            rows.push((parse(0)?, parse(1)?, parse(2)?));
        }
        let mut axis1: Vec<f64> = rows.iter().map(|r| r.0).collect();
        let mut axis2: Vec<f64> = rows.iter().map(|r| r.1).collect();
        for a in [&mut axis1, &mut axis2] {
            a.sort_by(f64::total_cmp);
            a.dedup();
        }
        if rows.len() != axis1.len() * axis2.len() {
            return Err(Error::Schema(format!("{}: rows do not form a full grid", path.display())));
        }
        let mut values = vec![f64::NAN; rows.len()];
        for (a, b, v) in rows {
            let k = axis1.partition_point(|x| *x < a);
            let l = axis2.partition_point(|x| *x < b);
            values[k * axis2.len() + l] = v;
        }
        CdfGrid::new(axis1, axis2, values)
    }
}

/// Index of the left node and the fractional position within its cell,
/// clamping above the last node.
fn locate(axis: &[f64], x: f64) -> (usize, f64) {
    let last = axis.len() - 1;
    if x >= axis[last] {
        return (last, 0.0);
    }
    let k = axis.partition_point(|a| *a <= x) - 1;
    (k, (x - axis[k]) / (axis[k + 1] - axis[k]))
}

/// `n` equally spaced points from `lo` to `hi` inclusive.
pub fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![lo],
        _ => (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect(),
    }
}

/// The 80 x 80 evaluation axis on [-2.5, 2.5].
pub fn evaluation_axis() -> Vec<f64> {
    linspace(-2.5, 2.5, 80)
}
