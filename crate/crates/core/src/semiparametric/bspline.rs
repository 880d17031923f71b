use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Highest supported spline degree.
pub const MAX_DEGREE: usize = 5;

/// Clamped B-spline basis on [lo, hi] with uniform interior knots.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BSplineBasis {
    knots: Vec<f64>,
    degree: usize,
}

impl BSplineBasis {
    pub fn uniform(lo: f64, hi: f64, interior: usize, degree: usize) -> Result<Self> {
        if !(lo < hi && lo.is_finite() && hi.is_finite()) || degree == 0 || degree > MAX_DEGREE {
            return Err(Error::InvalidConfig(format!(
                "spline needs a finite knot range lo < hi and degree in 1..={MAX_DEGREE} (got [{lo}, {hi}], q = {degree})"
            )));
        }
        let mut knots = vec![lo; degree + 1];
        knots.extend((1..=interior).map(|i| lo + (hi - lo) * i as f64 / (interior + 1) as f64));
        knots.extend(std::iter::repeat_n(hi, degree + 1));
        Ok(BSplineBasis { knots, degree })
    }

    pub fn len(&self) -> usize {
        self.knots.len() - self.degree - 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    pub fn range(&self) -> (f64, f64) {
        (self.knots[0], self.knots[self.knots.len() - 1])
    }

    /// Knot averages; a function linear in x has these as coefficients.
    pub fn greville(&self) -> Vec<f64> {
        (0..self.len())
            .map(|a| self.knots[a + 1..=a + self.degree].iter().sum::<f64>() / self.degree as f64)
            .collect()
    }

    /// Index of the first nonzero basis function at `x` (clamped to the
    /// knot range) and the degree + 1 nonzero values.
    pub fn eval(&self, x: f64) -> (usize, Vec<f64>) {
        let mut v = [0.0; MAX_DEGREE + 1];
        let first = self.eval_into(x, &mut v);
        (first, v[..=self.degree].to_vec())
    }

    /// Allocation-free [`eval`](Self::eval): fills `values[..=degree]`.
    pub fn eval_into(&self, x: f64, values: &mut [f64; MAX_DEGREE + 1]) -> usize {
        let p = self.degree;
        let (lo, hi) = self.range();
        let x = x.clamp(lo, hi);
        let n = self.len();
        let span = if x >= hi {
            n - 1
        } else {
            // last s with knots[s] <= x, restricted to [p, n - 1]
            (self.knots.partition_point(|k| *k <= x) - 1).clamp(p, n - 1)
        };
        let t = &self.knots;
        let mut left = [0.0; MAX_DEGREE + 1];
        let mut right = [0.0; MAX_DEGREE + 1];
        values[0] = 1.0;
        for j in 1..=p {
            left[j] = x - t[span + 1 - j];
            right[j] = t[span + j] - x;
            let mut saved = 0.0;
            for r in 0..j {
                let denom = right[r + 1] + left[j - r];
                let temp = if denom == 0.0 { 0.0 } else { values[r] / denom };
                values[r] = saved + right[r + 1] * temp;
                saved = left[j - r] * temp;
            }
            values[j] = saved;
        }
        span - p
    }
}
