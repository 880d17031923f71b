//! Projections onto "nondecreasing along both axes, inside [0, 1], some
//! entries fixed" for row-major matrices.

/// Least-squares nondecreasing fit of `x`, in place (pool adjacent violators).
pub(crate) fn pava(x: &mut [f64]) {
    let n = x.len();
    if n < 2 {
        return;
    }
    let mut means: Vec<f64> = Vec::with_capacity(n);
    let mut sizes: Vec<usize> = Vec::with_capacity(n);
    for &v in x.iter() {
        let mut m = v;
        let mut s = 1usize;
        while let Some(&last) = means.last() {
            if last <= m {
                break;
            }
            let ls = sizes.pop().unwrap();
            means.pop();
            m = (last * ls as f64 + m * s as f64) / (ls + s) as f64;
            s += ls;
        }
        means.push(m);
        sizes.push(s);
    }
    let mut i = 0;
    for (m, s) in means.into_iter().zip(sizes) {
        x[i..i + s].fill(m);
        i += s;
    }
}

#[derive(Debug, Clone)]
pub(crate) struct MonotoneBox {
    pub rows: usize,
    pub cols: usize,
    /// (flat index, value) pairs held fixed.
    pub fixed: Vec<(usize, f64)>,
}

impl MonotoneBox {
    /// Exact projection of one chain onto "nondecreasing, inside [0, 1],
    /// fixed entries held": fixed entries split the chain into free runs,
    /// each an isotonic fit clamped between its neighbouring fixed values.
    fn project_chain(&self, x: &mut [f64], fixed: &[Option<f64>]) {
        let n = x.len();
        let mut lo = 0.0;
        let mut i = 0;
        while i < n {
            if let Some(v) = fixed[i] {
                x[i] = v;
                lo = v;
                i += 1;
                continue;
            }
            let mut j = i;
            while j < n && fixed[j].is_none() {
                j += 1;
            }
            let hi = if j < n { fixed[j].unwrap_or(1.0).min(1.0) } else { 1.0 };
            pava(&mut x[i..j]);
            x[i..j].iter_mut().for_each(|v| *v = v.clamp(lo.max(0.0), hi));
            i = j;
        }
    }

    fn fixed_mask(&self) -> Vec<Option<f64>> {
        let mut mask = vec![None; self.rows * self.cols];
        for &(i, v) in &self.fixed {
            mask[i] = Some(v);
        }
        mask
    }

    fn project_rows(&self, x: &mut [f64], mask: &[Option<f64>]) {
        for (r, m) in x.chunks_mut(self.cols).zip(mask.chunks(self.cols)) {
            self.project_chain(r, m);
        }
    }

    fn project_cols(&self, x: &mut [f64], mask: &[Option<f64>]) {
        let mut buf = vec![0.0; self.rows];
        let mut m = vec![None; self.rows];
        for c in 0..self.cols {
            for r in 0..self.rows {
                buf[r] = x[r * self.cols + c];
                m[r] = mask[r * self.cols + c];
            }
            self.project_chain(&mut buf, &m);
            for r in 0..self.rows {
                x[r * self.cols + c] = buf[r];
            }
        }
    }

    fn project_box(&self, x: &mut [f64]) {
        x.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
        for &(i, v) in &self.fixed {
            x[i] = v;
        }
    }

    /// Dykstra's alternating projections between the row and the column
    /// constraint sets, then [`repair`](Self::repair) so the result is
    /// exactly feasible.
    pub fn project(&self, x: &[f64], max_iter: usize, tol: f64) -> Vec<f64> {
        let n = x.len();
        let mask = self.fixed_mask();
        let mut y = x.to_vec();
        let mut p = vec![0.0; n];
        let mut q = vec![0.0; n];
        let mut z = vec![0.0; n];
        for _ in 0..max_iter {
            for i in 0..n {
                z[i] = y[i] + p[i];
            }
            let mut a = z.clone();
            self.project_rows(&mut a, &mask);
            for i in 0..n {
                p[i] = z[i] - a[i];
                z[i] = a[i] + q[i];
            }
            let mut b = z.clone();
            self.project_cols(&mut b, &mask);
            let mut change = 0.0f64;
            for i in 0..n {
                q[i] = z[i] - b[i];
                change = change.max((b[i] - y[i]).abs());
                // the two sets agree once row and column projections coincide
                change = change.max((b[i] - a[i]).abs());
            }
            y = b;
            if change < tol {
                break;
            }
        }
        self.repair(&mut y);
        y
    }

    /// Clamp, fix, then running maxima along rows and columns. Exactly
    /// feasible whenever the fixed values are compatible with monotonicity.
    pub fn repair(&self, x: &mut [f64]) {
        self.project_box(x);
        for r in x.chunks_mut(self.cols) {
            for c in 1..self.cols {
                r[c] = r[c].max(r[c - 1]);
            }
        }
        for r in 1..self.rows {
            for c in 0..self.cols {
                let above = x[(r - 1) * self.cols + c];
                let v = &mut x[r * self.cols + c];
                *v = v.max(above);
            }
        }
    }

    /// Smallest slack over all monotonicity, box and fixed-value
    /// constraints (negative means violated).
    pub fn min_slack(&self, x: &[f64]) -> f64 {
        let mut s = f64::INFINITY;
        for r in 0..self.rows {
            for c in 0..self.cols {
                let v = x[r * self.cols + c];
                s = s.min(v).min(1.0 - v);
                if c + 1 < self.cols {
                    s = s.min(x[r * self.cols + c + 1] - v);
                }
                if r + 1 < self.rows {
                    s = s.min(x[(r + 1) * self.cols + c] - v);
                }
            }
        }
        for &(i, v) in &self.fixed {
            s = s.min(-(x[i] - v).abs());
        }
        s
    }
}

/// Euclidean projection onto the probability simplex.
pub(crate) fn project_simplex(x: &mut [f64]) {
    let mut u: Vec<f64> = x.to_vec();
    u.sort_by(|a, b| b.total_cmp(a));
    let mut cum = 0.0;
    let mut theta = 0.0;
    for (j, v) in u.iter().enumerate() {
        cum += v;
        let t = (cum - 1.0) / (j + 1) as f64;
        if v - t > 0.0 {
            theta = t;
        }
    }
    x.iter_mut().for_each(|v| *v = (*v - theta).max(0.0));
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn pava_basic() {
        let mut x = vec![1.0, 3.0, 2.0, 4.0, 0.0];
        pava(&mut x);
        assert_eq!(x, vec![1.0, 2.25, 2.25, 2.25, 2.25]);
    }

    #[test]
    fn simplex_projection() {
        let mut x = vec![0.5, 0.5, 0.5];
        project_simplex(&mut x);
        for v in &x {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let mut y = vec![2.0, -1.0, 0.0];
        project_simplex(&mut y);
        assert_eq!(y, vec![1.0, 0.0, 0.0]);
    }

    #[test]
    fn projection_is_fixed_on_feasible_points() {
        let b = MonotoneBox {
            rows: 3,
            cols: 3,
            fixed: vec![(8, 1.0)],
        };
        let x = vec![0.0, 0.1, 0.2, 0.1, 0.3, 0.4, 0.2, 0.5, 1.0];
        let y = b.project(&x, 100, 1e-12);
        assert_eq!(x, y);
    }

    proptest! {
        #[test]
        fn projection_is_feasible(v in proptest::collection::vec(-0.5f64..1.5, 20)) {
            let b = MonotoneBox { rows: 4, cols: 5, fixed: vec![(0, 0.0), (19, 1.0)] };
            let y = b.project(&v, 200, 1e-12);
            prop_assert!(b.min_slack(&y) >= 0.0);
        }

        #[test]
        fn projection_is_nearest_feasible_point(
            v in proptest::collection::vec(-0.5f64..1.5, 20),
            w in proptest::collection::vec(proptest::collection::vec(-0.5f64..1.5, 20), 10),
        ) {
            let b = MonotoneBox { rows: 4, cols: 5, fixed: vec![(0, 0.0), (19, 1.0)] };
            let y = b.project(&v, 5000, 1e-14);
            // <v - y, z - y> <= 0 for every feasible z
            for mut z in w {
                b.repair(&mut z);
                let ip: f64 = v.iter().zip(&y).zip(&z).map(|((a, p), q)| (a - p) * (q - p)).sum();
                prop_assert!(ip <= 1e-8, "{ip}");
            }
        }

        #[test]
        fn pava_is_monotone_and_mean_preserving(mut v in proptest::collection::vec(-10f64..10.0, 1..30)) {
            let sum: f64 = v.iter().sum();
            pava(&mut v);
            prop_assert!(v.windows(2).all(|w| w[0] <= w[1] + 1e-12));
            prop_assert!((v.iter().sum::<f64>() - sum).abs() < 1e-9);
        }
    }
}
