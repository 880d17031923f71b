//! Penalized constrained least squares for CDF values on a grid.

use serde::{Deserialize, Serialize};

use super::design::{build_design_system, grid_axes, DesignSystem, GridSource};
use super::grid::CdfGrid;
use super::shape::{project_simplex, MonotoneBox};
use crate::error::{Error, Result};
use crate::lattice::{Dataset, IndexModel, LatticeSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum FeasibleSet {
    /// Nondecreasing along both axes and inside [0, 1].
    #[default]
    MonotoneBox,
    /// Two-dimensional cumulative sums of nonnegative masses summing to one.
    ProperCdf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GridInversionConfig {
    pub grid_source: GridSource,
    pub smoothness_lambda: f64,
    /// Relative objective decrease over a 20-iteration window that counts
    /// as converged.
    pub tolerance: f64,
    pub max_iter: usize,
    pub feasible_set: FeasibleSet,
}

impl Default for GridInversionConfig {
    fn default() -> Self {
        GridInversionConfig {
            grid_source: GridSource::default(),
            smoothness_lambda: 1e-3,
            tolerance: 1e-7,
            max_iter: 2000,
            feasible_set: FeasibleSet::MonotoneBox,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridInversionFit {
    pub grid: CdfGrid,
    /// F_1 at the first-axis nodes and F_2 at the second-axis nodes.
    pub marginal1: Vec<f64>,
    pub marginal2: Vec<f64>,
    pub initial_objective: f64,
    pub objective: f64,
    /// Objective at the start and after every iteration.
    pub objective_trace: Vec<f64>,
    /// Root weighted mean squared residual of the data term.
    pub residual: f64,
    pub penalty: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Objective pieces for a given augmented phi.
struct Problem<'a> {
    sys: &'a DesignSystem,
    lambda: f64,
    rows: usize,
    cols: usize,
}

impl Problem<'_> {
    /// ||D phi||^2 over adjacent finite nodes.
    fn penalty(&self, phi: &[f64]) -> f64 {
        let (n1, n2) = (self.rows - 1, self.cols - 1);
        let mut s = 0.0;
        for k in 0..n1 {
            for l in 0..n2 {
                let v = phi[k * self.cols + l];
                if k + 1 < n1 {
                    s += (phi[(k + 1) * self.cols + l] - v).powi(2);
                }
                if l + 1 < n2 {
                    s += (phi[k * self.cols + l + 1] - v).powi(2);
                }
            }
        }
        s
    }

    fn objective(&self, phi: &[f64]) -> f64 {
        self.sys.data_loss(phi) + self.lambda * self.penalty(phi)
    }

    fn gradient(&self, phi: &[f64], out: &mut [f64]) {
        out.fill(0.0);
        let w = self.sys.total_weight;
        for r in &self.sys.rows {
            let res: f64 = r.entries.iter().map(|&(i, a)| a * phi[i]).sum::<f64>() - r.target;
            let c = 2.0 * r.weight * res / w;
            for &(i, a) in &r.entries {
                out[i] += c * a;
            }
        }
        if self.lambda > 0.0 {
            let (n1, n2) = (self.rows - 1, self.cols - 1);
            let c = 2.0 * self.lambda;
            for k in 0..n1 {
                for l in 0..n2 {
                    let i = k * self.cols + l;
                    if k + 1 < n1 {
                        let j = i + self.cols;
                        let d = c * (phi[j] - phi[i]);
                        out[j] += d;
                        out[i] -= d;
                    }
                    if l + 1 < n2 {
                        let d = c * (phi[i + 1] - phi[i]);
                        out[i + 1] += d;
                        out[i] -= d;
                    }
                }
            }
        }
    }

    /// Hessian-vector product (the objective is quadratic).
    fn hess_vec(&self, v: &[f64], out: &mut [f64]) {
        out.fill(0.0);
        let w = self.sys.total_weight;
        for r in &self.sys.rows {
            let av: f64 = r.entries.iter().map(|&(i, a)| a * v[i]).sum();
            let c = 2.0 * r.weight * av / w;
            for &(i, a) in &r.entries {
                out[i] += c * a;
            }
        }
        if self.lambda > 0.0 {
            let (n1, n2) = (self.rows - 1, self.cols - 1);
            let c = 2.0 * self.lambda;
            for k in 0..n1 {
                for l in 0..n2 {
                    let i = k * self.cols + l;
                    if k + 1 < n1 {
                        let j = i + self.cols;
                        let d = c * (v[j] - v[i]);
                        out[j] += d;
                        out[i] -= d;
                    }
                    if l + 1 < n2 {
                        let d = c * (v[i + 1] - v[i]);
                        out[i + 1] += d;
                        out[i] -= d;
                    }
                }
            }
        }
    }
}

/// 2-D cumulative sum of masses (row-major, rows x cols).
fn cumsum2(m: &[f64], rows: usize, cols: usize, out: &mut [f64]) {
    for r in 0..rows {
        let mut acc = 0.0;
        for c in 0..cols {
            acc += m[r * cols + c];
            out[r * cols + c] = acc + if r > 0 { out[(r - 1) * cols + c] } else { 0.0 };
        }
    }
}

/// Adjoint of [`cumsum2`]: reverse cumulative sums.
fn cumsum2_adjoint(g: &[f64], rows: usize, cols: usize, out: &mut [f64]) {
    for r in (0..rows).rev() {
        let mut acc = 0.0;
        for c in (0..cols).rev() {
            acc += g[r * cols + c];
            out[r * cols + c] = acc + if r + 1 < rows { out[(r + 1) * cols + c] } else { 0.0 };
        }
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Largest eigenvalue of a symmetric PSD operator by power iteration.
fn largest_eigenvalue(n: usize, mut op: impl FnMut(&[f64], &mut [f64])) -> f64 {
    let mut v: Vec<f64> = (0..n).map(|i| 1.0 + ((i * 7919) % 13) as f64 / 13.0).collect();
    let s = norm(&v);
    v.iter_mut().for_each(|x| *x /= s);
    let mut w = vec![0.0; n];
    let mut lambda = 0.0;
    for _ in 0..200 {
        op(&v, &mut w);
        let nw = norm(&w);
        if nw == 0.0 {
            return 0.0;
        }
        let prev = lambda;
        lambda = nw;
        for (a, b) in v.iter_mut().zip(&w) {
            *a = b / nw;
        }
        if (lambda - prev).abs() <= 1e-6 * lambda {
            break;
        }
    }
    lambda
}

pub fn grid_inversion_fit(
    data: &Dataset,
    spec: &LatticeSpec,
    model: &IndexModel,
    config: &GridInversionConfig,
) -> Result<GridInversionFit> {
    if !(config.smoothness_lambda >= 0.0 && config.smoothness_lambda.is_finite()) {
        return Err(Error::InvalidConfig("smoothness_lambda must be finite and nonnegative".into()));
    }
    let axes = grid_axes(data, spec, model, &config.grid_source)?;
    let sys = build_design_system(data, spec, model, axes)?;
    solve(&sys, config)
}

/// Minimizes the penalized objective for an already assembled system.
pub fn solve(sys: &DesignSystem, config: &GridInversionConfig) -> Result<GridInversionFit> {
    let (rows, cols) = sys.unknown_shape();
    let n = rows * cols;
    let problem = Problem {
        sys,
        lambda: config.smoothness_lambda,
        rows,
        cols,
    };
    let constraints = MonotoneBox {
        rows,
        cols,
        fixed: vec![(sys.top_corner(), 1.0)],
    };

    // product of linear ramps reaching 1 at the +inf node
    let ramp = |i: usize, len: usize| (i + 1) as f64 / len as f64;
    let phi0: Vec<f64> = (0..n).map(|i| ramp(i / cols, rows) * ramp(i % cols, cols)).collect();

    let proper = config.feasible_set == FeasibleSet::ProperCdf;
    // the optimization variable: phi itself, or cell masses
    let to_phi = |x: &[f64], out: &mut [f64]| {
        if proper {
            cumsum2(x, rows, cols, out);
        } else {
            out.copy_from_slice(x);
        }
    };
    let x0: Vec<f64> = if proper {
        let mut m = vec![0.0; n];
        for r in 0..rows {
            for c in 0..cols {
                let at = |a: Option<usize>, b: Option<usize>| match (a, b) {
                    (Some(a), Some(b)) => phi0[a * cols + b],
                    _ => 0.0,
                };
                m[r * cols + c] = at(Some(r), Some(c)) - at(r.checked_sub(1), Some(c)) - at(Some(r), c.checked_sub(1))
                    + at(r.checked_sub(1), c.checked_sub(1));
            }
        }
        m
    } else {
        phi0.clone()
    };
    let project = |x: &[f64]| -> Vec<f64> {
        if proper {
            let mut y = x.to_vec();
            project_simplex(&mut y);
            y
        } else {
            constraints.project(x, 100, 1e-10)
        }
    };

    let mut tmp_phi = vec![0.0; n];
    let mut tmp_g = vec![0.0; n];
    let lipschitz = {
        let mut a = vec![0.0; n];
        let mut b = vec![0.0; n];
        largest_eigenvalue(n, |v, out| {
            if proper {
                cumsum2(v, rows, cols, &mut a);
                problem.hess_vec(&a, &mut b);
                cumsum2_adjoint(&b, rows, cols, out);
            } else {
                problem.hess_vec(v, out);
            }
        }) * 1.02
    };
    let step = if lipschitz > 0.0 { 1.0 / lipschitz } else { 1.0 };

    let mut eval = |x: &[f64], grad: Option<&mut Vec<f64>>| -> f64 {
        to_phi(x, &mut tmp_phi);
        if let Some(g) = grad {
            problem.gradient(&tmp_phi, &mut tmp_g);
            if proper {
                cumsum2_adjoint(&tmp_g, rows, cols, g);
            } else {
                g.copy_from_slice(&tmp_g);
            }
        }
        problem.objective(&tmp_phi)
    };

    let mut x = x0.clone();
    let mut fx = eval(&x, None);
    let initial_objective = fx;
    let mut trace = vec![fx];
    let mut y = x.clone();
    let mut t = 1.0f64;
    let mut g = vec![0.0; n];
    let mut converged = false;
    let mut iterations = 0;
    while iterations < config.max_iter {
        iterations += 1;
        eval(&y, Some(&mut g));
        let trial: Vec<f64> = y.iter().zip(&g).map(|(a, b)| a - step * b).collect();
        let z = project(&trial);
        let fz = eval(&z, None);
        let x_prev = x.clone();
        if fz <= fx {
            x.clone_from(&z);
            fx = fz;
        }
        let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
        for i in 0..n {
            y[i] = x[i] + (t / t_next) * (z[i] - x[i]) + ((t - 1.0) / t_next) * (x[i] - x_prev[i]);
        }
        t = t_next;
        trace.push(fx);
        if trace.len() > 20 {
            let old = trace[trace.len() - 21];
            if old - fx <= config.tolerance * fx.abs().max(1e-12) {
                converged = true;
                break;
            }
        }
    }

    let mut phi = vec![0.0; n];
    to_phi(&x, &mut phi);
    if proper {
        // cumulative sums can overshoot 1 by rounding
        constraints.repair(&mut phi);
    }
    let objective = problem.objective(&phi);
    let residual = sys.data_loss(&phi).sqrt();
    let penalty = problem.penalty(&phi);
    let finite: Vec<f64> = (0..rows - 1)
        .flat_map(|k| (0..cols - 1).map(move |l| (k, l)))
        .map(|(k, l)| phi[k * cols + l])
        .collect();
    let grid = CdfGrid::new(sys.axis1.clone(), sys.axis2.clone(), finite)?;
    Ok(GridInversionFit {
        grid,
        marginal1: (0..rows - 1).map(|k| phi[k * cols + cols - 1]).collect(),
        marginal2: (0..cols - 1).map(|l| phi[(rows - 1) * cols + l]).collect(),
        initial_objective,
        objective,
        objective_trace: trace,
        residual,
        penalty,
        iterations,
        converged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::{CellIndex, DesignMatrix};
    use crate::semiparametric::design::{build_design_system, DesignRow};

    #[test]
    fn cumsum_adjoint() {
        let (r, c) = (3, 4);
        let a: Vec<f64> = (0..12).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..12).map(|i| (i as f64 * 0.91).cos()).collect();
        let mut ca = vec![0.0; 12];
        let mut ctb = vec![0.0; 12];
        cumsum2(&a, r, c, &mut ca);
        cumsum2_adjoint(&b, r, c, &mut ctb);
        let lhs: f64 = ca.iter().zip(&b).map(|(x, y)| x * y).sum();
        let rhs: f64 = a.iter().zip(&ctb).map(|(x, y)| x * y).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    /// Targets generated from a known CDF on a 5 x 5 grid.
    fn step_system() -> (DesignSystem, Vec<f64>) {
        let axis: Vec<f64> = vec![-2.0, -1.0, 0.0, 1.0, 2.0];
        let marg = [0.1, 0.3, 0.5, 0.8, 0.9];
        let (rows, cols) = (6usize, 6usize);
        let truth: Vec<f64> = (0..36)
            .map(|i| {
                let (k, l) = (i / cols, i % cols);
                let f = |j: usize| -> f64 { if j == 5 { 1.0 } else { marg[j] } };
                // a step-like but valid CDF: min of margins
                f(k).min(f(l))
            })
            .collect();
        // every unknown observed through many single-corner rectangles
        let mut design_rows = Vec::new();
        for k in 0..rows {
            for l in 0..cols {
                for (dk, dl) in [(0usize, 0usize), (1, 0), (0, 1), (1, 1)] {
                    let (k0, l0) = (k.checked_sub(dk), l.checked_sub(dl));
                    if let (Some(k0), Some(l0)) = (k0, l0) {
                        let mut entries = vec![(k * cols + l, 1.0)];
                        if dk == 1 {
                            entries.push((k0 * cols + l, -1.0));
                        }
                        if dl == 1 {
                            entries.push((k * cols + l0, -1.0));
                        }
                        if dk == 1 && dl == 1 {
                            entries.push((k0 * cols + l0, 1.0));
                        }
                        let target = entries.iter().map(|&(i, a)| a * truth[i]).sum();
                        design_rows.push(DesignRow {
                            entries,
                            target,
                            weight: 1.0,
                        });
                    }
                }
            }
        }
        let sys = DesignSystem {
            axis1: axis.clone(),
            axis2: axis,
            rows: design_rows,
            total_weight: 10.0,
        };
        (sys, truth)
    }

    #[test]
    fn noiseless_recovery() {
        let (sys, truth) = step_system();
        for feasible_set in [FeasibleSet::MonotoneBox, FeasibleSet::ProperCdf] {
            let cfg = GridInversionConfig {
                smoothness_lambda: 0.0,
                tolerance: 0.0,
                max_iter: 5000,
                feasible_set,
                ..Default::default()
            };
            let fit = solve(&sys, &cfg).unwrap();
            assert!(fit.residual < 1e-8, "{feasible_set:?} residual {}", fit.residual);
            for k in 0..5 {
                for l in 0..5 {
                    assert!((fit.grid.value(k, l) - truth[k * 6 + l]).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn objective_trace_is_monotone_and_grid_valid() {
        let (spec, data) = crate::simulation::builtin_dgp(crate::simulation::BuiltinDgp::TwoStep, 400, 3).unwrap();
        for feasible_set in [FeasibleSet::MonotoneBox, FeasibleSet::ProperCdf] {
            let cfg = GridInversionConfig {
                feasible_set,
                max_iter: 300,
                ..Default::default()
            };
            let fit = grid_inversion_fit(&data, &spec.lattice, &spec.model, &cfg).unwrap();
            assert!(fit.objective_trace.windows(2).all(|w| w[1] <= w[0] + 1e-15));
            assert!(fit.objective <= fit.initial_objective);
            fit.grid.check_invariants(1e-9).unwrap();
            assert!(fit.marginal1.windows(2).all(|w| w[0] <= w[1]));
        }
    }

    #[test]
    fn penalty_shrinks_with_lambda() {
        let (spec, data) = crate::simulation::builtin_dgp(crate::simulation::BuiltinDgp::TwoStep, 300, 4).unwrap();
        let mut last = f64::INFINITY;
        for lambda in [0.0, 1e-3, 1e-1, 10.0] {
            let cfg = GridInversionConfig {
                smoothness_lambda: lambda,
                grid_source: GridSource::ImpliedBounds { max_nodes: Some(30) },
                max_iter: 3000,
                tolerance: 1e-10,
                ..Default::default()
            };
            let fit = grid_inversion_fit(&data, &spec.lattice, &spec.model, &cfg).unwrap();
            assert!(fit.penalty <= last * (1.0 + 1e-6) + 1e-12, "lambda {lambda}: {} > {last}", fit.penalty);
            last = fit.penalty;
        }
    }

    #[test]
    fn single_observation_system() {
        let data = Dataset::new(
            vec![DesignMatrix::from_rows(&[vec![0.0]]).unwrap(), DesignMatrix::from_rows(&[vec![0.0]]).unwrap()],
            vec![CellIndex(vec![1, 1])],
            None,
        )
        .unwrap();
        let spec = LatticeSpec::new(vec![vec![0.0], vec![0.0]]).unwrap();
        let model = IndexModel::new(vec![vec![1.0], vec![1.0]]).unwrap();
        let axes = grid_axes(&data, &spec, &model, &GridSource::ImpliedBounds { max_nodes: None }).unwrap();
        let sys = build_design_system(&data, &spec, &model, axes).unwrap();
        let fit = solve(&sys, &GridInversionConfig::default()).unwrap();
        assert!((fit.grid.value(0, 0) - 1.0).abs() < 1e-6);
    }
}
