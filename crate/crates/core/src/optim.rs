//! Quasi-Newton minimization with Armijo backtracking.

use serde::{Deserialize, Serialize};

use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BfgsOptions {
    pub max_iter: usize,
    /// Stop once the gradient sup-norm falls to this level.
    pub grad_tol: f64,
    /// Largest sup-norm of a trial step.
    pub max_step: f64,
    /// Stop when an accepted step lowers the objective by less than
    /// `stall_tol * (1 + |f|)`. Zero disables the check.
    #[serde(default)]
    pub stall_tol: f64,
}

impl Default for BfgsOptions {
    fn default() -> Self {
        BfgsOptions {
            max_iter: 500,
            grad_tol: 1e-6,
            max_step: 2.0,
            stall_tol: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StopReason {
    GradientTolerance,
    MaxIterations,
    /// No step along the (reset) search direction decreased the objective.
    LineSearchFailed,
    /// Accepted steps stopped making progress.
    Stalled,
}

#[derive(Debug, Clone)]
pub struct BfgsOutcome {
    pub x: Vec<f64>,
    pub value: f64,
    pub gradient: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub stop: StopReason,
    /// Objective at the start and after every accepted step.
    pub trace: Vec<f64>,
}

pub fn sup_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Minimizes `f`, which returns the objective and its gradient.
///
/// Errors or non-finite values at trial points are treated as +inf so the
/// line search backs off; an error at the starting point is returned.
pub fn minimize<F>(mut f: F, x0: &[f64], opts: &BfgsOptions) -> Result<BfgsOutcome>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    let n = x0.len();
    let mut x = x0.to_vec();
    let (mut fx, mut g) = f(&x)?;
    let mut trace = vec![fx];
    let mut h = identity(n);
    let mut fresh = true;
    let mut iterations = 0;

    loop {
        if sup_norm(&g) <= opts.grad_tol {
            return Ok(done(x, fx, g, iterations, true, StopReason::GradientTolerance, trace));
        }
        if iterations >= opts.max_iter {
            return Ok(done(x, fx, g, iterations, false, StopReason::MaxIterations, trace));
        }

        let mut p = mat_vec(&h, &g);
        p.iter_mut().for_each(|v| *v = -*v);
        let mut slope = dot(&p, &g);
        if !(slope < 0.0) {
            h = identity(n);
            fresh = true;
            p = g.iter().map(|v| -v).collect();
            slope = dot(&p, &g);
        }
        let scale = sup_norm(&p);
        if scale > opts.max_step {
            let s = opts.max_step / scale;
            p.iter_mut().for_each(|v| *v *= s);
            slope *= s;
        }

        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..60 {
            let trial: Vec<f64> = x.iter().zip(&p).map(|(a, b)| a + t * b).collect();
            if let Ok((ft, gt)) = f(&trial) {
                if ft.is_finite() && gt.iter().all(|v| v.is_finite()) && ft <= fx + 1e-4 * t * slope {
                    accepted = Some((trial, ft, gt));
                    break;
                }
            }
            t *= 0.5;
        }

        let Some((xn, fn_, gn)) = accepted else {
            if fresh {
                let conv = sup_norm(&g) <= opts.grad_tol;
                return Ok(done(x, fx, g, iterations, conv, StopReason::LineSearchFailed, trace));
            }
            h = identity(n);
            fresh = true;
            continue;
        };

        let s: Vec<f64> = xn.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = gn.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-12 * dot(&s, &s).sqrt() * dot(&y, &y).sqrt() {
            if fresh {
                let gamma = sy / dot(&y, &y);
                h = identity(n);
                h.iter_mut().for_each(|row| row.iter_mut().for_each(|v| *v *= gamma));
            }
            bfgs_update(&mut h, &s, &y, sy);
            fresh = false;
        }
        let gain = fx - fn_;
        x = xn;
        fx = fn_;
        g = gn;
        trace.push(fx);
        iterations += 1;
        if gain < opts.stall_tol * (1.0 + fx.abs()) {
            let conv = sup_norm(&g) <= opts.grad_tol;
            return Ok(done(x, fx, g, iterations, conv, StopReason::Stalled, trace));
        }
    }
}

fn done(
    x: Vec<f64>,
    value: f64,
    gradient: Vec<f64>,
    iterations: usize,
    converged: bool,
    stop: StopReason,
    trace: Vec<f64>,
) -> BfgsOutcome {
    BfgsOutcome {
        x,
        value,
        gradient,
        iterations,
        converged,
        stop,
        trace,
    }
}

fn identity(n: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
        .collect()
}

fn mat_vec(m: &[Vec<f64>], v: &[f64]) -> Vec<f64> {
    m.iter().map(|row| dot(row, v)).collect()
}

// H <- (I - r s y') H (I - r y s') + r s s'
fn bfgs_update(h: &mut [Vec<f64>], s: &[f64], y: &[f64], sy: f64) {
    let n = s.len();
    let r = 1.0 / sy;
    let hy = mat_vec(h, y);
    let yhy = dot(y, &hy);
    for i in 0..n {
        for j in 0..n {
            h[i][j] += -r * (s[i] * hy[j] + hy[i] * s[j]) + (r * r * yhy + r) * s[i] * s[j];
        }
    }
}

/// Central finite-difference gradient of `f` with absolute step `h`.
pub fn central_gradient<F>(mut f: F, x: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    let mut probe = x.to_vec();
    let mut g = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let up = f(&probe)?;
        probe[i] = x[i] - h;
        let down = f(&probe)?;
        probe[i] = x[i];
        g.push((up - down) / (2.0 * h));
    }
    Ok(g)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rosenbrock(x: &[f64]) -> Result<(f64, Vec<f64>)> {
        let (a, b) = (x[0], x[1]);
        let f = (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2);
        let g = vec![-2.0 * (1.0 - a) - 400.0 * a * (b - a * a), 200.0 * (b - a * a)];
        Ok((f, g))
    }

    #[test]
    fn solves_rosenbrock() {
        let out = minimize(rosenbrock, &[-1.2, 1.0], &BfgsOptions::default()).unwrap();
        assert!(out.converged, "{:?}", out.stop);
        assert!((out.x[0] - 1.0).abs() < 1e-5 && (out.x[1] - 1.0).abs() < 1e-5);
        assert!(out.trace.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn quadratic_converges_fast() {
        let f = |x: &[f64]| -> Result<(f64, Vec<f64>)> {
            let v = 3.0 * x[0] * x[0] + x[1] * x[1] + x[0] * x[1] - x[2] + x[2] * x[2];
            Ok((v, vec![6.0 * x[0] + x[1], 2.0 * x[1] + x[0], 2.0 * x[2] - 1.0]))
        };
        let out = minimize(f, &[1.0, -2.0, 3.0], &BfgsOptions::default()).unwrap();
        assert!(out.converged);
        assert!(out.iterations < 30);
        assert!((out.x[2] - 0.5).abs() < 1e-6);
    }

    #[test]
    fn max_iterations_is_flagged() {
        let opts = BfgsOptions {
            max_iter: 3,
            ..Default::default()
        };
        let out = minimize(rosenbrock, &[-1.2, 1.0], &opts).unwrap();
        assert!(!out.converged);
        assert_eq!(out.stop, StopReason::MaxIterations);
    }

    #[test]
    fn finite_difference_matches() {
        let g = central_gradient(|x| Ok(rosenbrock(x)?.0), &[0.3, -0.7], 1e-6).unwrap();
        let exact = rosenbrock(&[0.3, -0.7]).unwrap().1;
        for (a, b) in g.iter().zip(&exact) {
            assert!((a - b).abs() < 1e-5 * b.abs().max(1.0));
        }
    }

    #[test]
    fn backs_off_from_failing_region() {
        // objective undefined for x < 0.5
        let f = |x: &[f64]| -> Result<(f64, Vec<f64>)> {
            if x[0] < 0.5 {
                return Err(crate::Error::InvalidParams("outside".into()));
            }
            Ok(((x[0] - 1.0).powi(2), vec![2.0 * (x[0] - 1.0)]))
        };
        let out = minimize(f, &[5.0], &BfgsOptions::default()).unwrap();
        assert!(out.converged);
        assert!((out.x[0] - 1.0).abs() < 1e-6);
    }
}
