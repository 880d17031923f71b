//! One-step sieve MLE: tensor-product B-spline joint CDF with monotone,
//! bounded coefficients, estimated jointly with the index parameters.

use serde::{Deserialize, Serialize};

use super::bspline::{BSplineBasis, MAX_DEGREE};
use super::grid::{evaluation_axis, CdfGrid};
use super::shape::MonotoneBox;
use super::FirstStage;
use crate::distributions::normal_cdf;
use crate::error::{Error, Result};
use crate::lattice::{cell_probability, Dataset, IndexModel, JointCdf, LatticeSpec};
use crate::optim::{self, BfgsOptions};
use crate::parametric::{fit_univariate, MASS_FLOOR};

/// One threshold per dimension held at a known value (1-based index).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PinnedThreshold {
    pub index: usize,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SieveConfig {
    pub degree: usize,
    pub interior_knots: [usize; 2],
    pub knot_range: (f64, f64),
    pub max_outer: usize,
    pub max_spline_steps: usize,
    pub max_index_steps: usize,
    /// Stop once an outer round improves the average log-likelihood by less.
    pub tolerance: f64,
    /// Pinned thresholds per dimension; default pins the first threshold at
    /// its starting value.
    pub pins: Option<Vec<PinnedThreshold>>,
    /// Starting index parameters (first coefficient must be 1); default
    /// rescales univariate probit fits.
    pub init: Option<FirstStage>,
}

impl Default for SieveConfig {
    fn default() -> Self {
        SieveConfig {
            degree: 2,
            interior_knots: [3, 3],
            knot_range: (-4.0, 4.0),
            max_outer: 100,
            max_spline_steps: 100,
            max_index_steps: 100,
            tolerance: 1e-9,
            pins: None,
            init: None,
        }
    }
}

/// Tensor-product spline CDF with coefficients h (row-major, first axis slow).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplineCdf {
    pub basis1: BSplineBasis,
    pub basis2: BSplineBasis,
    pub coefficients: Vec<f64>,
}

impl SplineCdf {
    pub fn value(&self, e1: f64, e2: f64) -> f64 {
        if e1 == f64::NEG_INFINITY || e2 == f64::NEG_INFINITY {
            return 0.0;
        }
        let n2 = self.basis2.len();
        let mut v1 = [0.0; MAX_DEGREE + 1];
        let mut v2 = [0.0; MAX_DEGREE + 1];
        let f1 = self.basis1.eval_into(e1, &mut v1);
        let f2 = self.basis2.eval_into(e2, &mut v2);
        let mut s = 0.0;
        for (a, wa) in v1[..=self.basis1.degree()].iter().enumerate() {
            let row = &self.coefficients[(f1 + a) * n2 + f2..];
            for (wb, h) in v2[..=self.basis2.degree()].iter().zip(row) {
                s += wa * wb * h;
            }
        }
        s.clamp(0.0, 1.0)
    }
}

impl JointCdf for SplineCdf {
    fn dims(&self) -> usize {
        2
    }

    fn cdf(&self, p: &[f64]) -> f64 {
        self.value(p[0], p[1])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SieveFit {
    pub beta: Vec<Vec<f64>>,
    pub thresholds: Vec<Vec<f64>>,
    pub cdf: SplineCdf,
    pub pins: Vec<PinnedThreshold>,
    pub initial_loglik: f64,
    pub loglik: f64,
    pub loglik_trace: Vec<f64>,
    /// Smallest slack over all coefficient constraints.
    pub min_slack: f64,
    pub outer_iterations: usize,
    pub converged: bool,
    /// The fitted CDF on the evaluation grid.
    pub grid: CdfGrid,
}

/// Average log-likelihood of the lattice model under an arbitrary joint CDF.
pub fn average_loglik(data: &Dataset, spec: &LatticeSpec, model: &IndexModel, f: &dyn JointCdf) -> Result<f64> {
    let mut s = 0.0;
    for i in 0..data.n() {
        let x: Vec<&[f64]> = (0..data.dims()).map(|d| data.x(i, d)).collect();
        let p = cell_probability(data.outcome(i), &x, spec, model, f)?;
        if !(p > MASS_FLOOR) {
            return Err(Error::ZeroCellMass {
                obs: i,
                cell: data.outcome(i).0.clone(),
                mass: p,
            });
        }
        s += p.ln();
    }
    Ok(s / data.n() as f64)
}

/// Index parameters with the normalization held fixed; `free` packs the
/// non-leading coefficients and the square-root gaps around the pin.
#[derive(Debug, Clone)]
struct IndexLayout {
    k: [usize; 2],
    m: [usize; 2],
    pins: [PinnedThreshold; 2],
}

impl IndexLayout {
    fn pack(&self, beta: &[Vec<f64>], thresholds: &[Vec<f64>]) -> Vec<f64> {
        let mut v = Vec::new();
        for d in 0..2 {
            v.extend(&beta[d][1..]);
            let p = self.pins[d].index - 1;
            let t = &thresholds[d];
            for j in 0..self.m[d] {
                if j > p {
                    v.push((t[j] - t[j - 1]).max(0.0).sqrt());
                } else if j < p {
                    v.push((t[j + 1] - t[j]).max(0.0).sqrt());
                }
            }
        }
        v
    }

    fn unpack(&self, v: &[f64]) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let mut at = 0;
        let mut beta = Vec::with_capacity(2);
        let mut thresholds = Vec::with_capacity(2);
        for d in 0..2 {
            let mut b = vec![1.0];
            b.extend(&v[at..at + self.k[d] - 1]);
            at += self.k[d] - 1;
            beta.push(b);
            let p = self.pins[d].index - 1;
            let mut gaps = vec![0.0; self.m[d]];
            for (j, g) in gaps.iter_mut().enumerate() {
                if j != p {
                    *g = v[at] * v[at];
                    at += 1;
                }
            }
            let mut t = vec![0.0; self.m[d]];
            t[p] = self.pins[d].value;
            for j in p + 1..self.m[d] {
                t[j] = t[j - 1] + gaps[j];
            }
            for j in (0..p).rev() {
                t[j] = t[j + 1] - gaps[j];
            }
            thresholds.push(t);
        }
        (beta, thresholds)
    }
}

/// Per-observation linear functionals: P_i = c_i . h.
fn cell_functionals(
    data: &Dataset,
    beta: &[Vec<f64>],
    thresholds: &[Vec<f64>],
    b1: &BSplineBasis,
    b2: &BSplineBasis,
) -> Vec<Vec<(usize, f64)>> {
    let n2 = b2.len();
    let bound = |d: usize, j: usize| -> f64 {
        if j == 0 {
            f64::NEG_INFINITY
        } else if j > thresholds[d].len() {
            f64::INFINITY
        } else {
            thresholds[d][j - 1]
        }
    };
    (0..data.n())
        .map(|i| {
            let cell = data.outcome(i);
            let eta: Vec<f64> = (0..2)
                .map(|d| data.x(i, d).iter().zip(&beta[d]).map(|(x, b)| x * b).sum())
                .collect();
            let mut acc: Vec<(usize, f64)> = Vec::with_capacity(36);
            for (m1, s1) in [(0usize, 1.0), (1, -1.0)] {
                for (m2, s2) in [(0usize, 1.0), (1, -1.0)] {
                    let e1 = bound(0, cell.get(0) - m1) - eta[0];
                    let e2 = bound(1, cell.get(1) - m2) - eta[1];
                    if e1 == f64::NEG_INFINITY || e2 == f64::NEG_INFINITY {
                        continue;
                    }
                    let (f1, v1) = b1.eval(e1);
                    let (f2, v2) = b2.eval(e2);
                    for (a, wa) in v1.iter().enumerate() {
                        for (b, wb) in v2.iter().enumerate() {
                            let col = (f1 + a) * n2 + f2 + b;
                            let w = s1 * s2 * wa * wb;
                            match acc.iter_mut().find(|e| e.0 == col) {
                                Some(e) => e.1 += w,
                                None => acc.push((col, w)),
                            }
                        }
                    }
                }
            }
            acc
        })
        .collect()
}

/// Average log-likelihood at given index parameters and spline; -inf when
/// a cell mass is not positive.
fn index_loglik(data: &Dataset, beta: &[Vec<f64>], thresholds: &[Vec<f64>], f: &SplineCdf) -> f64 {
    let bound = |d: usize, j: usize| -> f64 {
        if j == 0 {
            f64::NEG_INFINITY
        } else if j > thresholds[d].len() {
            f64::INFINITY
        } else {
            thresholds[d][j - 1]
        }
    };
    let mut s = 0.0;
    for i in 0..data.n() {
        let cell = data.outcome(i);
        let eta = |d: usize| -> f64 { data.x(i, d).iter().zip(&beta[d]).map(|(x, b)| x * b).sum() };
        let (e1, e2) = (eta(0), eta(1));
        let (j1, j2) = (cell.get(0), cell.get(1));
        let (u1, l1) = (bound(0, j1) - e1, bound(0, j1 - 1) - e1);
        let (u2, l2) = (bound(1, j2) - e2, bound(1, j2 - 1) - e2);
        let p = f.value(u1, u2) - f.value(l1, u2) - f.value(u1, l2) + f.value(l1, l2);
        if !(p > MASS_FLOOR) {
            return f64::NEG_INFINITY;
        }
        s += p.ln();
    }
    s / data.n() as f64
}

/// Average log-likelihood for fixed functionals; -inf when a mass is not positive.
fn spline_loglik(c: &[Vec<(usize, f64)>], h: &[f64]) -> f64 {
    let mut s = 0.0;
    for row in c {
        let p: f64 = row.iter().map(|&(j, w)| w * h[j]).sum();
        if !(p > MASS_FLOOR) {
            return f64::NEG_INFINITY;
        }
        s += p.ln();
    }
    s / c.len() as f64
}

fn spline_gradient(c: &[Vec<(usize, f64)>], h: &[f64], out: &mut [f64]) {
    out.fill(0.0);
    let n = c.len() as f64;
    for row in c {
        let p: f64 = row.iter().map(|&(j, w)| w * h[j]).sum();
        for &(j, w) in row {
            out[j] += w / (p * n);
        }
    }
}

fn resolve_pins(config: &SieveConfig, thresholds: &[Vec<f64>]) -> Result<[PinnedThreshold; 2]> {
    let pins: Vec<PinnedThreshold> = match &config.pins {
        Some(p) => p.clone(),
        None => thresholds
            .iter()
            .map(|t| PinnedThreshold {
                index: 1,
                value: t[0],
            })
            .collect(),
    };
    if pins.len() != 2 {
        return Err(Error::InfeasibleNormalization(format!(
            "need one pinned threshold per dimension, got {}",
            pins.len()
        )));
    }
    for (d, p) in pins.iter().enumerate() {
        if p.index == 0 || p.index > thresholds[d].len() || !p.value.is_finite() {
            return Err(Error::InfeasibleNormalization(format!(
                "dimension {} has {} thresholds; cannot pin threshold {} at {}",
                d + 1,
                thresholds[d].len(),
                p.index,
                p.value
            )));
        }
    }
    Ok([pins[0], pins[1]])
}

/// Normalized starting values: (beta, thresholds, per-dimension error
/// location and scale used for the initial spline).
fn starting_values(
    data: &Dataset,
    categories: &[usize],
    config: &SieveConfig,
) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>, [(f64, f64); 2])> {
    if let Some(fs) = &config.init {
        for d in 0..2 {
            if fs.beta[d].first() != Some(&1.0) {
                return Err(Error::InfeasibleNormalization(format!(
                    "starting coefficient 1 of dimension {} must equal 1",
                    d + 1
                )));
            }
            if fs.thresholds[d].len() + 1 != categories[d] {
                return Err(Error::InvalidParams(format!(
                    "starting thresholds of dimension {} do not match {} categories",
                    d + 1,
                    categories[d]
                )));
            }
        }
        return Ok((fs.beta.clone(), fs.thresholds.clone(), [(0.0, 1.0), (0.0, 1.0)]));
    }
    let mut beta = Vec::new();
    let mut thresholds = Vec::new();
    let mut err = [(0.0, 1.0); 2];
    for d in 0..2 {
        let (b, t) = fit_univariate(data, d, categories[d])?;
        let scale = b[0];
        if !(scale > 0.0) {
            return Err(Error::InfeasibleNormalization(format!(
                "the first covariate of dimension {} has a non-positive starting coefficient {scale}; \
                 reorder or re-sign the covariates",
                d + 1
            )));
        }
        let mut t: Vec<f64> = t.iter().map(|a| a / scale).collect();
        let shift = match &config.pins {
            Some(p) if p.len() == 2 && p[d].index >= 1 && p[d].index <= t.len() => p[d].value - t[p[d].index - 1],
            _ => 0.0,
        };
        t.iter_mut().for_each(|a| *a += shift);
        beta.push(b.iter().map(|v| v / scale).collect());
        thresholds.push(t);
        err[d] = (shift, 1.0 / scale);
    }
    Ok((beta, thresholds, err))
}

pub fn sieve_mle_fit(data: &Dataset, categories: &[usize], config: &SieveConfig) -> Result<SieveFit> {
    if data.dims() != 2 || categories.len() != 2 {
        return Err(Error::DimensionMismatch("the sieve estimator is implemented for two dimensions".into()));
    }
    let empty = data.empty_categories(categories);
    if !empty.is_empty() {
        return Err(Error::DegenerateData { empty });
    }
    let (lo, hi) = config.knot_range;
    let b1 = BSplineBasis::uniform(lo, hi, config.interior_knots[0], config.degree)?;
    let b2 = BSplineBasis::uniform(lo, hi, config.interior_knots[1], config.degree)?;
    let (r, c) = (b1.len(), b2.len());

    let (beta0, thr0, err) = starting_values(data, categories, config)?;
    let pins = resolve_pins(config, &thr0)?;
    let layout = IndexLayout {
        k: [data.covariates(0).cols(), data.covariates(1).cols()],
        m: [categories[0] - 1, categories[1] - 1],
        pins,
    };
    // apply the pins exactly, keeping the starting gaps
    let mut v = layout.pack(&beta0, &thr0);
    let (mut beta, mut thresholds) = layout.unpack(&v);

    let mut fixed: Vec<(usize, f64)> = (0..c).map(|b| (b, 0.0)).collect();
    fixed.extend((1..r).map(|a| (a * c, 0.0)));
    fixed.push((r * c - 1, 1.0));
    let constraints = MonotoneBox { rows: r, cols: c, fixed };

    // product of normal CDFs at the Greville points, rescaled to [0, 1]
    let start_margin = |g: f64, (loc, scale): (f64, f64)| {
        let f = |x: f64| normal_cdf((x - loc) / scale);
        ((f(g) - f(lo)) / (f(hi) - f(lo))).clamp(0.0, 1.0)
    };
    let g1 = b1.greville();
    let g2 = b2.greville();
    let mut h: Vec<f64> = (0..r * c)
        .map(|i| start_margin(g1[i / c], err[0]) * start_margin(g2[i % c], err[1]))
        .collect();
    constraints.repair(&mut h);

    let mut funcs = cell_functionals(data, &beta, &thresholds, &b1, &b2);
    let initial_loglik = spline_loglik(&funcs, &h);
    if !initial_loglik.is_finite() {
        return Err(Error::InvalidParams(
            "starting spline assigns zero mass to an observed cell; widen the knot range".into(),
        ));
    }
    let mut ll = initial_loglik;
    let mut trace = vec![ll];
    let mut step = 1e-2;
    let mut grad = vec![0.0; r * c];
    let mut converged = false;
    let mut outer = 0;

    while outer < config.max_outer {
        outer += 1;
        let start = ll;

        // spline step: projected gradient ascent (concave in h)
        for _ in 0..config.max_spline_steps {
            spline_gradient(&funcs, &h, &mut grad);
            let mut accepted = false;
            for _ in 0..50 {
                let trial: Vec<f64> = h.iter().zip(&grad).map(|(a, g)| a + step * g).collect();
                let proj = constraints.project(&trial, 200, 1e-13);
                let lt = spline_loglik(&funcs, &proj);
                if lt > ll {
                    let gain = lt - ll;
                    h = proj;
                    ll = lt;
                    accepted = true;
                    step *= 1.5;
                    if gain < 1e-13 {
                        accepted = false;
                    }
                    break;
                }
                step *= 0.5;
            }
            if !accepted {
                step = step.max(1e-8);
                break;
            }
        }

        // index step: BFGS on the free coefficients and gaps
        if !v.is_empty() {
            let current = SplineCdf {
                basis1: b1.clone(),
                basis2: b2.clone(),
                coefficients: h.clone(),
            };
            let objective = |u: &[f64]| -> Result<(f64, Vec<f64>)> {
                let value = |w: &[f64]| -> Result<f64> {
                    let (b, t) = layout.unpack(w);
                    let l = index_loglik(data, &b, &t, &current);
                    if l.is_finite() {
                        Ok(-l)
                    } else {
                        Err(Error::InvalidParams("zero cell mass".into()))
                    }
                };
                let f = value(u)?;
                Ok((f, optim::central_gradient(value, u, 1e-6)?))
            };
            let opts = BfgsOptions {
                max_iter: config.max_index_steps,
                grad_tol: 1e-7,
                max_step: 0.5,
                stall_tol: 1e-12,
            };
            let out = optim::minimize(objective, &v, &opts)?;
            if -out.value >= ll {
                v = out.x;
                ll = -out.value;
                (beta, thresholds) = layout.unpack(&v);
                funcs = cell_functionals(data, &beta, &thresholds, &b1, &b2);
            }
        }
        trace.push(ll);
        if ll - start < config.tolerance {
            converged = true;
            break;
        }
    }

    let cdf = SplineCdf {
        basis1: b1,
        basis2: b2,
        coefficients: h,
    };
    let axis = evaluation_axis();
    let grid = CdfGrid::from_fn(axis.clone(), axis, |a, b| cdf.value(a, b))?;
    Ok(SieveFit {
        beta,
        thresholds,
        min_slack: constraints.min_slack(&cdf.coefficients),
        pins: pins.to_vec(),
        cdf,
        initial_loglik,
        loglik: ll,
        loglik_trace: trace,
        outer_iterations: outer,
        converged,
        grid,
    })
}
