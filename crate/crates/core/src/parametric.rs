//! Bivariate ordered probit: likelihood, reparameterization, BFGS fit and
//! standard errors.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::distributions::{bvn_pdf, bvn_rectangle, normal_cdf, normal_pdf, std_normal_quantile, Correlation};
use crate::error::{Error, Result};
use crate::lattice::{Dataset, IndexModel, LatticeSpec};
use crate::optim::{self, BfgsOptions, StopReason};
use crate::simulation::{DgpSpec, ErrorLaw};

/// Masses at or below this are treated as zero.
pub const MASS_FLOOR: f64 = 1e-300;

/// Parameters of the bivariate ordered probit.
///
/// Flat order everywhere: beta1, beta2, thresholds1, thresholds2, rho.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamVector {
    pub beta: Vec<Vec<f64>>,
    pub thresholds: Vec<Vec<f64>>,
    pub rho: Correlation,
}

/// Block sizes of a [`ParamVector`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamShape {
    pub k: [usize; 2],
    pub m: [usize; 2],
}

impl ParamShape {
    pub fn len(&self) -> usize {
        self.k[0] + self.k[1] + self.m[0] + self.m[1] + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    fn beta_offset(&self, d: usize) -> usize {
        if d == 0 {
            0
        } else {
            self.k[0]
        }
    }

    fn threshold_offset(&self, d: usize) -> usize {
        self.k[0] + self.k[1] + if d == 0 { 0 } else { self.m[0] }
    }

    fn rho_index(&self) -> usize {
        self.len() - 1
    }
}

impl ParamVector {
    pub fn new(beta: Vec<Vec<f64>>, thresholds: Vec<Vec<f64>>, rho: f64) -> Result<Self> {
        if beta.len() != 2 || thresholds.len() != 2 {
            return Err(Error::InvalidParams(
                "the parametric model is bivariate: need two coefficient and two threshold vectors".into(),
            ));
        }
        for (d, t) in thresholds.iter().enumerate() {
            if t.is_empty() {
                return Err(Error::InvalidParams(format!("dimension {} has no thresholds", d + 1)));
            }
            if t.iter().any(|v| !v.is_finite()) || t.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::InvalidParams(format!(
                    "thresholds of dimension {} must be finite and strictly increasing: {t:?}",
                    d + 1
                )));
            }
        }
        if beta.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParams("non-finite coefficient".into()));
        }
        Ok(ParamVector {
            beta,
            thresholds,
            rho: Correlation::new(rho)?,
        })
    }

    /// True parameters of a bivariate Gaussian-error DGP.
    pub fn from_dgp(spec: &DgpSpec) -> Result<Self> {
        let ErrorLaw::Gaussian { rho } = spec.error else {
            return Err(Error::InvalidParams("DGP errors are not Gaussian".into()));
        };
        ParamVector::new(
            spec.model.all_beta().to_vec(),
            spec.lattice.all_thresholds().to_vec(),
            rho,
        )
    }

    pub fn shape(&self) -> ParamShape {
        ParamShape {
            k: [self.beta[0].len(), self.beta[1].len()],
            m: [self.thresholds[0].len(), self.thresholds[1].len()],
        }
    }

    pub fn len(&self) -> usize {
        self.shape().len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut v: Vec<f64> = self.beta.iter().flatten().copied().collect();
        v.extend(self.thresholds.iter().flatten());
        v.push(self.rho.value());
        v
    }

    pub fn from_flat(v: &[f64], shape: ParamShape) -> Result<Self> {
        if v.len() != shape.len() {
            return Err(Error::DimensionMismatch(format!(
                "expected {} parameters, got {}",
                shape.len(),
                v.len()
            )));
        }
        let b0 = shape.beta_offset(1);
        let t0 = shape.threshold_offset(0);
        let t1 = shape.threshold_offset(1);
        ParamVector::new(
            vec![v[..b0].to_vec(), v[b0..t0].to_vec()],
            vec![v[t0..t1].to_vec(), v[t1..shape.rho_index()].to_vec()],
            v[shape.rho_index()],
        )
    }

    pub fn lattice(&self) -> LatticeSpec {
        LatticeSpec::new(self.thresholds.clone()).expect("validated thresholds")
    }

    pub fn model(&self) -> IndexModel {
        IndexModel::new(self.beta.clone()).expect("two dimensions")
    }

    /// Parameter labels in flat order, using the dataset's column names.
    pub fn labels(&self, names: &[Vec<String>]) -> Vec<String> {
        let mut out = Vec::with_capacity(self.len());
        for d in 0..2 {
            for k in 0..self.beta[d].len() {
                let name = names.get(d).and_then(|n| n.get(k)).cloned().unwrap_or(format!("v{}", k + 1));
                out.push(format!("beta{}[{}]", d + 1, name));
            }
        }
        for d in 0..2 {
            for j in 0..self.thresholds[d].len() {
                out.push(format!("alpha{}[{}]", d + 1, j + 1));
            }
        }
        out.push("rho".into());
        out
    }

    /// Unconstrained coordinates: betas, first threshold, square roots of
    /// the threshold gaps, atanh(rho).
    pub fn transform(&self) -> Vec<f64> {
        let mut u: Vec<f64> = self.beta.iter().flatten().copied().collect();
        for t in &self.thresholds {
            u.push(t[0]);
            u.extend(t.windows(2).map(|w| (w[1] - w[0]).sqrt()));
        }
        u.push(self.rho.value().atanh());
        u
    }

    /// Inverse of [`transform`](Self::transform). Any finite `u` maps to a
    /// usable parameter; a zero gap coordinate yields tied thresholds.
    pub fn untransform(u: &[f64], shape: ParamShape) -> Result<Self> {
        if u.len() != shape.len() || u.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParams(format!(
                "need {} finite transformed coordinates",
                shape.len()
            )));
        }
        let b0 = shape.beta_offset(1);
        let t0 = shape.threshold_offset(0);
        let beta = vec![u[..b0].to_vec(), u[b0..t0].to_vec()];
        let mut thresholds = Vec::with_capacity(2);
        for d in 0..2 {
            let raw = &u[shape.threshold_offset(d)..shape.threshold_offset(d) + shape.m[d]];
            let mut t = Vec::with_capacity(raw.len());
            t.push(raw[0]);
            for s in &raw[1..] {
                let prev = *t.last().unwrap();
                t.push(prev + s * s);
            }
            thresholds.push(t);
        }
        let rho = u[shape.rho_index()].tanh().clamp(-RHO_LIMIT, RHO_LIMIT);
        Ok(ParamVector {
            beta,
            thresholds,
            rho: Correlation::new(rho)?,
        })
    }

    /// d(theta)/d(u) as a dense matrix in flat order.
    pub fn jacobian(u: &[f64], shape: ParamShape) -> DMatrix<f64> {
        let p = shape.len();
        let mut j = DMatrix::zeros(p, p);
        for i in 0..shape.k[0] + shape.k[1] {
            j[(i, i)] = 1.0;
        }
        for d in 0..2 {
            let off = shape.threshold_offset(d);
            for a in 0..shape.m[d] {
                j[(off + a, off)] = 1.0;
                for s in 1..=a {
                    j[(off + a, off + s)] = 2.0 * u[off + s];
                }
            }
        }
        let r = u[shape.rho_index()].tanh();
        j[(p - 1, p - 1)] = 1.0 - r * r;
        j
    }

    fn max_abs_rho_ok(&self) -> bool {
        self.rho.value().abs() < 1.0 - 1e-6
    }
}

const RHO_LIMIT: f64 = 1.0 - 1e-15;

/// P over a rectangle under the bivariate normal and its partials with
/// respect to (a_lo, a_hi, b_lo, b_hi, rho).
pub fn rectangle_with_grad(a_lo: f64, a_hi: f64, b_lo: f64, b_hi: f64, rho: f64) -> (f64, [f64; 5]) {
    let p = bvn_rectangle(a_lo, a_hi, b_lo, b_hi, rho);
    let s = (1.0 - rho * rho).sqrt();
    // phi(edge) * P(other coordinate within its interval | edge)
    let edge = |e: f64, lo: f64, hi: f64| -> f64 {
        if !e.is_finite() {
            return 0.0;
        }
        normal_pdf(e) * interval_mass((lo - rho * e) / s, (hi - rho * e) / s)
    };
    let da_hi = edge(a_hi, b_lo, b_hi);
    let da_lo = -edge(a_lo, b_lo, b_hi);
    let db_hi = edge(b_hi, a_lo, a_hi);
    let db_lo = -edge(b_lo, a_lo, a_hi);
    let dens = |a: f64, b: f64| if a.is_finite() && b.is_finite() { bvn_pdf(a, b, rho) } else { 0.0 };
    let drho = dens(a_hi, b_hi) - dens(a_lo, b_hi) - dens(a_hi, b_lo) + dens(a_lo, b_lo);
    (p, [da_lo, da_hi, db_lo, db_hi, drho])
}

/// Phi(hi) - Phi(lo), computed on the side that keeps precision.
fn interval_mass(lo: f64, hi: f64) -> f64 {
    if lo > 0.0 {
        normal_cdf(-lo) - normal_cdf(-hi)
    } else {
        normal_cdf(hi) - normal_cdf(lo)
    }
}

fn check_data(data: &Dataset, theta: &ParamVector) -> Result<()> {
    if data.dims() != 2 {
        return Err(Error::DimensionMismatch(format!(
            "the parametric model is bivariate, data has {} dimensions",
            data.dims()
        )));
    }
    data.check_model(&theta.model())?;
    data.validate(&theta.lattice())
}

/// Log of the observed cell's mass for observation `i`, optionally adding
/// its gradient (theta coordinates, flat order) into `grad`.
fn obs_term(data: &Dataset, i: usize, theta: &ParamVector, shape: ParamShape, grad: Option<&mut [f64]>) -> Result<f64> {
    let cell = data.outcome(i);
    let (j1, j2) = (cell.get(0), cell.get(1));
    let t = &theta.thresholds;
    let bound = |d: usize, j: usize| -> f64 {
        if j == 0 {
            f64::NEG_INFINITY
        } else if j > t[d].len() {
            f64::INFINITY
        } else {
            t[d][j - 1]
        }
    };
    let x1 = data.x(i, 0);
    let x2 = data.x(i, 1);
    let eta1: f64 = x1.iter().zip(&theta.beta[0]).map(|(a, b)| a * b).sum();
    let eta2: f64 = x2.iter().zip(&theta.beta[1]).map(|(a, b)| a * b).sum();
    let rho = theta.rho.value();
    let (p, d) = rectangle_with_grad(
        bound(0, j1 - 1) - eta1,
        bound(0, j1) - eta1,
        bound(1, j2 - 1) - eta2,
        bound(1, j2) - eta2,
        rho,
    );
    if !(p > MASS_FLOOR) {
        return Err(Error::ZeroCellMass {
            obs: i,
            cell: cell.0.clone(),
            mass: p,
        });
    }
    if let Some(g) = grad {
        let inv = 1.0 / p;
        let deta1 = -(d[0] + d[1]) * inv;
        let deta2 = -(d[2] + d[3]) * inv;
        let b1 = shape.beta_offset(0);
        for (k, xv) in x1.iter().enumerate() {
            g[b1 + k] += xv * deta1;
        }
        let b2 = shape.beta_offset(1);
        for (k, xv) in x2.iter().enumerate() {
            g[b2 + k] += xv * deta2;
        }
        let o1 = shape.threshold_offset(0);
        if j1 >= 2 {
            g[o1 + j1 - 2] += d[0] * inv;
        }
        if j1 <= shape.m[0] {
            g[o1 + j1 - 1] += d[1] * inv;
        }
        let o2 = shape.threshold_offset(1);
        if j2 >= 2 {
            g[o2 + j2 - 2] += d[2] * inv;
        }
        if j2 <= shape.m[1] {
            g[o2 + j2 - 1] += d[3] * inv;
        }
        g[shape.rho_index()] += d[4] * inv;
    }
    Ok(p.ln())
}

const CHUNK: usize = 128;

/// Average log-likelihood and, if requested, its gradient in theta
/// coordinates. Chunked so the summation order does not depend on threads.
fn loglik_theta(data: &Dataset, theta: &ParamVector, want_grad: bool) -> Result<(f64, Vec<f64>)> {
    let shape = theta.shape();
    let p = shape.len();
    let n = data.n();
    let chunks: Vec<(f64, Vec<f64>)> = (0..n.div_ceil(CHUNK))
        .into_par_iter()
        .map(|c| -> Result<(f64, Vec<f64>)> {
            let mut g = vec![0.0; if want_grad { p } else { 0 }];
            let mut s = 0.0;
            for i in c * CHUNK..((c + 1) * CHUNK).min(n) {
                s += obs_term(data, i, theta, shape, want_grad.then_some(&mut g[..]))?;
            }
            Ok((s, g))
        })
        .collect::<Result<_>>()?;
    let mut total = 0.0;
    let mut grad = vec![0.0; if want_grad { p } else { 0 }];
    for (s, g) in chunks {
        total += s;
        grad.iter_mut().zip(g).for_each(|(a, b)| *a += b);
    }
    let nf = n as f64;
    grad.iter_mut().for_each(|v| *v /= nf);
    Ok((total / nf, grad))
}

/// (1/N) sum_i log P(observed cell of i).
pub fn log_likelihood(data: &Dataset, theta: &ParamVector) -> Result<f64> {
    check_data(data, theta)?;
    Ok(loglik_theta(data, theta, false)?.0)
}

/// Gradient of the average log-likelihood with respect to theta (flat order).
pub fn gradient(data: &Dataset, theta: &ParamVector) -> Result<Vec<f64>> {
    check_data(data, theta)?;
    Ok(loglik_theta(data, theta, true)?.1)
}

/// Average log-likelihood and gradient as functions of the transformed
/// coordinates.
pub fn loglik_transformed(data: &Dataset, u: &[f64], shape: ParamShape) -> Result<(f64, Vec<f64>)> {
    let theta = ParamVector::untransform(u, shape)?;
    let (ll, g) = loglik_theta(data, &theta, true)?;
    let jac = ParamVector::jacobian(u, shape);
    let gu = jac.transpose() * DVector::from_vec(g);
    Ok((ll, gu.iter().copied().collect()))
}

/// Per-observation scores in transformed coordinates (N x P).
fn scores_transformed(data: &Dataset, u: &[f64], shape: ParamShape) -> Result<DMatrix<f64>> {
    let theta = ParamVector::untransform(u, shape)?;
    let p = shape.len();
    let jac = ParamVector::jacobian(u, shape);
    let rows: Vec<Vec<f64>> = (0..data.n())
        .into_par_iter()
        .map(|i| -> Result<Vec<f64>> {
            let mut g = vec![0.0; p];
            obs_term(data, i, &theta, shape, Some(&mut g))?;
            Ok(g)
        })
        .collect::<Result<_>>()?;
    let s_theta = DMatrix::from_fn(data.n(), p, |i, j| rows[i][j]);
    Ok(s_theta * jac)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum SeKind {
    #[default]
    OuterProduct,
    Sandwich,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum GradientMethod {
    Analytic,
    CentralDifference { step: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitOptions {
    pub max_iter: usize,
    pub grad_tol: f64,
    pub gradient: GradientMethod,
    /// Standard-error kind, or `None` to skip them.
    pub standard_errors: Option<SeKind>,
    /// Categories per dimension; defaults to the largest observed.
    pub categories: Option<Vec<usize>>,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            max_iter: 500,
            grad_tol: 1e-6,
            gradient: GradientMethod::Analytic,
            standard_errors: Some(SeKind::OuterProduct),
            categories: None,
        }
    }
}

impl FitOptions {
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_vec(self).expect("options serialize");
        hex::encode(Sha256::digest(&json))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub estimate: ParamVector,
    pub labels: Vec<String>,
    pub se: Option<Vec<f64>>,
    pub se_kind: Option<SeKind>,
    pub loglik: f64,
    pub initial_loglik: f64,
    pub converged: bool,
    pub stop: StopReason,
    pub iterations: usize,
    pub gradient_norm: f64,
    /// Log-likelihood after each accepted iterate.
    pub loglik_trace: Vec<f64>,
    pub fingerprint: String,
}

impl FitResult {
    /// `parameter,estimate,se` rows.
    pub fn coefficient_rows(&self) -> Vec<(String, f64, Option<f64>)> {
        let est = self.estimate.to_flat();
        (0..est.len())
            .map(|i| (self.labels[i].clone(), est[i], self.se.as_ref().map(|s| s[i])))
            .collect()
    }
}

fn category_counts(data: &Dataset, opts: &FitOptions) -> Result<Vec<usize>> {
    let counts = match &opts.categories {
        Some(c) => {
            if c.len() != data.dims() || c.iter().any(|&k| k < 2) {
                return Err(Error::InvalidConfig(
                    "categories must list at least two categories per dimension".into(),
                ));
            }
            c.clone()
        }
        None => data.max_categories(),
    };
    let empty = data.empty_categories(&counts);
    if !empty.is_empty() {
        return Err(Error::DegenerateData { empty });
    }
    Ok(counts)
}

/// Univariate ordered probit for one dimension; returns (beta, thresholds).
pub fn fit_univariate(data: &Dataset, d: usize, categories: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = data.n();
    let k = data.covariates(d).cols();
    let m = categories - 1;
    let mut cum = vec![0.0; categories];
    for c in data.outcomes() {
        cum[c.get(d) - 1] += 1.0;
    }
    let mut acc = 0.0;
    let mut start = vec![0.0; k];
    let mut prev = f64::NEG_INFINITY;
    for (j, c) in cum.iter().take(m).enumerate() {
        acc += c / n as f64;
        let q = std_normal_quantile(acc.clamp(1e-6, 1.0 - 1e-6))?;
        if j == 0 {
            start.push(q);
        } else {
            start.push((q - prev).max(1e-4).sqrt());
        }
        prev = q;
    }

    let untransform = |u: &[f64]| -> Vec<f64> {
        let mut t = vec![u[k]];
        for s in &u[k + 1..] {
            let last = *t.last().unwrap();
            t.push(last + s * s);
        }
        t
    };
    let objective = |u: &[f64]| -> Result<(f64, Vec<f64>)> {
        let t = untransform(u);
        let beta = &u[..k];
        let mut f = 0.0;
        let mut g_eta = vec![0.0; k];
        let mut g_t = vec![0.0; m];
        for i in 0..n {
            let x = data.x(i, d);
            let eta: f64 = x.iter().zip(beta).map(|(a, b)| a * b).sum();
            let j = data.outcome(i).get(d);
            let lo = if j == 1 { f64::NEG_INFINITY } else { t[j - 2] - eta };
            let hi = if j > m { f64::INFINITY } else { t[j - 1] - eta };
            let p = interval_mass(lo, hi);
            if !(p > MASS_FLOOR) {
                return Err(Error::ZeroCellMass {
                    obs: i,
                    cell: vec![j],
                    mass: p,
                });
            }
            f -= p.ln();
            let dhi = if hi.is_finite() { normal_pdf(hi) / p } else { 0.0 };
            let dlo = if lo.is_finite() { normal_pdf(lo) / p } else { 0.0 };
            // d(-log p)/d eta = (phi(hi) - phi(lo)) / p
            for (g, xv) in g_eta.iter_mut().zip(x) {
                *g += xv * (dhi - dlo);
            }
            if j >= 2 {
                g_t[j - 2] += dlo;
            }
            if j <= m {
                g_t[j - 1] -= dhi;
            }
        }
        let nf = n as f64;
        let mut g: Vec<f64> = g_eta.iter().map(|v| v / nf).collect();
        // chain rule through alpha_a = u_k + sum_{s<=a} u_{k+s}^2
        for a in 0..m {
            let acc: f64 = g_t[a..].iter().sum();
            g.push(if a == 0 { acc } else { 2.0 * u[k + a] * acc } / nf);
        }
        Ok((f / nf, g))
    };
    let out = optim::minimize(objective, &start, &BfgsOptions::default())?;
    Ok((out.x[..k].to_vec(), untransform(&out.x)))
}

/// Starting values: univariate probits per dimension and the normal-scores
/// correlation of the outcome categories.
pub fn auto_init(data: &Dataset, categories: &[usize]) -> Result<ParamVector> {
    let (b1, t1) = fit_univariate(data, 0, categories[0])?;
    let (b2, t2) = fit_univariate(data, 1, categories[1])?;
    let n = data.n() as f64;
    let scores = |d: usize| -> Result<Vec<f64>> {
        let mut cum = vec![0.0; categories[d] + 1];
        for c in data.outcomes() {
            cum[c.get(d)] += 1.0 / n;
        }
        for j in 1..cum.len() {
            cum[j] += cum[j - 1];
        }
        let mids: Vec<f64> = (1..cum.len())
            .map(|j| std_normal_quantile((0.5 * (cum[j - 1] + cum[j])).clamp(1e-12, 1.0 - 1e-12)))
            .collect::<Result<_>>()?;
        Ok(data.outcomes().iter().map(|c| mids[c.get(d) - 1]).collect())
    };
    let rho = pearson(&scores(0)?, &scores(1)?).unwrap_or(0.0).clamp(-0.95, 0.95);
    ParamVector::new(vec![b1, b2], vec![ensure_strict(t1), ensure_strict(t2)], rho)
}

fn ensure_strict(mut t: Vec<f64>) -> Vec<f64> {
    for j in 1..t.len() {
        if t[j] <= t[j - 1] {
            t[j] = t[j - 1] + 1e-6;
        }
    }
    t
}

pub(crate) fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
        sab += (x - ma) * (y - mb);
    }
    if saa <= 0.0 || sbb <= 0.0 {
        None
    } else {
        Some((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
    }
}

/// Maximum likelihood fit; `init = None` uses [`auto_init`].
pub fn fit(data: &Dataset, init: Option<&ParamVector>, opts: &FitOptions) -> Result<FitResult> {
    if data.dims() != 2 {
        return Err(Error::DimensionMismatch(format!(
            "the parametric model is bivariate, data has {} dimensions",
            data.dims()
        )));
    }
    let counts = category_counts(data, opts)?;
    let start = match init {
        Some(t) => {
            if t.thresholds[0].len() + 1 != counts[0] || t.thresholds[1].len() + 1 != counts[1] {
                return Err(Error::InvalidParams(format!(
                    "initial thresholds imply {:?} categories, data need {counts:?}",
                    [t.thresholds[0].len() + 1, t.thresholds[1].len() + 1]
                )));
            }
            t.clone()
        }
        None => auto_init(data, &counts)?,
    };
    check_data(data, &start)?;
    let shape = start.shape();
    let u0 = start.transform();
    let initial_loglik = loglik_theta(data, &start, false)?.0;

    let objective = |u: &[f64]| -> Result<(f64, Vec<f64>)> {
        match opts.gradient {
            GradientMethod::Analytic => {
                let (ll, g) = loglik_transformed(data, u, shape)?;
                Ok((-ll, g.into_iter().map(|v| -v).collect()))
            }
            GradientMethod::CentralDifference { step } => {
                let value = |v: &[f64]| -> Result<f64> {
                    let th = ParamVector::untransform(v, shape)?;
                    Ok(-loglik_theta(data, &th, false)?.0)
                };
                let f = value(u)?;
                Ok((f, optim::central_gradient(value, u, step)?))
            }
        }
    };
    let bfgs = BfgsOptions {
        max_iter: opts.max_iter,
        grad_tol: opts.grad_tol,
        ..Default::default()
    };
    let out = optim::minimize(objective, &u0, &bfgs)?;
    let estimate = ParamVector::untransform(&out.x, shape)?;
    let labels = estimate.labels(data.column_names());

    let se = match opts.standard_errors {
        Some(kind) if out.converged => Some(standard_errors_at(data, &out.x, shape, kind)?),
        _ => None,
    };

    Ok(FitResult {
        loglik: -out.value,
        initial_loglik,
        converged: out.converged,
        stop: out.stop,
        iterations: out.iterations,
        gradient_norm: optim::sup_norm(&out.gradient),
        loglik_trace: out.trace.iter().map(|v| -v).collect(),
        se,
        se_kind: opts.standard_errors,
        estimate,
        labels,
        fingerprint: opts.fingerprint(),
    })
}

/// Standard errors at `theta_hat`, computed in transformed coordinates and
/// mapped back by the delta method.
pub fn standard_errors(data: &Dataset, theta_hat: &ParamVector, kind: SeKind) -> Result<Vec<f64>> {
    check_data(data, theta_hat)?;
    standard_errors_at(data, &theta_hat.transform(), theta_hat.shape(), kind)
}

fn standard_errors_at(data: &Dataset, u: &[f64], shape: ParamShape, kind: SeKind) -> Result<Vec<f64>> {
    let theta = ParamVector::untransform(u, shape)?;
    if !theta.max_abs_rho_ok() {
        return Err(Error::BoundaryEstimate(format!("|rho| = {}", theta.rho.value().abs())));
    }
    for (d, t) in theta.thresholds.iter().enumerate() {
        if let Some(w) = t.windows(2).find(|w| w[1] - w[0] <= 1e-6) {
            return Err(Error::BoundaryEstimate(format!(
                "thresholds {} and {} of dimension {} coincide",
                w[0],
                w[1],
                d + 1
            )));
        }
    }
    let n = data.n() as f64;
    let p = shape.len();
    let s = scores_transformed(data, u, shape)?;
    let j = s.transpose() * &s / n;
    let j_inv = checked_inverse(&j, "outer product of scores")?;

    let v_u = match kind {
        SeKind::OuterProduct => j_inv / n,
        SeKind::Sandwich => {
            let mut h = DMatrix::zeros(p, p);
            let mut probe = u.to_vec();
            for c in 0..p {
                let step = 1e-5 * u[c].abs().max(1.0);
                probe[c] = u[c] + step;
                let up = loglik_transformed(data, &probe, shape)?.1;
                probe[c] = u[c] - step;
                let down = loglik_transformed(data, &probe, shape)?.1;
                probe[c] = u[c];
                for r in 0..p {
                    h[(r, c)] = (up[r] - down[r]) / (2.0 * step);
                }
            }
            let h = (&h + h.transpose()) * 0.5;
            let h_inv = checked_inverse(&h, "Hessian")?;
            &h_inv * j * &h_inv / n
        }
    };
    let g = ParamVector::jacobian(u, shape);
    let v = &g * v_u * g.transpose();
    Ok((0..p).map(|i| v[(i, i)].max(0.0).sqrt()).collect())
}

fn checked_inverse(m: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    let svd = m.clone().svd(true, true);
    let max = svd.singular_values.max();
    let min = svd.singular_values.min();
    if !(max > 0.0) || min <= 1e-12 * max {
        return Err(Error::SingularInformation(format!(
            "{what} has condition number {:e}",
            if min > 0.0 { max / min } else { f64::INFINITY }
        )));
    }
    svd.pseudo_inverse(0.0).map_err(|e| Error::SingularInformation(e.to_string()))
}
