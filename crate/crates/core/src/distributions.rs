//! Scalar probability kernels: standard normal CDF/quantile, the bivariate
//! normal CDF, and the covariate/error laws used by the simulation designs.

use std::f64::consts::{FRAC_1_SQRT_2, PI};
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, StudentT};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};

const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Correlation coefficient, strictly inside (-1, 1).
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct Correlation(f64);

impl Correlation {
    pub fn new(rho: f64) -> Result<Self> {
        if rho.is_finite() && rho.abs() < 1.0 {
            Ok(Correlation(rho))
        } else {
            Err(Error::InvalidCorrelation(rho))
        }
    }

    pub fn zero() -> Self {
        Correlation(0.0)
    }

    #[inline]
    pub fn value(self) -> f64 {
        self.0
    }
}

impl TryFrom<f64> for Correlation {
    type Error = Error;
    fn try_from(rho: f64) -> Result<Self> {
        Correlation::new(rho)
    }
}

impl From<Correlation> for f64 {
    fn from(c: Correlation) -> f64 {
        c.0
    }
}

#[inline]
pub fn normal_pdf(z: f64) -> f64 {
    FRAC_1_SQRT_2PI * (-0.5 * z * z).exp()
}

/// Standard normal CDF without input validation (NaN propagates).
#[inline]
pub fn normal_cdf(z: f64) -> f64 {
    0.5 * libm::erfc(-z * FRAC_1_SQRT_2)
}

/// Standard normal CDF; rejects NaN.
pub fn std_normal_cdf(z: f64) -> Result<f64> {
    if z.is_nan() {
        return Err(Error::NotANumber("std_normal_cdf"));
    }
    Ok(normal_cdf(z))
}

/// Standard normal quantile by bisection followed by one Newton step.
pub fn std_normal_quantile(p: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::InvalidProbability(p));
    }
    if p == 0.5 {
        return Ok(0.0);
    }
    // Work in the lower tail so that tiny upper-tail probabilities keep
    // their relative precision.
    let (q, flip) = if p > 0.5 { (1.0 - p, true) } else { (p, false) };
    let (mut lo, mut hi) = (-40.0_f64, 0.0_f64);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if normal_cdf(mid) < q {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let mut x = 0.5 * (lo + hi);
    let dens = normal_pdf(x);
    if dens > 0.0 {
        x -= (normal_cdf(x) - q) / dens;
    }
    Ok(if flip { -x } else { x })
}

/// Bivariate standard normal density with correlation `rho`.
#[inline]
pub fn bvn_pdf(a: f64, b: f64, rho: f64) -> f64 {
    if !a.is_finite() || !b.is_finite() {
        return 0.0;
    }
    let one_m = 1.0 - rho * rho;
    let q = (a * a - 2.0 * rho * a * b + b * b) / one_m;
    (-0.5 * q).exp() / (2.0 * PI * one_m.sqrt())
}

// Positive half of the 10-point Gauss-Legendre rule on [-1, 1].
const GL10: [(f64, f64); 5] = [
    (0.148_874_338_981_631_22, 0.295_524_224_714_753),
    (0.433_395_394_129_247_2, 0.269_266_719_309_996_5),
    (0.679_409_568_299_024_4, 0.219_086_362_515_982),
    (0.865_063_366_688_984_5, 0.149_451_349_150_580_36),
    (0.973_906_528_517_171_7, 0.066_671_344_308_688_07),
];

// Beyond this many standard units the normal tail is below 1e-16.
const TAIL: f64 = 8.3;
const QUAD_TOL: f64 = 1e-15;
const MAX_DEPTH: u32 = 24;

#[inline]
fn gl10<F: Fn(f64) -> f64>(f: &F, lo: f64, hi: f64) -> f64 {
    let c = 0.5 * (lo + hi);
    let h = 0.5 * (hi - lo);
    let mut s = 0.0;
    for &(x, w) in &GL10 {
        s += w * (f(c - h * x) + f(c + h * x));
    }
    s * h
}

fn adaptive_gl<F: Fn(f64) -> f64>(f: &F, lo: f64, hi: f64, whole: f64, tol: f64, depth: u32) -> f64 {
    let mid = 0.5 * (lo + hi);
    let left = gl10(f, lo, mid);
    let right = gl10(f, mid, hi);
    let refined = left + right;
    if depth == 0 || (refined - whole).abs() <= tol {
        return refined;
    }
    adaptive_gl(f, lo, mid, left, 0.5 * tol, depth - 1)
        + adaptive_gl(f, mid, hi, right, 0.5 * tol, depth - 1)
}

/// Bivariate standard normal CDF P(X <= a, Y <= b) for correlation `rho`,
/// without input validation. Infinite arguments are handled exactly.
///
/// Computed as the single integral of phi(t) * Phi((b - rho t) / sqrt(1 - rho^2))
/// over t <= a, by adaptive Gauss-Legendre quadrature. The stretches where the
/// inner CDF is numerically 0 or 1 are cut or integrated in closed form.
pub fn bvn_cdf(a: f64, b: f64, rho: f64) -> f64 {
    if a == f64::NEG_INFINITY || b == f64::NEG_INFINITY {
        return 0.0;
    }
    if a == f64::INFINITY {
        return normal_cdf(b);
    }
    if b == f64::INFINITY {
        return normal_cdf(a);
    }
    if rho == 0.0 {
        return normal_cdf(a) * normal_cdf(b);
    }
    let s = (1.0 - rho * rho).sqrt();
    let arho = rho.abs();
    let mut lo = -TAIL;
    let mut hi = a.min(TAIL);
    if hi <= lo {
        return 0.0;
    }
    // Points where the inner argument (b - rho t)/s crosses -TAIL and +TAIL.
    let zero_edge = (b + TAIL * s) / rho;
    let one_edge = (b - TAIL * s) / rho;
    let mut closed = 0.0;
    if rho > 0.0 {
        // inner CDF decreases in t: ~1 below one_edge, ~0 above zero_edge
        hi = hi.min(zero_edge);
        if one_edge > lo {
            let cut = one_edge.min(hi);
            closed += normal_cdf(cut) - normal_cdf(lo);
            lo = cut;
        }
    } else {
        // inner CDF increases in t: ~0 below zero_edge, ~1 above one_edge
        lo = lo.max(zero_edge);
        if one_edge < hi {
            let cut = one_edge.max(lo);
            closed += normal_cdf(hi) - normal_cdf(cut);
            hi = cut;
        }
    }
    if hi <= lo {
        return closed.clamp(0.0, 1.0);
    }
    let integrand = |t: f64| normal_pdf(t) * normal_cdf((b - rho * t) / s);
    // Panels no wider than the transition scale of the inner CDF.
    let width = (2.0 * s / arho).clamp(0.05, 2.0);
    let panels = ((hi - lo) / width).ceil().max(1.0) as usize;
    let step = (hi - lo) / panels as f64;
    let tol = QUAD_TOL / panels as f64;
    let mut total = closed;
    for k in 0..panels {
        let p_lo = lo + step * k as f64;
        let p_hi = if k + 1 == panels { hi } else { p_lo + step };
        let whole = gl10(&integrand, p_lo, p_hi);
        total += adaptive_gl(&integrand, p_lo, p_hi, whole, tol, MAX_DEPTH);
    }
    total.clamp(0.0, 1.0)
}

/// Partial derivatives of [`bvn_cdf`] with respect to `a`, `b` and `rho`.
#[inline]
pub fn bvn_cdf_grad(a: f64, b: f64, rho: f64) -> (f64, f64, f64) {
    let s = (1.0 - rho * rho).sqrt();
    let da = if a.is_finite() {
        if b == f64::INFINITY {
            normal_pdf(a)
        } else if b == f64::NEG_INFINITY {
            0.0
        } else {
            normal_pdf(a) * normal_cdf((b - rho * a) / s)
        }
    } else {
        0.0
    };
    let db = if b.is_finite() {
        if a == f64::INFINITY {
            normal_pdf(b)
        } else if a == f64::NEG_INFINITY {
            0.0
        } else {
            normal_pdf(b) * normal_cdf((a - rho * b) / s)
        }
    } else {
        0.0
    };
    (da, db, bvn_pdf(a, b, rho))
}

/// Bivariate standard normal CDF with validated inputs.
pub fn bivariate_normal_cdf(a: f64, b: f64, rho: Correlation) -> Result<f64> {
    if a.is_nan() || b.is_nan() {
        return Err(Error::NotANumber("bivariate_normal_cdf"));
    }
    Ok(bvn_cdf(a, b, rho.value()))
}

/// Probability mass of the rectangle (a_lo, a_hi] x (b_lo, b_hi] under the
/// bivariate standard normal. Rectangles in an upper tail are reflected into
/// the lower tail first, where the corner differences lose less precision.
pub fn bvn_rectangle(a_lo: f64, a_hi: f64, b_lo: f64, b_hi: f64, rho: f64) -> f64 {
    let (mut a_lo, mut a_hi, mut b_lo, mut b_hi, mut r) = (a_lo, a_hi, b_lo, b_hi, rho);
    if reflect(a_lo, a_hi) {
        (a_lo, a_hi) = (-a_hi, -a_lo);
        r = -r;
    }
    if reflect(b_lo, b_hi) {
        (b_lo, b_hi) = (-b_hi, -b_lo);
        r = -r;
    }
    let m = bvn_cdf(a_hi, b_hi, r) - bvn_cdf(a_lo, b_hi, r) - bvn_cdf(a_hi, b_lo, r)
        + bvn_cdf(a_lo, b_lo, r);
    m.max(0.0)
}

#[inline]
fn reflect(lo: f64, hi: f64) -> bool {
    if hi == f64::INFINITY {
        lo > 0.0
    } else if lo == f64::NEG_INFINITY {
        false
    } else {
        lo + hi > 0.0
    }
}

/// Probability laws for covariates and errors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "law", rename_all = "kebab-case")]
pub enum Law {
    Uniform {
        low: f64,
        high: f64,
    },
    Normal {
        #[serde(default)]
        mean: f64,
        #[serde(default = "one")]
        sd: f64,
    },
    Laplace {
        #[serde(default)]
        location: f64,
        #[serde(default = "one")]
        scale: f64,
    },
    StudentT {
        df: f64,
    },
    Logistic {
        #[serde(default)]
        location: f64,
        #[serde(default = "one")]
        scale: f64,
    },
    /// Equal-weight discrete law over a finite set of values.
    Discrete {
        values: Vec<f64>,
    },
}

fn one() -> f64 {
    1.0
}

impl Law {
    pub fn standard_normal() -> Self {
        Law::Normal { mean: 0.0, sd: 1.0 }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match self {
            Law::Uniform { low, high } => low.is_finite() && high.is_finite() && low < high,
            Law::Normal { mean, sd } => mean.is_finite() && sd.is_finite() && *sd > 0.0,
            Law::Laplace { location, scale } | Law::Logistic { location, scale } => {
                location.is_finite() && scale.is_finite() && *scale > 0.0
            }
            Law::StudentT { df } => df.is_finite() && *df > 0.0,
            Law::Discrete { values } => !values.is_empty() && values.iter().all(|v| v.is_finite()),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidLaw(format!("{self}")))
        }
    }

    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match self {
            Law::Uniform { low, high } => low + (high - low) * rng.random::<f64>(),
            Law::Normal { mean, sd } => {
                let z: f64 = StandardNormal.sample(rng);
                mean + sd * z
            }
            Law::Laplace { location, scale } => {
                let u = open_unit(rng) - 0.5;
                location - scale * u.signum() * (1.0 - 2.0 * u.abs()).ln()
            }
            Law::StudentT { df } => StudentT::new(*df)
                .expect("validated degrees of freedom")
                .sample(rng),
            Law::Logistic { location, scale } => {
                let u = open_unit(rng);
                location + scale * (u / (1.0 - u)).ln()
            }
            Law::Discrete { values } => values[rng.random_range(0..values.len())],
        }
    }

    /// Closed support as (lower, upper); unbounded sides are infinite.
    pub fn support(&self) -> (f64, f64) {
        match self {
            Law::Uniform { low, high } => (*low, *high),
            Law::Discrete { values } => values.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            }),
            _ => (f64::NEG_INFINITY, f64::INFINITY),
        }
    }

    pub fn is_discrete(&self) -> bool {
        matches!(self, Law::Discrete { .. })
    }

    /// Distinct support points of a discrete law, sorted.
    pub fn atoms(&self) -> Option<Vec<f64>> {
        match self {
            Law::Discrete { values } => {
                let mut v = values.clone();
                v.sort_by(f64::total_cmp);
                v.dedup();
                Some(v)
            }
            _ => None,
        }
    }

    pub fn cdf(&self, x: f64) -> f64 {
        match self {
            Law::Uniform { low, high } => ((x - low) / (high - low)).clamp(0.0, 1.0),
            Law::Normal { mean, sd } => normal_cdf((x - mean) / sd),
            Law::Laplace { location, scale } => {
                let z = (x - location) / scale;
                if z < 0.0 {
                    0.5 * z.exp()
                } else {
                    1.0 - 0.5 * (-z).exp()
                }
            }
            Law::StudentT { df } => {
                if x.is_infinite() {
                    return if x > 0.0 { 1.0 } else { 0.0 };
                }
                StudentsT::new(0.0, 1.0, *df)
                    .expect("validated degrees of freedom")
                    .cdf(x)
            }
            Law::Logistic { location, scale } => 1.0 / (1.0 + (-(x - location) / scale).exp()),
            Law::Discrete { values } => {
                values.iter().filter(|&&v| v <= x).count() as f64 / values.len() as f64
            }
        }
    }

    /// Quantile for p in (0, 1); for discrete laws the smallest atom whose
    /// CDF reaches p.
    pub fn quantile(&self, p: f64) -> f64 {
        let p = p.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON);
        match self {
            Law::Uniform { low, high } => low + (high - low) * p,
            Law::Normal { mean, sd } => mean + sd * std_normal_quantile(p).unwrap_or(0.0),
            Law::Laplace { location, scale } => {
                if p < 0.5 {
                    location + scale * (2.0 * p).ln()
                } else {
                    location - scale * (2.0 - 2.0 * p).ln()
                }
            }
            Law::StudentT { df } => StudentsT::new(0.0, 1.0, *df)
                .expect("validated degrees of freedom")
                .inverse_cdf(p),
            Law::Logistic { location, scale } => location + scale * (p / (1.0 - p)).ln(),
            Law::Discrete { .. } => {
                let atoms = self.atoms().unwrap_or_default();
                atoms
                    .iter()
                    .copied()
                    .find(|&v| self.cdf(v) >= p)
                    .unwrap_or(*atoms.last().unwrap_or(&0.0))
            }
        }
    }
}

#[inline]
fn open_unit<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    loop {
        let u: f64 = rng.random();
        if u > 0.0 {
            return u;
        }
    }
}

impl fmt::Display for Law {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Law::Uniform { low, high } => write!(f, "uniform({low},{high})"),
            Law::Normal { mean, sd } => write!(f, "normal({mean},{sd})"),
            Law::Laplace { location, scale } => write!(f, "laplace({location},{scale})"),
            Law::StudentT { df } => write!(f, "t({df})"),
            Law::Logistic { location, scale } => write!(f, "logistic({location},{scale})"),
            Law::Discrete { values } => {
                let parts: Vec<String> = values.iter().map(|v| v.to_string()).collect();
                write!(f, "discrete({})", parts.join(","))
            }
        }
    }
}

/// Parses the compact form printed by `Display`, e.g. `uniform(-0.5,0.5)`,
/// `normal`, `laplace`, `t(7)`, `logistic(3,2)`, `discrete(-2.5,-1.5,0.5)`.
impl FromStr for Law {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let (tag, args) = match s.find('(') {
            Some(open) => {
                let close = s
                    .rfind(')')
                    .ok_or_else(|| Error::InvalidLaw(format!("unbalanced parentheses in `{s}`")))?;
                (&s[..open], &s[open + 1..close])
            }
            None => (s, ""),
        };
        let nums: Vec<f64> = if args.trim().is_empty() {
            Vec::new()
        } else {
            args.split(',')
                .map(|a| {
                    a.trim()
                        .parse::<f64>()
                        .map_err(|_| Error::InvalidLaw(format!("bad number `{a}` in `{s}`")))
                })
                .collect::<Result<_>>()?
        };
        let arg = |i: usize, default: Option<f64>| -> Result<f64> {
            nums.get(i)
                .copied()
                .or(default)
                .ok_or_else(|| Error::InvalidLaw(format!("`{s}` needs at least {} argument(s)", i + 1)))
        };
        let law = match tag.trim().to_ascii_lowercase().as_str() {
            "uniform" => Law::Uniform {
                low: arg(0, None)?,
                high: arg(1, None)?,
            },
            "normal" => Law::Normal {
                mean: arg(0, Some(0.0))?,
                sd: arg(1, Some(1.0))?,
            },
            "laplace" => Law::Laplace {
                location: arg(0, Some(0.0))?,
                scale: arg(1, Some(1.0))?,
            },
            "t" | "student-t" => Law::StudentT { df: arg(0, None)? },
            "logistic" => Law::Logistic {
                location: arg(0, Some(0.0))?,
                scale: arg(1, Some(1.0))?,
            },
            "discrete" => Law::Discrete { values: nums.clone() },
            other => return Err(Error::UnknownLaw(other.to_string())),
        };
        law.validate()?;
        Ok(law)
    }
}

/// Seeded generator used throughout the crate.
pub fn rng_from_seed(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Counter-based seed split: the seed for stream `index` of `base`.
pub fn derive_seed(base: u64, index: u64) -> u64 {
    splitmix64(base ^ splitmix64(index.wrapping_add(0x9E37_79B9_7F4A_7C15)))
}

#[inline]
pub(crate) fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Draws `n` values from `law` with a generator seeded by `seed`.
pub fn sample(law: &Law, n: usize, seed: u64) -> Result<Vec<f64>> {
    if n == 0 {
        return Err(Error::InvalidLaw("sample size must be at least 1".into()));
    }
    law.validate()?;
    let mut rng = rng_from_seed(seed);
    Ok((0..n).map(|_| law.draw(&mut rng)).collect())
}
