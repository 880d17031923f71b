//! Executable identification checks. Each check works from an [`Evidence`]
//! summary built either analytically from a [`DgpSpec`] or from a dataset
//! plus first-stage index parameters.

use std::fmt;

use nalgebra::DMatrix;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::distributions::{bvn_cdf, normal_cdf, Law};
use crate::error::{Error, Result};
use crate::lattice::Dataset;
use crate::semiparametric::FirstStage;
use crate::simulation::{CovariateRole, DgpSpec, ErrorLaw};

/// Tolerance for "attained" limits and for coverage of (0, 1).
pub const ATTAIN_TOL: f64 = 1e-3;
/// Quantile trimmed from each end of empirical supports.
pub const TRIM: f64 = 0.005;
/// Distinct values a covariate needs to count as varying over an interval.
pub const MIN_DISTINCT: usize = 50;
const RANK_TOL: f64 = 1e-9;

/// Closed interval, possibly unbounded or a single point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub fn new(lo: f64, hi: f64) -> Self {
        Interval { lo, hi }
    }

    pub fn point(v: f64) -> Self {
        Interval { lo: v, hi: v }
    }

    fn shift_neg(self, a: f64) -> Self {
        // {a - s : s in self}
        Interval::new(a - self.hi, a - self.lo)
    }

    fn scale(self, c: f64) -> Self {
        if c == 0.0 {
            return Interval::point(0.0);
        }
        let (a, b) = (c * self.lo, c * self.hi);
        Interval::new(a.min(b), a.max(b))
    }
}

fn bound_to_json(v: f64) -> serde_json::Value {
    if v == f64::INFINITY {
        "inf".into()
    } else if v == f64::NEG_INFINITY {
        "-inf".into()
    } else {
        v.into()
    }
}

impl Serialize for Interval {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        [bound_to_json(self.lo), bound_to_json(self.hi)].serialize(s)
    }
}

impl<'de> Deserialize<'de> for Interval {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let v: [serde_json::Value; 2] = Deserialize::deserialize(d)?;
        let parse = |x: &serde_json::Value| match x {
            serde_json::Value::String(s) if s == "inf" => Ok(f64::INFINITY),
            serde_json::Value::String(s) if s == "-inf" => Ok(f64::NEG_INFINITY),
            serde_json::Value::Number(n) => n.as_f64().ok_or_else(|| serde::de::Error::custom("bad bound")),
            _ => Err(serde::de::Error::custom("interval bound must be a number, \"inf\" or \"-inf\"")),
        };
        Ok(Interval::new(parse(&v[0])?, parse(&v[1])?))
    }
}

impl fmt::Display for Interval {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.lo == self.hi {
            write!(f, "{{{}}}", self.lo)
        } else {
            write!(f, "[{}, {}]", self.lo, self.hi)
        }
    }
}

/// Sorted union of disjoint intervals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct IntervalSet(pub Vec<Interval>);

impl IntervalSet {
    pub fn from_intervals(mut v: Vec<Interval>) -> Self {
        v.sort_by(|a, b| a.lo.total_cmp(&b.lo));
        let mut out: Vec<Interval> = Vec::with_capacity(v.len());
        for iv in v {
            match out.last_mut() {
                Some(last) if iv.lo <= last.hi => last.hi = last.hi.max(iv.hi),
                _ => out.push(iv),
            }
        }
        IntervalSet(out)
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn hull(&self) -> Option<Interval> {
        Some(Interval::new(self.0.first()?.lo, self.0.last()?.hi))
    }

    /// {a + b : a in self, b in other}.
    pub fn minkowski(&self, other: &IntervalSet) -> IntervalSet {
        let mut v = Vec::with_capacity(self.0.len() * other.0.len());
        for a in &self.0 {
            for b in &other.0 {
                v.push(Interval::new(a.lo + b.lo, a.hi + b.hi));
            }
        }
        IntervalSet::from_intervals(v)
    }

    pub fn scale(&self, c: f64) -> IntervalSet {
        IntervalSet::from_intervals(self.0.iter().map(|i| i.scale(c)).collect())
    }

    /// {a - s : s in self}.
    pub fn reflect_from(&self, a: f64) -> IntervalSet {
        IntervalSet::from_intervals(self.0.iter().map(|i| i.shift_neg(a)).collect())
    }

    pub fn intersect(&self, other: &IntervalSet) -> IntervalSet {
        let mut v = Vec::new();
        for a in &self.0 {
            for b in &other.0 {
                let (lo, hi) = (a.lo.max(b.lo), a.hi.min(b.hi));
                if lo <= hi {
                    v.push(Interval::new(lo, hi));
                }
            }
        }
        IntervalSet::from_intervals(v)
    }

    /// Distance from `x` to the set (0 inside).
    pub fn distance(&self, x: f64) -> f64 {
        self.0
            .iter()
            .map(|i| {
                if x < i.lo {
                    i.lo - x
                } else if x > i.hi {
                    x - i.hi
                } else {
                    0.0
                }
            })
            .fold(f64::INFINITY, f64::min)
    }
}

impl fmt::Display for IntervalSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.0.is_empty() {
            return write!(f, "empty");
        }
        let parts: Vec<String> = self.0.iter().map(|i| i.to_string()).collect();
        write!(f, "{}", parts.join(" u "))
    }
}

fn law_support(law: &Law) -> IntervalSet {
    match law.atoms() {
        Some(atoms) => IntervalSet::from_intervals(atoms.into_iter().map(Interval::point).collect()),
        None => {
            let (lo, hi) = law.support();
            IntervalSet(vec![Interval::new(lo, hi)])
        }
    }
}

fn law_is_degenerate(law: &Law) -> bool {
    law.atoms().is_some_and(|a| a.len() < 2)
}

/// Numerical rank test on a matrix with column-normalized entries.
fn full_column_rank(m: DMatrix<f64>) -> bool {
    let cols = m.ncols();
    if m.nrows() < cols {
        return false;
    }
    let mut m = m;
    for mut c in m.column_iter_mut() {
        let norm = c.norm();
        if norm > 0.0 {
            c /= norm;
        }
    }
    let sv = m.singular_values();
    let max = sv.max();
    max > 0.0 && sv.iter().filter(|s| **s > RANK_TOL * max).count() == cols
}

/// Whether [1, X] has full column rank for an n x k design.
pub fn augmented_rank_ok(x: &crate::lattice::DesignMatrix) -> bool {
    let (n, k) = (x.rows(), x.cols());
    let m = DMatrix::from_fn(n, k + 1, |i, j| if j == 0 { 1.0 } else { x.row(i)[j - 1] });
    full_column_rank(m)
}

/// Joint error law used to evaluate limits and joint probabilities.
#[derive(Debug, Clone, PartialEq)]
enum ErrorModel {
    Gaussian(f64),
    Independent(Vec<Law>),
}

impl ErrorModel {
    fn marginal(&self, d: usize, e: f64) -> f64 {
        match self {
            ErrorModel::Gaussian(_) => normal_cdf(e),
            ErrorModel::Independent(m) => m[d].cdf(e),
        }
    }

    fn joint(&self, a: f64, b: f64) -> f64 {
        match self {
            ErrorModel::Gaussian(rho) => bvn_cdf(a, b, *rho),
            ErrorModel::Independent(m) => m[0].cdf(a) * m[1].cdf(b),
        }
    }
}

/// An exclusive covariate of one dimension and the range of its index
/// contribution when varied alone.
#[derive(Debug, Clone, PartialEq)]
struct Exclusive {
    name: String,
    coef: f64,
    /// Attainable values of the covariate itself (hull).
    range: Interval,
    /// Two distinct interior values for the joint-probability contrast.
    probes: [f64; 2],
    nondegenerate: bool,
}

/// Everything the checks need, from either a specification or data.
#[derive(Debug, Clone)]
pub struct Evidence {
    source: Source,
    thresholds: Vec<Vec<f64>>,
    support: Vec<IntervalSet>,
    rank: Vec<bool>,
    variation: Vec<bool>,
    errors: ErrorModel,
    /// Per dimension; `None` when covariate roles were not declared.
    exclusive: Option<Vec<Vec<Exclusive>>>,
    /// Index value of each dimension with covariates at a central point.
    center: Vec<f64>,
    /// Attainable pairs of indices used by the sign search.
    candidates: Vec<[f64; 2]>,
    /// Joint-correlation conditions only apply under normal errors.
    gaussian: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Source {
    Spec,
    Data,
}

/// The strongest identification result the checks support, nested.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Level {
    NotIdentified,
    ParamsOnly,
    PlusThresholdGaps,
    PlusMarginals,
    PlusJointCdf,
}

impl fmt::Display for Level {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Level::NotIdentified => "not-identified",
            Level::ParamsOnly => "params-only",
            Level::PlusThresholdGaps => "plus-threshold-gaps",
            Level::PlusMarginals => "plus-marginals",
            Level::PlusJointCdf => "plus-joint-cdf",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverlapPair {
    /// 1-based threshold indices (j, j + 1).
    pub thresholds: [usize; 2],
    pub overlap: IntervalSet,
    pub identified: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExclusiveShift {
    pub covariate: String,
    pub reaches_zero: bool,
    pub reaches_marginal: bool,
    pub passes: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DimensionReport {
    pub dimension: usize,
    pub rank: bool,
    pub index_variation: bool,
    pub index_support: IntervalSet,
    pub overlaps: Vec<OverlapPair>,
    pub overlap_ok: bool,
    pub coverage: f64,
    pub coverage_ok: bool,
    /// `None` when exclusivity was not declared.
    pub exclusive_shift: Option<Vec<ExclusiveShift>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RhoConditions {
    pub a: bool,
    pub b: bool,
    pub c: bool,
}

impl RhoConditions {
    pub fn any(&self) -> bool {
        self.a || self.b || self.c
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdentificationReport {
    pub source: Source,
    pub dimensions: Vec<DimensionReport>,
    pub joint_shift_ok: bool,
    /// Present under normal errors only.
    pub rho: Option<RhoConditions>,
    pub level: Level,
    pub notes: Vec<String>,
}

impl Evidence {
    /// Analytic evidence: true supports and the declared error law.
    pub fn from_spec(spec: &DgpSpec) -> Result<Self> {
        spec.validate()?;
        if spec.dims() != 2 {
            return Err(Error::DimensionMismatch("identification checks are bivariate".into()));
        }
        let expansion = spec.base_expansion();
        let bases: Vec<&Law> = spec.covariates.iter().map(|c| &c.law).collect();
        let base_support: Vec<IntervalSet> = bases.iter().map(|l| law_support(l)).collect();
        let combo_support = |coefs: &[f64]| -> IntervalSet {
            let mut s = IntervalSet(vec![Interval::point(0.0)]);
            for (c, sup) in coefs.iter().zip(&base_support) {
                if *c != 0.0 {
                    s = s.minkowski(&sup.scale(*c));
                }
            }
            s
        };
        let median = |coefs: &[f64]| -> f64 { coefs.iter().zip(&bases).map(|(c, l)| c * l.quantile(0.5)).sum() };
        let position = |name: &str| spec.covariates.iter().position(|c| c.name == name).expect("validated");

        let mut support = Vec::new();
        let mut rank = Vec::new();
        let mut variation = Vec::new();
        let mut center = Vec::new();
        for d in 0..2 {
            let coefs = spec.index_on_base(d);
            support.push(combo_support(&coefs));
            center.push(median(&coefs));
            let rows: Vec<&Vec<f64>> = spec.columns[d].iter().map(|n| &expansion[position(n)]).collect();
            // [1, x_d] has full rank iff the loadings on non-degenerate bases do
            let live: Vec<usize> = (0..bases.len()).filter(|&b| !law_is_degenerate(bases[b])).collect();
            let m = DMatrix::from_fn(live.len(), rows.len(), |i, j| rows[j][live[i]]);
            rank.push(!rows.is_empty() && full_column_rank(m));
            variation.push(spec.columns[d].iter().zip(spec.model.beta(d)).any(|(n, b)| {
                *b != 0.0
                    && expansion[position(n)]
                        .iter()
                        .zip(&bases)
                        .any(|(c, l)| *c != 0.0 && !l.is_discrete())
            }));
        }

        let declared = spec
            .columns
            .iter()
            .flatten()
            .all(|n| spec.covariate(n).is_some_and(|c| c.role.is_some()));
        let exclusive = declared.then(|| {
            (0..2)
                .map(|d| {
                    spec.columns[d]
                        .iter()
                        .zip(spec.model.beta(d))
                        .filter(|(n, _)| spec.covariate(n).and_then(|c| c.role) == Some(CovariateRole::Exclusive))
                        .map(|(n, b)| {
                            let row = &expansion[position(n)];
                            let own = combo_support(row);
                            let range = own.hull().unwrap_or(Interval::point(0.0));
                            let law = &spec.covariate(n).expect("validated").law;
                            let probes = match law.atoms() {
                                Some(a) if a.len() >= 2 => [a[0], a[a.len() - 1]],
                                _ => [law.quantile(0.25), law.quantile(0.75)],
                            };
                            Exclusive {
                                name: n.clone(),
                                coef: *b,
                                range,
                                probes,
                                nondegenerate: !law_is_degenerate(law),
                            }
                        })
                        .collect()
                })
                .collect()
        });

        let errors = match &spec.error {
            ErrorLaw::Gaussian { rho } => ErrorModel::Gaussian(*rho),
            ErrorLaw::Independent { margins } => ErrorModel::Independent(margins.clone()),
        };
        let candidates = candidate_indices(spec)?;
        Ok(Evidence {
            source: Source::Spec,
            thresholds: spec.lattice.all_thresholds().to_vec(),
            support,
            rank,
            variation,
            gaussian: matches!(errors, ErrorModel::Gaussian(_)),
            errors,
            exclusive,
            center,
            candidates,
        })
    }

    /// Evidence from data: empirical supports trimmed at 0.5% per tail,
    /// first-stage parameters, a normal working law for limits, and
    /// exclusivity as declared by column name.
    pub fn from_data(data: &Dataset, first_stage: &FirstStage, exclusive: Option<&[String]>) -> Result<Self> {
        if data.dims() != 2 {
            return Err(Error::DimensionMismatch("identification checks are bivariate".into()));
        }
        if data.n() == 0 {
            return Err(Error::EmptyDataset);
        }
        let lattice = first_stage.lattice()?;
        let model = first_stage.model()?;
        data.check_model(&model)?;
        let names = data.column_names();
        if let Some(ex) = exclusive {
            for n in ex {
                let uses = names.iter().filter(|cols| cols.contains(n)).count();
                if uses != 1 {
                    return Err(Error::InvalidSpec(format!(
                        "exclusive covariate `{n}` must enter exactly one dimension (enters {uses})"
                    )));
                }
            }
        }
        let n = data.n();
        let mut support = Vec::new();
        let mut rank = Vec::new();
        let mut variation = Vec::new();
        let mut center = Vec::new();
        let mut index: Vec<Vec<f64>> = Vec::new();
        for d in 0..2 {
            let x = data.covariates(d);
            let eta: Vec<f64> = (0..n).map(|i| model.index(d, data.x(i, d))).collect();
            support.push(empirical_support(&eta));
            center.push(quantile(&eta, 0.5));
            rank.push(augmented_rank_ok(x));
            variation.push((0..x.cols()).any(|j| model.beta(d)[j] != 0.0 && distinct(x.column(j)) >= MIN_DISTINCT));
            index.push(eta);
        }
        let exclusive = exclusive.map(|ex| {
            (0..2)
                .map(|d| {
                    names[d]
                        .iter()
                        .enumerate()
                        .filter(|(_, name)| ex.contains(name))
                        .map(|(j, name)| {
                            let col: Vec<f64> = data.covariates(d).column(j).collect();
                            let s = empirical_support(&col);
                            Exclusive {
                                name: name.clone(),
                                coef: model.beta(d)[j],
                                range: s.hull().unwrap_or(Interval::point(0.0)),
                                probes: [quantile(&col, 0.25), quantile(&col, 0.75)],
                                nondegenerate: distinct(col.iter().copied()) >= 2,
                            }
                        })
                        .collect()
                })
                .collect()
        });
        let candidates = (0..n).map(|i| [index[0][i], index[1][i]]).collect();
        let rho = first_stage.rho.unwrap_or(0.0);
        Ok(Evidence {
            source: Source::Data,
            thresholds: lattice.all_thresholds().to_vec(),
            support,
            rank,
            variation,
            errors: ErrorModel::Gaussian(rho),
            exclusive,
            center,
            candidates,
            gaussian: true,
        })
    }

    /// Index support of dimension `d` (0-based).
    pub fn index_support(&self, d: usize) -> &IntervalSet {
        &self.support[d]
    }

    /// [1, x_d] has full column rank.
    pub fn check_rank(&self, d: usize) -> bool {
        self.rank[d]
    }

    /// Overlap of attainable shifts for adjacent thresholds (j, j + 1).
    pub fn check_threshold_gap_overlap(&self, d: usize) -> Vec<OverlapPair> {
        let t = &self.thresholds[d];
        t.windows(2)
            .enumerate()
            .map(|(j, w)| {
                let overlap = self.support[d].reflect_from(w[0]).intersect(&self.support[d].reflect_from(w[1]));
                OverlapPair {
                    thresholds: [j + 1, j + 2],
                    identified: !overlap.is_empty(),
                    overlap,
                }
            })
            .collect()
    }

    /// Fraction of (0, 1) attained by F_d(alpha_j - x_d beta_d).
    pub fn check_coverage(&self, d: usize) -> f64 {
        let mut images = Vec::new();
        for &a in &self.thresholds[d] {
            for iv in &self.support[d].reflect_from(a).0 {
                images.push(Interval::new(
                    self.errors.marginal(d, iv.lo),
                    self.errors.marginal(d, iv.hi),
                ));
            }
        }
        IntervalSet::from_intervals(images)
            .0
            .iter()
            .map(|i| i.hi.min(1.0) - i.lo.max(0.0))
            .filter(|w| *w > 0.0)
            .sum()
    }

    /// For each dimension, whether varying each exclusive covariate alone
    /// drives every joint probability P(Y1 <= j1, Y2 <= j2 | x) to zero
    /// and to the other dimension's marginal.
    pub fn check_exclusive_shift(&self) -> Result<Vec<Vec<ExclusiveShift>>> {
        let ex = self.exclusive.as_ref().ok_or_else(|| {
            Error::MissingExclusivity("covariate roles (shared or exclusive) are not declared".into())
        })?;
        Ok((0..2)
            .map(|m| {
                let other = 1 - m;
                ex[m]
                    .iter()
                    .map(|e| {
                        let base = self.center[m] - e.coef * 0.5 * finite_mid(e.range);
                        // index contributions at the two ends of the covariate range
                        let ends = [e.coef * e.range.lo, e.coef * e.range.hi];
                        let (lo, hi) = (ends[0].min(ends[1]), ends[0].max(ends[1]));
                        let mut zero = e.coef != 0.0;
                        let mut marginal = e.coef != 0.0;
                        for &am in &self.thresholds[m] {
                            for &ao in &self.thresholds[other] {
                                let a_other = ao - self.center[other];
                                let joint = |shift: f64| {
                                    let a_m = am - base - shift;
                                    if m == 0 {
                                        self.errors.joint(a_m, a_other)
                                    } else {
                                        self.errors.joint(a_other, a_m)
                                    }
                                };
                                // largest index -> joint probability 0
                                let p_inf = if hi == f64::INFINITY { 0.0 } else { joint(hi) };
                                let target = self.errors.marginal(other, a_other);
                                let p_sup = if lo == f64::NEG_INFINITY { target } else { joint(lo) };
                                zero &= p_inf.abs() <= ATTAIN_TOL;
                                marginal &= (p_sup - target).abs() <= ATTAIN_TOL;
                            }
                        }
                        ExclusiveShift {
                            covariate: e.name.clone(),
                            reaches_zero: zero,
                            reaches_marginal: marginal,
                            passes: zero && marginal,
                        }
                    })
                    .collect()
            })
            .collect())
    }

    /// Sufficient conditions for the error correlation under normal errors.
    pub fn check_rho_conditions(&self) -> RhoConditions {
        // |Phi(alpha_j - x beta) - 0.5| <= tol  <=>  |alpha_j - x beta| <= Phi^-1(0.5 + tol)
        let pivot = crate::distributions::std_normal_quantile(0.5 + ATTAIN_TOL).unwrap_or(0.0);
        let a = (0..2).any(|d| self.thresholds[d].iter().any(|&t| self.support[d].distance(t) <= pivot));

        let b = [(0usize, 1usize), (1, 0)].iter().any(|&(d1, d2)| {
            self.thresholds[d1].iter().any(|&t1| {
                self.thresholds[d2].iter().any(|&t2| {
                    // attained strict sign pairs (sign in d1, sign in d2)
                    let mut seen = [[false; 2]; 2];
                    for c in &self.candidates {
                        let (s1, s2) = (t1 - c[d1], t2 - c[d2]);
                        if s1 != 0.0 && s2 != 0.0 {
                            seen[(s1 > 0.0) as usize][(s2 > 0.0) as usize] = true;
                        }
                    }
                    (0..2).any(|s| seen[0][s] && seen[1][s] && (seen[0][1 - s] || seen[1][1 - s]))
                })
            })
        });

        let c = self.exclusive.as_ref().is_some_and(|ex| {
            (0..2).any(|d1| {
                let d2 = 1 - d1;
                ex[d1].iter().any(|e| {
                    e.coef != 0.0
                        && e.nondegenerate
                        && self.thresholds[d1].iter().any(|&t1| {
                            self.thresholds[d2].iter().any(|&t2| {
                                let rest = self.center[d1] - e.coef * 0.5 * (e.probes[0] + e.probes[1]);
                                let p = |v: f64| {
                                    let a1 = t1 - rest - e.coef * v;
                                    let a2 = t2 - self.center[d2];
                                    if d1 == 0 {
                                        self.errors.joint(a1, a2)
                                    } else {
                                        self.errors.joint(a2, a1)
                                    }
                                };
                                (p(e.probes[0]) - p(e.probes[1])).abs() > 1e-10
                            })
                        })
                })
            })
        });
        RhoConditions { a, b, c }
    }

    pub fn classify(&self) -> IdentificationReport {
        let mut notes = Vec::new();
        let shifts = match self.check_exclusive_shift() {
            Ok(s) => Some(s),
            Err(e) => {
                notes.push(format!("joint CDF check skipped: {e}"));
                None
            }
        };
        let dimensions: Vec<DimensionReport> = (0..2)
            .map(|d| {
                let overlaps = self.check_threshold_gap_overlap(d);
                let coverage = self.check_coverage(d);
                DimensionReport {
                    dimension: d + 1,
                    rank: self.rank[d],
                    index_variation: self.variation[d],
                    index_support: self.support[d].clone(),
                    overlap_ok: overlaps.iter().all(|o| o.identified),
                    overlaps,
                    coverage,
                    coverage_ok: coverage >= 1.0 - ATTAIN_TOL,
                    exclusive_shift: shifts.as_ref().map(|s| s[d].clone()),
                }
            })
            .collect();
        let joint_shift_ok = dimensions
            .iter()
            .any(|d| d.exclusive_shift.as_ref().is_some_and(|s| s.iter().any(|e| e.passes)));
        let mut level = Level::NotIdentified;
        if dimensions.iter().all(|d| d.rank && d.index_variation) {
            level = Level::ParamsOnly;
            if dimensions.iter().all(|d| d.overlap_ok) {
                level = Level::PlusThresholdGaps;
                if dimensions.iter().all(|d| d.coverage_ok) {
                    level = Level::PlusMarginals;
                    if joint_shift_ok {
                        level = Level::PlusJointCdf;
                    }
                }
            }
        }
        if self.source == Source::Data {
            notes.push(format!(
                "supports are empirical ({}% trimmed per tail); limits use a normal working law",
                TRIM * 100.0
            ));
        }
        IdentificationReport {
            source: self.source,
            dimensions,
            joint_shift_ok,
            rho: self.gaussian.then(|| self.check_rho_conditions()),
            level,
            notes,
        }
    }
}

fn finite_mid(i: Interval) -> f64 {
    match (i.lo.is_finite(), i.hi.is_finite()) {
        (true, true) => i.lo + i.hi,
        _ => 0.0,
    }
}

fn distinct(v: impl Iterator<Item = f64>) -> usize {
    let mut v: Vec<f64> = v.collect();
    v.sort_by(f64::total_cmp);
    v.dedup();
    v.len()
}

/// Linear-interpolated sample quantile.
fn quantile(v: &[f64], p: f64) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let pos = p * (s.len() - 1) as f64;
    let (i, f) = (pos.floor() as usize, pos.fract());
    if i + 1 < s.len() {
        s[i] + f * (s[i + 1] - s[i])
    } else {
        s[i]
    }
}

/// Few distinct values: the atoms themselves. Otherwise the trimmed range.
fn empirical_support(v: &[f64]) -> IntervalSet {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    s.dedup();
    if s.len() < MIN_DISTINCT {
        return IntervalSet::from_intervals(s.into_iter().map(Interval::point).collect());
    }
    IntervalSet(vec![Interval::new(quantile(v, TRIM), quantile(v, 1.0 - TRIM))])
}

/// Draws used, on top of the quantile grid, to search attainable index pairs.
const SEARCH_DRAWS: usize = 20_000;

/// Index pairs on a product grid of base-draw quantiles plus a fixed-seed
/// sample from the covariate law.
fn candidate_indices(spec: &DgpSpec) -> Result<Vec<[f64; 2]>> {
    const QS: [f64; 11] = [0.001, 0.01, 0.05, 0.1, 0.25, 0.5, 0.75, 0.9, 0.95, 0.99, 0.999];
    let values: Vec<Vec<f64>> = spec
        .covariates
        .iter()
        .map(|c| match c.law.atoms() {
            Some(a) => a,
            None => QS.iter().map(|&q| c.law.quantile(q)).collect(),
        })
        .collect();
    let coefs: Vec<Vec<f64>> = (0..2).map(|d| spec.index_on_base(d)).collect();
    let mut out = vec![[0.0, 0.0]];
    for (b, vals) in values.iter().enumerate() {
        if out.len() * vals.len() > 200_000 {
            break;
        }
        let mut next = Vec::with_capacity(out.len() * vals.len());
        for p in &out {
            for v in vals {
                next.push([p[0] + coefs[0][b] * v, p[1] + coefs[1][b] * v]);
            }
        }
        out = next;
    }
    let data = crate::simulation::generate(spec, SEARCH_DRAWS)?;
    out.extend((0..data.n()).map(|i| [spec.model.index(0, data.x(i, 0)), spec.model.index(1, data.x(i, 1))]));
    Ok(out)
}

impl IdentificationReport {
    pub fn to_text(&self) -> String {
        let yn = |b: bool| if b { "pass" } else { "fail" };
        let mut s = format!("identification level: {}\nsource: {:?}\n", self.level, self.source);
        for d in &self.dimensions {
            s.push_str(&format!(
                "dimension {}:\n  rank of [1, x]: {}\n  index variation: {}\n  index support: {}\n",
                d.dimension,
                yn(d.rank),
                yn(d.index_variation),
                d.index_support
            ));
            for o in &d.overlaps {
                s.push_str(&format!(
                    "  gap ({}, {}) overlap: {} ({})\n",
                    o.thresholds[0],
                    o.thresholds[1],
                    o.overlap,
                    yn(o.identified)
                ));
            }
            s.push_str(&format!("  coverage of (0,1): {:.6} ({})\n", d.coverage, yn(d.coverage_ok)));
            match &d.exclusive_shift {
                None => s.push_str("  exclusive shift: undeclared\n"),
                Some(v) if v.is_empty() => s.push_str("  exclusive shift: no exclusive covariates\n"),
                Some(v) => {
                    for e in v {
                        s.push_str(&format!(
                            "  exclusive shift `{}`: to zero {}, to marginal {} ({})\n",
                            e.covariate,
                            yn(e.reaches_zero),
                            yn(e.reaches_marginal),
                            yn(e.passes)
                        ));
                    }
                }
            }
        }
        if let Some(r) = &self.rho {
            s.push_str(&format!(
                "correlation conditions: (a) {}, (b) {}, (c) {}\n",
                yn(r.a),
                yn(r.b),
                yn(r.c)
            ));
        }
        for n in &self.notes {
            s.push_str(&format!("note: {n}\n"));
        }
        s
    }
}

/// Analytic classification of a specification.
pub fn classify_spec(spec: &DgpSpec) -> Result<IdentificationReport> {
    Ok(Evidence::from_spec(spec)?.classify())
}

/// Classification of a dataset given first-stage parameters.
pub fn classify_data(data: &Dataset, first_stage: &FirstStage, exclusive: Option<&[String]>) -> Result<IdentificationReport> {
    Ok(Evidence::from_data(data, first_stage, exclusive)?.classify())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::{DesignMatrix, IndexModel, LatticeSpec};
    use crate::simulation::{BuiltinDgp, CovariateSpec};

    fn spec(id: BuiltinDgp) -> DgpSpec {
        id.spec(0)
    }

    #[test]
    fn interval_algebra() {
        let a = IntervalSet::from_intervals(vec![Interval::new(0.0, 1.0), Interval::new(0.5, 2.0), Interval::point(5.0)]);
        assert_eq!(a.0.len(), 2);
        let b = IntervalSet(vec![Interval::point(1.0), Interval::point(-1.0)]);
        let s = a.minkowski(&IntervalSet::from_intervals(b.0));
        assert_eq!(s.0, vec![Interval::new(-1.0, 3.0), Interval::point(4.0), Interval::point(6.0)]);
        assert_eq!(a.distance(3.0), 1.0);
        let json = serde_json::to_string(&IntervalSet(vec![Interval::new(f64::NEG_INFINITY, 2.0)])).unwrap();
        assert_eq!(json, r#"[["-inf",2.0]]"#);
        let back: IntervalSet = serde_json::from_str(&json).unwrap();
        assert_eq!(back.0[0].lo, f64::NEG_INFINITY);
    }

    #[test]
    fn rank_checks() {
        let collinear = DesignMatrix::from_rows(&[vec![1.0, 2.0], vec![2.0, 4.0], vec![3.0, 6.0]]).unwrap();
        assert!(!augmented_rank_ok(&collinear));
        let generic = DesignMatrix::from_rows(&[vec![0.3, -1.2], vec![1.7, 0.4], vec![-0.8, 2.2]]).unwrap();
        assert!(augmented_rank_ok(&generic));
        let scaled = DesignMatrix::from_rows(&[vec![0.3e-8, -1.2e9], vec![1.7e-8, 0.4e9], vec![-0.8e-8, 2.2e9]]).unwrap();
        assert!(augmented_rank_ok(&scaled));
        let constant = DesignMatrix::from_rows(&[vec![2.0], vec![2.0], vec![2.0]]).unwrap();
        assert!(!augmented_rank_ok(&constant));
        let e = Evidence::from_spec(&spec(BuiltinDgp::Semiparam1)).unwrap();
        assert!(e.check_rank(0) && e.check_rank(1));
    }

    #[test]
    fn overlap_for_first_two_dgps() {
        let e1 = Evidence::from_spec(&spec(BuiltinDgp::Semiparam1)).unwrap();
        let pairs = e1.check_threshold_gap_overlap(0);
        assert_eq!(pairs.len(), 1);
        assert!(!pairs[0].identified);
        assert_eq!(e1.index_support(0).0, vec![Interval::new(-0.75, 0.75)]);
        let e2 = Evidence::from_spec(&spec(BuiltinDgp::Semiparam2)).unwrap();
        let pairs = e2.check_threshold_gap_overlap(0);
        assert!(pairs[0].identified);
        // [-1 - 2.25, -1 + 2.25] meets [1 - 2.25, 1 + 2.25] on [-1.25, 1.25]
        assert_eq!(pairs[0].overlap.0, vec![Interval::new(-1.25, 1.25)]);
    }

    #[test]
    fn coverage_values() {
        let e2 = Evidence::from_spec(&spec(BuiltinDgp::Semiparam2)).unwrap();
        let c = e2.check_coverage(0);
        let expected = normal_cdf(3.25) - normal_cdf(-3.25);
        assert!((c - expected).abs() < 1e-12);
        assert!(c < 1.0 - ATTAIN_TOL);
        let e3 = Evidence::from_spec(&spec(BuiltinDgp::Semiparam3)).unwrap();
        assert!(e3.check_coverage(0) >= 1.0 - ATTAIN_TOL);

        let mut point = spec(BuiltinDgp::Semiparam1);
        point.lattice = LatticeSpec::new(vec![vec![0.0], vec![0.0]]).unwrap();
        point.covariates = vec![CovariateSpec::new("c", Law::Discrete { values: vec![0.3] }, CovariateRole::Shared)];
        point.columns = vec![vec!["c".into()], vec!["c".into()]];
        point.model = IndexModel::new(vec![vec![1.0], vec![1.0]]).unwrap();
        let e = Evidence::from_spec(&point).unwrap();
        assert!(e.check_coverage(0) < 1e-12);
        assert!(!e.check_rank(0));
    }

    #[test]
    fn exclusive_shift() {
        let e4 = Evidence::from_spec(&spec(BuiltinDgp::Semiparam4)).unwrap();
        let s = e4.check_exclusive_shift().unwrap();
        assert!(s[0][0].passes && s[1][0].passes);
        let e3 = Evidence::from_spec(&spec(BuiltinDgp::Semiparam3)).unwrap();
        assert!(e3.check_exclusive_shift().unwrap().iter().all(|v| v.is_empty()));

        let mut zero = spec(BuiltinDgp::Semiparam4);
        zero.model = IndexModel::new(vec![vec![0.0, 0.5], vec![1.0, 0.5]]).unwrap();
        let s = Evidence::from_spec(&zero).unwrap().check_exclusive_shift().unwrap();
        assert!(!s[0][0].passes);

        let mut undeclared = spec(BuiltinDgp::Semiparam4);
        undeclared.covariates[0].role = None;
        let e = Evidence::from_spec(&undeclared).unwrap();
        assert!(matches!(e.check_exclusive_shift(), Err(Error::MissingExclusivity(_))));
    }

    #[test]
    fn bounded_exclusive_support_fails_limits() {
        let mut s = spec(BuiltinDgp::Semiparam4);
        s.covariates[0].law = Law::Uniform { low: -0.5, high: 0.5 };
        let r = Evidence::from_spec(&s).unwrap().check_exclusive_shift().unwrap();
        assert!(!r[0][0].passes);
        assert!(r[1][0].passes);
    }

    #[test]
    fn levels_of_the_four_dgps() {
        let expect = [
            (BuiltinDgp::Semiparam1, Level::ParamsOnly),
            (BuiltinDgp::Semiparam2, Level::PlusThresholdGaps),
            (BuiltinDgp::Semiparam3, Level::PlusMarginals),
            (BuiltinDgp::Semiparam4, Level::PlusJointCdf),
        ];
        for (id, level) in expect {
            let r = classify_spec(&spec(id)).unwrap();
            assert_eq!(r.level, level, "{id}");
            let text = r.to_text();
            assert!(text.contains(&level.to_string()));
        }
    }

    #[test]
    fn rho_conditions() {
        let r = Evidence::from_spec(&spec(BuiltinDgp::ParamDesign2)).unwrap().check_rho_conditions();
        assert!(r.c);
        let r = Evidence::from_spec(&spec(BuiltinDgp::ParamDesign3)).unwrap().check_rho_conditions();
        assert!(r.c);

        // beta = 0 with a threshold at 0: pivot at every x
        let mut flat = spec(BuiltinDgp::ParamDesign1);
        flat.lattice = LatticeSpec::new(vec![vec![0.0], vec![0.0]]).unwrap();
        flat.model = IndexModel::new(vec![vec![0.0], vec![0.0]]).unwrap();
        assert!(Evidence::from_spec(&flat).unwrap().check_rho_conditions().a);

        // shared covariate only, indices kept away from the thresholds
        let mut shared = spec(BuiltinDgp::ParamDesign1);
        shared.covariates[0].law = Law::Uniform { low: 0.0, high: 0.1 };
        let r = Evidence::from_spec(&shared).unwrap().check_rho_conditions();
        assert!(!r.c);
        assert!(!r.a);
        assert!(!r.b);
    }

    #[test]
    fn sign_search_finds_flips() {
        // Design 1 indices 3x and 2.5x cross thresholds 1 and 1.25 at
        // different x, so points exist with dimension 1 flipping sign while
        // dimension 2 keeps it.
        let r = Evidence::from_spec(&spec(BuiltinDgp::ParamDesign1)).unwrap().check_rho_conditions();
        assert!(r.a && r.b);
    }

    #[test]
    fn data_checks_match_analytic_levels() {
        for id in [BuiltinDgp::Semiparam1, BuiltinDgp::Semiparam2, BuiltinDgp::Semiparam3, BuiltinDgp::Semiparam4] {
            let (s, data) = crate::simulation::builtin_dgp(id, 10_000, 5).unwrap();
            let fs = FirstStage {
                thresholds: s.lattice.all_thresholds().to_vec(),
                beta: s.model.all_beta().to_vec(),
                rho: None,
            };
            let ex: Vec<String> = s
                .covariates
                .iter()
                .filter(|c| c.role == Some(CovariateRole::Exclusive))
                .map(|c| c.name.clone())
                .collect();
            let r = classify_data(&data, &fs, Some(&ex)).unwrap();
            assert_eq!(r.level, classify_spec(&s).unwrap().level, "{id}");
        }
    }
}
