//! Data-generating processes: the nested semiparametric DGPs, the two-step
//! design, the three parametric designs, and user-defined JSON specs.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::distributions::{rng_from_seed, Law};
use crate::error::{Error, Result};
use crate::lattice::{categorize, CellIndex, Dataset, DesignMatrix, IndexModel, LatticeSpec};

/// Whether a covariate enters one dimension only or several.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CovariateRole {
    Shared,
    Exclusive,
}

/// Adds `coef` times an earlier covariate to this one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linkage {
    pub from: String,
    pub coef: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovariateSpec {
    pub name: String,
    pub law: Law,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub role: Option<CovariateRole>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub linkage: Vec<Linkage>,
}

impl CovariateSpec {
    pub fn new(name: &str, law: Law, role: CovariateRole) -> Self {
        CovariateSpec {
            name: name.to_string(),
            law,
            role: Some(role),
            linkage: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ErrorLaw {
    /// Standard normal margins with a common pairwise correlation.
    Gaussian { rho: f64 },
    /// Independent margins with arbitrary laws.
    Independent { margins: Vec<Law> },
}

/// A complete data-generating process.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DgpSpec {
    pub lattice: LatticeSpec,
    pub model: IndexModel,
    pub covariates: Vec<CovariateSpec>,
    /// Covariate names entering each dimension, aligned with `model` coefficients.
    pub columns: Vec<Vec<String>>,
    pub error: ErrorLaw,
    #[serde(default)]
    pub seed: u64,
}

impl DgpSpec {
    pub fn dims(&self) -> usize {
        self.lattice.dims()
    }

    pub fn validate(&self) -> Result<()> {
        let dims = self.lattice.dims();
        if self.model.dims() != dims || self.columns.len() != dims {
            return Err(Error::InvalidSpec(format!(
                "lattice has {dims} dimensions, model {}, columns {}",
                self.model.dims(),
                self.columns.len()
            )));
        }
        let mut seen: HashMap<&str, usize> = HashMap::new();
        for (pos, c) in self.covariates.iter().enumerate() {
            c.law.validate()?;
            if seen.insert(c.name.as_str(), pos).is_some() {
                return Err(Error::InvalidSpec(format!("duplicate covariate `{}`", c.name)));
            }
            for link in &c.linkage {
                match seen.get(link.from.as_str()) {
                    Some(&p) if p < pos => {}
                    _ => {
                        return Err(Error::InvalidSpec(format!(
                            "covariate `{}` links to `{}`, which is not declared before it",
                            c.name, link.from
                        )))
                    }
                }
                if !link.coef.is_finite() {
                    return Err(Error::InvalidSpec(format!("non-finite linkage on `{}`", c.name)));
                }
            }
        }
        for (d, cols) in self.columns.iter().enumerate() {
            if cols.len() != self.model.beta(d).len() {
                return Err(Error::InvalidSpec(format!(
                    "dimension {}: {} columns but {} coefficients",
                    d + 1,
                    cols.len(),
                    self.model.beta(d).len()
                )));
            }
            for name in cols {
                if !seen.contains_key(name.as_str()) {
                    return Err(Error::InvalidSpec(format!("unknown covariate `{name}` in dimension {}", d + 1)));
                }
            }
        }
        for c in &self.covariates {
            if c.role == Some(CovariateRole::Exclusive) {
                let uses = self.dimensions_using(&c.name).len();
                if uses != 1 {
                    return Err(Error::InvalidSpec(format!(
                        "exclusive covariate `{}` enters {uses} dimensions",
                        c.name
                    )));
                }
            }
        }
        match &self.error {
            ErrorLaw::Gaussian { rho } => {
                let lower = if dims > 1 { -1.0 / (dims as f64 - 1.0) } else { -1.0 };
                if !(rho.is_finite() && *rho < 1.0 && *rho > lower) {
                    return Err(Error::InvalidSpec(format!(
                        "error correlation {rho} does not give a positive definite covariance"
                    )));
                }
            }
            ErrorLaw::Independent { margins } => {
                if margins.len() != dims {
                    return Err(Error::InvalidSpec(format!(
                        "{} error margins for {dims} dimensions",
                        margins.len()
                    )));
                }
                for m in margins {
                    m.validate()?;
                }
            }
        }
        Ok(())
    }

    /// Dimensions (0-based) whose index includes covariate `name`.
    pub fn dimensions_using(&self, name: &str) -> Vec<usize> {
        self.columns
            .iter()
            .enumerate()
            .filter(|(_, cols)| cols.iter().any(|c| c == name))
            .map(|(d, _)| d)
            .collect()
    }

    pub fn covariate(&self, name: &str) -> Option<&CovariateSpec> {
        self.covariates.iter().find(|c| c.name == name)
    }

    /// Each covariate written as a linear combination of the independent
    /// base draws (one base draw per declared covariate).
    pub fn base_expansion(&self) -> Vec<Vec<f64>> {
        let m = self.covariates.len();
        let index: HashMap<&str, usize> = self
            .covariates
            .iter()
            .enumerate()
            .map(|(i, c)| (c.name.as_str(), i))
            .collect();
        let mut out: Vec<Vec<f64>> = Vec::with_capacity(m);
        for (i, c) in self.covariates.iter().enumerate() {
            let mut row = vec![0.0; m];
            row[i] = 1.0;
            for link in &c.linkage {
                let src = &out[index[link.from.as_str()]];
                for (r, s) in row.iter_mut().zip(src) {
                    *r += link.coef * s;
                }
            }
            out.push(row);
        }
        out
    }

    /// Coefficients of the dimension-`d` index on the base draws.
    pub fn index_on_base(&self, d: usize) -> Vec<f64> {
        let expansion = self.base_expansion();
        let mut coefs = vec![0.0; self.covariates.len()];
        for (name, &b) in self.columns[d].iter().zip(self.model.beta(d)) {
            let pos = self.covariates.iter().position(|c| &c.name == name).expect("validated");
            for (c, e) in coefs.iter_mut().zip(&expansion[pos]) {
                *c += b * e;
            }
        }
        coefs
    }

    /// Marginal CDF of the dimension-`d` error.
    pub fn error_marginal_cdf(&self, d: usize, e: f64) -> f64 {
        match &self.error {
            ErrorLaw::Gaussian { .. } => crate::distributions::normal_cdf(e),
            ErrorLaw::Independent { margins } => margins[d].cdf(e),
        }
    }
}

/// A simulated dataset with the latent error draws kept alongside.
#[derive(Debug, Clone)]
pub struct Simulated {
    pub dataset: Dataset,
    /// n x D error draws, row-major.
    pub errors: Vec<Vec<f64>>,
}

/// Draws `n` observations from `spec` using `spec.seed`.
pub fn generate(spec: &DgpSpec, n: usize) -> Result<Dataset> {
    Ok(generate_detailed(spec, n)?.dataset)
}

pub fn generate_detailed(spec: &DgpSpec, n: usize) -> Result<Simulated> {
    if n == 0 {
        return Err(Error::InvalidSpec("sample size must be at least 1".into()));
    }
    spec.validate()?;
    let dims = spec.dims();
    let mut rng = rng_from_seed(spec.seed);

    let mut values: Vec<Vec<f64>> = Vec::with_capacity(spec.covariates.len());
    let mut position: HashMap<&str, usize> = HashMap::new();
    for (pos, c) in spec.covariates.iter().enumerate() {
        let mut col: Vec<f64> = (0..n).map(|_| c.law.draw(&mut rng)).collect();
        for link in &c.linkage {
            let src = &values[position[link.from.as_str()]];
            for (v, s) in col.iter_mut().zip(src) {
                *v += link.coef * s;
            }
        }
        values.push(col);
        position.insert(c.name.as_str(), pos);
    }

    let errors: Vec<Vec<f64>> = match &spec.error {
        ErrorLaw::Gaussian { rho } => {
            let sigma = DMatrix::from_fn(dims, dims, |i, j| if i == j { 1.0 } else { *rho });
            let chol = sigma
                .cholesky()
                .ok_or_else(|| Error::InvalidSpec("error covariance is not positive definite".into()))?;
            let l = chol.l();
            (0..n)
                .map(|_| {
                    let z: Vec<f64> = (0..dims).map(|_| StandardNormal.sample(&mut rng)).collect();
                    (0..dims)
                        .map(|i| (0..=i).map(|j| l[(i, j)] * z[j]).sum())
                        .collect()
                })
                .collect()
        }
        ErrorLaw::Independent { margins } => (0..n)
            .map(|_| margins.iter().map(|m| m.draw(&mut rng)).collect())
            .collect(),
    };

    let covariates: Vec<DesignMatrix> = spec
        .columns
        .iter()
        .map(|cols| {
            let k = cols.len();
            let mut data = Vec::with_capacity(n * k);
            for i in 0..n {
                for name in cols {
                    data.push(values[position[name.as_str()]][i]);
                }
            }
            DesignMatrix::new(n, k, data)
        })
        .collect::<Result<_>>()?;

    let outcomes: Vec<CellIndex> = (0..n)
        .map(|i| {
            let latent: Vec<f64> = (0..dims)
                .map(|d| spec.model.index(d, covariates[d].row(i)) + errors[i][d])
                .collect();
            categorize(&latent, &spec.lattice)
        })
        .collect();

    let dataset = Dataset::new(covariates, outcomes, Some(spec.columns.clone()))?;
    Ok(Simulated { dataset, errors })
}

/// The designs shipped with the crate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BuiltinDgp {
    Semiparam1,
    Semiparam2,
    Semiparam3,
    Semiparam4,
    TwoStep,
    ParamDesign1,
    ParamDesign2,
    ParamDesign3,
}

impl BuiltinDgp {
    pub const ALL: [BuiltinDgp; 8] = [
        BuiltinDgp::Semiparam1,
        BuiltinDgp::Semiparam2,
        BuiltinDgp::Semiparam3,
        BuiltinDgp::Semiparam4,
        BuiltinDgp::TwoStep,
        BuiltinDgp::ParamDesign1,
        BuiltinDgp::ParamDesign2,
        BuiltinDgp::ParamDesign3,
    ];

    pub fn id(self) -> &'static str {
        match self {
            BuiltinDgp::Semiparam1 => "semiparam-1",
            BuiltinDgp::Semiparam2 => "semiparam-2",
            BuiltinDgp::Semiparam3 => "semiparam-3",
            BuiltinDgp::Semiparam4 => "semiparam-4",
            BuiltinDgp::TwoStep => "twostep-5.1",
            BuiltinDgp::ParamDesign1 => "param-design-1",
            BuiltinDgp::ParamDesign2 => "param-design-2",
            BuiltinDgp::ParamDesign3 => "param-design-3",
        }
    }

    pub fn is_parametric_design(self) -> bool {
        matches!(
            self,
            BuiltinDgp::ParamDesign1 | BuiltinDgp::ParamDesign2 | BuiltinDgp::ParamDesign3
        )
    }

    /// The full specification with the given seed.
    pub fn spec(self, seed: u64) -> DgpSpec {
        use CovariateRole::{Exclusive, Shared};
        let uniform = |low: f64, high: f64| Law::Uniform { low, high };
        let laplace = Law::Laplace {
            location: 0.0,
            scale: 1.0,
        };
        let names = |v: &[&str]| v.iter().map(|s| s.to_string()).collect::<Vec<_>>();

        let semiparam = |common1: Law| DgpSpec {
            lattice: LatticeSpec::new(vec![vec![-1.0, 1.0], vec![-1.0, 1.0]]).expect("static"),
            model: IndexModel::new(vec![vec![1.0, 0.5], vec![1.0, 0.5]]).expect("static"),
            covariates: vec![
                CovariateSpec::new("common1", common1, Shared),
                CovariateSpec::new("common2", uniform(-0.5, 0.5), Shared),
            ],
            columns: vec![names(&["common1", "common2"]), names(&["common1", "common2"])],
            error: ErrorLaw::Gaussian { rho: 0.6 },
            seed,
        };

        match self {
            BuiltinDgp::Semiparam1 => semiparam(uniform(-0.5, 0.5)),
            BuiltinDgp::Semiparam2 => semiparam(uniform(-2.0, 2.0)),
            BuiltinDgp::Semiparam3 => semiparam(laplace),
            BuiltinDgp::Semiparam4 => DgpSpec {
                lattice: LatticeSpec::new(vec![vec![-1.0, 1.0], vec![-1.0, 1.0]]).expect("static"),
                model: IndexModel::new(vec![vec![1.0, 0.5], vec![1.0, 0.5]]).expect("static"),
                covariates: vec![
                    CovariateSpec::new("excl1", laplace.clone(), Exclusive),
                    CovariateSpec::new("excl2", laplace, Exclusive),
                    CovariateSpec::new("common2", uniform(-0.5, 0.5), Shared),
                ],
                columns: vec![names(&["excl1", "common2"]), names(&["excl2", "common2"])],
                error: ErrorLaw::Gaussian { rho: 0.6 },
                seed,
            },
            BuiltinDgp::TwoStep => DgpSpec {
                lattice: LatticeSpec::new(vec![vec![-1.0, 1.0], vec![-0.8, 0.8]]).expect("static"),
                model: IndexModel::new(vec![vec![0.8], vec![-0.5]]).expect("static"),
                covariates: vec![
                    CovariateSpec::new("x1", Law::standard_normal(), Exclusive),
                    CovariateSpec {
                        name: "x2".into(),
                        law: Law::Normal { mean: 0.0, sd: 0.5 },
                        role: Some(Exclusive),
                        linkage: vec![Linkage {
                            from: "x1".into(),
                            coef: 0.3,
                        }],
                    },
                ],
                columns: vec![names(&["x1"]), names(&["x2"])],
                error: ErrorLaw::Gaussian { rho: 0.6 },
                seed,
            },
            BuiltinDgp::ParamDesign1 => DgpSpec {
                lattice: LatticeSpec::new(vec![vec![1.0], vec![1.25]]).expect("static"),
                model: IndexModel::new(vec![vec![3.0], vec![2.5]]).expect("static"),
                covariates: vec![CovariateSpec::new("x", uniform(-4.0, 4.0), Shared)],
                columns: vec![names(&["x"]), names(&["x"])],
                error: ErrorLaw::Gaussian { rho: 0.33 },
                seed,
            },
            BuiltinDgp::ParamDesign2 => DgpSpec {
                lattice: LatticeSpec::new(vec![vec![-1.5, 0.6, 4.0], vec![-2.5, 2.0]]).expect("static"),
                model: IndexModel::new(vec![vec![2.0, -3.0], vec![3.0]]).expect("static"),
                covariates: vec![
                    CovariateSpec::new("x", uniform(-2.0, 2.0), Shared),
                    CovariateSpec::new(
                        "w1",
                        Law::Discrete {
                            values: vec![-2.5, -1.5, -0.5, 0.5],
                        },
                        Exclusive,
                    ),
                ],
                columns: vec![names(&["x", "w1"]), names(&["x"])],
                error: ErrorLaw::Gaussian { rho: 0.25 },
                seed,
            },
            BuiltinDgp::ParamDesign3 => DgpSpec {
                lattice: LatticeSpec::new(vec![vec![-7.0, -5.0, -0.75, 2.5, 4.0], vec![-2.0]])
                    .expect("static"),
                model: IndexModel::new(vec![vec![1.75, -2.75], vec![2.5, -4.0, 2.0]]).expect("static"),
                covariates: vec![
                    CovariateSpec::new("x", uniform(-2.0, 2.0), Shared),
                    CovariateSpec::new("w1", Law::StudentT { df: 7.0 }, Exclusive),
                    CovariateSpec::new("w2", Law::StudentT { df: 7.0 }, Exclusive),
                    CovariateSpec::new(
                        "z2",
                        Law::Logistic {
                            location: 3.0,
                            scale: 2.0,
                        },
                        Exclusive,
                    ),
                ],
                columns: vec![names(&["x", "w1"]), names(&["x", "w2", "z2"])],
                error: ErrorLaw::Gaussian { rho: 0.5 },
                seed,
            },
        }
    }
}

impl fmt::Display for BuiltinDgp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for BuiltinDgp {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        BuiltinDgp::ALL
            .into_iter()
            .find(|b| b.id() == s || (s == "twostep" && *b == BuiltinDgp::TwoStep))
            .ok_or_else(|| Error::UnknownDgp(s.to_string()))
    }
}

/// Specification and `n` draws of a builtin design.
pub fn builtin_dgp(id: BuiltinDgp, n: usize, seed: u64) -> Result<(DgpSpec, Dataset)> {
    let spec = id.spec(seed);
    let data = generate(&spec, n)?;
    Ok((spec, data))
}
