//! Replicated simulation studies with per-replication seeds.
//!
//! Replication `r` always uses `derive_seed(base_seed, r)`, and results are
//! collected in replication order, so output does not depend on the number
//! of worker threads.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use crate::distributions::derive_seed;
use crate::error::{Error, Result};
use crate::lattice::{GaussianCdf, JointCdf, ProductCdf};
use crate::metrics::{evaluate, EvalGrid, ReplicationRow};
use crate::parametric::{fit, FitOptions, ParamVector};
use crate::semiparametric::{grid_inversion_fit, kernel_smoothing_fit, FirstStage, GridInversionConfig, KernelConfig};
use crate::simulation::{generate, DgpSpec, ErrorLaw};

/// Seeds for replications `0..reps`.
pub fn replication_seeds(base_seed: u64, reps: usize) -> Vec<u64> {
    (0..reps as u64).map(|r| derive_seed(base_seed, r)).collect()
}

/// Runs `job(r, seed)` for every replication on `workers` threads.
pub fn run_replications<T, F>(base_seed: u64, reps: usize, workers: usize, job: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize, u64) -> T + Sync,
{
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::Pool(e.to_string()))?;
    let seeds = replication_seeds(base_seed, reps);
    Ok(pool.install(|| seeds.par_iter().enumerate().map(|(r, &s)| job(r, s)).collect()))
}

fn with_seed(spec: &DgpSpec, seed: u64) -> DgpSpec {
    DgpSpec { seed, ..spec.clone() }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParametricReplication {
    pub replicate: usize,
    pub seed: u64,
    /// Flat estimate (beta, thresholds, rho), absent if the fit failed.
    pub estimate: Option<Vec<f64>>,
    pub se: Option<Vec<f64>>,
    pub converged: bool,
    pub loglik: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterSummary {
    pub label: String,
    pub truth: f64,
    /// `None` when no replication converged (`sd` also needs two).
    pub mean: Option<f64>,
    pub sd: Option<f64>,
    /// Mean reported standard error, when standard errors were computed.
    pub mean_se: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParametricStudy {
    pub n: usize,
    pub replications: Vec<ParametricReplication>,
    /// Over converged replications only.
    pub summary: Vec<ParameterSummary>,
    pub failures: usize,
}

/// Simulates `reps` datasets of size `n` from `spec` and fits each by
/// maximum likelihood, started at the truth.
pub fn parametric_study(
    spec: &DgpSpec,
    n: usize,
    reps: usize,
    base_seed: u64,
    workers: usize,
    opts: &FitOptions,
) -> Result<ParametricStudy> {
    let truth = ParamVector::from_dgp(spec)?;
    let labels = truth.labels(&spec.columns);
    let replications = run_replications(base_seed, reps, workers, |r, seed| {
        let attempt = generate(&with_seed(spec, seed), n).and_then(|data| fit(&data, Some(&truth), opts));
        match attempt {
            Ok(f) => ParametricReplication {
                replicate: r,
                seed,
                estimate: Some(f.estimate.to_flat()),
                se: f.se,
                converged: f.converged,
                loglik: Some(f.loglik),
                error: None,
            },
            Err(e) => ParametricReplication {
                replicate: r,
                seed,
                estimate: None,
                se: None,
                converged: false,
                loglik: None,
                error: Some(e.to_string()),
            },
        }
    })?;

    let ok: Vec<&ParametricReplication> = replications.iter().filter(|r| r.converged).collect();
    let failures = replications.len() - ok.len();
    let flat = truth.to_flat();
    let summary = labels
        .iter()
        .enumerate()
        .map(|(k, label)| {
            let vals: Vec<f64> = ok.iter().filter_map(|r| r.estimate.as_ref().map(|e| e[k])).collect();
            let (mean, sd) = crate::metrics::mean_sd(&vals);
            let ses: Vec<f64> = ok.iter().filter_map(|r| r.se.as_ref().map(|s| s[k])).collect();
            let mean_se = (!ses.is_empty()).then(|| ses.iter().sum::<f64>() / ses.len() as f64);
            ParameterSummary {
                label: label.clone(),
                truth: flat[k],
                mean,
                sd,
                mean_se,
            }
        })
        .collect();
    Ok(ParametricStudy {
        n,
        replications,
        summary,
        failures,
    })
}

impl ParametricStudy {
    /// One row per replication: estimates then standard errors.
    pub fn replications_csv(&self, labels: &[String]) -> String {
        let mut out = String::from("replicate,seed,converged,loglik");
        for l in labels {
            let _ = write!(out, ",{l}");
        }
        for l in labels {
            let _ = write!(out, ",se_{l}");
        }
        out.push_str(",error\n");
        for r in &self.replications {
            let _ = write!(out, "{},{},{},", r.replicate, r.seed, r.converged);
            if let Some(ll) = r.loglik {
                let _ = write!(out, "{ll}");
            }
            for k in 0..labels.len() {
                out.push(',');
                if let Some(e) = &r.estimate {
                    let _ = write!(out, "{}", e[k]);
                }
            }
            for k in 0..labels.len() {
                out.push(',');
                if let Some(s) = &r.se {
                    let _ = write!(out, "{}", s[k]);
                }
            }
            out.push(',');
            if let Some(e) = &r.error {
                out.push_str(&e.replace([',', '\n'], ";"));
            }
            out.push('\n');
        }
        out
    }

    pub fn summary_csv(&self) -> String {
        let mut out = String::from("parameter,truth,mean,sd,mean_se\n");
        for s in &self.summary {
            let _ = write!(out, "{},{}", s.label, s.truth);
            for v in [s.mean, s.sd, s.mean_se] {
                out.push(',');
                if let Some(v) = v {
                    let _ = write!(out, "{v}");
                }
            }
            out.push('\n');
        }
        out
    }
}

/// The joint CDF of the errors of a specification.
pub fn reference_cdf(spec: &DgpSpec) -> Result<Box<dyn JointCdf>> {
    match &spec.error {
        ErrorLaw::Gaussian { rho } => Ok(Box::new(GaussianCdf::new(*rho)?)),
        ErrorLaw::Independent { margins } => {
            let margins = margins.clone();
            Ok(Box::new(ProductCdf {
                dims: margins.len(),
                marginal: move |d, x| margins[d].cdf(x),
            }))
        }
    }
}

/// Where the second step gets its index coefficients and thresholds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FirstStageSource {
    /// The data-generating values.
    True,
    /// A Gaussian maximum-likelihood fit on each replication.
    Estimated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TwoStepConfig {
    pub first_stage: FirstStageSource,
    pub grid_inversion: Option<GridInversionConfig>,
    /// The kernel seed is replaced by one derived from the replication seed.
    pub kernel: Option<KernelConfig>,
}

impl Default for TwoStepConfig {
    fn default() -> Self {
        TwoStepConfig {
            first_stage: FirstStageSource::True,
            grid_inversion: Some(GridInversionConfig::default()),
            kernel: Some(KernelConfig::default()),
        }
    }
}

pub const GRID_INVERSION: &str = "grid-inversion";
pub const KERNEL: &str = "kernel";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicationFailure {
    pub replicate: usize,
    pub seed: u64,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TwoStepStudy {
    pub rows: Vec<ReplicationRow>,
    /// Replications that errored; the run carries on without them.
    pub failures: Vec<ReplicationFailure>,
}

/// Fits both second-step estimators on each replication and scores them
/// against the true error CDF on `eval`. Rows come in replication order,
/// grid inversion before kernel.
pub fn two_step_study(
    spec: &DgpSpec,
    n: usize,
    reps: usize,
    base_seed: u64,
    workers: usize,
    config: &TwoStepConfig,
    eval: &EvalGrid,
) -> Result<TwoStepStudy> {
    let reference = reference_cdf(spec)?;
    let truth = FirstStage {
        thresholds: (0..spec.dims()).map(|d| spec.lattice.thresholds(d).to_vec()).collect(),
        beta: (0..spec.dims()).map(|d| spec.model.beta(d).to_vec()).collect(),
        rho: None,
    };
    let per_rep = run_replications(base_seed, reps, workers, |r, seed| -> Result<Vec<ReplicationRow>> {
        let data = generate(&with_seed(spec, seed), n)?;
        let first = match config.first_stage {
            FirstStageSource::True => truth.clone(),
            FirstStageSource::Estimated => {
                let opts = FitOptions {
                    standard_errors: None,
                    ..Default::default()
                };
                FirstStage::from(&fit(&data, None, &opts)?.estimate)
            }
        };
        let (lattice, model) = (first.lattice()?, first.model()?);
        let mut rows = Vec::new();
        if let Some(gi) = &config.grid_inversion {
            let f = grid_inversion_fit(&data, &lattice, &model, gi)?;
            rows.push(ReplicationRow::new(GRID_INVERSION, r, &evaluate(&f.grid, reference.as_ref(), eval)?));
        }
        if let Some(kc) = &config.kernel {
            let kc = KernelConfig {
                seed: derive_seed(seed, 0x6b65_726e),
                ..kc.clone()
            };
            let f = kernel_smoothing_fit(&data, &lattice, &model, &kc, None)?;
            rows.push(ReplicationRow::new(KERNEL, r, &evaluate(&f.grid, reference.as_ref(), eval)?));
        }
        Ok(rows)
    })?;
    let seeds = replication_seeds(base_seed, reps);
    let mut study = TwoStepStudy {
        rows: Vec::new(),
        failures: Vec::new(),
    };
    for (r, rep) in per_rep.into_iter().enumerate() {
        match rep {
            Ok(rows) => study.rows.extend(rows),
            Err(e) => study.failures.push(ReplicationFailure {
                replicate: r,
                seed: seeds[r],
                error: e.to_string(),
            }),
        }
    }
    Ok(study)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulation::BuiltinDgp;

    #[test]
    fn seeds_are_distinct_and_stable() {
        let a = replication_seeds(42, 100);
        let b = replication_seeds(42, 100);
        assert_eq!(a, b);
        let mut s = a.clone();
        s.sort_unstable();
        s.dedup();
        assert_eq!(s.len(), 100);
        assert_ne!(replication_seeds(43, 1), a[..1]);
    }

    #[test]
    fn thread_count_does_not_change_results() {
        let spec = BuiltinDgp::ParamDesign1.spec(0);
        let opts = FitOptions {
            standard_errors: None,
            ..Default::default()
        };
        let one = parametric_study(&spec, 300, 4, 9, 1, &opts).unwrap();
        let three = parametric_study(&spec, 300, 4, 9, 3, &opts).unwrap();
        assert_eq!(one, three);
        assert_eq!(one.failures, 0);
        assert_eq!(one.summary.len(), 5);
        let csv = one.replications_csv(&one.summary.iter().map(|s| s.label.clone()).collect::<Vec<_>>());
        assert_eq!(csv.lines().count(), 5);
    }

    #[test]
    fn two_step_rows_in_order() {
        let spec = BuiltinDgp::TwoStep.spec(0);
        let config = TwoStepConfig {
            grid_inversion: Some(GridInversionConfig {
                max_iter: 5,
                ..Default::default()
            }),
            ..Default::default()
        };
        let eval = EvalGrid {
            axis1: vec![-1.0, 0.0, 1.0],
            axis2: vec![-1.0, 0.0, 1.0],
        };
        let study = two_step_study(&spec, 200, 2, 1, 2, &config, &eval).unwrap();
        assert!(study.failures.is_empty());
        let rows = study.rows;
        let tags: Vec<(&str, usize)> = rows.iter().map(|r| (r.method.as_str(), r.replicate)).collect();
        assert_eq!(tags, vec![(GRID_INVERSION, 0), (KERNEL, 0), (GRID_INVERSION, 1), (KERNEL, 1)]);
        assert!(rows.iter().all(|r| r.rmse.is_finite() && r.rmse < 0.5));
    }
}
