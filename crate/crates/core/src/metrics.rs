//! Distances between an estimated CDF grid and a reference joint CDF.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lattice::JointCdf;
use crate::semiparametric::CdfGrid;

/// Evaluation points: the tensor product of two axes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalGrid {
    pub axis1: Vec<f64>,
    pub axis2: Vec<f64>,
}

impl EvalGrid {
    /// The 80 x 80 grid on [-2.5, 2.5]^2.
    pub fn standard() -> Self {
        let a = crate::semiparametric::evaluation_axis();
        EvalGrid {
            axis1: a.clone(),
            axis2: a,
        }
    }

    pub fn len(&self) -> usize {
        self.axis1.len() * self.axis2.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn points(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.axis1.iter().flat_map(move |&a| self.axis2.iter().map(move |&b| (a, b)))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub rmse: f64,
    pub ks: f64,
    pub cvm: f64,
    /// Pearson correlation; `None` when either side is constant on the grid.
    pub correlation: Option<f64>,
    pub grid_points: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub replicate: Option<usize>,
}

/// Metrics from paired values (estimate, reference).
pub fn from_pairs(pairs: &[(f64, f64)]) -> Result<MetricsReport> {
    if pairs.is_empty() {
        return Err(Error::InvalidConfig("empty evaluation grid".into()));
    }
    let g = pairs.len() as f64;
    let mut sq = 0.0;
    let mut ks = 0.0f64;
    for &(e, r) in pairs {
        if !(e.is_finite() && r.is_finite()) {
            return Err(Error::NotANumber("CDF value in metrics"));
        }
        let d = e - r;
        sq += d * d;
        ks = ks.max(d.abs());
    }
    let cvm = sq / g;
    let (me, mr) = pairs.iter().fold((0.0, 0.0), |(a, b), &(e, r)| (a + e / g, b + r / g));
    let (mut see, mut srr, mut ser) = (0.0, 0.0, 0.0);
    for &(e, r) in pairs {
        see += (e - me) * (e - me);
        srr += (r - mr) * (r - mr);
        ser += (e - me) * (r - mr);
    }
    let correlation = (see > 0.0 && srr > 0.0).then(|| (ser / (see * srr).sqrt()).clamp(-1.0, 1.0));
    Ok(MetricsReport {
        rmse: cvm.sqrt(),
        ks,
        cvm,
        correlation,
        grid_points: pairs.len(),
        replicate: None,
    })
}

/// Compares `estimate` (bilinearly interpolated off its nodes) with the
/// exact `reference` at every point of `grid`.
pub fn evaluate(estimate: &CdfGrid, reference: &dyn JointCdf, grid: &EvalGrid) -> Result<MetricsReport> {
    if reference.dims() != 2 {
        return Err(Error::DimensionMismatch("reference CDF must be bivariate".into()));
    }
    let pairs: Vec<(f64, f64)> = grid
        .points()
        .map(|(a, b)| (estimate.interpolate(a, b), reference.cdf(&[a, b])))
        .collect();
    from_pairs(&pairs)
}

/// One per-replication CSV row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicationRow {
    pub method: String,
    pub replicate: usize,
    pub rmse: f64,
    pub ks: f64,
    pub cvm: f64,
    pub corr: Option<f64>,
}

impl ReplicationRow {
    pub fn new(method: &str, replicate: usize, m: &MetricsReport) -> Self {
        ReplicationRow {
            method: method.to_string(),
            replicate,
            rmse: m.rmse,
            ks: m.ks,
            cvm: m.cvm,
            corr: m.correlation,
        }
    }
}

/// Means and standard deviations across replications for one method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub method: String,
    pub replications: usize,
    pub rmse_mean: f64,
    pub rmse_sd: Option<f64>,
    pub ks_mean: f64,
    pub ks_sd: Option<f64>,
    pub cvm_mean: f64,
    pub cvm_sd: Option<f64>,
    /// Over replications where the correlation is defined.
    pub corr_mean: Option<f64>,
    pub corr_sd: Option<f64>,
}

/// Mean and sample standard deviation (None below two values).
pub fn mean_sd(v: &[f64]) -> (Option<f64>, Option<f64>) {
    if v.is_empty() {
        return (None, None);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let sd = (v.len() > 1).then(|| (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt());
    (Some(mean), sd)
}

/// Aggregates rows by method, in order of first appearance.
pub fn aggregate(rows: &[ReplicationRow]) -> Vec<AggregateRow> {
    let mut methods: Vec<&str> = Vec::new();
    for r in rows {
        if !methods.contains(&r.method.as_str()) {
            methods.push(&r.method);
        }
    }
    methods
        .into_iter()
        .map(|m| {
            let sel: Vec<&ReplicationRow> = rows.iter().filter(|r| r.method == m).collect();
            let col = |f: fn(&ReplicationRow) -> f64| mean_sd(&sel.iter().map(|r| f(r)).collect::<Vec<_>>());
            let (rmse_mean, rmse_sd) = col(|r| r.rmse);
            let (ks_mean, ks_sd) = col(|r| r.ks);
            let (cvm_mean, cvm_sd) = col(|r| r.cvm);
            let (corr_mean, corr_sd) = mean_sd(&sel.iter().filter_map(|r| r.corr).collect::<Vec<_>>());
            AggregateRow {
                method: m.to_string(),
                replications: sel.len(),
                rmse_mean: rmse_mean.unwrap_or(f64::NAN),
                rmse_sd,
                ks_mean: ks_mean.unwrap_or(f64::NAN),
                ks_sd,
                cvm_mean: cvm_mean.unwrap_or(f64::NAN),
                cvm_sd,
                corr_mean,
                corr_sd,
            }
        })
        .collect()
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x}")).unwrap_or_default()
}

fn create(path: &Path) -> Result<std::fs::File> {
    std::fs::File::create(path).map_err(|e| Error::io(path, e))
}

/// `method,replicate,rmse,ks,cvm,corr`; undefined correlations are empty.
pub fn write_replications(path: &Path, rows: &[ReplicationRow]) -> Result<()> {
    let mut out = String::from("method,replicate,rmse,ks,cvm,corr\n");
    for r in rows {
        out.push_str(&format!("{},{},{},{},{},{}\n", r.method, r.replicate, r.rmse, r.ks, r.cvm, opt(r.corr)));
    }
    create(path)?.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}

pub fn read_replications(path: &Path) -> Result<Vec<ReplicationRow>> {
    let mut reader = csv::Reader::from_path(path)?;
    let header: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
    if header != ["method", "replicate", "rmse", "ks", "cvm", "corr"] {
        return Err(Error::Schema(format!(
            "{}: expected header method,replicate,rmse,ks,cvm,corr",
            path.display()
        )));
    }
    let mut rows = Vec::new();
    for rec in reader.records() {
        let rec = rec?;
        let num = |i: usize| -> Result<f64> {
            rec[i]
                .parse()
                .map_err(|_| Error::Schema(format!("{}: bad number `{}`", path.display(), &rec[i])))
        };
        rows.push(ReplicationRow {
            method: rec[0].to_string(),
            replicate: rec[1]
                .parse()
                .map_err(|_| Error::Schema(format!("{}: bad replicate `{}`", path.display(), &rec[1])))?,
            rmse: num(2)?,
            ks: num(3)?,
            cvm: num(4)?,
            corr: if rec[5].is_empty() { None } else { Some(num(5)?) },
        });
    }
    Ok(rows)
}

/// Aggregate table with separate mean and SD columns; SDs are empty for a
/// single replication.
pub fn write_aggregate(path: &Path, rows: &[AggregateRow]) -> Result<()> {
    let mut out = String::from("method,replications,rmse,rmse_sd,ks,ks_sd,cvm,cvm_sd,corr,corr_sd\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            r.method,
            r.replications,
            r.rmse_mean,
            opt(r.rmse_sd),
            r.ks_mean,
            opt(r.ks_sd),
            r.cvm_mean,
            opt(r.cvm_sd),
            opt(r.corr_mean),
            opt(r.corr_sd)
        ));
    }
    create(path)?.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}
