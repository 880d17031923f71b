//! Files: dataset CSVs with a JSON sidecar, first-stage parameters, and
//! run manifests.

use std::collections::HashMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::lattice::{CellIndex, Dataset, DesignMatrix};
use crate::semiparametric::FirstStage;
use crate::simulation::{CovariateRole, DgpSpec};

/// Maps CSV columns onto the model. Outcome columns are `y1`, `y2`, ...
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    /// Covariate columns entering each dimension, in coefficient order.
    pub dimensions: Vec<Vec<String>>,
    /// Columns that enter exactly one dimension.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exclusive: Option<Vec<String>>,
    /// Raw outcome values per dimension, lowest category first. Without it
    /// outcomes must already be the integers 1, 2, ...
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub levels: Option<Vec<Vec<String>>>,
}

impl Sidecar {
    /// Sidecar for a simulated dataset written by [`write_dataset`].
    pub fn for_spec(spec: &DgpSpec) -> Self {
        let dimensions = spec
            .columns
            .iter()
            .enumerate()
            .map(|(d, cols)| cols.iter().map(|c| column_label(d, c)).collect())
            .collect();
        let exclusive = spec
            .columns
            .iter()
            .enumerate()
            .flat_map(|(d, cols)| cols.iter().map(move |c| (d, c)))
            .filter(|(_, c)| spec.covariate(c).and_then(|s| s.role) == Some(CovariateRole::Exclusive))
            .map(|(d, c)| column_label(d, c))
            .collect();
        Sidecar {
            dimensions,
            exclusive: Some(exclusive),
            levels: None,
        }
    }
}

impl Sidecar {
    /// Exclusive columns under the names [`read_dataset`] gives them.
    pub fn dataset_exclusive(&self) -> Option<Vec<String>> {
        let ex = self.exclusive.as_ref()?;
        Some(
            ex.iter()
                .map(|c| {
                    let d = self.dimensions.iter().position(|cols| cols.contains(c));
                    d.and_then(|d| c.strip_prefix(&format!("x{}_", d + 1)))
                        .unwrap_or(c)
                        .to_string()
                })
                .collect(),
        )
    }
}

/// CSV column label of a covariate in dimension `d` (0-based).
pub fn column_label(d: usize, name: &str) -> String {
    format!("x{}_{name}", d + 1)
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Schema(format!("{}: {e}", path.display())))
}

/// Pretty JSON with a trailing newline.
pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_bytes(path, text.as_bytes())
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

/// Header `y1,y2,<dimension-1 columns>,<dimension-2 columns>`; covariate
/// names get an `x<d>_` prefix.
pub fn write_dataset(path: &Path, data: &Dataset) -> Result<()> {
    let mut header: Vec<String> = (1..=data.dims()).map(|d| format!("y{d}")).collect();
    for (d, cols) in data.column_names().iter().enumerate() {
        header.extend(cols.iter().map(|c| column_label(d, c)));
    }
    let mut out = header.join(",");
    out.push('\n');
    for i in 0..data.n() {
        let mut fields: Vec<String> = data.outcome(i).0.iter().map(|j| j.to_string()).collect();
        for d in 0..data.dims() {
            fields.extend(data.x(i, d).iter().map(|v| format!("{v}")));
        }
        out.push_str(&fields.join(","));
        out.push('\n');
    }
    write_bytes(path, out.as_bytes())
}

/// Sidecar inferred from `x<d>_<name>` headers.
fn infer_sidecar(header: &[String]) -> Result<Sidecar> {
    let dims = header.iter().filter(|h| h.starts_with('y')).count();
    let mut dimensions = vec![Vec::new(); dims];
    for h in header {
        if h.starts_with('y') {
            continue;
        }
        let parsed = h
            .strip_prefix('x')
            .and_then(|r| r.split_once('_'))
            .and_then(|(d, _)| d.parse::<usize>().ok())
            .filter(|d| (1..=dims).contains(d));
        match parsed {
            Some(d) => dimensions[d - 1].push(h.clone()),
            None => {
                return Err(Error::Schema(format!(
                    "column `{h}` is not of the form x<d>_<name>; supply a sidecar mapping columns to dimensions"
                )))
            }
        }
    }
    Ok(Sidecar {
        dimensions,
        exclusive: None,
        levels: None,
    })
}

/// Reads a dataset. Column names inside the returned dataset drop the
/// `x<d>_` prefix when present.
pub fn read_dataset(path: &Path, sidecar: Option<&Sidecar>) -> Result<(Dataset, Sidecar)> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| match e.kind() {
        csv::ErrorKind::Io(_) => Error::io(path, std::io::Error::other(e.to_string())),
        _ => Error::Csv(e),
    })?;
    let header: Vec<String> = reader.headers()?.iter().map(|h| h.trim().to_string()).collect();
    let sidecar = match sidecar {
        Some(s) => s.clone(),
        None => infer_sidecar(&header)?,
    };
    let dims = sidecar.dimensions.len();
    if dims < 2 {
        return Err(Error::Schema(format!("{}: need at least two outcome dimensions", path.display())));
    }
    let position: HashMap<&str, usize> = header.iter().enumerate().map(|(i, h)| (h.as_str(), i)).collect();
    let find = |name: &str| -> Result<usize> {
        position
            .get(name)
            .copied()
            .ok_or_else(|| Error::Schema(format!("{}: missing column `{name}`", path.display())))
    };
    let y_cols: Vec<usize> = (1..=dims).map(|d| find(&format!("y{d}"))).collect::<Result<_>>()?;
    let x_cols: Vec<Vec<usize>> = sidecar
        .dimensions
        .iter()
        .map(|cols| cols.iter().map(|c| find(c)).collect::<Result<Vec<_>>>())
        .collect::<Result<_>>()?;
    if let Some(ex) = &sidecar.exclusive {
        for c in ex {
            let uses = sidecar.dimensions.iter().filter(|cols| cols.contains(c)).count();
            if uses != 1 {
                return Err(Error::Schema(format!(
                    "{}: exclusive column `{c}` enters {uses} dimensions",
                    path.display()
                )));
            }
        }
    }
    if let Some(levels) = &sidecar.levels {
        if levels.len() != dims {
            return Err(Error::Schema(format!(
                "{}: levels given for {} dimensions, expected {dims}",
                path.display(),
                levels.len()
            )));
        }
    }

    let mut outcomes = Vec::new();
    let mut values: Vec<Vec<f64>> = vec![Vec::new(); dims];
    for (r, rec) in reader.records().enumerate() {
        let rec = rec?;
        let line = r + 2;
        let mut cell = Vec::with_capacity(dims);
        for (d, &c) in y_cols.iter().enumerate() {
            let raw = rec.get(c).unwrap_or("").trim();
            let j = match &sidecar.levels {
                Some(levels) => levels[d].iter().position(|l| l == raw).map(|p| p + 1),
                None => raw.parse::<usize>().ok().filter(|j| *j >= 1),
            };
            let j = j.ok_or_else(|| {
                Error::Schema(format!(
                    "{}: line {line}, column `{}`: `{raw}` is not a valid category",
                    path.display(),
                    header[c]
                ))
            })?;
            cell.push(j);
        }
        outcomes.push(CellIndex::new(cell));
        for (d, cols) in x_cols.iter().enumerate() {
            for &c in cols {
                let raw = rec.get(c).unwrap_or("").trim();
                let v: f64 = raw.parse().ok().filter(|v: &f64| v.is_finite()).ok_or_else(|| {
                    Error::Schema(format!(
                        "{}: line {line}, column `{}`: `{raw}` is not a finite number",
                        path.display(),
                        header[c]
                    ))
                })?;
                values[d].push(v);
            }
        }
    }
    let n = outcomes.len();
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    let covariates = values
        .into_iter()
        .zip(&sidecar.dimensions)
        .map(|(v, cols)| DesignMatrix::new(n, cols.len(), v))
        .collect::<Result<Vec<_>>>()?;
    let names = sidecar
        .dimensions
        .iter()
        .enumerate()
        .map(|(d, cols)| {
            let prefix = format!("x{}_", d + 1);
            cols.iter()
                .map(|c| c.strip_prefix(&prefix).unwrap_or(c).to_string())
                .collect()
        })
        .collect();
    Ok((Dataset::new(covariates, outcomes, Some(names))?, sidecar))
}

/// First-stage input: either the parameters directly or a parametric fit
/// file, whose `estimate` is used.
#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
enum FirstStageFile {
    Fit { estimate: FirstStage },
    Direct(FirstStage),
}

pub fn read_first_stage(path: &Path) -> Result<FirstStage> {
    let f: FirstStageFile = read_json(path).map_err(|e| match e {
        Error::Schema(m) => Error::Schema(format!(
            "{m}; expected {{\"thresholds\": [[..], [..]], \"beta\": [[..], [..]], \"rho\": optional}} or a fit.json"
        )),
        other => other,
    })?;
    let fs = match f {
        FirstStageFile::Fit { estimate } => estimate,
        FirstStageFile::Direct(fs) => fs,
    };
    fs.lattice()?;
    fs.model()?;
    Ok(fs)
}

/// Hex SHA-256 of a file's bytes.
pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestFile {
    pub name: String,
    pub sha256: String,
}

/// What was run and what it wrote; no timestamps so reruns match byte for byte.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub arguments: serde_json::Value,
    pub base_seed: u64,
    /// Seeds actually used, in replication order.
    pub seeds: Vec<u64>,
    pub files: Vec<ManifestFile>,
}

impl Manifest {
    pub fn new(command: &str, arguments: serde_json::Value, base_seed: u64, seeds: Vec<u64>) -> Self {
        Manifest {
            tool: "ordlat".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            arguments,
            base_seed,
            seeds,
            files: Vec::new(),
        }
    }

    /// Records the hashes of `names` inside `dir` and writes `manifest.json`.
    pub fn finish(mut self, dir: &Path, names: &[&str]) -> Result<PathBuf> {
        for name in names {
            self.files.push(ManifestFile {
                name: name.to_string(),
                sha256: sha256_file(&dir.join(name))?,
            });
        }
        let path = dir.join("manifest.json");
        write_json(&path, &self)?;
        Ok(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulation::{builtin_dgp, BuiltinDgp};

    #[test]
    fn dataset_round_trip() {
        let (spec, data) = builtin_dgp(BuiltinDgp::Semiparam4, 50, 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("data.csv");
        write_dataset(&p, &data).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("y1,y2,x1_excl1,x1_common2,x2_excl2,x2_common2\n"));
        let (back, inferred) = read_dataset(&p, None).unwrap();
        assert_eq!(back, data);
        let side = Sidecar::for_spec(&spec);
        assert_eq!(side.dimensions, inferred.dimensions);
        assert_eq!(side.exclusive.as_deref(), Some(&["x1_excl1".to_string(), "x2_excl2".to_string()][..]));
        let (again, _) = read_dataset(&p, Some(&side)).unwrap();
        assert_eq!(again, data);
        assert_eq!(side.dataset_exclusive().unwrap(), vec!["excl1".to_string(), "excl2".to_string()]);
    }

    #[test]
    fn named_columns_with_levels() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("app.csv");
        std::fs::write(&p, "y1,y2,age,income,smoker\nlow,no,30,1.5,0\nhigh,yes,41,2.0,1\nmid,no,25,0.7,1\n").unwrap();
        let side: Sidecar = serde_json::from_str(
            r#"{"dimensions": [["age", "income"], ["age", "smoker"]],
                "exclusive": ["income", "smoker"],
                "levels": [["low", "mid", "high"], ["no", "yes"]]}"#,
        )
        .unwrap();
        let (data, _) = read_dataset(&p, Some(&side)).unwrap();
        assert_eq!(data.outcome(1).0, vec![3, 2]);
        assert_eq!(data.x(2, 0), &[25.0, 0.7]);
        assert_eq!(data.column_names()[1], vec!["age".to_string(), "smoker".to_string()]);
    }

    #[test]
    fn schema_errors_name_the_column() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.csv");
        std::fs::write(&p, "y1,y2,x1_a,x2_a\n1,1,0.5,abc\n").unwrap();
        let e = read_dataset(&p, None).unwrap_err().to_string();
        assert!(e.contains("x2_a") && e.contains("line 2"), "{e}");
        std::fs::write(&p, "y1,y2,x1_a,x2_a\n0,1,0.5,1\n").unwrap();
        let e = read_dataset(&p, None).unwrap_err().to_string();
        assert!(e.contains("`y1`"), "{e}");
        std::fs::write(&p, "y1,y2,age\n1,1,3\n").unwrap();
        assert!(matches!(read_dataset(&p, None), Err(Error::Schema(_))));
        let side = Sidecar {
            dimensions: vec![vec!["age".into()], vec!["weight".into()]],
            exclusive: None,
            levels: None,
        };
        let e = read_dataset(&p, Some(&side)).unwrap_err().to_string();
        assert!(e.contains("missing column `weight`"), "{e}");
    }

    #[test]
    fn first_stage_forms() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("fs.json");
        std::fs::write(&p, r#"{"thresholds": [[-1, 1], [0.5]], "beta": [[0.8], [-0.5]]}"#).unwrap();
        let fs = read_first_stage(&p).unwrap();
        assert_eq!(fs.rho, None);
        assert_eq!(fs.thresholds[1], vec![0.5]);
        std::fs::write(
            &p,
            r#"{"estimate": {"beta": [[0.8], [-0.5]], "thresholds": [[-1, 1], [0.5]], "rho": 0.3}, "loglik": -1.0}"#,
        )
        .unwrap();
        assert_eq!(read_first_stage(&p).unwrap().rho, Some(0.3));
        std::fs::write(&p, r#"{"beta": [[1]]}"#).unwrap();
        assert!(matches!(read_first_stage(&p), Err(Error::Schema(_))));
    }

    #[test]
    fn manifest_hashes() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("a.txt"), "abc").unwrap();
        let m = Manifest::new("simulate", serde_json::json!({"n": 3}), 7, vec![7]);
        let p = m.finish(dir.path(), &["a.txt"]).unwrap();
        let back: Manifest = read_json(&p).unwrap();
        assert_eq!(
            back.files[0].sha256,
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }
}
