use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{json, Value};

use ordlat::diagnostics::{classify_data, classify_spec};
use ordlat::io::{self, Manifest, Sidecar};
use ordlat::lattice::{GaussianCdf, JointCdf};
use ordlat::metrics::{aggregate, evaluate, read_replications, write_aggregate, write_replications, EvalGrid};
use ordlat::montecarlo::{parametric_study, reference_cdf, replication_seeds, two_step_study, TwoStepConfig};
use ordlat::parametric::{fit as fit_parametric, FitOptions, ParamVector};
use ordlat::semiparametric::{
    grid_inversion_fit, kernel_smoothing_fit, sieve_mle_fit, CdfGrid, GridInversionConfig, KernelConfig,
    SieveConfig,
};
use ordlat::simulation::{generate, BuiltinDgp, DgpSpec};

use crate::failure::{usage, Failure};
use crate::{DiagnoseArgs, Estimator, FitArgs, MetricsArgs, MonteCarloArgs, SimulateArgs, Source, VerifyArgs};

type Outcome = Result<(), Failure>;

fn builtin(id: &str) -> Result<BuiltinDgp, Failure> {
    id.parse().map_err(|e: ordlat::Error| usage(e.to_string()))
}

fn read_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T, Failure> {
    match path {
        Some(p) => Ok(io::read_json(p)?),
        None => Ok(T::default()),
    }
}

/// The design and whether it is one of the builtin ones.
fn load_spec(source: &Source, seed: Option<u64>) -> Result<(Option<BuiltinDgp>, DgpSpec), Failure> {
    match (&source.dgp, &source.config) {
        (Some(id), _) => {
            let id = builtin(id)?;
            Ok((Some(id), id.spec(seed.unwrap_or(0))))
        }
        (None, Some(path)) => {
            let mut spec: DgpSpec = io::read_json(path)?;
            spec.validate().with_context(|| format!("design specification {}", path.display()))?;
            if let Some(s) = seed {
                spec.seed = s;
            }
            Ok((None, spec))
        }
        (None, None) => Err(usage("give a design with --dgp <id> or --config <spec.json>")),
    }
}

fn out_dir(path: &Path) -> Result<(), Failure> {
    std::fs::create_dir_all(path)
        .with_context(|| format!("cannot create output directory {}", path.display()))
        .map_err(Failure::Data)
}

fn write_json<T: Serialize + ?Sized>(dir: &Path, name: &str, value: &T) -> Result<(), Failure> {
    Ok(io::write_json(&dir.join(name), value)?)
}

fn write_text(dir: &Path, name: &str, text: &str) -> Result<(), Failure> {
    Ok(io::write_bytes(&dir.join(name), text.as_bytes())?)
}

fn path_arg(p: &Option<PathBuf>) -> Value {
    p.as_ref().map(|p| json!(p.display().to_string())).unwrap_or(Value::Null)
}

pub fn simulate(a: SimulateArgs) -> Outcome {
    if a.n == 0 {
        return Err(usage("--n must be at least 1"));
    }
    let (_, spec) = load_spec(&a.source, a.seed)?;
    let data = generate(&spec, a.n)?;
    out_dir(&a.out)?;
    io::write_dataset(&a.out.join("data.csv"), &data)?;
    write_json(&a.out, "sidecar.json", &Sidecar::for_spec(&spec))?;
    write_json(&a.out, "spec.json", &spec)?;
    let args = json!({"dgp": a.source.dgp, "config": path_arg(&a.source.config), "n": a.n});
    Manifest::new("simulate", args, spec.seed, vec![spec.seed]).finish(&a.out, &["data.csv", "sidecar.json", "spec.json"])?;
    println!("wrote {} rows to {}", data.n(), a.out.join("data.csv").display());
    Ok(())
}

fn reference_for(rho: Option<f64>, dgp: Option<&str>) -> Result<Option<Box<dyn JointCdf>>, Failure> {
    match (rho, dgp) {
        (Some(r), _) => Ok(Some(Box::new(GaussianCdf::new(r).map_err(|e| usage(e.to_string()))?))),
        (None, Some(id)) => Ok(Some(reference_cdf(&builtin(id)?.spec(0))?)),
        (None, None) => Ok(None),
    }
}

/// Fit JSON without the (separately written) grid.
fn without_grid<T: Serialize>(fit: &T) -> Result<Value, Failure> {
    let mut v = serde_json::to_value(fit).context("serializing fit").map_err(Failure::Data)?;
    if let Some(obj) = v.as_object_mut() {
        obj.remove("grid");
    }
    Ok(v)
}

pub fn fit(a: FitArgs) -> Outcome {
    let sidecar: Option<Sidecar> = a.sidecar.as_deref().map(io::read_json).transpose()?;
    let (data, _) = io::read_dataset(&a.data, sidecar.as_ref())?;
    let first_stage = a.first_stage.as_deref().map(io::read_first_stage).transpose()?;
    let reference = reference_for(a.reference_rho, a.dgp.as_deref())?;
    out_dir(&a.out)?;
    let mut files = vec!["fit.json"];
    let mut stalled = None;

    let grid: Option<CdfGrid> = match a.estimator {
        Estimator::Parametric => {
            let opts: FitOptions = read_config(a.config.as_deref())?;
            let init: Option<ParamVector> = match &first_stage {
                Some(fs) => Some(ParamVector::new(fs.beta.clone(), fs.thresholds.clone(), fs.rho.unwrap_or(0.0))?),
                None => None,
            };
            let res = fit_parametric(&data, init.as_ref(), &opts)?;
            write_json(&a.out, "fit.json", &res)?;
            let mut csv = String::from("parameter,estimate,se\n");
            for (k, (label, v)) in res.labels.iter().zip(res.estimate.to_flat()).enumerate() {
                let se = res.se.as_ref().map(|s| s[k].to_string()).unwrap_or_default();
                let _ = writeln!(csv, "{label},{v},{se}");
            }
            write_text(&a.out, "coefficients.csv", &csv)?;
            files.push("coefficients.csv");
            if !res.converged {
                stalled = Some(format!("optimizer stopped with {:?} after {} iterations", res.stop, res.iterations));
            }
            None
        }
        Estimator::GridInversion | Estimator::Kernel => {
            let fs = first_stage
                .as_ref()
                .ok_or_else(|| usage("--first-stage is required for the two-step estimators"))?;
            let (lattice, model) = (fs.lattice()?, fs.model()?);
            if a.estimator == Estimator::GridInversion {
                let config: GridInversionConfig = read_config(a.config.as_deref())?;
                let f = grid_inversion_fit(&data, &lattice, &model, &config)?;
                write_json(&a.out, "fit.json", &without_grid(&f)?)?;
                if !f.converged {
                    stalled = Some(format!("grid inversion reached {} iterations", f.iterations));
                }
                Some(f.grid)
            } else {
                let mut config: KernelConfig = read_config(a.config.as_deref())?;
                if let Some(s) = a.seed {
                    config.seed = s;
                }
                let f = kernel_smoothing_fit(&data, &lattice, &model, &config, None)?;
                write_json(&a.out, "fit.json", &without_grid(&f)?)?;
                Some(f.grid)
            }
        }
        Estimator::Sieve => {
            let mut config: SieveConfig = read_config(a.config.as_deref())?;
            if config.init.is_none() {
                config.init = first_stage.clone();
            }
            let categories = match &config.init {
                Some(fs) => fs.thresholds.iter().map(|t| t.len() + 1).collect(),
                None => data.max_categories(),
            };
            let f = sieve_mle_fit(&data, &categories, &config)?;
            write_json(&a.out, "fit.json", &without_grid(&f)?)?;
            if !f.converged {
                stalled = Some(format!("sieve stopped after {} outer iterations", f.outer_iterations));
            }
            Some(f.grid)
        }
    };

    if let Some(g) = &grid {
        g.write_csv(&a.out.join("cdf_grid.csv"))?;
        files.push("cdf_grid.csv");
        if let Some(r) = &reference {
            let m = evaluate(g, r.as_ref(), &EvalGrid::standard())?;
            write_json(&a.out, "metrics.json", &m)?;
            files.push("metrics.json");
            println!("rmse {:.6} ks {:.6} cvm {:.6e}", m.rmse, m.ks, m.cvm);
        }
    }
    let args = json!({
        "data": a.data.display().to_string(),
        "sidecar": path_arg(&a.sidecar),
        "estimator": format!("{:?}", a.estimator),
        "config": path_arg(&a.config),
        "first_stage": path_arg(&a.first_stage),
        "reference_rho": a.reference_rho,
        "dgp": a.dgp,
    });
    let seed = a.seed.unwrap_or(0);
    Manifest::new("fit", args, seed, vec![seed]).finish(&a.out, &files)?;
    println!("wrote {}", files.iter().map(|f| a.out.join(f).display().to_string()).collect::<Vec<_>>().join(", "));
    match stalled {
        Some(m) => Err(Failure::Convergence(m)),
        None => Ok(()),
    }
}

pub fn montecarlo(a: MonteCarloArgs) -> Outcome {
    if a.n == 0 || a.reps == 0 || a.workers == 0 {
        return Err(usage("--n, --reps and --workers must be at least 1"));
    }
    let (id, spec) = load_spec(&a.source, None)?;
    let mut estimators = a.estimator.clone();
    if estimators.is_empty() {
        estimators = if id.is_some_and(BuiltinDgp::is_parametric_design) {
            vec![Estimator::Parametric]
        } else {
            vec![Estimator::GridInversion, Estimator::Kernel]
        };
    }
    if estimators.contains(&Estimator::Sieve) {
        return Err(usage("the sieve estimator is available in `fit`, not in `montecarlo`"));
    }
    if estimators.contains(&Estimator::Parametric) && estimators.len() > 1 {
        return Err(usage("run the parametric study separately from the two-step estimators"));
    }
    out_dir(&a.out)?;
    let args = json!({
        "dgp": a.source.dgp,
        "config": path_arg(&a.source.config),
        "n": a.n,
        "reps": a.reps,
        "estimators": estimators.iter().map(|e| format!("{e:?}")).collect::<Vec<_>>(),
        "estimator_config": path_arg(&a.estimator_config),
    });
    let seeds = replication_seeds(a.seed, a.reps);

    let (files, failures, successes) = if estimators == [Estimator::Parametric] {
        let opts: FitOptions = read_config(a.estimator_config.as_deref())?;
        let study = parametric_study(&spec, a.n, a.reps, a.seed, a.workers, &opts)?;
        let labels: Vec<String> = study.summary.iter().map(|s| s.label.clone()).collect();
        write_text(&a.out, "replications.csv", &study.replications_csv(&labels))?;
        write_text(&a.out, "summary.csv", &study.summary_csv())?;
        println!("{:<14} {:>8} {:>10} {:>10}", "parameter", "truth", "mean", "sd");
        for s in &study.summary {
            let show = |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_default();
            println!("{:<14} {:>8} {:>10} {:>10}", s.label, s.truth, show(s.mean), show(s.sd));
        }
        (vec!["replications.csv", "summary.csv"], study.failures, a.reps - study.failures)
    } else {
        let mut config: TwoStepConfig = read_config(a.estimator_config.as_deref())?;
        if !estimators.contains(&Estimator::GridInversion) {
            config.grid_inversion = None;
        } else if config.grid_inversion.is_none() {
            config.grid_inversion = Some(GridInversionConfig::default());
        }
        if !estimators.contains(&Estimator::Kernel) {
            config.kernel = None;
        } else if config.kernel.is_none() {
            config.kernel = Some(KernelConfig::default());
        }
        let study = two_step_study(&spec, a.n, a.reps, a.seed, a.workers, &config, &EvalGrid::standard())?;
        write_replications(&a.out.join("replications.csv"), &study.rows)?;
        let agg = aggregate(&study.rows);
        write_aggregate(&a.out.join("aggregate.csv"), &agg)?;
        let mut files = vec!["replications.csv", "aggregate.csv"];
        if !study.failures.is_empty() {
            let mut csv = String::from("replicate,seed,error\n");
            for f in &study.failures {
                let _ = writeln!(csv, "{},{},{}", f.replicate, f.seed, f.error.replace([',', '\n'], ";"));
            }
            write_text(&a.out, "failures.csv", &csv)?;
            files.push("failures.csv");
        }
        println!("{:<16} {:>6} {:>10} {:>10} {:>12} {:>10}", "method", "reps", "rmse", "ks", "cvm", "corr");
        for r in &agg {
            let corr = r.corr_mean.map(|c| format!("{c:.6}")).unwrap_or_default();
            println!(
                "{:<16} {:>6} {:>10.6} {:>10.6} {:>12.4e} {:>10}",
                r.method, r.replications, r.rmse_mean, r.ks_mean, r.cvm_mean, corr
            );
        }
        (files, study.failures.len(), a.reps - study.failures.len())
    };
    Manifest::new("montecarlo", args, a.seed, seeds).finish(&a.out, &files)?;
    println!("{successes} of {} replications succeeded, {failures} failed", a.reps);
    if successes == 0 {
        return Err(Failure::Convergence("every replication failed".into()));
    }
    Ok(())
}

pub fn diagnose(a: DiagnoseArgs) -> Outcome {
    let report = match &a.data {
        Some(path) => {
            let sidecar: Option<Sidecar> = a.sidecar.as_deref().map(io::read_json).transpose()?;
            let (data, sidecar) = io::read_dataset(path, sidecar.as_ref())?;
            let fs = io::read_first_stage(a.first_stage.as_deref().ok_or_else(|| usage("--first-stage is required with --data"))?)?;
            let exclusive = sidecar.dataset_exclusive();
            classify_data(&data, &fs, exclusive.as_deref())?
        }
        None => classify_spec(&load_spec(&a.source, None)?.1)?,
    };
    let text = report.to_text();
    print!("{text}");
    if let Some(out) = &a.out {
        out_dir(out)?;
        write_json(out, "report.json", &report)?;
        write_text(out, "report.txt", &text)?;
        let args = json!({
            "dgp": a.source.dgp,
            "config": path_arg(&a.source.config),
            "data": path_arg(&a.data),
            "first_stage": path_arg(&a.first_stage),
        });
        Manifest::new("diagnose", args, 0, Vec::new()).finish(out, &["report.json", "report.txt"])?;
    }
    Ok(())
}

pub fn metrics(a: MetricsArgs) -> Outcome {
    let grid = CdfGrid::read_csv(&a.estimate)?;
    let reference = reference_for(a.reference_rho, a.dgp.as_deref())?.ok_or_else(|| usage("give --reference-rho or --dgp"))?;
    let report = evaluate(&grid, reference.as_ref(), &EvalGrid::standard())?;
    match &a.out {
        Some(out) => {
            out_dir(out)?;
            write_json(out, "metrics.json", &report)?;
            println!("wrote {}", out.join("metrics.json").display());
        }
        None => println!("{}", serde_json::to_string_pretty(&report).context("serializing metrics").map_err(Failure::Data)?),
    }
    Ok(())
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-12 * (1.0 + a.abs().max(b.abs()))
}

fn parse_opt(field: &str) -> anyhow::Result<Option<f64>> {
    if field.is_empty() {
        Ok(None)
    } else {
        Ok(Some(field.parse().with_context(|| format!("bad number `{field}`"))?))
    }
}

fn same(a: Option<f64>, b: Option<f64>) -> bool {
    match (a, b) {
        (Some(x), Some(y)) => close(x, y),
        (None, None) => true,
        _ => false,
    }
}

/// Recomputes aggregate.csv from replications.csv; returns mismatches.
fn check_two_step(dir: &Path) -> anyhow::Result<Vec<String>> {
    let rows = read_replications(&dir.join("replications.csv"))?;
    let expect = aggregate(&rows);
    let mut reader = csv::Reader::from_path(dir.join("aggregate.csv"))?;
    let mut bad = Vec::new();
    let mut seen = 0;
    for rec in reader.records() {
        let rec = rec?;
        let method = &rec[0];
        let Some(e) = expect.iter().find(|r| r.method == method) else {
            bad.push(format!("aggregate.csv has method `{method}` with no replications"));
            continue;
        };
        seen += 1;
        let fields = [
            ("replications", Some(e.replications as f64)),
            ("rmse", Some(e.rmse_mean)),
            ("rmse_sd", e.rmse_sd),
            ("ks", Some(e.ks_mean)),
            ("ks_sd", e.ks_sd),
            ("cvm", Some(e.cvm_mean)),
            ("cvm_sd", e.cvm_sd),
            ("corr", e.corr_mean),
            ("corr_sd", e.corr_sd),
        ];
        for (i, (name, want)) in fields.iter().enumerate() {
            let got = parse_opt(&rec[i + 1])?;
            if !same(got, *want) {
                bad.push(format!("{method} {name}: file {got:?}, recomputed {want:?}"));
            }
        }
    }
    if seen != expect.len() {
        bad.push(format!("aggregate.csv lists {seen} methods, replications have {}", expect.len()));
    }
    Ok(bad)
}

/// Recomputes summary.csv means and SDs from replications.csv.
fn check_parametric(dir: &Path) -> anyhow::Result<Vec<String>> {
    let mut reader = csv::Reader::from_path(dir.join("replications.csv"))?;
    let header: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
    let records: Vec<csv::StringRecord> = reader.records().collect::<Result<_, _>>()?;
    let mut summary = csv::Reader::from_path(dir.join("summary.csv"))?;
    let mut bad = Vec::new();
    for rec in summary.records() {
        let rec = rec?;
        let label = &rec[0];
        let col = header
            .iter()
            .position(|h| h == label)
            .ok_or_else(|| anyhow!("replications.csv has no column `{label}`"))?;
        let mut vals = Vec::new();
        for r in &records {
            if &r[2] == "true" {
                vals.extend(parse_opt(&r[col])?);
            }
        }
        let (mean, sd) = ordlat::metrics::mean_sd(&vals);
        if !same(parse_opt(&rec[2])?, mean) || !same(parse_opt(&rec[3])?, sd) {
            bad.push(format!("{label}: summary mean/sd disagree with replications ({mean:?}, {sd:?})"));
        }
    }
    Ok(bad)
}

pub fn verify(a: VerifyArgs) -> Outcome {
    let manifest: Manifest = io::read_json(&a.out.join("manifest.json"))?;
    let mut bad = Vec::new();
    for f in &manifest.files {
        match io::sha256_file(&a.out.join(&f.name)) {
            Ok(h) if h == f.sha256 => println!("ok       {}", f.name),
            Ok(_) => {
                println!("CHANGED  {}", f.name);
                bad.push(format!("{} does not match its recorded hash", f.name));
            }
            Err(e) => {
                println!("MISSING  {}", f.name);
                bad.push(e.to_string());
            }
        }
    }
    let has = |n: &str| manifest.files.iter().any(|f| f.name == n);
    if has("replications.csv") && has("aggregate.csv") {
        let m = check_two_step(&a.out)?;
        println!("{}  aggregate.csv recomputed from replications.csv", if m.is_empty() { "ok     " } else { "MISMATCH" });
        bad.extend(m);
    }
    if has("replications.csv") && has("summary.csv") {
        let m = check_parametric(&a.out)?;
        println!("{}  summary.csv recomputed from replications.csv", if m.is_empty() { "ok     " } else { "MISMATCH" });
        bad.extend(m);
    }
    if bad.is_empty() {
        println!("verified {} ({} files)", a.out.display(), manifest.files.len());
        Ok(())
    } else {
        Err(Failure::Data(anyhow!("verification failed:\n  {}", bad.join("\n  "))))
    }
}
