//! Acceptance suite. Prints one PASS/FAIL line per criterion.
//!
//! `ORDLAT_ACCEPTANCE=1,6,8` runs a subset. By default the process exits
//! successfully after reporting; set `ORDLAT_ACCEPTANCE_STRICT=1` to turn
//! any FAIL into a non-zero exit.

use std::f64::consts::{PI, SQRT_2};
use std::time::{Duration, Instant};

use ordlat::diagnostics::{classify_data, classify_spec, Evidence, Level};
use ordlat::distributions::bivariate_normal_cdf;
use ordlat::lattice::{cell_probability, GaussianCdf};
use ordlat::metrics::{aggregate, EvalGrid};
use ordlat::montecarlo::{parametric_study, two_step_study, TwoStepConfig, GRID_INVERSION, KERNEL};
use ordlat::parametric::{fit, gradient, log_likelihood, FitOptions, ParamVector};
use ordlat::semiparametric::{
    grid_inversion_fit, kernel_smoothing_fit, sieve_mle_fit, FirstStage, GridInversionConfig, KernelConfig,
    SieveConfig, GRID_TOL,
};
use ordlat::simulation::{builtin_dgp, generate, BuiltinDgp, CovariateRole, DgpSpec, ErrorLaw};
use ordlat::{Correlation, IndexModel, LatticeSpec, Law};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

type Check = Result<(bool, String), String>;

struct Criterion {
    id: u32,
    name: &'static str,
    limit: Duration,
    run: fn() -> Check,
}

fn main() {
    let criteria = [
        Criterion { id: 1, name: "bivariate normal CDF accuracy", limit: Duration::from_secs(60), run: c1_bvn },
        Criterion { id: 2, name: "design 1 Monte Carlo", limit: Duration::from_secs(600), run: c2_design1 },
        Criterion { id: 3, name: "designs 2-3 Monte Carlo", limit: Duration::from_secs(1200), run: c3_designs23 },
        Criterion { id: 4, name: "two-step kernel vs grid inversion", limit: Duration::from_secs(1800), run: c4_two_step },
        Criterion { id: 5, name: "identification levels of DGP 1-4", limit: Duration::from_secs(120), run: c5_levels },
        Criterion { id: 6, name: "property suite", limit: Duration::from_secs(600), run: c6_properties },
        Criterion { id: 7, name: "sieve MLE", limit: Duration::from_secs(900), run: c7_sieve },
        Criterion { id: 8, name: "correlation identification conditions", limit: Duration::from_secs(60), run: c8_rho },
    ];
    let only: Option<Vec<u32>> = std::env::var("ORDLAT_ACCEPTANCE")
        .ok()
        .map(|s| s.split(',').filter_map(|t| t.trim().parse().ok()).collect());
    let strict = std::env::var("ORDLAT_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");

    let mut failed = Vec::new();
    for c in criteria.iter().filter(|c| only.as_ref().is_none_or(|o| o.contains(&c.id))) {
        let t = Instant::now();
        let outcome = (c.run)();
        let elapsed = t.elapsed();
        let (ok, detail) = match outcome {
            Ok((ok, d)) => (ok && elapsed <= c.limit, d),
            Err(e) => (false, format!("error: {e}")),
        };
        println!(
            "criterion {} [{}] {}: {detail} ({:.1}s, limit {}s)",
            c.id,
            if ok { "PASS" } else { "FAIL" },
            c.name,
            elapsed.as_secs_f64(),
            c.limit.as_secs()
        );
        if !ok {
            failed.push(c.id);
        }
    }
    if failed.is_empty() {
        println!("acceptance: all selected criteria pass");
    } else {
        println!("acceptance: failing criteria {failed:?}");
        if strict {
            std::process::exit(1);
        }
    }
}

fn e<E: std::fmt::Display>(err: E) -> String {
    err.to_string()
}

// ---------------------------------------------------------------- 1

fn std_phi(x: f64) -> f64 {
    0.5 * libm::erfc(-x / SQRT_2)
}

fn simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, fa: f64, fm: f64, fb: f64, whole: f64, tol: f64, depth: u32) -> f64 {
    let m = 0.5 * (a + b);
    let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
    let (flm, frm) = (f(lm), f(rm));
    let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
    let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
    let delta = left + right - whole;
    if depth == 0 || delta.abs() <= 15.0 * tol {
        return left + right + delta / 15.0;
    }
    simpson(f, a, m, fa, flm, fm, left, tol / 2.0, depth - 1) + simpson(f, m, b, fm, frm, fb, right, tol / 2.0, depth - 1)
}

/// Phi2(a, b, rho) = Phi(a) Phi(b) + (1/2pi) int_0^{asin rho} exp(-(a^2 - 2ab sin t + b^2) / (2 cos^2 t)) dt
fn oracle_bvn(a: f64, b: f64, rho: f64) -> f64 {
    let g = move |t: f64| {
        let (s, c) = t.sin_cos();
        (-(a * a - 2.0 * a * b * s + b * b) / (2.0 * c * c)).exp()
    };
    let hi = rho.asin();
    let (fa, fm, fb) = (g(0.0), g(hi / 2.0), g(hi));
    let whole = hi / 6.0 * (fa + 4.0 * fm + fb);
    std_phi(a) * std_phi(b) + simpson(&g, 0.0, hi, fa, fm, fb, whole, 1e-14, 40) / (2.0 * PI)
}

fn c1_bvn() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let a = rng.random_range(-6.0..6.0);
        let b = rng.random_range(-6.0..6.0);
        let rho = rng.random_range(-0.999..0.999);
        let v = bivariate_normal_cdf(a, b, Correlation::new(rho).map_err(e)?).map_err(e)?;
        worst = worst.max((v - oracle_bvn(a, b, rho)).abs());
    }
    let mut worst_origin: f64 = 0.0;
    for _ in 0..1000 {
        let rho: f64 = rng.random_range(-0.999..0.999);
        let v = bivariate_normal_cdf(0.0, 0.0, Correlation::new(rho).map_err(e)?).map_err(e)?;
        worst_origin = worst_origin.max((v - (0.25 + rho.asin() / (2.0 * PI))).abs());
    }
    let mut worst_mc: f64 = 0.0;
    for &(a, b, rho) in &[(0.3, -0.7, 0.5), (-1.2, 1.5, -0.8), (1.0, 0.4, 0.95)] {
        let draws = 10_000_000;
        let c = (1.0f64 - rho * rho).sqrt();
        let mut hits = 0u64;
        for _ in 0..draws {
            let z1: f64 = rng.sample(StandardNormal);
            let z2: f64 = rng.sample(StandardNormal);
            if z1 <= a && rho * z1 + c * z2 <= b {
                hits += 1;
            }
        }
        let v = bivariate_normal_cdf(a, b, Correlation::new(rho).map_err(e)?).map_err(e)?;
        worst_mc = worst_mc.max((v - hits as f64 / draws as f64).abs());
    }
    let ok = worst <= 1e-8 && worst_origin <= 1e-8 && worst_mc <= 5e-4;
    Ok((
        ok,
        format!("max |err| quadrature {worst:.2e}, arcsin {worst_origin:.2e} (tol 1e-8); Monte Carlo {worst_mc:.2e} (tol 5e-4)"),
    ))
}

// ---------------------------------------------------------------- 2, 3

const REPS: usize = 100;
const N_PARAM: usize = 1000;

fn quiet_fit() -> FitOptions {
    FitOptions {
        standard_errors: None,
        ..Default::default()
    }
}

/// Means within 3 SD / sqrt(R) of the truth; returns (ok, detail, normalized SDs).
fn means_ok(dgp: BuiltinDgp, seed: u64) -> Result<(bool, String, Vec<(String, f64)>), String> {
    let spec = dgp.spec(0);
    let study = parametric_study(&spec, N_PARAM, REPS, seed, 1, &quiet_fit()).map_err(e)?;
    let r = (REPS - study.failures) as f64;
    let mut ok = study.failures == 0;
    let mut parts = Vec::new();
    let mut normalized = Vec::new();
    for s in &study.summary {
        let (Some(mean), Some(sd)) = (s.mean, s.sd) else {
            return Err(format!("{}: no converged replications", s.label));
        };
        let z = (mean - s.truth).abs() / (sd / r.sqrt());
        ok &= z <= 3.0;
        parts.push(format!("{} {mean:.3}/{:.3} z={z:.2}", s.label, s.truth));
        normalized.push((s.label.clone(), sd / s.truth.abs()));
    }
    Ok((ok, format!("{}: {}, failures {}", dgp.id(), parts.join(", "), study.failures), normalized))
}

fn c2_design1() -> Check {
    let spec = BuiltinDgp::ParamDesign1.spec(0);
    let study = parametric_study(&spec, N_PARAM, REPS, 2024, 1, &quiet_fit()).map_err(e)?;
    let r = (REPS - study.failures) as f64;
    // reference replication SDs keyed by the true value
    let reference = [(3.0, 0.35), (2.5, 0.23), (0.33, 0.14), (1.0, 0.16), (1.25, 0.15)];
    let mut ok = study.failures == 0;
    let mut parts = Vec::new();
    for s in &study.summary {
        let (Some(mean), Some(sd)) = (s.mean, s.sd) else {
            return Err(format!("{}: no converged replications", s.label));
        };
        let want = reference
            .iter()
            .find(|(t, _)| (t - s.truth).abs() < 1e-12)
            .map(|(_, v)| *v)
            .ok_or_else(|| format!("unexpected truth {}", s.truth))?;
        let z = (mean - s.truth).abs() / (sd / r.sqrt());
        let ratio = sd / want;
        ok &= z <= 3.0 && (0.7..=1.3).contains(&ratio);
        parts.push(format!("{} mean {mean:.3} (z {z:.2}) sd {sd:.3}/{want} ", s.label, ));
    }
    Ok((ok, format!("{}failures {}", parts.join("; "), study.failures)))
}

fn c3_designs23() -> Check {
    let (ok2, d2, norm2) = means_ok(BuiltinDgp::ParamDesign2, 2025)?;
    let (ok3, d3, _) = means_ok(BuiltinDgp::ParamDesign3, 2026)?;
    let (top, top_sd) = norm2
        .iter()
        .max_by(|a, b| a.1.total_cmp(&b.1))
        .cloned()
        .ok_or("no parameters")?;
    let rho_top = top == "rho";
    Ok((
        ok2 && ok3 && rho_top,
        format!("{d2}; {d3}; largest SD/|truth| in design 2: {top} ({top_sd:.3})"),
    ))
}

// ---------------------------------------------------------------- 4

fn c4_two_step() -> Check {
    let spec = BuiltinDgp::TwoStep.spec(0);
    let study = two_step_study(&spec, 1000, 50, 51, 1, &TwoStepConfig::default(), &EvalGrid::standard()).map_err(e)?;
    if !study.failures.is_empty() {
        return Err(format!("{} replications failed: {:?}", study.failures.len(), study.failures));
    }
    let agg = aggregate(&study.rows);
    let get = |m: &str| agg.iter().find(|a| a.method == m).cloned().ok_or(format!("no {m} rows"));
    let (k, g) = (get(KERNEL)?, get(GRID_INVERSION)?);
    let (Some(kc), Some(gc)) = (k.corr_mean, g.corr_mean) else {
        return Err("undefined correlation".into());
    };
    let kernel_band = (0.017..=0.037).contains(&k.rmse_mean);
    let grid_band = (0.052..=0.092).contains(&g.rmse_mean);
    let dominates = k.rmse_mean < g.rmse_mean && k.ks_mean < g.ks_mean && k.cvm_mean < g.cvm_mean && kc > gc;
    Ok((
        kernel_band && grid_band && dominates,
        format!(
            "kernel rmse {:.4} ks {:.4} cvm {:.2e} corr {kc:.5} | grid inversion rmse {:.4} ks {:.4} cvm {:.2e} corr {gc:.5} | kernel band {kernel_band}, grid band {grid_band}, kernel dominates {dominates}",
            k.rmse_mean, k.ks_mean, k.cvm_mean, g.rmse_mean, g.ks_mean, g.cvm_mean
        ),
    ))
}

// ---------------------------------------------------------------- 5

fn truth_first_stage(spec: &DgpSpec) -> FirstStage {
    FirstStage {
        thresholds: spec.lattice.all_thresholds().to_vec(),
        beta: spec.model.all_beta().to_vec(),
        rho: None,
    }
}

fn c5_levels() -> Check {
    let expect = [
        (BuiltinDgp::Semiparam1, Level::ParamsOnly),
        (BuiltinDgp::Semiparam2, Level::PlusThresholdGaps),
        (BuiltinDgp::Semiparam3, Level::PlusMarginals),
        (BuiltinDgp::Semiparam4, Level::PlusJointCdf),
    ];
    let mut ok = true;
    let mut parts = Vec::new();
    for (id, want) in expect {
        let from_spec = classify_spec(&id.spec(0)).map_err(e)?.level;
        let (spec, data) = builtin_dgp(id, 10_000, 17).map_err(e)?;
        let exclusive: Vec<String> = spec
            .covariates
            .iter()
            .filter(|c| c.role == Some(CovariateRole::Exclusive))
            .map(|c| c.name.clone())
            .collect();
        let from_data = classify_data(&data, &truth_first_stage(&spec), Some(&exclusive)).map_err(e)?.level;
        ok &= from_spec == want && from_data == want;
        parts.push(format!("{}: spec {from_spec}, data {from_data}", id.id()));
    }
    Ok((ok, parts.join("; ")))
}

// ---------------------------------------------------------------- 6

fn random_params(rng: &mut ChaCha8Rng, k: [usize; 2]) -> Result<ParamVector, String> {
    let beta = k.iter().map(|&kd| (0..kd).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
    let thresholds = (0..2)
        .map(|_| {
            let m = rng.random_range(1..5);
            let mut t = vec![rng.random_range(-2.0..0.0)];
            for _ in 1..m {
                let last = *t.last().unwrap();
                t.push(last + rng.random_range(0.05..1.5));
            }
            t
        })
        .collect();
    ParamVector::new(beta, thresholds, rng.random_range(-0.95..0.95)).map_err(e)
}

fn cell_sums(rng: &mut ChaCha8Rng) -> Result<(bool, String), String> {
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let theta = random_params(rng, [2, 1])?;
        let (spec, model) = (theta.lattice(), theta.model());
        let f = GaussianCdf::new(theta.rho.value()).map_err(e)?;
        let x1 = [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)];
        let x2 = [rng.random_range(-2.0..2.0)];
        let x: [&[f64]; 2] = [&x1, &x2];
        let mut total = 0.0;
        for cell in spec.cells() {
            total += cell_probability(&cell, &x, &spec, &model, &f).map_err(e)?;
        }
        worst = worst.max((total - 1.0).abs());
    }
    Ok((worst <= 1e-9, format!("cell sums {worst:.1e}")))
}

fn grid_invariants() -> Result<(bool, String), String> {
    let (spec, data) = builtin_dgp(BuiltinDgp::TwoStep, 500, 3).map_err(e)?;
    let gi = grid_inversion_fit(&data, &spec.lattice, &spec.model, &GridInversionConfig::default()).map_err(e)?;
    let kf = kernel_smoothing_fit(&data, &spec.lattice, &spec.model, &KernelConfig::default(), None).map_err(e)?;
    let (_, sdata) = builtin_dgp(BuiltinDgp::Semiparam4, 500, 3).map_err(e)?;
    let sf = sieve_mle_fit(&sdata, &[3, 3], &SieveConfig::default()).map_err(e)?;
    let mut bad = Vec::new();
    for (name, grid) in [("grid-inversion", &gi.grid), ("kernel", &kf.grid), ("sieve", &sf.grid)] {
        if let Err(err) = grid.check_invariants(GRID_TOL) {
            bad.push(format!("{name}: {err}"));
        }
    }
    Ok((bad.is_empty(), if bad.is_empty() { "grid invariants ok".into() } else { bad.join(", ") }))
}

fn gradients(rng: &mut ChaCha8Rng) -> Result<(bool, String), String> {
    let (_, data) = builtin_dgp(BuiltinDgp::ParamDesign2, 400, 4).map_err(e)?;
    let truth = ParamVector::from_dgp(&BuiltinDgp::ParamDesign2.spec(0)).map_err(e)?;
    let shape = truth.shape();
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let mut flat = truth.to_flat();
        let nb: usize = shape.k.iter().sum();
        for v in flat.iter_mut().take(nb) {
            *v += rng.random_range(-0.3..0.3);
        }
        let last = flat.len() - 1;
        flat[last] = rng.random_range(-0.8..0.8);
        let theta = ParamVector::from_flat(&flat, shape).map_err(e)?;
        let g = gradient(&data, &theta).map_err(e)?;
        let h = 1e-6;
        let mut fd = Vec::with_capacity(flat.len());
        for i in 0..flat.len() {
            let mut up = flat.clone();
            up[i] += h;
            let mut down = flat.clone();
            down[i] -= h;
            let lu = log_likelihood(&data, &ParamVector::from_flat(&up, shape).map_err(e)?).map_err(e)?;
            let ld = log_likelihood(&data, &ParamVector::from_flat(&down, shape).map_err(e)?).map_err(e)?;
            fd.push((lu - ld) / (2.0 * h));
        }
        let scale = fd.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let diff = g.iter().zip(&fd).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        worst = worst.max(diff / scale);
    }
    Ok((worst <= 1e-4, format!("gradient rel err {worst:.1e}")))
}

fn round_trips(rng: &mut ChaCha8Rng) -> Result<(bool, String), String> {
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let theta = random_params(rng, [2, 3])?;
        let back = ParamVector::untransform(&theta.transform(), theta.shape()).map_err(e)?;
        for (a, b) in theta.to_flat().iter().zip(back.to_flat()) {
            worst = worst.max((a - b).abs());
        }
    }
    Ok((worst <= 1e-10, format!("transform round trip {worst:.1e}")))
}

fn pipeline_bytes() -> Result<Vec<u8>, String> {
    let dir = tempfile::tempdir().map_err(e)?;
    let (spec, data) = builtin_dgp(BuiltinDgp::TwoStep, 400, 11).map_err(e)?;
    let csv = dir.path().join("data.csv");
    ordlat::io::write_dataset(&csv, &data).map_err(e)?;
    let (back, _) = ordlat::io::read_dataset(&csv, None).map_err(e)?;
    let fitted = fit(&back, None, &FitOptions::default()).map_err(e)?;
    let first = FirstStage::from(&fitted.estimate);
    let kf = kernel_smoothing_fit(&back, &first.lattice().map_err(e)?, &first.model().map_err(e)?, &KernelConfig::default(), None)
        .map_err(e)?;
    let rows = two_step_study(
        &spec,
        200,
        2,
        5,
        2,
        &TwoStepConfig {
            grid_inversion: Some(GridInversionConfig { max_iter: 10, ..Default::default() }),
            ..Default::default()
        },
        &EvalGrid::standard(),
    )
    .map_err(e)?
    .rows;
    let grid_csv = dir.path().join("grid.csv");
    kf.grid.write_csv(&grid_csv).map_err(e)?;
    let rows_csv = dir.path().join("rows.csv");
    ordlat::metrics::write_replications(&rows_csv, &rows).map_err(e)?;
    let mut bytes = std::fs::read(&csv).map_err(e)?;
    bytes.extend(serde_json::to_vec(&fitted).map_err(e)?);
    bytes.extend(std::fs::read(&grid_csv).map_err(e)?);
    bytes.extend(std::fs::read(&rows_csv).map_err(e)?);
    Ok(bytes)
}

fn c6_properties() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let checks = [
        cell_sums(&mut rng)?,
        grid_invariants()?,
        gradients(&mut rng)?,
        round_trips(&mut rng)?,
        {
            let (a, b) = (pipeline_bytes()?, pipeline_bytes()?);
            (a == b, format!("determinism {} bytes identical {}", a.len(), a == b))
        },
    ];
    Ok((checks.iter().all(|c| c.0), checks.iter().map(|c| c.1.as_str()).collect::<Vec<_>>().join("; ")))
}

// ---------------------------------------------------------------- 7

fn c7_sieve() -> Check {
    let half = 3.0;
    let mut spec = BuiltinDgp::Semiparam4.spec(7);
    spec.error = ErrorLaw::Independent {
        margins: vec![Law::Uniform { low: -half, high: half }; 2],
    };
    let data = generate(&spec, 4000).map_err(e)?;
    // start at the true index so the location normalization matches the truth
    let config = SieveConfig {
        init: Some(truth_first_stage(&spec)),
        ..Default::default()
    };
    let fitted = sieve_mle_fit(&data, &[3, 3], &config).map_err(e)?;
    let f = |v: f64| ((v + half) / (2.0 * half)).clamp(0.0, 1.0);
    let g = &fitted.grid;
    let mut sup: f64 = 0.0;
    for (k, a) in g.axis1().iter().enumerate() {
        for (l, b) in g.axis2().iter().enumerate() {
            sup = sup.max((g.value(k, l) - f(*a) * f(*b)).abs());
        }
    }
    let ok = fitted.min_slack >= -1e-9 && fitted.loglik >= fitted.initial_loglik && sup <= 0.05;
    Ok((
        ok,
        format!(
            "min slack {:.1e}, loglik {:.5} -> {:.5}, sup |F - F1 F2| {sup:.4} (tol 0.05), {} outer iterations",
            fitted.min_slack, fitted.initial_loglik, fitted.loglik, fitted.outer_iterations
        ),
    ))
}

// ---------------------------------------------------------------- 8

fn c8_rho() -> Check {
    let cond = |s: &DgpSpec| Evidence::from_spec(s).map(|ev| ev.check_rho_conditions()).map_err(e);
    let d2 = cond(&BuiltinDgp::ParamDesign2.spec(0))?;
    let d3 = cond(&BuiltinDgp::ParamDesign3.spec(0))?;
    // one shared covariate, no exclusion restriction
    let shared = cond(&BuiltinDgp::ParamDesign1.spec(0))?;
    let mut pivot = BuiltinDgp::ParamDesign1.spec(0);
    pivot.lattice = LatticeSpec::new(vec![vec![0.0], vec![0.0]]).map_err(e)?;
    pivot.model = IndexModel::new(vec![vec![0.0], vec![0.0]]).map_err(e)?;
    let pivot = cond(&pivot)?;
    Ok((
        d2.c && d3.c && !shared.c && pivot.a,
        format!("(c): design 2 {}, design 3 {}, shared-only {}; (a) on pivot spec {}", d2.c, d3.c, shared.c, pivot.a),
    ))
}
