//! The subcommands. Each one resolves the config, writes its files through an
//! [`OutputDir`] and returns the finished [`ReportBundle`].

use anyhow::{bail, Context, Result};

use marcus_core::characteristics::InitialGrid;
use marcus_core::marcus_exp::{FnField, TransportField};
use marcus_core::presets::Preset;
use marcus_core::spde_solver::{oracle_compare, OracleReport, PointFlag};
use marcus_core::studies::{exp_map_order, inverse_check_sweep, round_trip_on, sweep_cases, ConvergenceStatus, ConvergenceStudy};
use marcus_core::{exp_map, integrate_path, solve, DriverRealization, Error, JumpVectorField, SolutionField};

use crate::config::{FieldSource, Resolved, RunConfig};
use crate::expr::Expr;
use crate::report::{OutputDir, ReportBundle};

fn start(command: &str, config: &RunConfig) -> Result<(Resolved, OutputDir, ReportBundle)> {
    let r = config.resolve()?;
    let out = OutputDir::create(&r.out_dir)?;
    let mut report = ReportBundle::new(command, r.seed, config);
    report.stat("preset", r.problem.preset.map(|p| p.name()));
    report.stat("realization", r.realization);
    Ok((r, out, report))
}

fn driver(r: &Resolved) -> Result<DriverRealization> {
    r.problem
        .driver_config()
        .generate(r.seed, r.realization)
        .context("generating the driver")
}

fn write_driver(out: &mut OutputDir, d: &DriverRealization) -> Result<()> {
    out.write("increments.csv", |w| d.write_increments_csv(w))?;
    out.write("events.csv", |w| d.write_events_csv(w))?;
    out.write("levy_increments.csv", |w| d.write_levy_increments_csv(w))
}

fn driver_summary(report: &mut ReportBundle, d: &DriverRealization) -> (usize, f64) {
    let count = d.jump_events.len();
    let path_max = d.path_increments.iter().flatten().map(|v| v.abs()).fold(0.0, f64::max);
    let max_z = d.jump_events.iter().map(|e| e.norm()).fold(path_max, f64::max);
    report.stat("steps", d.intervals());
    report.stat("event_count", count);
    report.stat("max_abs_z", max_z);
    (count, max_z)
}

pub fn sample_levy(config: &RunConfig) -> Result<ReportBundle> {
    let (r, mut out, mut report) = start("sample-levy", config)?;
    let d = driver(&r)?;
    write_driver(&mut out, &d)?;
    let (count, max_z) = driver_summary(&mut report, &d);
    println!("events: {count}, max |z|: {max_z:.6}");
    out.finish(report)
}

/// The field on the query grid plus, when an oracle is configured, its comparison.
fn compute_field(r: &Resolved, d: &DriverRealization) -> Result<(SolutionField, Option<(SolutionField, OracleReport)>)> {
    let p = &r.problem;
    let points = p.grid_points();
    let oracle = p.oracle_spec(d);
    let field = match r.field_source {
        FieldSource::Characteristics => {
            solve(&p.coeffs, d, &p.u0, &p.times, &points, &p.params).context("solving along the characteristics")?
        }
        FieldSource::Oracle => {
            let spec = oracle.as_ref().context("field_source = \"oracle\" needs an oracle")?;
            spec.field(&p.times, &points).context("evaluating the oracle field")?
        }
    };
    let compared = match (&oracle, r.field_source) {
        (Some(spec), FieldSource::Characteristics) => {
            let of = spec.field(&p.times, &points).context("evaluating the oracle field")?;
            let rep = oracle_compare(&field, spec).context("comparing with the oracle")?;
            Some((of, rep))
        }
        _ => None,
    };
    Ok((field, compared))
}

fn field_checks(r: &Resolved, report: &mut ReportBundle, field: &SolutionField, d: &DriverRealization) -> Result<()> {
    report.stat("field_source", r.field_source);
    report.stat("provenance", &field.provenance);
    report.stat("flagged_fraction", field.flagged_fraction());
    let unflagged_bad = field
        .values
        .iter()
        .zip(&field.flags)
        .flat_map(|(v, f)| v.iter().zip(f))
        .filter(|(v, f)| **f == PointFlag::Ok && !v.is_finite())
        .count();
    report.check_max("unflagged_non_finite", unflagged_bad as f64, 0.0);
    if let Some(b) = r.checks.max_flagged_fraction {
        report.check_max("flagged_fraction", field.flagged_fraction(), b);
    }
    let mut peaks = Vec::with_capacity(field.times.len());
    for (k, t) in field.times.iter().enumerate() {
        let (mut best, mut at) = (f64::NEG_INFINITY, f64::NAN);
        for (i, v) in field.values[k].iter().enumerate() {
            if v.is_finite() && *v > best {
                best = *v;
                at = field.points[i][0];
            }
        }
        let z = d.levy_value_at(*t)?[0];
        peaks.push(serde_json::json!({ "t": t, "argmax": at, "max": best, "z": z }));
    }
    report.stat("peaks", peaks);
    Ok(())
}

fn oracle_checks(r: &Resolved, report: &mut ReportBundle, rep: &OracleReport) {
    report.stat("oracle", rep);
    if let Some(b) = r.checks.oracle_rmse {
        report.check_max("oracle_rmse", rep.rmse, b);
    }
    if let Some(b) = r.checks.oracle_max_abs {
        report.check_max("oracle_max_abs", rep.max_abs, b);
    }
}

pub fn solve_cmd(config: &RunConfig) -> Result<ReportBundle> {
    let (r, mut out, mut report) = start("solve", config)?;
    let d = driver(&r)?;
    if r.driver_files {
        write_driver(&mut out, &d)?;
    }
    driver_summary(&mut report, &d);
    let (field, compared) = compute_field(&r, &d)?;
    out.write("field.csv", |w| field.write_csv(w))?;
    out.write("flags.csv", |w| field.write_flags_csv(w))?;
    write_trajectories(&r, &d, &mut out)?;
    field_checks(&r, &mut report, &field, &d)?;
    if let Some((_, rep)) = &compared {
        oracle_checks(&r, &mut report, rep);
        println!("oracle {}: rmse {:.3e}, max {:.3e}", rep.oracle, rep.rmse, rep.max_abs);
    }
    println!("field: {} times × {} points, flagged {:.2}%", field.times.len(), field.points.len(), 100.0 * field.flagged_fraction());
    out.finish(report)
}

fn write_trajectories(r: &Resolved, d: &DriverRealization, out: &mut OutputDir) -> Result<()> {
    if r.trajectories.is_empty() {
        return Ok(());
    }
    let p = &r.problem;
    let grid = InitialGrid::uniform(p.grid.0, p.grid.1, p.grid.2);
    let flow = integrate_path(&p.coeffs, d, &grid, &p.times, &p.params.integration)?;
    for &i in &r.trajectories {
        if i >= flow.initial_points.len() {
            bail!("trajectory index {i} outside the {}-point grid", flow.initial_points.len());
        }
        out.write(&format!("trajectory_{i}.csv"), |w| flow.write_trajectory_csv(i, w))?;
    }
    Ok(())
}

pub fn oracle_compare_cmd(config: &RunConfig) -> Result<ReportBundle> {
    let (r, mut out, mut report) = start("oracle-compare", config)?;
    if r.problem.oracle.is_none() {
        bail!("oracle-compare needs `problem.oracle` (or a preset that has one)");
    }
    if r.field_source == FieldSource::Oracle {
        bail!("oracle-compare solves along the characteristics; drop field_source = \"oracle\"");
    }
    let d = driver(&r)?;
    driver_summary(&mut report, &d);
    let (field, compared) = compute_field(&r, &d)?;
    let (oracle_field, rep) = compared.expect("oracle configured");
    out.write("field.csv", |w| field.write_csv(w))?;
    out.write("oracle.csv", |w| oracle_field.write_csv(w))?;
    out.write("errors.csv", |w| {
        use std::io::Write;
        writeln!(w, "t,rmse,max_abs,compared,excluded")?;
        for e in &rep.per_time {
            writeln!(w, "{},{:e},{:e},{},{}", e.t, e.rmse, e.max_abs, e.compared, e.excluded)?;
        }
        Ok(())
    })?;
    field_checks(&r, &mut report, &field, &d)?;
    oracle_checks(&r, &mut report, &rep);
    println!("oracle {}: rmse {:.3e}, max {:.3e}, flagged {:.2}%", rep.oracle, rep.rmse, rep.max_abs, 100.0 * rep.flagged_fraction);
    out.finish(report)
}

/// `(ladder dts, reference dt, realizations)` when the config gives none.
fn default_ladder(preset: Option<Preset>) -> (Vec<f64>, f64, u64) {
    let pow = |k: i32| 2f64.powi(-k);
    match preset {
        Some(Preset::Linear) => ((6..=12).map(pow).collect(), pow(16), 32),
        Some(Preset::SmoothDeterministic | Preset::ConstantDrift | Preset::Zero) => ((3..=6).map(pow).collect(), pow(11), 1),
        Some(Preset::JumpTransport) => ((5..=9).map(pow).collect(), pow(13), 16),
        _ => ((4..=8).map(pow).collect(), pow(12), 8),
    }
}

fn steps_of(horizon: f64, dt: f64) -> Result<usize> {
    let n = (horizon / dt).round();
    if !(n >= 1.0) || ((n * dt - horizon).abs() > 1e-9 * horizon) {
        bail!("dt = {dt} does not divide the horizon {horizon}");
    }
    Ok(n as usize)
}

pub fn convergence(config: &RunConfig) -> Result<ReportBundle> {
    let (r, mut out, mut report) = start("convergence", config)?;
    let p = &r.problem;
    let (ladder, reference, reals) = default_ladder(p.preset);
    let c = &r.convergence;
    let ladder = c.ladder.clone().unwrap_or(ladder);
    let reference = c.reference_dt.unwrap_or(reference);
    if ladder.len() < 4 {
        bail!("[convergence] ladder: need at least 4 step sizes, got {}", ladder.len());
    }
    let horizon = p.driver.horizon;
    let study = ConvergenceStudy {
        coeffs: p.coeffs.clone(),
        driver: p.driver.clone(),
        grid: InitialGrid::uniform(p.grid.0, p.grid.1, c.grid_points.unwrap_or(9)),
        ladder: ladder.iter().map(|dt| steps_of(horizon, *dt)).collect::<Result<_>>()?,
        reference_steps: steps_of(horizon, reference)?,
        realizations: c.realizations.unwrap_or(reals),
        seed: r.seed,
        params: p.params.integration.clone(),
    };
    let rep = study.run().context("running the convergence study")?;
    out.write("convergence.csv", |w| {
        use std::io::Write;
        writeln!(w, "dt,error")?;
        for (dt, e) in rep.dts.iter().zip(&rep.errors) {
            writeln!(w, "{dt:e},{e:e}")?;
        }
        Ok(())
    })?;
    report.stat("convergence", &rep);
    match (&rep.status, &rep.fit) {
        (ConvergenceStatus::Ok, Some(fit)) => {
            report.check_range("slope", fit.slope, r.checks.min_slope, r.checks.max_slope);
            if let Some(b) = r.checks.min_r_squared {
                report.check_range("r_squared", fit.r_squared, Some(b), None);
            }
            println!("slope {:.3}, R² {:.4} over {} levels", fit.slope, fit.r_squared, rep.dts.len());
        }
        _ => {
            report.fail("slope", "insufficient-data");
            println!("insufficient data: fewer than 4 levels with a resolvable error");
        }
    }
    out.finish(report)
}

pub fn flow_identity(config: &RunConfig) -> Result<ReportBundle> {
    let (r, out, mut report) = start("flow-identity", config)?;
    let p = &r.problem;
    let t = p.times.last().copied().unwrap_or(p.driver.horizon);
    let d = p.driver.clone().with_pinned_times(&[t]).generate(r.seed, r.realization)?;
    let grid = match &r.initial_points {
        Some(pts) => InitialGrid::from_points_1d(pts.clone()),
        None => InitialGrid::uniform(p.grid.0, p.grid.1, p.grid.2),
    };
    let samples = p.grid.2.max(51);
    let bound = r.checks.round_trip.unwrap_or(1e-3);
    match round_trip_on(&p.coeffs, &d, &grid, &p.params.integration, t, (p.grid.0, p.grid.1), samples) {
        Ok(rt) => {
            report.stat("round_trip", &rt);
            report.check_max("round_trip_residual", rt.residual, bound);
            println!("round_trip_residual {:e} at t = {t}", rt.residual);
        }
        Err(e @ Error::DiffeomorphismViolation { .. }) => {
            report.stat("round_trip_error", e.to_string());
            report.fail("round_trip_residual", "diffeomorphism-violation");
            eprintln!("diffeomorphism violation: {e}");
        }
        Err(e) => return Err(e).context("round-trip study"),
    }
    if p.coeffs.has_jump_part() && p.coeffs.dim() == 1 {
        let n = r.exp_map.sweep.unwrap_or(10);
        let substeps = r.exp_map.substeps.unwrap_or(64);
        let worst = inverse_check_sweep(&TransportField::new(&p.coeffs), &sweep_cases(n), substeps)?;
        report.stat("inverse_check_cases", n * n);
        report.check_max("exp_map_inverse_check", worst, r.checks.inverse_check.unwrap_or(1e-8));
        println!("exp_map_inverse_check {worst:e} over {} cases", n * n);
    }
    out.finish(report)
}

pub fn exp_map_cmd(config: &RunConfig) -> Result<ReportBundle> {
    let (r, out, mut report) = start("exp-map", config)?;
    let e = &r.exp_map;
    let x0 = e.x0.unwrap_or(1.0);
    let z = e.z.unwrap_or(std::f64::consts::LN_2);
    let substeps = e.substeps.unwrap_or(64);
    match &e.field {
        Some(text) => {
            let f = Expr::parse(text, &["x", "z"]).map_err(|source| crate::config::ConfigError::Expression { key: "exp_map.field", source })?;
            let field = FnField::new(1, 1, move |x: &[f64], z: &[f64], o: &mut [f64]| o[0] = f.eval(&[x[0], z[0]]));
            run_exp_map(&r, &mut report, &field, x0, z, substeps)?;
        }
        None => {
            if r.problem.coeffs.dim() != 1 {
                bail!("exp-map is one-dimensional");
            }
            run_exp_map(&r, &mut report, &TransportField::new(&r.problem.coeffs), x0, z, substeps)?;
        }
    }
    out.finish(report)
}

fn run_exp_map(r: &Resolved, report: &mut ReportBundle, field: &impl JumpVectorField, x0: f64, z: f64, substeps: usize) -> Result<()> {
    let res = exp_map(field, &[x0], &[z], substeps)?;
    let endpoint = res.endpoint[0];
    println!("endpoint {endpoint:.17e}\nestimated_error {:e}", res.estimated_error);
    report.stat("endpoint", endpoint);
    report.stat("estimated_error", res.estimated_error);
    report.stat("substeps", substeps);
    if let Some(exact) = r.exp_map.exact {
        let err = (endpoint - exact).abs();
        println!("error {err:e}");
        report.check_max("endpoint_error", err, r.checks.exp_map_error.unwrap_or(1e-10));
    }
    let ladder = r.exp_map.order_ladder.clone().unwrap_or_else(|| vec![4, 8, 16, 32, 64]);
    let reference = r.exp_map.reference_substeps.unwrap_or(4096);
    let order = exp_map_order(field, &[x0], &[z], &ladder, reference)?;
    println!("order {:.3}", order.exponent);
    report.stat("order", &order);
    report.check_range("order", order.exponent, r.checks.min_order, r.checks.max_order);
    Ok(())
}
