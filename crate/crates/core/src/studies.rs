//! Convergence and identity sweeps built on the solver modules.

use rayon::prelude::*;
use serde::Serialize;

use crate::characteristics::{integrate_path, InitialGrid, IntegrationParams};
use crate::coefficients::CoefficientSet;
use crate::error::{input, Result};
use crate::inverse_flow::{round_trip_residual_integrated, InverseTable1d};
use crate::levy_driver::{DriverConfig, DriverRealization};
use crate::marcus_exp::{exp_map, exp_map_inverse_check, FnField, JumpVectorField};
use crate::presets::Problem;
use crate::spde_solver::{oracle_compare, solve, OracleReport};
use crate::stats::{linear_fit, LinearFit};

/// The jump field `-sqrt(x² + 1) z` of the sinh example.
pub fn sinh_field() -> FnField<impl Fn(&[f64], &[f64], &mut [f64]) + Sync> {
    FnField::new(1, 1, |x: &[f64], z: &[f64], o: &mut [f64]| {
        o[0] = -(x[0] * x[0] + 1.0).sqrt() * z[0]
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OrderReport {
    pub substeps: Vec<usize>,
    pub errors: Vec<f64>,
    /// `-slope` of `log error` against `log substeps`.
    pub exponent: f64,
    pub r_squared: f64,
}

/// Observed order of the exponential map against a `reference_substeps` run.
pub fn exp_map_order(
    field: &impl JumpVectorField,
    x0: &[f64],
    z: &[f64],
    ladder: &[usize],
    reference_substeps: usize,
) -> Result<OrderReport> {
    let reference = exp_map(field, x0, z, reference_substeps)?.endpoint;
    let mut errors = Vec::with_capacity(ladder.len());
    for &n in ladder {
        let e = exp_map(field, x0, z, n)?.endpoint;
        let d = e.iter().zip(&reference).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        errors.push(d);
    }
    let (lx, ly): (Vec<f64>, Vec<f64>) = ladder
        .iter()
        .zip(&errors)
        .filter(|(_, e)| **e > 0.0)
        .map(|(n, e)| ((*n as f64).ln(), e.ln()))
        .unzip();
    let fit = linear_fit(&lx, &ly)?;
    Ok(OrderReport {
        substeps: ladder.to_vec(),
        errors,
        exponent: -fit.slope,
        r_squared: fit.r_squared,
    })
}

/// `n × n` cases `(x0, z)` on `[-3, 3] × [-1, 1]`.
pub fn sweep_cases(n: usize) -> Vec<(f64, f64)> {
    let xs = crate::characteristics::linspace(-3.0, 3.0, n);
    let zs = crate::characteristics::linspace(-1.0, 1.0, n);
    xs.iter().flat_map(|&x| zs.iter().map(move |&z| (x, z))).collect()
}

/// Largest [`exp_map_inverse_check`] residual over one-dimensional cases.
pub fn inverse_check_sweep(
    field: &impl JumpVectorField,
    cases: &[(f64, f64)],
    substeps: usize,
) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for &(x, z) in cases {
        worst = worst.max(exp_map_inverse_check(field, &[x], &[z], substeps)?);
    }
    Ok(worst)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RoundTripReport {
    pub t: f64,
    pub residual: f64,
    pub samples: usize,
}

/// `max |φ_{0,t}(φ_{t,0}(x)) - x|` for a one-dimensional problem, with the
/// forward map re-integrated from each recovered starting point and the
/// samples spread over the query grid clipped to the table range.
pub fn round_trip(problem: &Problem, seed: u64, t: f64, samples: usize) -> Result<RoundTripReport> {
    let driver = problem.driver.clone().with_pinned_times(&[t]).generate(seed, 0)?;
    let (lo, hi, n) = problem.grid;
    round_trip_on(
        &problem.coeffs,
        &driver,
        &InitialGrid::uniform(lo, hi, n),
        &problem.params.integration,
        t,
        (lo, hi),
        samples,
    )
}

/// [`round_trip`] on an explicit table of initial points; a table that is not
/// strictly increasing at `t` is reported as a diffeomorphism violation.
pub fn round_trip_on(
    coeffs: &CoefficientSet,
    driver: &DriverRealization,
    grid: &InitialGrid,
    params: &IntegrationParams,
    t: f64,
    (lo, hi): (f64, f64),
    samples: usize,
) -> Result<RoundTripReport> {
    if coeffs.dim() != 1 {
        return input("the round-trip study is one-dimensional");
    }
    let flow = integrate_path(coeffs, driver, grid, &[t], params)?;
    let table = InverseTable1d::new(&flow, 0)?;
    let (rlo, rhi) = table.range();
    let (a, b) = (lo.max(rlo), hi.min(rhi));
    if !(b > a) {
        return input("the forward table does not overlap the query grid");
    }
    let pts: Vec<Vec<f64>> = crate::characteristics::linspace(a, b, samples.max(2))
        .into_iter()
        .map(|x| vec![x])
        .collect();
    let residual = round_trip_residual_integrated(&flow, coeffs, driver, params, t, &pts)?;
    Ok(RoundTripReport { t, residual, samples: pts.len() })
}

#[derive(Debug, Clone)]
pub struct ConvergenceStudy {
    pub coeffs: CoefficientSet,
    /// Driver recipe; its `steps` are replaced by `reference_steps`.
    pub driver: DriverConfig,
    pub grid: InitialGrid,
    /// Base step counts of the coarse levels; each must divide `reference_steps`.
    pub ladder: Vec<usize>,
    pub reference_steps: usize,
    pub realizations: u64,
    pub seed: u64,
    pub params: IntegrationParams,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ConvergenceStatus {
    Ok,
    /// Fewer than four levels had a positive, finite error.
    InsufficientData,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConvergenceReport {
    pub dts: Vec<f64>,
    pub errors: Vec<f64>,
    pub reference_dt: f64,
    pub fit: Option<LinearFit>,
    pub status: ConvergenceStatus,
    pub realizations: u64,
}

impl ConvergenceStudy {
    /// Strong error at the horizon: the mean over realizations of the largest
    /// state difference (`x`, `ξ`, `ζ`) over the grid, per level, against the
    /// reference level on the same driver.
    pub fn run(&self) -> Result<ConvergenceReport> {
        if self.realizations == 0 || self.ladder.is_empty() {
            return input("a convergence study needs realizations and a step ladder");
        }
        if let Some(s) = self.ladder.iter().find(|&&s| s == 0 || self.reference_steps % s != 0) {
            return input(format!("ladder level {s} does not divide {}", self.reference_steps));
        }
        let horizon = self.driver.horizon;
        let mut cfg = self.driver.clone();
        cfg.steps = self.reference_steps;
        let mut params = self.params.clone();
        params.max_dt = f64::INFINITY;
        params.record_paths = false;

        let per_real: Vec<Vec<f64>> = (0..self.realizations)
            .into_par_iter()
            .map(|k| -> Result<Vec<f64>> {
                let fine = cfg.generate(self.seed, k)?;
                let reference = integrate_path(&self.coeffs, &fine, &self.grid, &[horizon], &params)?;
                self.ladder
                    .iter()
                    .map(|&s| {
                        let coarse = fine.restrict(s)?;
                        let flow = integrate_path(&self.coeffs, &coarse, &self.grid, &[horizon], &params)?;
                        let mut worst: f64 = 0.0;
                        for p in 0..flow.initial_points.len() {
                            if !(flow.is_valid(p, 0) && reference.is_valid(p, 0)) {
                                continue;
                            }
                            let (a, b) = (&flow.states[p][0], &reference.states[p][0]);
                            for (u, v) in a.x.iter().zip(&b.x) {
                                worst = worst.max((u - v).abs());
                            }
                            worst = worst.max((a.xi - b.xi).abs()).max((a.zeta - b.zeta).abs());
                        }
                        Ok(worst)
                    })
                    .collect()
            })
            .collect::<Result<_>>()?;

        let errors: Vec<f64> = (0..self.ladder.len())
            .map(|i| per_real.iter().map(|r| r[i]).sum::<f64>() / self.realizations as f64)
            .collect();
        let dts: Vec<f64> = self.ladder.iter().map(|&s| horizon / s as f64).collect();
        let (lx, ly): (Vec<f64>, Vec<f64>) = dts
            .iter()
            .zip(&errors)
            .filter(|(_, e)| **e > 0.0 && e.is_finite())
            .map(|(d, e)| (d.ln(), e.ln()))
            .unzip();
        let (fit, status) = if lx.len() >= 4 {
            (Some(linear_fit(&lx, &ly)?), ConvergenceStatus::Ok)
        } else {
            (None, ConvergenceStatus::InsufficientData)
        };
        Ok(ConvergenceReport {
            dts,
            errors,
            reference_dt: horizon / self.reference_steps as f64,
            fit,
            status,
            realizations: self.realizations,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RefinementReport {
    pub dt: f64,
    pub coarse: OracleReport,
    pub fine: OracleReport,
    /// `rmse(dt) / rmse(dt / 2)`.
    pub ratio: f64,
}

/// Field against the problem's oracle at `dt` and `dt / 2` on one driver,
/// the coarse driver being the restriction of the fine one.
pub fn oracle_refinement(problem: &Problem, seed: u64, dt: f64) -> Result<RefinementReport> {
    let mut cfg = problem.driver_config();
    let coarse_steps = DriverConfig::steps_for(cfg.horizon, dt);
    cfg.steps = 2 * coarse_steps;
    let fine = cfg.generate(seed, 0)?;
    let coarse = fine.restrict(coarse_steps)?;
    let points = problem.grid_points();
    let run = |driver, step: f64| -> Result<OracleReport> {
        let mut params = problem.params.clone();
        params.integration.max_dt = step;
        let field = solve(&problem.coeffs, driver, &problem.u0, &problem.times, &points, &params)?;
        let oracle = problem
            .oracle_spec(driver)
            .ok_or_else(|| crate::Error::Input("problem has no oracle".into()))?;
        oracle_compare(&field, &oracle)
    };
    let h = cfg.horizon / coarse_steps as f64;
    let c = run(&coarse, h)?;
    let f = run(&fine, 0.5 * h)?;
    Ok(RefinementReport { dt: h, ratio: c.rmse / f.rmse, coarse: c, fine: f })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::presets::Preset;

    #[test]
    fn exp_map_order_is_four() {
        let f = FnField::new(1, 1, |x: &[f64], z: &[f64], o: &mut [f64]| o[0] = x[0] * z[0]);
        let r = exp_map_order(&f, &[1.0], &[2f64.ln()], &[4, 8, 16, 32], 4096).unwrap();
        assert!((r.exponent - 4.0).abs() < 0.2, "{r:?}");
    }

    #[test]
    fn sinh_inverse_sweep() {
        let r = inverse_check_sweep(&sinh_field(), &sweep_cases(5), 64).unwrap();
        assert!(r < 1e-8);
    }

    #[test]
    fn deterministic_ladder_is_second_order() {
        let p = Preset::SmoothDeterministic.problem();
        let study = ConvergenceStudy {
            coeffs: p.coeffs,
            driver: DriverConfig::new(1.0, 1, 1),
            grid: InitialGrid::uniform(-1.0, 1.0, 5),
            ladder: vec![8, 16, 32, 64],
            reference_steps: 1024,
            realizations: 1,
            seed: 0,
            params: IntegrationParams::default(),
        };
        let r = study.run().unwrap();
        let fit = r.fit.unwrap();
        assert!(fit.slope > 1.9, "{r:?}");
    }

    #[test]
    fn too_few_levels_is_insufficient() {
        let p = Preset::Zero.problem();
        let study = ConvergenceStudy {
            coeffs: p.coeffs,
            driver: DriverConfig::new(1.0, 1, 1),
            grid: InitialGrid::uniform(-1.0, 1.0, 3),
            ladder: vec![2, 4, 8, 16],
            reference_steps: 32,
            realizations: 1,
            seed: 0,
            params: IntegrationParams::default(),
        };
        let r = study.run().unwrap();
        assert_eq!(r.status, ConvergenceStatus::InsufficientData);
        assert!(r.fit.is_none());
    }

    #[test]
    fn ladder_must_divide_reference() {
        let p = Preset::Zero.problem();
        let study = ConvergenceStudy {
            coeffs: p.coeffs,
            driver: DriverConfig::new(1.0, 1, 1),
            grid: InitialGrid::uniform(-1.0, 1.0, 3),
            ladder: vec![3],
            reference_steps: 32,
            realizations: 1,
            seed: 0,
            params: IntegrationParams::default(),
        };
        assert!(study.run().is_err());
    }
}
