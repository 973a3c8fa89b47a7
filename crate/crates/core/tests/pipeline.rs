use marcus_core::characteristics::{InitialGrid, StepScheme};
use marcus_core::levy_driver::{sample_compound_poisson, stream_rng, Substream};
use marcus_core::presets::Preset;
use marcus_core::spde_solver::{oracle_compare, PointFlag};
use marcus_core::stats::mean;
use marcus_core::studies::{round_trip, ConvergenceStudy};
use marcus_core::{
    integrate_path, solve, DriverConfig, IntegrationParams, LevyMeasureSpec, MarkDistribution,
};

fn study(preset: Preset, ladder: Vec<usize>, reference: usize, realizations: u64) -> ConvergenceStudy {
    let p = preset.problem();
    ConvergenceStudy {
        coeffs: p.coeffs,
        driver: p.driver,
        grid: InitialGrid::uniform(p.grid.0, p.grid.1, 9),
        ladder,
        reference_steps: reference,
        realizations,
        seed: p.default_seed,
        params: p.params.integration,
    }
}

#[test]
fn jump_transport_is_first_order() {
    let r = study(Preset::JumpTransport, vec![32, 64, 128, 256, 512], 8192, 16).run().unwrap();
    let fit = r.fit.unwrap();
    assert!((0.9..=1.3).contains(&fit.slope), "{r:?}");
}

#[test]
fn deterministic_preset_is_second_order() {
    let r = study(Preset::SmoothDeterministic, vec![8, 16, 32, 64], 2048, 1).run().unwrap();
    assert!(r.fit.unwrap().slope >= 1.9, "{r:?}");
}

#[test]
fn linear_preset_strong_order() {
    let r = study(Preset::Linear, vec![16, 32, 64, 128], 4096, 16).run().unwrap();
    let fit = r.fit.unwrap();
    assert!(fit.slope >= 0.45 && fit.r_squared >= 0.9, "{r:?}");
}

#[test]
fn linear_preset_matches_exact_flow() {
    // dφ = -φ∘dW  ⇒  φ_{0,1}(y) = y e^{-W_1}
    let p = Preset::Linear.problem();
    let drv = p.driver_config().generate(5, 0).unwrap();
    let flow = integrate_path(&p.coeffs, &drv, &InitialGrid::uniform(-2.0, 2.0, 5), &[1.0], &p.params.integration).unwrap();
    let w1 = drv.brownian_value_at(1.0).unwrap()[0];
    for (i, y) in flow.initial_points.iter().enumerate() {
        let exact = y[0] * (-w1).exp();
        assert!((flow.states[i][0].x[0] - exact).abs() < 1e-3 * (1.0 + exact.abs()));
    }
}

#[test]
fn ito_cross_check_agrees_in_mean() {
    let p = Preset::Linear.problem();
    let grid = InitialGrid::uniform(0.5, 1.5, 3);
    let mut gaps = Vec::new();
    for k in 0..24 {
        let drv = p.driver_config().generate(p.default_seed, k).unwrap();
        let heun = integrate_path(&p.coeffs, &drv, &grid, &[1.0], &IntegrationParams::default()).unwrap();
        let ito = integrate_path(
            &p.coeffs,
            &drv,
            &grid,
            &[1.0],
            &IntegrationParams::default().with_scheme(StepScheme::ItoEuler),
        )
        .unwrap();
        gaps.push((heun.states[1][0].x[0] - ito.states[1][0].x[0]).abs());
    }
    assert!(mean(&gaps) < 0.05, "{gaps:?}");
}

#[test]
fn sinh_preset_solve_matches_oracle() {
    let p = Preset::SinhExample.problem();
    let drv = p.driver_config().generate(p.default_seed, 0).unwrap();
    let field = solve(&p.coeffs, &drv, &p.u0, &p.times, &p.grid_points(), &p.params).unwrap();
    let report = oracle_compare(&field, &p.oracle_spec(&drv).unwrap()).unwrap();
    assert!(report.rmse <= 5e-3 && report.flagged_fraction == 0.0, "{report:?}");
}

#[test]
fn sinh_round_trip_across_seeds() {
    let p = Preset::SinhExample.problem();
    for seed in [1, 2, 3] {
        let r = round_trip(&p, seed, 1.0, 51).unwrap();
        assert!(r.residual <= 1e-3, "seed {seed}: {r:?}");
    }
}

#[test]
fn constant_drift_field_translates() {
    let p = Preset::ConstantDrift.problem();
    let drv = p.driver_config().generate(1, 0).unwrap();
    let pts = p.grid_points();
    let f = solve(&p.coeffs, &drv, &p.u0, &p.times, &pts, &p.params).unwrap();
    for (k, t) in p.times.iter().enumerate() {
        for (i, x) in pts.iter().enumerate() {
            assert_eq!(f.flags[k][i], PointFlag::Ok);
            assert!((f.values[k][i] - p.u0.eval(&[x[0] + t])).abs() < 1e-8);
        }
    }
}

#[test]
fn compound_poisson_counts_have_the_right_mean() {
    let spec = LevyMeasureSpec::finite_activity(2.0, MarkDistribution::Uniform { low: -1.0, high: 1.0 });
    let counts: Vec<f64> = (0..4000)
        .map(|k| {
            let mut rng = stream_rng(77, k, Substream::Jumps);
            sample_compound_poisson(&spec, 1.5, 1, &mut rng).unwrap().len() as f64
        })
        .collect();
    // mean 3, standard error sqrt(3 / 4000) ≈ 0.027
    assert!((mean(&counts) - 3.0).abs() < 0.12);
}

#[test]
fn truncated_stable_driver_gaussian_substitute_variance() {
    use marcus_core::levy_driver::SmallJumpMode;
    let spec = LevyMeasureSpec::alpha_stable(1.5, 0.2, 0.1);
    let var_rate = spec.small_jump_variance();
    let cfg = DriverConfig::new(1.0, 10, 1)
        .with_levy(spec)
        .with_small_jump_mode(SmallJumpMode::GaussianSubstitute);
    let sums: Vec<f64> = (0..3000)
        .map(|k| {
            let d = cfg.generate(3, k).unwrap();
            d.small_jump_increments.iter().map(|v| v[0]).sum::<f64>()
        })
        .collect();
    let m = mean(&sums);
    let v = sums.iter().map(|s| (s - m).powi(2)).sum::<f64>() / (sums.len() - 1) as f64;
    assert!((v / var_rate - 1.0).abs() < 0.1, "{v} vs {var_rate}");
}
