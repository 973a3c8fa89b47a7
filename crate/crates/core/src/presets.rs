//! Named reference problems shared by the CLI, the studies and the acceptance suite.

use serde::Serialize;
use std::fmt;
use std::str::FromStr;

use crate::characteristics::{linspace, EventPlacement, IntegrationParams};
use crate::coefficients::{scalar_field, CoefficientSet};
use crate::error::{Error, Result};
use crate::levy_driver::{DriverConfig, DriverRealization, LevyMeasureSpec, MarkDistribution};
use crate::spde_solver::{HTransform, InitialCondition, OracleKind, OracleSpec, SolveParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    /// All coefficients zero.
    Zero,
    /// `a ≡ 1`, no noise.
    ConstantDrift,
    /// `A(x) = x` with one Brownian motion.
    Linear,
    /// Pure-jump transport `α = sqrt(x² + 1)` with compound-Poisson marks on `[-1, 1]`.
    SinhExample,
    /// The sinh transport driven by a symmetric 1.75-stable path up to `T = 100`.
    Fig1,
    /// Smooth noise-free `a`, `b`, `c`.
    SmoothDeterministic,
    /// Non-commuting drift and jump transport, jumps snapped to the step grid.
    JumpTransport,
}

pub const ALL_PRESETS: [Preset; 7] = [
    Preset::Zero,
    Preset::ConstantDrift,
    Preset::Linear,
    Preset::SinhExample,
    Preset::Fig1,
    Preset::SmoothDeterministic,
    Preset::JumpTransport,
];

impl Preset {
    pub fn name(self) -> &'static str {
        match self {
            Self::Zero => "zero",
            Self::ConstantDrift => "constant-drift",
            Self::Linear => "linear",
            Self::SinhExample => "sinh-example",
            Self::Fig1 => "fig1",
            Self::SmoothDeterministic => "smooth-deterministic",
            Self::JumpTransport => "jump-transport",
        }
    }

    pub fn problem(self) -> Problem {
        match self {
            Self::Zero => zero(),
            Self::ConstantDrift => constant_drift(),
            Self::Linear => linear(),
            Self::SinhExample => sinh_example(),
            Self::Fig1 => fig1(),
            Self::SmoothDeterministic => smooth_deterministic(),
            Self::JumpTransport => jump_transport(),
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.trim().to_ascii_lowercase().replace('_', "-");
        let alias = match key.as_str() {
            "sinh-transport" | "sinh" => "sinh-example",
            "identity" => "zero",
            "deterministic" | "zero-noise" => "smooth-deterministic",
            "linear-a" | "stratonovich" => "linear",
            other => other,
        };
        ALL_PRESETS
            .iter()
            .copied()
            .find(|p| p.name() == alias)
            .ok_or_else(|| {
                let names: Vec<&str> = ALL_PRESETS.iter().map(|p| p.name()).collect();
                Error::Input(format!("unknown preset '{s}' (known: {})", names.join(", ")))
            })
    }
}

/// Everything needed to run one reference problem.
#[derive(Debug, Clone)]
pub struct Problem {
    pub preset: Option<Preset>,
    pub coeffs: CoefficientSet,
    pub u0: InitialCondition,
    pub driver: DriverConfig,
    /// `(lo, hi, count)` of the one-dimensional query grid.
    pub grid: (f64, f64, usize),
    pub times: Vec<f64>,
    pub params: SolveParams,
    pub oracle: Option<OracleKind>,
    pub default_seed: u64,
}

impl Problem {
    pub fn grid_points(&self) -> Vec<Vec<f64>> {
        linspace(self.grid.0, self.grid.1, self.grid.2).into_iter().map(|x| vec![x]).collect()
    }

    /// A driver config whose grid contains the output times.
    pub fn driver_config(&self) -> DriverConfig {
        self.driver.clone().with_pinned_times(&self.times)
    }

    pub fn oracle_spec(&self, driver: &DriverRealization) -> Option<OracleSpec> {
        self.oracle.clone().map(|kind| OracleSpec {
            kind,
            driver: driver.clone(),
            coeffs: Some(self.coeffs.clone()),
            u0: self.u0.clone(),
        })
    }
}

fn bump() -> InitialCondition {
    InitialCondition::scalar(|x| 1.0 / (1.0 + x * x))
}

fn unit_times(n: usize) -> Vec<f64> {
    linspace(0.0, 1.0, n + 1)
}

fn solve_params(dt: f64) -> SolveParams {
    SolveParams {
        integration: IntegrationParams::default().with_max_dt(dt),
        ..SolveParams::default()
    }
}

fn zero() -> Problem {
    Problem {
        preset: Some(Preset::Zero),
        coeffs: CoefficientSet::zero(1, 1).expect("valid dimensions"),
        u0: bump(),
        driver: DriverConfig::new(1.0, 1000, 1),
        grid: (-3.0, 3.0, 201),
        times: unit_times(4),
        params: solve_params(1e-3),
        oracle: Some(OracleKind::Deterministic),
        default_seed: 1,
    }
}

fn constant_drift() -> Problem {
    Problem {
        preset: Some(Preset::ConstantDrift),
        coeffs: CoefficientSet::zero(1, 1)
            .expect("valid dimensions")
            .with_transport(|_, o| o[0] = 1.0),
        ..zero()
    }
}

fn linear() -> Problem {
    Problem {
        preset: Some(Preset::Linear),
        coeffs: CoefficientSet::zero(1, 1)
            .expect("valid dimensions")
            .with_noise_transport(|x, o| o[0] = x[0])
            .with_noise_transport_jacobian(|_, o| o[0] = 1.0)
            .declare_smooth(),
        u0: InitialCondition::scalar(|x| (-0.5 * x * x).exp()),
        driver: DriverConfig::new(1.0, 1 << 10, 1).with_brownian(true),
        grid: (-2.0, 2.0, 41),
        times: unit_times(4),
        params: solve_params(f64::INFINITY),
        oracle: None,
        default_seed: 7,
    }
}

fn sinh_coeffs() -> CoefficientSet {
    CoefficientSet::zero(1, 1)
        .expect("valid dimensions")
        .with_jump_transport(scalar_field(|x| (x * x + 1.0).sqrt()))
        .declare_smooth()
}

fn sinh_example() -> Problem {
    Problem {
        preset: Some(Preset::SinhExample),
        coeffs: sinh_coeffs(),
        u0: bump(),
        driver: DriverConfig::new(1.0, 1000, 1).with_levy(LevyMeasureSpec::finite_activity(
            1.0,
            MarkDistribution::Uniform { low: -1.0, high: 1.0 },
        )),
        grid: (-3.0, 3.0, 201),
        times: unit_times(4),
        params: solve_params(1e-3),
        oracle: Some(OracleKind::SinhExample),
        default_seed: 2024,
    }
}

/// Seed whose path keeps `sinh(-Z_t)` inside `[-50, 50]` at every output time.
pub const FIG1_SEED: u64 = 6;

fn fig1() -> Problem {
    let times: Vec<f64> = (0..=10).map(|k| 10.0 * k as f64).collect();
    Problem {
        preset: Some(Preset::Fig1),
        coeffs: sinh_coeffs(),
        u0: bump(),
        driver: DriverConfig::new(100.0, 10_000, 1)
            .with_levy(LevyMeasureSpec::alpha_stable(1.75, 0.1, 0.0))
            .with_direct_path(true),
        grid: (-50.0, 50.0, 2001),
        times,
        params: solve_params(1e-2),
        oracle: Some(OracleKind::HTransform(HTransform::Sinh)),
        default_seed: FIG1_SEED,
    }
}

fn smooth_deterministic() -> Problem {
    Problem {
        preset: Some(Preset::SmoothDeterministic),
        coeffs: CoefficientSet::zero(1, 1)
            .expect("valid dimensions")
            .with_transport(|x, o| o[0] = 0.3 * x[0].cos() + 0.5)
            .with_reaction(|x| -0.4 / (1.0 + x[0] * x[0]))
            .with_source(|x| 0.2 * x[0].sin())
            .declare_smooth(),
        u0: InitialCondition::scalar(|x| (-0.5 * x * x).exp()),
        driver: DriverConfig::new(1.0, 1000, 1),
        grid: (-3.0, 3.0, 201),
        times: unit_times(4),
        params: solve_params(1e-3),
        oracle: Some(OracleKind::Deterministic),
        default_seed: 3,
    }
}

fn jump_transport() -> Problem {
    Problem {
        preset: Some(Preset::JumpTransport),
        coeffs: CoefficientSet::zero(1, 1)
            .expect("valid dimensions")
            .with_transport(|x, o| o[0] = 0.5 * x[0].sin() + 0.2)
            .with_jump_transport(scalar_field(|x| 0.3 * x + 0.5))
            .declare_smooth(),
        u0: bump(),
        driver: DriverConfig::new(1.0, 1 << 12, 1).with_levy(LevyMeasureSpec::finite_activity(
            4.0,
            MarkDistribution::Uniform { low: -1.0, high: 1.0 },
        )),
        grid: (-2.0, 2.0, 41),
        times: unit_times(4),
        params: SolveParams {
            integration: IntegrationParams::default().with_placement(EventPlacement::GridSnapped),
            ..SolveParams::default()
        },
        oracle: None,
        default_seed: 11,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_round_trip() {
        for p in ALL_PRESETS {
            assert_eq!(p.name().parse::<Preset>().unwrap(), p);
        }
        assert_eq!("sinh_transport".parse::<Preset>().unwrap(), Preset::SinhExample);
        assert!("nope".parse::<Preset>().is_err());
    }

    #[test]
    fn presets_validate() {
        for p in ALL_PRESETS {
            let prob = p.problem();
            prob.driver_config().validate().unwrap();
            assert_eq!(prob.grid_points().len(), prob.grid.2);
            assert_eq!(prob.coeffs.dim(), 1);
        }
    }

    #[test]
    fn fig1_seed_keeps_argmax_on_grid() {
        let prob = Preset::Fig1.problem();
        let drv = prob.driver_config().generate(prob.default_seed, 0).unwrap();
        for &t in &prob.times {
            let z = drv.levy_value_at(t).unwrap()[0];
            assert!((-z).sinh().abs() < 49.0, "t = {t}, Z = {z}");
        }
    }
}
