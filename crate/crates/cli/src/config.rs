//! The TOML run configuration and its resolution into a [`Problem`].
//!
//! Every block is optional. A `problem.preset` supplies the defaults and any
//! key given in the file overrides the preset value.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use marcus_core::characteristics::{linspace, EventPlacement, StepScheme};
use marcus_core::coefficients::{scalar_field, CoefficientSet};
use marcus_core::levy_driver::{parse_seed, TabulatedDensity};
use marcus_core::presets::{Preset, Problem};
use marcus_core::spde_solver::HTransform;
use marcus_core::{InitialCondition, LevyKind, LevyMeasureSpec, MarkDistribution, OracleKind, SmallJumpMode};

use crate::expr::{Expr, ParseError};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("invalid configuration in {path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("[{block}] {key}: {message}")]
    Invalid { block: &'static str, key: &'static str, message: String },
    #[error("[problem] {key}: {source}")]
    Expression { key: &'static str, source: ParseError },
    #[error(transparent)]
    Core(#[from] marcus_core::Error),
}

fn invalid(block: &'static str, key: &'static str, message: impl Into<String>) -> ConfigError {
    ConfigError::Invalid { block, key, message: message.into() }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub problem: ProblemBlock,
    pub driver: DriverBlock,
    pub numerics: NumericsBlock,
    pub output: OutputBlock,
    pub checks: ChecksBlock,
    pub convergence: ConvergenceBlock,
    pub exp_map: ExpMapBlock,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OracleChoice {
    None,
    Deterministic,
    SinhExample,
    HTransform,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FieldSource {
    /// Inverse of the integrated characteristics.
    Characteristics,
    /// The oracle evaluated directly (explicit solutions only).
    Oracle,
}

/// Coefficients are expressions in `x` (`d = m = 1`).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProblemBlock {
    pub preset: Option<String>,
    /// `a`
    pub transport: Option<String>,
    /// `b`
    pub reaction: Option<String>,
    /// `c`
    pub source: Option<String>,
    /// `A`
    pub noise_transport: Option<String>,
    /// `B`
    pub noise_reaction: Option<String>,
    /// `C`
    pub noise_source: Option<String>,
    /// `α`
    pub jump_transport: Option<String>,
    /// `β`
    pub jump_reaction: Option<String>,
    /// `σ`
    pub jump_source: Option<String>,
    pub u0: Option<String>,
    pub oracle: Option<OracleChoice>,
    /// `α(x)` of the H-transform oracle; defaults to `jump_transport`.
    pub h_alpha: Option<String>,
    pub h_anchor: Option<f64>,
    pub h_domain: Option<[f64; 2]>,
    pub field_source: Option<FieldSource>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SeedValue {
    Number(u64),
    Text(String),
}

impl SeedValue {
    pub fn resolve(&self) -> Result<u64, ConfigError> {
        match self {
            Self::Number(n) => Ok(*n),
            Self::Text(s) => parse_seed(s).map_err(|e| invalid("driver", "seed", e.to_string())),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DriverBlock {
    pub horizon: Option<f64>,
    pub brownian: Option<bool>,
    pub seed: Option<SeedValue>,
    pub realization: Option<u64>,
    pub levy: Option<LevyBlock>,
    pub direct_path: Option<bool>,
    pub small_jump_mode: Option<SmallJumpMode>,
    pub compensated: Option<bool>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LevyKindName {
    None,
    FiniteActivity,
    AlphaStable,
    Tabulated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LevyBlock {
    pub kind: LevyKindName,
    pub intensity: Option<f64>,
    pub marks: Option<MarksBlock>,
    pub alpha: Option<f64>,
    pub scale: Option<f64>,
    pub truncation_epsilon: Option<f64>,
    pub points: Option<Vec<f64>>,
    pub density: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MarkName {
    Uniform,
    Normal,
    Constant,
    Tabulated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MarksBlock {
    pub dist: MarkName,
    pub low: Option<f64>,
    pub high: Option<f64>,
    pub mean: Option<f64>,
    pub std: Option<f64>,
    pub value: Option<f64>,
    pub points: Option<Vec<f64>>,
    pub density: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridBlock {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NumericsBlock {
    pub dt: Option<f64>,
    pub substeps: Option<usize>,
    pub scheme: Option<StepScheme>,
    pub placement: Option<EventPlacement>,
    /// Query grid of the solution field.
    pub grid: Option<GridBlock>,
    pub times: Option<Vec<f64>>,
    /// Points per axis of the forward table.
    pub flow_points: Option<usize>,
    /// Explicit initial points of the forward table (kept in the given order).
    pub initial_points: Option<Vec<f64>>,
    pub max_extensions: Option<usize>,
    pub inversion_tol: Option<f64>,
    pub domain: Option<[f64; 2]>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputBlock {
    pub dir: Option<PathBuf>,
    /// Write the driver files alongside a solve.
    pub driver_files: Option<bool>,
    /// Indices of forward-table points whose trajectories are written.
    pub trajectories: Option<Vec<usize>>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChecksBlock {
    pub oracle_rmse: Option<f64>,
    pub oracle_max_abs: Option<f64>,
    pub max_flagged_fraction: Option<f64>,
    pub round_trip: Option<f64>,
    pub inverse_check: Option<f64>,
    pub min_slope: Option<f64>,
    pub max_slope: Option<f64>,
    pub min_r_squared: Option<f64>,
    pub exp_map_error: Option<f64>,
    pub min_order: Option<f64>,
    pub max_order: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConvergenceBlock {
    /// Coarse step sizes; each must divide the horizon into a divisor of the reference count.
    pub ladder: Option<Vec<f64>>,
    pub reference_dt: Option<f64>,
    pub realizations: Option<u64>,
    pub grid_points: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExpMapBlock {
    /// `φ(x, z)` in the variables `x` and `z`; defaults to `-α(x) z`.
    pub field: Option<String>,
    pub x0: Option<f64>,
    pub z: Option<f64>,
    pub substeps: Option<usize>,
    /// Expected endpoint, checked against `checks.exp_map_error`.
    pub exact: Option<f64>,
    pub order_ladder: Option<Vec<usize>>,
    pub reference_substeps: Option<usize>,
    /// Side of the `(x0, z)` grid of the inverse sweep.
    pub sweep: Option<usize>,
}

impl RunConfig {
    pub fn from_toml(text: &str, path: &Path) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::Parse { path: path.to_path_buf(), message: e.to_string() })
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| ConfigError::Read { path: path.to_path_buf(), source })?;
        Self::from_toml(&text, path)
    }

    /// The fully commented default configuration.
    pub fn reference() -> &'static str {
        REFERENCE
    }
}

/// A [`Problem`] plus the CLI-level settings resolved from a [`RunConfig`].
#[derive(Debug, Clone)]
pub struct Resolved {
    pub problem: Problem,
    pub seed: u64,
    pub realization: u64,
    pub field_source: FieldSource,
    pub initial_points: Option<Vec<f64>>,
    pub dt: f64,
    pub out_dir: PathBuf,
    pub driver_files: bool,
    pub trajectories: Vec<usize>,
    pub checks: ChecksBlock,
    pub convergence: ConvergenceBlock,
    pub exp_map: ExpMapBlock,
}

fn expr_1d(key: &'static str, text: &str) -> Result<Arc<Expr>, ConfigError> {
    Expr::parse(text, &["x"]).map(Arc::new).map_err(|source| ConfigError::Expression { key, source })
}

fn positive(block: &'static str, key: &'static str, v: f64) -> Result<f64, ConfigError> {
    if v > 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(invalid(block, key, format!("must be finite and > 0, got {v}")))
    }
}

fn need<T: Copy>(v: Option<T>, block: &'static str, key: &'static str) -> Result<T, ConfigError> {
    v.ok_or_else(|| invalid(block, key, "required for this kind"))
}

fn marks(b: &MarksBlock) -> Result<MarkDistribution, ConfigError> {
    Ok(match b.dist {
        MarkName::Uniform => MarkDistribution::Uniform {
            low: need(b.low, "driver.levy.marks", "low")?,
            high: need(b.high, "driver.levy.marks", "high")?,
        },
        MarkName::Normal => MarkDistribution::Normal {
            mean: b.mean.unwrap_or(0.0),
            std: need(b.std, "driver.levy.marks", "std")?,
        },
        MarkName::Constant => MarkDistribution::Constant { value: need(b.value, "driver.levy.marks", "value")? },
        MarkName::Tabulated => MarkDistribution::Tabulated(table(&b.points, &b.density, "driver.levy.marks")?),
    })
}

fn table(points: &Option<Vec<f64>>, density: &Option<Vec<f64>>, block: &'static str) -> Result<TabulatedDensity, ConfigError> {
    let (Some(p), Some(d)) = (points, density) else {
        return Err(invalid(block, "points", "tabulated densities need `points` and `density`"));
    };
    Ok(TabulatedDensity::new(p.clone(), d.clone())?)
}

fn levy(b: &LevyBlock) -> Result<Option<LevyMeasureSpec>, ConfigError> {
    let spec = match b.kind {
        LevyKindName::None => return Ok(None),
        LevyKindName::FiniteActivity => {
            let m = b.marks.as_ref().ok_or_else(|| invalid("driver.levy", "marks", "required for finite activity"))?;
            LevyMeasureSpec::finite_activity(need(b.intensity, "driver.levy", "intensity")?, marks(m)?)
        }
        LevyKindName::AlphaStable => LevyMeasureSpec::alpha_stable(
            need(b.alpha, "driver.levy", "alpha")?,
            need(b.scale, "driver.levy", "scale")?,
            b.truncation_epsilon.unwrap_or(0.0),
        ),
        LevyKindName::Tabulated => LevyMeasureSpec {
            kind: LevyKind::Tabulated { table: table(&b.points, &b.density, "driver.levy")? },
            truncation_epsilon: b.truncation_epsilon.unwrap_or(0.0),
        },
    };
    Ok(Some(spec))
}

impl RunConfig {
    /// Applies the config on top of its preset (or the zero problem) and
    /// validates the result.
    pub fn resolve(&self) -> Result<Resolved, ConfigError> {
        let preset = match &self.problem.preset {
            Some(name) => Some(name.parse::<Preset>().map_err(|e| invalid("problem", "preset", e.to_string()))?),
            None => None,
        };
        let mut problem = preset.unwrap_or(Preset::Zero).problem();
        problem.preset = preset;
        let pb = &self.problem;

        // Coefficients
        let mut c: CoefficientSet = problem.coeffs.clone();
        if let Some(t) = &pb.transport {
            let f = expr_1d("transport", t)?;
            c = c.with_transport(move |x, o| o[0] = f.at(x[0]));
        }
        if let Some(t) = &pb.reaction {
            let f = expr_1d("reaction", t)?;
            c = c.with_reaction(move |x| f.at(x[0]));
        }
        if let Some(t) = &pb.source {
            let f = expr_1d("source", t)?;
            c = c.with_source(move |x| f.at(x[0]));
        }
        if let Some(t) = &pb.noise_transport {
            let f = expr_1d("noise_transport", t)?;
            c = c.with_noise_transport(scalar_field(move |x| f.at(x)));
        }
        if let Some(t) = &pb.noise_reaction {
            let f = expr_1d("noise_reaction", t)?;
            c = c.with_noise_reaction(scalar_field(move |x| f.at(x)));
        }
        if let Some(t) = &pb.noise_source {
            let f = expr_1d("noise_source", t)?;
            c = c.with_noise_source(scalar_field(move |x| f.at(x)));
        }
        if let Some(t) = &pb.jump_transport {
            let f = expr_1d("jump_transport", t)?;
            c = c.with_jump_transport(scalar_field(move |x| f.at(x)));
        }
        if let Some(t) = &pb.jump_reaction {
            let f = expr_1d("jump_reaction", t)?;
            c = c.with_jump_reaction(scalar_field(move |x| f.at(x)));
        }
        if let Some(t) = &pb.jump_source {
            let f = expr_1d("jump_source", t)?;
            c = c.with_jump_source(scalar_field(move |x| f.at(x)));
        }
        problem.coeffs = c;
        if let Some(t) = &pb.u0 {
            let f = expr_1d("u0", t)?;
            problem.u0 = InitialCondition::scalar(move |x| f.at(x));
        }

        // Oracle
        match pb.oracle {
            Some(OracleChoice::None) => problem.oracle = None,
            Some(OracleChoice::Deterministic) => problem.oracle = Some(OracleKind::Deterministic),
            Some(OracleChoice::SinhExample) => problem.oracle = Some(OracleKind::SinhExample),
            Some(OracleChoice::HTransform) => {
                let text = pb
                    .h_alpha
                    .as_ref()
                    .or(pb.jump_transport.as_ref())
                    .ok_or_else(|| invalid("problem", "h_alpha", "the H-transform oracle needs `h_alpha` or `jump_transport`"))?;
                let f = expr_1d("h_alpha", text)?;
                let [lo, hi] = pb.h_domain.unwrap_or([-50.0, 50.0]);
                let anchor = pb.h_anchor.unwrap_or(if lo <= 0.0 && hi >= 0.0 { 0.0 } else { 0.5 * (lo + hi) });
                problem.oracle = Some(OracleKind::HTransform(HTransform::quadrature(move |x| f.at(x), anchor, (lo, hi))?));
            }
            None => {}
        }
        let field_source = pb.field_source.unwrap_or(if preset == Some(Preset::Fig1) {
            FieldSource::Oracle
        } else {
            FieldSource::Characteristics
        });
        if field_source == FieldSource::Oracle && problem.oracle.is_none() {
            return Err(invalid("problem", "field_source", "`oracle` needs a configured oracle"));
        }

        // Driver
        let db = &self.driver;
        if let Some(h) = db.horizon {
            problem.driver.horizon = positive("driver", "horizon", h)?;
        }
        if let Some(b) = db.brownian {
            problem.driver.brownian = b;
        }
        if let Some(l) = &db.levy {
            problem.driver.levy = levy(l)?;
        }
        if let Some(d) = db.direct_path {
            problem.driver.direct_path = d;
        }
        if let Some(m) = db.small_jump_mode {
            problem.driver.small_jump_mode = m;
        }
        if let Some(c) = db.compensated {
            problem.driver.compensated = c;
        }
        let seed = match &db.seed {
            Some(s) => s.resolve()?,
            None => problem.default_seed,
        };

        // Numerics
        let nb = &self.numerics;
        let horizon = problem.driver.horizon;
        let dt = match nb.dt {
            Some(dt) => positive("numerics", "dt", dt)?,
            None if problem.params.integration.max_dt.is_finite() => problem.params.integration.max_dt,
            None => horizon / problem.driver.steps as f64,
        };
        problem.driver.steps = marcus_core::DriverConfig::steps_for(horizon, dt);
        problem.params.integration.max_dt = dt;
        if let Some(s) = nb.substeps {
            if s == 0 {
                return Err(invalid("numerics", "substeps", "must be ≥ 1"));
            }
            problem.params.integration.substeps = s;
        }
        if let Some(s) = nb.scheme {
            problem.params.integration.scheme = s;
        }
        if let Some(p) = nb.placement {
            problem.params.integration.placement = p;
        }
        if let Some([lo, hi]) = nb.domain {
            problem.params.integration.domain = Some(vec![(lo, hi)]);
        }
        if let Some(g) = nb.grid {
            if !(g.lo < g.hi) || g.count < 2 {
                return Err(invalid("numerics", "grid", "needs lo < hi and count ≥ 2"));
            }
            problem.grid = (g.lo, g.hi, g.count);
        }
        match &nb.times {
            Some(t) => {
                if t.iter().any(|v| !(*v >= 0.0 && *v <= horizon)) || t.windows(2).any(|w| w[1] < w[0]) {
                    return Err(invalid("numerics", "times", format!("must be nondecreasing within [0, {horizon}]")));
                }
                problem.times = t.clone();
            }
            None if db.horizon.is_some() => {
                problem.times = linspace(0.0, horizon, problem.times.len().max(2));
            }
            None => {}
        }
        if let Some(n) = nb.flow_points {
            if n < 2 {
                return Err(invalid("numerics", "flow_points", "must be ≥ 2"));
            }
            problem.params.flow_points = n;
        }
        if let Some(n) = nb.max_extensions {
            problem.params.max_extensions = n;
        }
        if let Some(t) = nb.inversion_tol {
            problem.params.inversion_tol = positive("numerics", "inversion_tol", t)?;
        }
        problem.driver_config().validate()?;

        let mut checks = default_checks(preset, &problem);
        merge_checks(&mut checks, &self.checks);

        Ok(Resolved {
            problem,
            seed,
            realization: db.realization.unwrap_or(0),
            field_source,
            initial_points: nb.initial_points.clone(),
            dt,
            out_dir: self.output.dir.clone().unwrap_or_else(|| PathBuf::from("out")),
            driver_files: self.output.driver_files.unwrap_or(false),
            trajectories: self.output.trajectories.clone().unwrap_or_default(),
            checks,
            convergence: self.convergence.clone(),
            exp_map: self.exp_map.clone(),
        })
    }
}

fn default_checks(preset: Option<Preset>, problem: &Problem) -> ChecksBlock {
    let mut c = ChecksBlock {
        inverse_check: Some(1e-8),
        round_trip: Some(1e-3),
        min_order: Some(3.5),
        max_order: Some(4.5),
        ..ChecksBlock::default()
    };
    match &problem.oracle {
        Some(OracleKind::Deterministic) => c.oracle_max_abs = Some(1e-6),
        Some(_) => c.oracle_rmse = Some(5e-3),
        None => {}
    }
    match preset {
        Some(Preset::Linear) => {
            c.min_slope = Some(0.45);
            c.min_r_squared = Some(0.9);
        }
        Some(Preset::SmoothDeterministic) | Some(Preset::ConstantDrift) => c.min_slope = Some(1.9),
        Some(Preset::JumpTransport) => {
            c.min_slope = Some(0.9);
            c.max_slope = Some(1.3);
        }
        _ => {}
    }
    c
}

fn merge_checks(into: &mut ChecksBlock, from: &ChecksBlock) {
    macro_rules! take {
        ($($f:ident),*) => { $( if from.$f.is_some() { into.$f = from.$f; } )* };
    }
    take!(
        oracle_rmse,
        oracle_max_abs,
        max_flagged_fraction,
        round_trip,
        inverse_check,
        min_slope,
        max_slope,
        min_r_squared,
        exp_map_error,
        min_order,
        max_order
    );
}

const REFERENCE: &str = r#"# marcus-spde run configuration. Every key is optional; a preset supplies
# the defaults and explicit keys override it.

[problem]
# zero | constant-drift | linear | sinh-example | fig1 | smooth-deterministic | jump-transport
preset = "sinh-example"
# Coefficients as expressions in x (d = m = 1): + - * / ^, sqrt, exp, ln,
# sin, cos, tan, sinh, cosh, tanh, arcsinh, abs, pi, e.
# transport = "0.3*cos(x) + 0.5"      # a
# reaction = "0"                      # b
# source = "0"                        # c
# noise_transport = "x"               # A (Stratonovich)
# noise_reaction / noise_source       # B, C
# jump_transport = "sqrt(x^2 + 1)"    # alpha (Marcus)
# jump_reaction / jump_source         # beta, sigma
# u0 = "1/(1 + x^2)"
# oracle = "none" | "deterministic" | "sinh-example" | "h-transform"
# h_alpha = "sqrt(x^2 + 1)"           # default: jump_transport
# h_anchor = 0.0
# h_domain = [-50.0, 50.0]
# field_source = "characteristics" | "oracle"   # fig1 defaults to oracle

[driver]
# horizon = 1.0
# brownian = false
seed = 2024                           # integer or "0x..." hex string
# realization = 0
# direct_path = false                 # stable paths by increments (alpha-stable only)
# small_jump_mode = "drop" | "gaussian-substitute"
# compensated = true

[driver.levy]
kind = "finite-activity"              # none | finite-activity | alpha-stable | tabulated
intensity = 1.0
marks = { dist = "uniform", low = -1.0, high = 1.0 }
# alpha = 1.75
# scale = 0.1
# truncation_epsilon = 0.0
# points = [...]; density = [...]     # tabulated

[numerics]
dt = 1e-3
substeps = 32                         # RK4 substeps per jump
# scheme = "heun" | "ito-euler"
# placement = "inserted" | "grid-snapped"
grid = { lo = -3.0, hi = 3.0, count = 201 }
times = [0.0, 0.25, 0.5, 0.75, 1.0]
flow_points = 201
# initial_points = [...]              # explicit forward-table points (flow-identity)
max_extensions = 4
inversion_tol = 1e-9
# domain = [-100.0, 100.0]

[output]
dir = "out"
driver_files = false
# trajectories = [0, 100, 200]

[checks]
# oracle_rmse = 5e-3                  # h-transform / sinh oracles
# oracle_max_abs = 1e-6               # deterministic oracle
# max_flagged_fraction = 1.0
round_trip = 1e-3
inverse_check = 1e-8
# min_slope / max_slope / min_r_squared   # convergence
# exp_map_error = 1e-10
min_order = 3.5
max_order = 4.5

[convergence]
# ladder = [0.015625, 0.0078125, 0.00390625, 0.001953125]
# reference_dt = 1.52587890625e-5
# realizations = 32
# grid_points = 9

[exp_map]
# field = "x*z"                       # default: -alpha(x) z
# x0 = 1.0
# z = 0.6931471805599453
# substeps = 64
# exact = 2.0
# order_ladder = [4, 8, 16, 32, 64]
# reference_substeps = 4096
# sweep = 10
"#;

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(s: &str) -> Result<RunConfig, ConfigError> {
        RunConfig::from_toml(s, Path::new("test.toml"))
    }

    #[test]
    fn reference_config_parses_and_resolves() {
        let cfg = parse(RunConfig::reference()).unwrap();
        let r = cfg.resolve().unwrap();
        assert_eq!(r.problem.preset, Some(Preset::SinhExample));
        assert_eq!(r.seed, 2024);
        assert_eq!(r.problem.driver.steps, 1000);
    }

    #[test]
    fn unknown_keys_are_rejected_with_context() {
        let e = parse("[numerics]\ndt = 0.1\nbogus = 3\n").unwrap_err().to_string();
        assert!(e.contains("bogus") && e.contains("line 3"), "{e}");
        let e = parse("[driver.levy]\nkind = \"finite-activity\"\nrate = 1\n").unwrap_err().to_string();
        assert!(e.contains("rate"), "{e}");
    }

    #[test]
    fn expressions_override_the_preset() {
        let cfg = parse("[problem]\npreset = \"zero\"\ntransport = \"1\"\nu0 = \"x^2\"\n").unwrap();
        let r = cfg.resolve().unwrap();
        let mut a = [0.0];
        r.problem.coeffs.eval_transport(&[0.3], &mut a);
        assert_eq!(a[0], 1.0);
        assert_eq!(r.problem.u0.eval(&[3.0]), 9.0);
    }

    #[test]
    fn bad_expression_names_the_key() {
        let e = parse("[problem]\nreaction = \"1 + \"\n").unwrap().resolve().unwrap_err().to_string();
        assert!(e.contains("reaction"), "{e}");
    }

    #[test]
    fn hex_seed() {
        let r = parse("[driver]\nseed = \"0xff\"\n").unwrap().resolve().unwrap();
        assert_eq!(r.seed, 255);
    }

    #[test]
    fn invalid_driver_is_reported() {
        let e = parse("[driver.levy]\nkind = \"finite-activity\"\nintensity = -1.0\nmarks = { dist = \"constant\", value = 1.0 }\n")
            .unwrap()
            .resolve()
            .unwrap_err()
            .to_string();
        assert!(e.contains("intensity") || e.contains("λ"), "{e}");
    }

    #[test]
    fn fig1_defaults_to_the_oracle_field() {
        let r = parse("[problem]\npreset = \"fig1\"\n").unwrap().resolve().unwrap();
        assert_eq!(r.field_source, FieldSource::Oracle);
        assert_eq!(r.problem.times.len(), 11);
        assert_eq!(r.problem.driver.steps, 10_000);
    }
}
