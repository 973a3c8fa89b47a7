//! The solution field `u(t, x) = ξ_{t,0}(x, 1) u0(φ_{t,0}(x)) + ζ_{t,0}(x, 1, 0)`
//! and the closed-form reference solutions it is checked against.

use rayon::prelude::*;
use serde::Serialize;
use std::io::Write;
use std::sync::Arc;

use crate::characteristics::{
    integrate_path, EventPlacement, FlowSolution, InitialGrid, IntegrationParams, StepScheme,
};
use crate::coefficients::{CoefficientSet, ScalarFn};
use crate::error::{input, Error, Result};
use crate::inverse_flow::{InverseCoefficients, InverseTable1d, InverseTableNd, DEFAULT_TOLERANCE};
use crate::levy_driver::{DriverRealization, SmallJumpMode};
use crate::marcus_exp::rk4;
use crate::quadrature::adaptive_simpson;

/// Default number of RK4 steps for the deterministic reference solution.
pub const DETERMINISTIC_ORACLE_STEPS: usize = 2048;

#[derive(Clone)]
pub struct InitialCondition {
    pub u0: ScalarFn,
    /// The caller asserts `u0 ∈ C²_b`.
    pub declared_regularity: bool,
}

impl std::fmt::Debug for InitialCondition {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("InitialCondition")
            .field("declared_regularity", &self.declared_regularity)
            .finish_non_exhaustive()
    }
}

impl InitialCondition {
    pub fn new(f: impl Fn(&[f64]) -> f64 + Send + Sync + 'static) -> Self {
        Self { u0: Arc::new(f), declared_regularity: false }
    }

    /// A function of one variable.
    pub fn scalar(f: impl Fn(f64) -> f64 + Send + Sync + 'static) -> Self {
        Self::new(move |x: &[f64]| f(x[0]))
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        (self.u0)(x)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SolveParams {
    pub integration: IntegrationParams,
    /// Initial points of the flow table per axis.
    pub flow_points: usize,
    /// Box of initial points; defaults to the bounding box of the query grid.
    pub flow_box: Option<Vec<(f64, f64)>>,
    /// `d = 1`: how many times the table may be widened to cover the query grid.
    pub max_extensions: usize,
    pub inversion_tol: f64,
}

impl Default for SolveParams {
    fn default() -> Self {
        Self {
            integration: IntegrationParams::default().with_max_dt(1e-3),
            flow_points: 201,
            flow_box: None,
            max_extensions: 4,
            inversion_tol: DEFAULT_TOLERANCE,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum PointFlag {
    Ok,
    /// Outside the range of the forward table at this time.
    OutOfRange,
    /// A trajectory in the interpolation stencil diverged or left the domain.
    Diverged,
    /// The forward table is not monotone at this time.
    NonMonotone,
    InversionFailed,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Provenance {
    pub seed: u64,
    pub realization_index: u64,
    pub max_step: f64,
    pub substeps: usize,
    pub scheme: StepScheme,
    pub placement: EventPlacement,
    pub small_jump_mode: SmallJumpMode,
    /// Per axis `(lo, hi, count)` of the forward table.
    pub flow_grid: Vec<(f64, f64, usize)>,
    pub extensions: usize,
    pub source: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SolutionField {
    pub times: Vec<f64>,
    pub points: Vec<Vec<f64>>,
    /// `values[time][point]`; `NaN` where flagged.
    pub values: Vec<Vec<f64>>,
    pub flags: Vec<Vec<PointFlag>>,
    pub provenance: Provenance,
}

impl SolutionField {
    pub fn flagged_fraction(&self) -> f64 {
        let total = self.times.len() * self.points.len();
        let bad = self.flags.iter().flatten().filter(|f| **f != PointFlag::Ok).count();
        if total == 0 {
            0.0
        } else {
            bad as f64 / total as f64
        }
    }

    fn write_point_header(&self, w: &mut impl Write) -> std::io::Result<()> {
        let d = self.points.first().map_or(1, Vec::len);
        if d == 1 {
            write!(w, "x")
        } else {
            let names: Vec<String> = (1..=d).map(|i| format!("x_{i}")).collect();
            write!(w, "{}", names.join(","))
        }
    }

    /// `x,<t_0>,<t_1>,...` then one row per point; flagged values are `nan`.
    pub fn write_csv(&self, w: &mut impl Write) -> std::io::Result<()> {
        self.write_point_header(w)?;
        for t in &self.times {
            write!(w, ",{t}")?;
        }
        writeln!(w)?;
        for (p, x) in self.points.iter().enumerate() {
            let coords: Vec<String> = x.iter().map(|v| format!("{v:e}")).collect();
            write!(w, "{}", coords.join(","))?;
            for k in 0..self.times.len() {
                if self.flags[k][p] == PointFlag::Ok {
                    write!(w, ",{:e}", self.values[k][p])?;
                } else {
                    write!(w, ",nan")?;
                }
            }
            writeln!(w)?;
        }
        Ok(())
    }

    /// Sidecar to [`write_csv`](Self::write_csv) with the flag of every value.
    pub fn write_flags_csv(&self, w: &mut impl Write) -> std::io::Result<()> {
        self.write_point_header(w)?;
        for t in &self.times {
            write!(w, ",{t}")?;
        }
        writeln!(w)?;
        for (p, x) in self.points.iter().enumerate() {
            let coords: Vec<String> = x.iter().map(|v| format!("{v:e}")).collect();
            write!(w, "{}", coords.join(","))?;
            for k in 0..self.times.len() {
                let name = match self.flags[k][p] {
                    PointFlag::Ok => "ok",
                    PointFlag::OutOfRange => "out-of-range",
                    PointFlag::Diverged => "diverged",
                    PointFlag::NonMonotone => "non-monotone",
                    PointFlag::InversionFailed => "inversion-failed",
                };
                write!(w, ",{name}")?;
            }
            writeln!(w)?;
        }
        Ok(())
    }
}

/// Inverse-flow coefficients at every `(time, point)`, reusable for any `u0`.
#[derive(Debug, Clone)]
pub struct PreparedSolution {
    pub times: Vec<f64>,
    pub points: Vec<Vec<f64>>,
    pub inverse: Vec<Vec<std::result::Result<InverseCoefficients, PointFlag>>>,
    pub flow: FlowSolution,
    pub provenance: Provenance,
}

impl PreparedSolution {
    pub fn apply(&self, u0: &InitialCondition) -> SolutionField {
        let mut values = Vec::with_capacity(self.times.len());
        let mut flags = Vec::with_capacity(self.times.len());
        for row in &self.inverse {
            let mut v = Vec::with_capacity(row.len());
            let mut f = Vec::with_capacity(row.len());
            for entry in row {
                match entry {
                    Ok(inv) => {
                        let u = inv.xi_inv * u0.eval(&inv.y) + inv.zeta_inv;
                        if u.is_finite() {
                            v.push(u);
                            f.push(PointFlag::Ok);
                        } else {
                            v.push(f64::NAN);
                            f.push(PointFlag::Diverged);
                        }
                    }
                    Err(flag) => {
                        v.push(f64::NAN);
                        f.push(*flag);
                    }
                }
            }
            values.push(v);
            flags.push(f);
        }
        SolutionField {
            times: self.times.clone(),
            points: self.points.clone(),
            values,
            flags,
            provenance: self.provenance.clone(),
        }
    }
}

fn flag_of(e: &Error) -> PointFlag {
    match e {
        Error::Extrapolation { .. } => PointFlag::OutOfRange,
        Error::Divergence { .. } => PointFlag::Diverged,
        Error::DiffeomorphismViolation { .. } => PointFlag::NonMonotone,
        _ => PointFlag::InversionFailed,
    }
}

fn bounding_box(points: &[Vec<f64>], d: usize) -> Vec<(f64, f64)> {
    (0..d)
        .map(|c| {
            points.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| {
                (lo.min(p[c]), hi.max(p[c]))
            })
        })
        .collect()
}

/// Whether the valid forward endpoints at every output time cover `[lo, hi]`;
/// otherwise which side falls short (`(low_short, high_short)`).
fn coverage_1d(flow: &FlowSolution, lo: f64, hi: f64) -> (bool, bool) {
    let (mut low_short, mut high_short) = (false, false);
    for k in 0..flow.times.len() {
        let xs: Vec<f64> = (0..flow.initial_points.len())
            .filter(|&p| flow.is_valid(p, k))
            .map(|p| flow.states[p][k].x[0])
            .collect();
        let (mn, mx) = xs.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(*v), b.max(*v)));
        low_short |= mn > lo;
        high_short |= mx < hi;
        // A flagged end trajectory also makes that side short.
        if !flow.is_valid(0, k) {
            low_short = true;
        }
        if !flow.is_valid(flow.initial_points.len() - 1, k) {
            high_short = true;
        }
    }
    (low_short, high_short)
}

/// Integrates the forward flow and inverts it at every `(time, point)`.
pub fn prepare(
    coeffs: &CoefficientSet,
    driver: &DriverRealization,
    times: &[f64],
    points: &[Vec<f64>],
    params: &SolveParams,
) -> Result<PreparedSolution> {
    let d = coeffs.dim();
    if points.is_empty() || points.iter().any(|p| p.len() != d) {
        return input(format!("query grid must be non-empty with points of dimension {d}"));
    }
    if params.flow_points < 2 {
        return input("the flow table needs at least two points per axis");
    }
    if d > 3 {
        return input("solution fields are implemented for d ≤ 3");
    }
    let query_box = bounding_box(points, d);
    let mut flow_box = match &params.flow_box {
        Some(b) if b.len() == d => b.clone(),
        Some(_) => return input("flow_box dimension does not match the coefficients"),
        None => query_box.clone(),
    };
    for b in &mut flow_box {
        if b.1 <= b.0 {
            *b = (b.0 - 0.5, b.0 + 0.5);
        }
    }
    let n = params.flow_points;
    // Spacing of the one-dimensional table, kept fixed when it is widened.
    let spacing = (flow_box[0].1 - flow_box[0].0) / (n - 1) as f64;
    let mut extensions = 0;
    let (flow, grid_desc) = loop {
        let (grid, desc) = if d == 1 {
            let (lo, hi) = flow_box[0];
            let count = ((hi - lo) / spacing).round() as usize + 1;
            (InitialGrid::uniform(lo, hi, count), vec![(lo, hi, count)])
        } else {
            let axes: Vec<Vec<f64>> = flow_box
                .iter()
                .map(|&(lo, hi)| crate::characteristics::linspace(lo, hi, n))
                .collect();
            (InitialGrid::tensor(axes), flow_box.iter().map(|&(lo, hi)| (lo, hi, n)).collect())
        };
        let flow = integrate_path(coeffs, driver, &grid, times, &params.integration)?;
        if d > 1 || extensions >= params.max_extensions {
            break (flow, desc);
        }
        let (low_short, high_short) = coverage_1d(&flow, query_box[0].0, query_box[0].1);
        if !low_short && !high_short {
            break (flow, desc);
        }
        let (lo, hi) = flow_box[0];
        // Widen each short side by half the current width, on the same lattice.
        let grow = (0.5 * (hi - lo) / spacing).ceil() * spacing;
        let next = (
            if low_short { lo - grow } else { lo },
            if high_short { hi + grow } else { hi },
        );
        if ((next.1 - next.0) / spacing).round() as usize + 1 > 200_000 {
            break (flow, desc);
        }
        flow_box[0] = next;
        extensions += 1;
    };

    let inverse: Vec<Vec<std::result::Result<InverseCoefficients, PointFlag>>> = (0..times.len())
        .map(|k| {
            if d == 1 {
                match InverseTable1d::new(&flow, k) {
                    Ok(table) => points
                        .par_iter()
                        .map(|x| table.invert(x[0], params.inversion_tol).map_err(|e| flag_of(&e)))
                        .collect(),
                    Err(e) => vec![Err(flag_of(&e)); points.len()],
                }
            } else {
                match InverseTableNd::new(&flow, k) {
                    Ok(table) => points
                        .par_iter()
                        .map(|x| table.invert(x, 50, params.inversion_tol).map_err(|e| flag_of(&e)))
                        .collect(),
                    Err(e) => vec![Err(flag_of(&e)); points.len()],
                }
            }
        })
        .collect();

    let provenance = Provenance {
        seed: driver.seed,
        realization_index: driver.realization_index,
        max_step: flow.metadata.max_step,
        substeps: flow.metadata.substeps,
        scheme: flow.metadata.scheme,
        placement: flow.metadata.placement,
        small_jump_mode: flow.metadata.small_jump_mode,
        flow_grid: grid_desc,
        extensions,
        source: "characteristics".into(),
    };
    Ok(PreparedSolution {
        times: times.to_vec(),
        points: points.to_vec(),
        inverse,
        flow,
        provenance,
    })
}

/// `u(t, x)` on `times × points` by inverting the characteristics flow.
pub fn solve(
    coeffs: &CoefficientSet,
    driver: &DriverRealization,
    u0: &InitialCondition,
    times: &[f64],
    points: &[Vec<f64>],
    params: &SolveParams,
) -> Result<SolutionField> {
    Ok(prepare(coeffs, driver, times, points, params)?.apply(u0))
}

/// The noise-free solution
/// `u = e^{∫b} u0(φ_{t,0}(x)) + ∫ e^{∫b} c` evaluated along the backward
/// characteristic `y' = a(y)`, `y(0) = x`, with `B' = b(y)` and `S' = e^B c(y)`,
/// so that `u = e^{B(t)} u0(y(t)) + S(t)`.
pub fn deterministic_solution(
    coeffs: &CoefficientSet,
    u0: &InitialCondition,
    t: f64,
    x: &[f64],
    steps: usize,
) -> Result<f64> {
    if !coeffs.is_noise_free() {
        return input("the deterministic reference needs all noise coefficients to be zero");
    }
    let d = coeffs.dim();
    if x.len() != d || steps == 0 || !(t >= 0.0) {
        return input("deterministic reference: bad dimension, step count or time");
    }
    if t == 0.0 {
        return Ok(u0.eval(x));
    }
    let mut a = vec![0.0; d];
    let mut g = |s: &[f64], out: &mut [f64]| {
        let y = &s[..d];
        coeffs.eval_transport(y, &mut a);
        out[..d].copy_from_slice(&a);
        out[d] = coeffs.eval_reaction(y);
        out[d + 1] = s[d].exp() * coeffs.eval_source(y);
    };
    let mut s0 = x.to_vec();
    s0.extend([0.0, 0.0]);
    let s = rk4(&mut g, &s0, t, steps)?;
    Ok(s[d].exp() * u0.eval(&s[..d]) + s[d + 1])
}

pub type Fn1 = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

/// `H(x) = ∫ dy / α(y)` and its inverse for the one-dimensional explicit solution.
#[derive(Clone)]
pub enum HTransform {
    /// `α = sqrt(x² + 1)`: `H = arcsinh`, `H⁻¹ = sinh`.
    Sinh,
    /// `H(x) = ∫_anchor^x dy / α(y)` by adaptive quadrature on `domain`.
    Quadrature { alpha: Fn1, anchor: f64, domain: (f64, f64) },
}

impl std::fmt::Debug for HTransform {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Sinh => write!(f, "Sinh"),
            Self::Quadrature { anchor, domain, .. } => f
                .debug_struct("Quadrature")
                .field("anchor", anchor)
                .field("domain", domain)
                .finish_non_exhaustive(),
        }
    }
}

impl HTransform {
    pub fn quadrature(alpha: impl Fn(f64) -> f64 + Send + Sync + 'static, anchor: f64, domain: (f64, f64)) -> Result<Self> {
        if !(domain.0 < domain.1 && anchor >= domain.0 && anchor <= domain.1) {
            return input("H-transform needs lo < hi and the anchor inside the domain");
        }
        if domain.0.is_infinite() || domain.1.is_infinite() {
            return input("H-transform domain must be finite");
        }
        Ok(Self::Quadrature { alpha: Arc::new(alpha), anchor, domain })
    }

    pub fn h(&self, x: f64) -> Result<f64> {
        match self {
            Self::Sinh => Ok(x.asinh()),
            Self::Quadrature { alpha, anchor, domain } => {
                if x < domain.0 || x > domain.1 {
                    return input(format!("x = {x} outside the H-transform domain {domain:?}"));
                }
                let mut f = |y: f64| {
                    let a = alpha(y);
                    if a > 0.0 { 1.0 / a } else { f64::NAN }
                };
                adaptive_simpson(&mut f, *anchor, x, 1e-13, 60).map_err(|e| match e {
                    Error::Divergence { .. } => Error::Input(format!(
                        "α must be positive between the anchor {anchor} and {x}"
                    )),
                    other => other,
                })
            }
        }
    }

    pub fn h_inv(&self, v: f64) -> Result<f64> {
        match self {
            Self::Sinh => Ok(v.sinh()),
            Self::Quadrature { alpha, anchor, domain } => {
                let (mut a, mut b) = *domain;
                let (ha, hb) = (self.h(a)?, self.h(b)?);
                if v < ha || v > hb {
                    return Err(Error::Range { target: v });
                }
                let mut y = anchor.clamp(a, b);
                for _ in 0..200 {
                    let r = self.h(y)? - v;
                    if r.abs() <= 1e-13 * v.abs().max(1.0) {
                        return Ok(y);
                    }
                    if r > 0.0 {
                        b = y;
                    } else {
                        a = y;
                    }
                    let newton = y - r * alpha(y);
                    y = if newton > a && newton < b { newton } else { 0.5 * (a + b) };
                    if b - a <= 4.0 * f64::EPSILON * y.abs().max(1.0) {
                        return Ok(y);
                    }
                }
                Ok(y)
            }
        }
    }

    /// `φ_{t,0}(x) = H⁻¹(H(x) + Z_t)`.
    pub fn inverse_flow(&self, x: f64, z: f64) -> Result<f64> {
        self.h_inv(self.h(x)? + z)
    }
}

/// `u0(H⁻¹(H(x) + Z_t))`.
pub fn h_transform_solution(h: &HTransform, u0: &InitialCondition, x: f64, z_t: f64) -> Result<f64> {
    Ok(u0.eval(&[h.inverse_flow(x, z_t)?]))
}

#[derive(Debug, Clone)]
pub enum OracleKind {
    /// Noise-free characteristics, for any `d`.
    Deterministic,
    /// Explicit solution of `du = ∇u α ◇ dZ` in one dimension.
    HTransform(HTransform),
    /// [`HTransform::Sinh`].
    SinhExample,
}

/// Closed-form solution evaluated on the same driver as the field under test.
#[derive(Debug, Clone)]
pub struct OracleSpec {
    pub kind: OracleKind,
    pub driver: DriverRealization,
    pub coeffs: Option<CoefficientSet>,
    pub u0: InitialCondition,
}

impl OracleSpec {
    pub fn value(&self, t: f64, x: &[f64]) -> Result<f64> {
        match &self.kind {
            OracleKind::Deterministic => {
                let c = self
                    .coeffs
                    .as_ref()
                    .ok_or_else(|| Error::Input("deterministic oracle needs coefficients".into()))?;
                deterministic_solution(c, &self.u0, t, x, DETERMINISTIC_ORACLE_STEPS)
            }
            OracleKind::HTransform(h) => self.h_value(h, t, x),
            OracleKind::SinhExample => self.h_value(&HTransform::Sinh, t, x),
        }
    }

    fn h_value(&self, h: &HTransform, t: f64, x: &[f64]) -> Result<f64> {
        if x.len() != 1 || self.driver.noise_dim != 1 {
            return input("the H-transform oracle needs d = m = 1");
        }
        let z = self.driver.levy_value_at(t)?[0];
        h_transform_solution(h, &self.u0, x[0], z)
    }

    /// The oracle itself as a field; points where it is undefined are flagged.
    pub fn field(&self, times: &[f64], points: &[Vec<f64>]) -> Result<SolutionField> {
        let mut values = Vec::with_capacity(times.len());
        let mut flags = Vec::with_capacity(times.len());
        for &t in times {
            if let Err(e) = self.check_time(t) {
                return Err(e);
            }
            let row: Vec<Result<f64>> = points.par_iter().map(|x| self.value(t, x)).collect();
            let mut v = Vec::with_capacity(row.len());
            let mut f = Vec::with_capacity(row.len());
            for r in row {
                match r {
                    Ok(u) if u.is_finite() => {
                        v.push(u);
                        f.push(PointFlag::Ok);
                    }
                    Ok(_) => {
                        v.push(f64::NAN);
                        f.push(PointFlag::Diverged);
                    }
                    Err(Error::Input(msg)) => return Err(Error::Input(msg)),
                    Err(e) => {
                        v.push(f64::NAN);
                        f.push(flag_of(&e));
                    }
                }
            }
            values.push(v);
            flags.push(f);
        }
        Ok(SolutionField {
            times: times.to_vec(),
            points: points.to_vec(),
            values,
            flags,
            provenance: Provenance {
                seed: self.driver.seed,
                realization_index: self.driver.realization_index,
                max_step: 0.0,
                substeps: 0,
                scheme: StepScheme::Heun,
                placement: EventPlacement::Inserted,
                small_jump_mode: self.driver.small_jump_mode,
                flow_grid: Vec::new(),
                extensions: 0,
                source: format!("oracle:{}", self.kind_name()),
            },
        })
    }

    fn check_time(&self, t: f64) -> Result<()> {
        if matches!(self.kind, OracleKind::Deterministic) {
            return Ok(());
        }
        self.driver.grid_index(t).map(|_| ()).ok_or_else(|| {
            Error::Input(format!("time {t} is not on the oracle driver's grid"))
        })
    }

    pub fn kind_name(&self) -> &'static str {
        match self.kind {
            OracleKind::Deterministic => "deterministic",
            OracleKind::HTransform(_) => "h-transform",
            OracleKind::SinhExample => "sinh-example",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TimeError {
    pub t: f64,
    pub rmse: f64,
    pub max_abs: f64,
    pub compared: usize,
    pub excluded: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OracleReport {
    pub oracle: String,
    pub rmse: f64,
    pub max_abs: f64,
    pub per_time: Vec<TimeError>,
    /// Share of field values excluded (flagged in the field or undefined for the oracle).
    pub flagged_fraction: f64,
    pub compared: usize,
}

/// Error statistics of `field` against `oracle` over the valid points.
pub fn oracle_compare(field: &SolutionField, oracle: &OracleSpec) -> Result<OracleReport> {
    if field.values.len() != field.times.len()
        || field.values.iter().any(|r| r.len() != field.points.len())
    {
        return input("field values do not match its time and point grids");
    }
    let reference = oracle.field(&field.times, &field.points)?;
    let mut per_time = Vec::with_capacity(field.times.len());
    let (mut sq, mut max_abs, mut compared, mut excluded) = (0.0, 0.0f64, 0usize, 0usize);
    for k in 0..field.times.len() {
        let (mut sq_t, mut max_t, mut n_t, mut ex_t) = (0.0, 0.0f64, 0usize, 0usize);
        for p in 0..field.points.len() {
            if field.flags[k][p] != PointFlag::Ok || reference.flags[k][p] != PointFlag::Ok {
                ex_t += 1;
                continue;
            }
            let e = (field.values[k][p] - reference.values[k][p]).abs();
            sq_t += e * e;
            max_t = max_t.max(e);
            n_t += 1;
        }
        per_time.push(TimeError {
            t: field.times[k],
            rmse: if n_t > 0 { (sq_t / n_t as f64).sqrt() } else { f64::NAN },
            max_abs: max_t,
            compared: n_t,
            excluded: ex_t,
        });
        sq += sq_t;
        max_abs = max_abs.max(max_t);
        compared += n_t;
        excluded += ex_t;
    }
    let total = compared + excluded;
    Ok(OracleReport {
        oracle: oracle.kind_name().into(),
        rmse: if compared > 0 { (sq / compared as f64).sqrt() } else { f64::NAN },
        max_abs,
        per_time,
        flagged_fraction: if total > 0 { excluded as f64 / total as f64 } else { 0.0 },
        compared,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coefficients::scalar_field;
    use crate::levy_driver::JumpEvent;

    fn bump() -> InitialCondition {
        InitialCondition::scalar(|x| 1.0 / (1.0 + x * x))
    }

    fn line(lo: f64, hi: f64, n: usize) -> Vec<Vec<f64>> {
        crate::characteristics::linspace(lo, hi, n).into_iter().map(|v| vec![v]).collect()
    }

    fn quiet() -> DriverRealization {
        DriverRealization::from_events(1.0, 100, 1, vec![], &[]).unwrap()
    }

    #[test]
    fn zero_coefficients_keep_u0() {
        let c = CoefficientSet::zero(1, 1).unwrap();
        let pts = line(-2.0, 2.0, 9);
        let f = solve(&c, &quiet(), &bump(), &[0.0, 1.0], &pts, &SolveParams::default()).unwrap();
        for k in 0..2 {
            for (p, x) in pts.iter().enumerate() {
                assert!((f.values[k][p] - 1.0 / (1.0 + x[0] * x[0])).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn constant_drift_translates() {
        let c = CoefficientSet::zero(1, 1).unwrap().with_transport(|_, o| o[0] = 1.0);
        let pts = line(-2.0, 2.0, 9);
        let f = solve(&c, &quiet(), &bump(), &[1.0], &pts, &SolveParams::default()).unwrap();
        assert!(f.provenance.extensions >= 1);
        for (p, x) in pts.iter().enumerate() {
            let exact = 1.0 / (1.0 + (x[0] + 1.0).powi(2));
            assert!((f.values[0][p] - exact).abs() < 1e-9);
        }
    }

    #[test]
    fn deterministic_reference_cases() {
        let u0 = bump();
        let plain = CoefficientSet::zero(1, 1).unwrap().with_transport(|_, o| o[0] = 1.0);
        let v = deterministic_solution(&plain, &u0, 1.0, &[0.5], 256).unwrap();
        assert!((v - u0.eval(&[1.5])).abs() < 1e-13);
        let growth = CoefficientSet::zero(1, 1).unwrap().with_reaction(|_| 0.4);
        let v = deterministic_solution(&growth, &u0, 2.0, &[0.5], 256).unwrap();
        assert!((v - 0.8f64.exp() * u0.eval(&[0.5])).abs() < 1e-12);
        let source = CoefficientSet::zero(1, 1).unwrap().with_source(|_| 0.3);
        let v = deterministic_solution(&source, &u0, 2.0, &[0.5], 256).unwrap();
        assert!((v - u0.eval(&[0.5]) - 0.6).abs() < 1e-12);
        let noisy = CoefficientSet::zero(1, 1).unwrap().with_jump_transport(scalar_field(|_| 1.0));
        assert!(deterministic_solution(&noisy, &u0, 1.0, &[0.0], 16).is_err());
    }

    #[test]
    fn h_transform_cases() {
        let u0 = InitialCondition::scalar(|x| x.sin());
        let unit = HTransform::quadrature(|_| 1.0, 0.0, (-20.0, 20.0)).unwrap();
        let v = h_transform_solution(&unit, &u0, 0.3, 0.5).unwrap();
        assert!((v - 0.8f64.sin()).abs() < 1e-10);
        let v = h_transform_solution(&HTransform::Sinh, &u0, 0.3, 0.5).unwrap();
        assert!((v - (0.3f64.asinh() + 0.5).sinh().sin()).abs() < 1e-15);
        let lin = HTransform::quadrature(|x| x, 1.0, (1e-3, 1e3)).unwrap();
        let v = h_transform_solution(&lin, &u0, 2.0, 0.7).unwrap();
        assert!((v - (2.0 * 0.7f64.exp()).sin()).abs() < 1e-9);
        assert!(matches!(lin.h_inv(50.0), Err(Error::Range { .. })));
    }

    #[test]
    fn oracle_compare_zero_field() {
        let c = CoefficientSet::zero(1, 1).unwrap();
        let pts = line(-1.0, 1.0, 5);
        let f = solve(&c, &quiet(), &bump(), &[0.5, 1.0], &pts, &SolveParams::default()).unwrap();
        let spec = OracleSpec { kind: OracleKind::Deterministic, driver: quiet(), coeffs: Some(c), u0: bump() };
        let r = oracle_compare(&f, &spec).unwrap();
        assert!(r.rmse < 1e-14 && r.flagged_fraction == 0.0);
    }

    #[test]
    fn off_grid_oracle_time_rejected() {
        let pts = line(-1.0, 1.0, 3);
        let spec = OracleSpec { kind: OracleKind::SinhExample, driver: quiet(), coeffs: None, u0: bump() };
        assert!(matches!(spec.field(&[0.555], &pts), Err(Error::Input(_))));
    }

    #[test]
    fn csv_shape_and_flags() {
        let c = CoefficientSet::zero(1, 1)
            .unwrap()
            .with_jump_transport(scalar_field(|x| (x * x + 1.0).sqrt()));
        let drv = DriverRealization::from_events(1.0, 10, 1, vec![JumpEvent { time: 0.5, mark: vec![0.8] }], &[]).unwrap();
        let params = SolveParams { max_extensions: 0, ..SolveParams::default() };
        let pts = line(-1.0, 1.0, 11);
        let f = solve(&c, &drv, &bump(), &[0.0, 1.0], &pts, &params).unwrap();
        assert!(f.flagged_fraction() > 0.0);
        let mut buf = Vec::new();
        f.write_csv(&mut buf).unwrap();
        let s = String::from_utf8(buf).unwrap();
        assert!(s.starts_with("x,0,1\n"));
        assert!(s.contains("nan"));
        assert_eq!(s.lines().count(), 12);
        let mut buf = Vec::new();
        f.write_flags_csv(&mut buf).unwrap();
        assert!(String::from_utf8(buf).unwrap().contains("out-of-range"));
    }
}
