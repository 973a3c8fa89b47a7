//! Forward integration of the characteristics system
//!
//! ```text
//! dφ = -a(φ) dt - A(φ)∘dW - α(φ)◇dZ
//! dξ = -ξ b(φ) dt - ξ B(φ)∘dW - ξ β(φ)◇dZ
//! dζ = -ξ c(φ) dt - ξ C(φ)∘dW - ξ σ(φ)◇dZ
//! ```
//!
//! along one [`DriverRealization`]. Between jumps the Stratonovich system is
//! advanced by a Heun predictor–corrector on `φ`; `ξ` and `ζ` are updated from
//! the corrected step in exponential/trapezoidal form, which keeps `ξ > 0` and
//! makes `ξ` exactly the exponential of a trapezoid sum. Jumps are applied by
//! the structured exponential map after the continuous step that ends at the
//! jump time, so stored states are càdlàg.
//!
//! Trajectories start from `(x, 1, 0)`, so the stored `ξ` and `-ζ` are the
//! accumulators `E_t(x)` and `I_t(x)`: for general starting values the flow is
//! `ξ = ξ0 E_t`, `ζ = ζ0 - ξ0 I_t`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::Write;

use crate::coefficients::CoefficientSet;
use crate::error::{input, Error, Result};
use crate::levy_driver::{DriverRealization, LevyKind, LevyMeasureSpec, SmallJumpMode};
use crate::marcus_exp::{dot, exp_map_structured, rk4, SigmaField, JumpVectorField, DEFAULT_SUBSTEPS};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CharacteristicState {
    pub x: Vec<f64>,
    pub xi: f64,
    pub zeta: f64,
    pub t: f64,
}

impl CharacteristicState {
    /// `(x, ξ0 = 1, ζ0 = 0)` at time zero.
    pub fn start(x: &[f64]) -> Self {
        Self { x: x.to_vec(), xi: 1.0, zeta: 0.0, t: 0.0 }
    }

    fn is_finite(&self) -> bool {
        self.xi.is_finite() && self.zeta.is_finite() && self.x.iter().all(|v| v.is_finite())
    }

    fn undefined(dim: usize, t: f64) -> Self {
        Self { x: vec![f64::NAN; dim], xi: f64::NAN, zeta: f64::NAN, t }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StepScheme {
    /// Stratonovich Heun between jumps.
    #[default]
    Heun,
    /// Euler–Maruyama on the Itô form with the `½ Σ_j DF_j F_j` drift correction.
    /// A cross-check only: `ξ` is not guaranteed positive, and each driver
    /// interval is taken as a single step.
    ItoEuler,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EventPlacement {
    /// Jump times are grid points.
    #[default]
    Inserted,
    /// Jumps are deferred to the end of the uniform step containing them.
    GridSnapped,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntegrationParams {
    /// Driver intervals longer than this are split into equal substeps with
    /// evenly divided noise increments.
    pub max_dt: f64,
    /// RK4 substeps per jump.
    pub substeps: usize,
    pub scheme: StepScheme,
    pub placement: EventPlacement,
    /// Per-coordinate `[lo, hi]` box; leaving it flags the trajectory.
    pub domain: Option<Vec<(f64, f64)>>,
    /// Keep the step-by-step path of every trajectory.
    pub record_paths: bool,
}

impl Default for IntegrationParams {
    fn default() -> Self {
        Self {
            max_dt: f64::INFINITY,
            substeps: DEFAULT_SUBSTEPS,
            scheme: StepScheme::Heun,
            placement: EventPlacement::Inserted,
            domain: None,
            record_paths: false,
        }
    }
}

impl IntegrationParams {
    pub fn with_max_dt(mut self, dt: f64) -> Self {
        self.max_dt = dt;
        self
    }

    pub fn with_substeps(mut self, n: usize) -> Self {
        self.substeps = n;
        self
    }

    pub fn with_placement(mut self, p: EventPlacement) -> Self {
        self.placement = p;
        self
    }

    pub fn with_scheme(mut self, s: StepScheme) -> Self {
        self.scheme = s;
        self
    }

    pub fn with_domain(mut self, domain: Vec<(f64, f64)>) -> Self {
        self.domain = Some(domain);
        self
    }

    pub fn recording(mut self) -> Self {
        self.record_paths = true;
        self
    }
}

/// Tensor-product grid of initial points, enumerated with the last axis fastest.
/// One-dimensional grids are kept in the given order (not sorted).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InitialGrid {
    pub axes: Vec<Vec<f64>>,
}

impl InitialGrid {
    pub fn uniform(lo: f64, hi: f64, n: usize) -> Self {
        Self { axes: vec![linspace(lo, hi, n)] }
    }

    pub fn from_points_1d(points: Vec<f64>) -> Self {
        Self { axes: vec![points] }
    }

    pub fn tensor(axes: Vec<Vec<f64>>) -> Self {
        Self { axes }
    }

    pub fn dim(&self) -> usize {
        self.axes.len()
    }

    pub fn len(&self) -> usize {
        self.axes.iter().map(Vec::len).product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn points(&self) -> Vec<Vec<f64>> {
        let mut out = vec![Vec::with_capacity(self.dim())];
        for axis in &self.axes {
            out = out
                .into_iter()
                .flat_map(|p| {
                    axis.iter().map(move |&v| {
                        let mut q = p.clone();
                        q.push(v);
                        q
                    })
                })
                .collect();
        }
        out
    }
}

pub fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => vec![],
        1 => vec![lo],
        _ => (0..n)
            .map(|i| {
                if i == n - 1 {
                    hi
                } else {
                    lo + (hi - lo) * i as f64 / (n - 1) as f64
                }
            })
            .collect(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum TrajectoryStatus {
    Ok,
    /// A non-finite value appeared in the step ending at `time`.
    Diverged { time: f64, context: String },
    /// The trajectory left the domain box in the step ending at `time`.
    LeftDomain { time: f64 },
}

impl TrajectoryStatus {
    /// Whether the state stored for output time `t` is usable.
    pub fn valid_at(&self, t: f64) -> bool {
        match self {
            Self::Ok => true,
            Self::Diverged { time, .. } | Self::LeftDomain { time } => t < *time,
        }
    }

    pub fn is_ok(&self) -> bool {
        matches!(self, Self::Ok)
    }
}

/// One entry of a recorded trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum StepRecord {
    Continuous {
        t1: f64,
        dt: f64,
        dw: Vec<f64>,
        dz: Vec<f64>,
        x0: Vec<f64>,
        x1: Vec<f64>,
    },
    Jump {
        t: f64,
        z: Vec<f64>,
        x_pre: Vec<f64>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowMetadata {
    /// Largest continuous step actually taken.
    pub max_step: f64,
    pub continuous_steps: usize,
    pub jumps: usize,
    pub substeps: usize,
    pub scheme: StepScheme,
    pub placement: EventPlacement,
    pub small_jump_mode: SmallJumpMode,
    pub seed: u64,
    pub realization_index: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowSolution {
    pub initial_grid: InitialGrid,
    pub initial_points: Vec<Vec<f64>>,
    pub times: Vec<f64>,
    /// `states[point][time]`, started from `(x, 1, 0)`.
    pub states: Vec<Vec<CharacteristicState>>,
    pub status: Vec<TrajectoryStatus>,
    /// Per output time, `d = 1` only: endpoints fail to increase with the point index.
    pub non_monotone: Vec<bool>,
    pub metadata: FlowMetadata,
    pub paths: Option<Vec<Vec<StepRecord>>>,
}

impl FlowSolution {
    pub fn dim(&self) -> usize {
        self.initial_grid.dim()
    }

    pub fn time_index(&self, t: f64) -> Option<usize> {
        let scale = self.times.last().copied().unwrap_or(1.0).abs().max(1.0);
        self.times.iter().position(|&s| (s - t).abs() <= 1e-9 * scale)
    }

    /// `(E_t, I_t)` of trajectory `point` at output time index `k`.
    pub fn accumulators(&self, point: usize, k: usize) -> (f64, f64) {
        let s = &self.states[point][k];
        (s.xi, -s.zeta)
    }

    pub fn is_valid(&self, point: usize, k: usize) -> bool {
        self.status[point].valid_at(self.times[k])
    }

    pub fn flagged_count(&self) -> usize {
        self.status.iter().filter(|s| !s.is_ok()).count()
    }

    /// `t,x_1..x_d,xi,zeta,E,I` for one trajectory.
    pub fn write_trajectory_csv(&self, point: usize, w: &mut impl Write) -> std::io::Result<()> {
        write!(w, "t")?;
        for i in 1..=self.dim() {
            write!(w, ",x_{i}")?;
        }
        writeln!(w, ",xi,zeta,E,I")?;
        for (k, s) in self.states[point].iter().enumerate() {
            let (e, i) = self.accumulators(point, k);
            write!(w, "{:e}", s.t)?;
            for v in &s.x {
                write!(w, ",{v:e}")?;
            }
            writeln!(w, ",{:e},{:e},{e:e},{i:e}", s.xi, s.zeta)?;
        }
        Ok(())
    }
}

/// Continuous increments of one step plus the jumps applied at its end.
#[derive(Debug, Clone)]
struct Segment {
    t0: f64,
    t1: f64,
    dw: Vec<f64>,
    dz: Vec<f64>,
    jumps: Vec<Vec<f64>>,
}

fn add_into(acc: &mut [f64], v: &[f64]) {
    acc.iter_mut().zip(v).for_each(|(a, b)| *a += b);
}

fn segments(driver: &DriverRealization, placement: EventPlacement) -> Result<Vec<Segment>> {
    let m = driver.noise_dim;
    let n = driver.intervals();
    let mut jumps_at: Vec<Vec<Vec<f64>>> = vec![Vec::new(); n + 1];
    let mut is_event = vec![false; n + 1];
    for e in &driver.jump_events {
        let k = driver.grid_index(e.time).ok_or_else(|| {
            Error::Input(format!("jump at t = {} is not a grid point of the driver", e.time))
        })?;
        if k == 0 {
            return input("jump events must occur at t > 0");
        }
        jumps_at[k].push(e.mark.clone());
        is_event[k] = true;
    }
    let mut fine = Vec::with_capacity(n);
    for k in 0..n {
        let (t0, t1) = (driver.grid[k], driver.grid[k + 1]);
        let dt = t1 - t0;
        let mut dz: Vec<f64> = driver.levy_drift.iter().map(|v| v * dt).collect();
        if let Some(s) = driver.small_jump_increments.get(k) {
            add_into(&mut dz, s);
        }
        let mut jumps = std::mem::take(&mut jumps_at[k + 1]);
        if let Some(p) = driver.path_increments.get(k) {
            jumps.push(p.clone());
        }
        fine.push(Segment {
            t0,
            t1,
            dw: driver.brownian_increments[k].clone(),
            dz,
            jumps,
        });
    }
    if placement == EventPlacement::Inserted {
        return Ok(fine);
    }
    // Merge each event-only grid point into the following interval.
    let pinned: Vec<usize> = driver
        .pinned_times
        .iter()
        .filter_map(|&t| driver.grid_index(t))
        .collect();
    let base_dt = driver.base_dt();
    let on_base = |t: f64| {
        let r = t / base_dt;
        (r - r.round()).abs() <= 1e-9 * r.max(1.0)
    };
    let mut merged: Vec<Segment> = Vec::new();
    let mut current: Option<Segment> = None;
    for (k, seg) in fine.into_iter().enumerate() {
        let end = k + 1;
        let keep_end = !is_event[end] || on_base(seg.t1) || pinned.contains(&end) || end == n;
        let cur = current.get_or_insert_with(|| Segment {
            t0: seg.t0,
            t1: seg.t0,
            dw: vec![0.0; m],
            dz: vec![0.0; m],
            jumps: Vec::new(),
        });
        cur.t1 = seg.t1;
        add_into(&mut cur.dw, &seg.dw);
        add_into(&mut cur.dz, &seg.dz);
        cur.jumps.extend(seg.jumps);
        if keep_end {
            merged.push(current.take().unwrap());
        }
    }
    Ok(merged)
}

/// Per-step increments `(Δx, r, q)` evaluated at `x`:
/// `Δx = -a dt - A dW - α dZ`, `r = b dt + B·dW + β·dZ`, `q = c dt + C·dW + σ·dZ`.
struct Evaluator<'a> {
    c: &'a CoefficientSet,
    mat: Vec<f64>,
    vec_d: Vec<f64>,
    vec_m: Vec<f64>,
}

impl<'a> Evaluator<'a> {
    fn new(c: &'a CoefficientSet) -> Self {
        let (d, m) = (c.dim(), c.noise_dim());
        Self { c, mat: vec![0.0; d * m], vec_d: vec![0.0; d], vec_m: vec![0.0; m] }
    }

    fn increments(&mut self, x: &[f64], dt: f64, dw: &[f64], dz: &[f64], dx: &mut [f64]) -> (f64, f64) {
        let (d, m) = (self.c.dim(), self.c.noise_dim());
        self.c.eval_transport(x, &mut self.vec_d);
        for i in 0..d {
            dx[i] = -self.vec_d[i] * dt;
        }
        let has_dw = self.c.has_noise_part() && dw.iter().any(|v| *v != 0.0);
        let has_dz = self.c.has_jump_part() && dz.iter().any(|v| *v != 0.0);
        for (on, field, inc) in [
            (has_dw, &self.c.noise_transport, dw),
            (has_dz, &self.c.jump_transport, dz),
        ] {
            if on {
                if let Some(f) = field {
                    f(x, &mut self.mat);
                    for i in 0..d {
                        dx[i] -= (0..m).map(|j| self.mat[i * m + j] * inc[j]).sum::<f64>();
                    }
                }
            }
        }
        let mut r = self.c.eval_reaction(x) * dt;
        let mut q = self.c.eval_source(x) * dt;
        for (on, rf, qf, inc) in [
            (has_dw, &self.c.noise_reaction, &self.c.noise_source, dw),
            (has_dz, &self.c.jump_reaction, &self.c.jump_source, dz),
        ] {
            if on {
                if let Some(f) = rf {
                    f(x, &mut self.vec_m);
                    r += dot(&self.vec_m, inc);
                }
                if let Some(f) = qf {
                    f(x, &mut self.vec_m);
                    q += dot(&self.vec_m, inc);
                }
            }
        }
        (r, q)
    }
}

fn heun(
    ev: &mut Evaluator,
    s: &CharacteristicState,
    dt: f64,
    dw: &[f64],
    dz: &[f64],
) -> CharacteristicState {
    let mut out = s.clone();
    let mut buf = HeunBuffers::new(s.x.len());
    heun_into(ev, &mut buf, s, dt, dw, dz, &mut out);
    out
}

struct HeunBuffers {
    k1: Vec<f64>,
    k2: Vec<f64>,
    pred: Vec<f64>,
}

impl HeunBuffers {
    fn new(d: usize) -> Self {
        Self { k1: vec![0.0; d], k2: vec![0.0; d], pred: vec![0.0; d] }
    }
}

fn heun_into(
    ev: &mut Evaluator,
    buf: &mut HeunBuffers,
    s: &CharacteristicState,
    dt: f64,
    dw: &[f64],
    dz: &[f64],
    out: &mut CharacteristicState,
) {
    let d = s.x.len();
    let (r0, q0) = ev.increments(&s.x, dt, dw, dz, &mut buf.k1);
    out.t = s.t + dt;
    if r0 == 0.0 && q0 == 0.0 && buf.k1.iter().all(|v| *v == 0.0) {
        // The predictor is x itself, so the step is the identity.
        out.x.copy_from_slice(&s.x);
        out.xi = s.xi;
        out.zeta = s.zeta;
        return;
    }
    for i in 0..d {
        buf.pred[i] = s.x[i] + buf.k1[i];
    }
    ev.increments(&buf.pred, dt, dw, dz, &mut buf.k2);
    for i in 0..d {
        out.x[i] = s.x[i] + 0.5 * (buf.k1[i] + buf.k2[i]);
    }
    let (r1, q1) = ev.increments(&out.x, dt, dw, dz, &mut buf.pred);
    out.xi = s.xi * (-0.5 * (r0 + r1)).exp();
    out.zeta = s.zeta - 0.5 * (s.xi * q0 + out.xi * q1);
}

fn gradient(f: &dyn Fn(&[f64]) -> f64, x: &[f64]) -> Vec<f64> {
    let mut p = x.to_vec();
    (0..x.len())
        .map(|k| {
            let h = 1e-6 * x[k].abs().max(1.0);
            p[k] = x[k] + h;
            let up = f(&p);
            p[k] = x[k] - h;
            let down = f(&p);
            p[k] = x[k];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// `∂_k A_{ij}` at `[(i m + j) d + k]`, from the supplied jacobian or by
/// central differences.
fn noise_transport_jacobian(c: &CoefficientSet, x: &[f64]) -> Vec<f64> {
    let (d, m) = (c.dim(), c.noise_dim());
    let mut out = vec![0.0; d * m * d];
    if let Some(j) = &c.noise_transport_jacobian {
        j(x, &mut out);
        return out;
    }
    let mut p = x.to_vec();
    let (mut up, mut down) = (vec![0.0; d * m], vec![0.0; d * m]);
    for k in 0..d {
        let h = 1e-6 * x[k].abs().max(1.0);
        p[k] = x[k] + h;
        c.eval_noise_transport(&p, &mut up);
        p[k] = x[k] - h;
        c.eval_noise_transport(&p, &mut down);
        p[k] = x[k];
        for ij in 0..d * m {
            out[ij * d + k] = (up[ij] - down[ij]) / (2.0 * h);
        }
    }
    out
}

fn ito_euler(
    c: &CoefficientSet,
    s: &CharacteristicState,
    dt: f64,
    dw: &[f64],
    dz: &[f64],
) -> CharacteristicState {
    let (d, m) = (c.dim(), c.noise_dim());
    let mut ev = Evaluator::new(c);
    let mut dx = vec![0.0; d];
    let (r, q) = ev.increments(&s.x, dt, dw, dz, &mut dx);
    let mut a = vec![0.0; d * m];
    c.eval_noise_transport(&s.x, &mut a);
    let jac = noise_transport_jacobian(c, &s.x);
    let (mut bv, mut cv) = (vec![0.0; m], vec![0.0; m]);
    c.eval_noise_reaction(&s.x, &mut bv);
    c.eval_noise_source(&s.x, &mut cv);
    let mut x1 = s.x.clone();
    for i in 0..d {
        let corr: f64 = (0..m)
            .map(|j| (0..d).map(|k| jac[(i * m + j) * d + k] * a[k * m + j]).sum::<f64>())
            .sum();
        x1[i] += dx[i] + 0.5 * corr * dt;
    }
    let (mut corr_b, mut corr_c) = (0.0, 0.0);
    for j in 0..m {
        let col: Vec<f64> = (0..d).map(|k| a[k * m + j]).collect();
        let bj = |y: &[f64]| {
            let mut v = vec![0.0; m];
            c.eval_noise_reaction(y, &mut v);
            v[j]
        };
        let cj = |y: &[f64]| {
            let mut v = vec![0.0; m];
            c.eval_noise_source(y, &mut v);
            v[j]
        };
        corr_b += dot(&gradient(&bj, &s.x), &col) + bv[j] * bv[j];
        corr_c += dot(&gradient(&cj, &s.x), &col) + cv[j] * bv[j];
    }
    CharacteristicState {
        x: x1,
        xi: s.xi * (1.0 - r + 0.5 * corr_b * dt),
        zeta: s.zeta + s.xi * (-q + 0.5 * corr_c * dt),
        t: s.t + dt,
    }
}

/// One Heun step of the continuous system with Brownian increment `dw`.
pub fn step_continuous(
    state: &CharacteristicState,
    coeffs: &CoefficientSet,
    dt: f64,
    dw: &[f64],
) -> Result<CharacteristicState> {
    step_continuous_levy(state, coeffs, dt, dw, &vec![0.0; coeffs.noise_dim()])
}

/// [`step_continuous`] with an additional continuous Lévy increment `dz`
/// (compensator drift and Gaussian small-jump substitute) driving `Σ`.
pub fn step_continuous_levy(
    state: &CharacteristicState,
    coeffs: &CoefficientSet,
    dt: f64,
    dw: &[f64],
    dz: &[f64],
) -> Result<CharacteristicState> {
    if !(dt > 0.0) {
        return input(format!("step dt = {dt} must be > 0"));
    }
    if state.x.len() != coeffs.dim() || dw.len() != coeffs.noise_dim() || dz.len() != coeffs.noise_dim() {
        return input("state or increment dimension does not match the coefficients");
    }
    let next = heun(&mut Evaluator::new(coeffs), state, dt, dw, dz);
    if !next.is_finite() {
        return Err(Error::Divergence {
            context: format!("continuous step from t = {} at x = {:?}", state.t, state.x),
        });
    }
    Ok(next)
}

/// Applies the jump `z`: `state' = e^{Σ(·)z}(state)`, time unchanged.
pub fn apply_jump(
    state: &CharacteristicState,
    coeffs: &CoefficientSet,
    z: &[f64],
    substeps: usize,
) -> Result<CharacteristicState> {
    let j = exp_map_structured(coeffs, &state.x, state.xi, state.zeta, z, substeps)?;
    Ok(CharacteristicState { x: j.x, xi: j.xi, zeta: j.zeta, t: state.t })
}

/// `∫_{lo < |z| ≤ hi} (e^{Σz}(X) - X - Σ(X) z) ν(dz)` as a `(d+2)`-vector
/// `(x, ξ, ζ)`. Axis measures (stable, tabulated) contribute one coordinate
/// direction at a time; finite-activity marks need `m = 1`. The rule is
/// refined once and must agree with itself to `tol` (relative).
pub fn small_jump_compensator(
    coeffs: &CoefficientSet,
    state: &CharacteristicState,
    spec: &LevyMeasureSpec,
    band: (f64, f64),
    substeps: usize,
    tol: f64,
) -> Result<Vec<f64>> {
    let (d, m) = (coeffs.dim(), coeffs.noise_dim());
    if matches!(spec.kind, LevyKind::FiniteActivity { .. }) && m > 1 {
        return input("finite-activity compensator is only implemented for m = 1");
    }
    let (lo, hi) = band;
    if !(hi > lo) {
        return Ok(vec![0.0; d + 2]);
    }
    let field = SigmaField::new(coeffs);
    let mut full = state.x.clone();
    full.extend([state.xi, state.zeta]);
    let run = |splits: usize| -> Result<Vec<f64>> {
        let mut total = vec![0.0; d + 2];
        for j in 0..m {
            for comp in 0..d + 2 {
                let mut failure = None;
                let v = spec.integrate_1d(lo, hi, splits, |s| {
                    let mut z = vec![0.0; m];
                    z[j] = s;
                    let jumped = match exp_map_structured(coeffs, &state.x, state.xi, state.zeta, &z, substeps) {
                        Ok(v) => v,
                        Err(e) => {
                            failure = Some(e);
                            return 0.0;
                        }
                    };
                    let mut lin = vec![0.0; d + 2];
                    field.evaluate(&full, &z, &mut lin);
                    let after = if comp < d {
                        jumped.x[comp]
                    } else if comp == d {
                        jumped.xi
                    } else {
                        jumped.zeta
                    };
                    after - full[comp] - lin[comp]
                });
                if let Some(e) = failure {
                    return Err(e);
                }
                total[comp] += v;
            }
        }
        Ok(total)
    };
    let coarse = run(2)?;
    let fine = run(4)?;
    let scale = fine.iter().map(|v| v.abs()).fold(0.0, f64::max);
    let diff = coarse.iter().zip(&fine).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    if diff > tol * scale.max(1e-300) && diff > 1e-14 {
        return Err(Error::Tolerance { tolerance: tol, estimate: diff / scale.max(1e-300) });
    }
    Ok(fine)
}

struct Plan {
    segments: Vec<Segment>,
    /// `(segment count completed, output index)`; zero means time 0.
    outputs: Vec<(usize, usize)>,
}

fn plan(
    coeffs: &CoefficientSet,
    driver: &DriverRealization,
    output_times: &[f64],
    params: &IntegrationParams,
) -> Result<Plan> {
    if coeffs.noise_dim() != driver.noise_dim {
        return input(format!(
            "coefficients use m = {} but the driver has m = {}",
            coeffs.noise_dim(),
            driver.noise_dim
        ));
    }
    if params.substeps == 0 || !(params.max_dt > 0.0) {
        return input("substeps must be ≥ 1 and max_dt > 0");
    }
    if params.scheme == StepScheme::ItoEuler && !driver.small_jump_increments.is_empty() {
        return input("the Itô cross-check scheme does not support Gaussian small-jump substitutes");
    }
    if let Some(b) = &params.domain {
        if b.len() != coeffs.dim() || b.iter().any(|(lo, hi)| !(lo < hi)) {
            return input("domain box must give lo < hi for every coordinate");
        }
    }
    if output_times.windows(2).any(|w| w[1] < w[0]) {
        return input("output times must be nondecreasing");
    }
    let segs = segments(driver, params.placement)?;
    let tol = 1e-9 * driver.base_dt();
    let mut outputs = Vec::with_capacity(output_times.len());
    for (o, &t) in output_times.iter().enumerate() {
        if t.abs() <= tol {
            outputs.push((0, o));
            continue;
        }
        let k = segs.partition_point(|s| s.t1 < t - tol);
        if k >= segs.len() || (segs[k].t1 - t).abs() > tol {
            return input(format!(
                "output time {t} is not on the stepping grid; pin it in the driver"
            ));
        }
        outputs.push((k + 1, o));
    }
    Ok(Plan { segments: segs, outputs })
}

struct Trajectory {
    states: Vec<CharacteristicState>,
    status: TrajectoryStatus,
    path: Option<Vec<StepRecord>>,
    steps: usize,
    max_step: f64,
}

fn integrate_one(
    coeffs: &CoefficientSet,
    plan: &Plan,
    params: &IntegrationParams,
    x0: &[f64],
    n_out: usize,
) -> Trajectory {
    let d = coeffs.dim();
    let mut states = vec![CharacteristicState::undefined(d, f64::NAN); n_out];
    let mut s = CharacteristicState::start(x0);
    let mut path = params.record_paths.then(Vec::new);
    let mut status = TrajectoryStatus::Ok;
    let mut steps = 0;
    let mut max_step: f64 = 0.0;
    let mut ev = Evaluator::new(coeffs);
    let mut buf = HeunBuffers::new(d);
    let mut next = s.clone();
    let (mut dw, mut dz) = (Vec::new(), Vec::new());
    let mut next_out = 0;
    let record_outputs = |done: usize, s: &CharacteristicState, states: &mut Vec<CharacteristicState>, next_out: &mut usize| {
        while *next_out < plan.outputs.len() && plan.outputs[*next_out].0 == done {
            let mut rec = s.clone();
            if done == 0 {
                rec.t = 0.0;
            }
            states[plan.outputs[*next_out].1] = rec;
            *next_out += 1;
        }
    };
    record_outputs(0, &s, &mut states, &mut next_out);

    'segments: for (k, seg) in plan.segments.iter().enumerate() {
        if next_out >= plan.outputs.len() {
            break;
        }
        let span = seg.t1 - seg.t0;
        let parts = match params.scheme {
            StepScheme::Heun if span > params.max_dt => (span / params.max_dt).ceil() as usize,
            _ => 1,
        };
        let h = span / parts as f64;
        dw.clear();
        dw.extend(seg.dw.iter().map(|v| v / parts as f64));
        dz.clear();
        dz.extend(seg.dz.iter().map(|v| v / parts as f64));
        for _ in 0..parts {
            match params.scheme {
                StepScheme::Heun => heun_into(&mut ev, &mut buf, &s, h, &dw, &dz, &mut next),
                StepScheme::ItoEuler => next = ito_euler(coeffs, &s, h, &dw, &dz),
            }
            next.t = s.t + h;
            steps += 1;
            max_step = max_step.max(h);
            if !next.is_finite() {
                status = TrajectoryStatus::Diverged {
                    time: seg.t1,
                    context: format!("continuous step from t = {} at x = {:?}", s.t, s.x),
                };
                break 'segments;
            }
            if let Some(p) = path.as_mut() {
                p.push(StepRecord::Continuous {
                    t1: next.t,
                    dt: h,
                    dw: dw.clone(),
                    dz: dz.clone(),
                    x0: s.x.clone(),
                    x1: next.x.clone(),
                });
            }
            std::mem::swap(&mut s, &mut next);
        }
        s.t = seg.t1;
        for z in &seg.jumps {
            let x_pre = s.x.clone();
            match apply_jump(&s, coeffs, z, params.substeps) {
                Ok(j) if j.is_finite() => s = j,
                Ok(_) => {
                    status = TrajectoryStatus::Diverged {
                        time: seg.t1,
                        context: format!("jump {z:?} at t = {} from x = {x_pre:?}", seg.t1),
                    };
                    break 'segments;
                }
                Err(e) => {
                    status = TrajectoryStatus::Diverged {
                        time: seg.t1,
                        context: format!("jump {z:?} at t = {}: {e}", seg.t1),
                    };
                    break 'segments;
                }
            }
            if let Some(p) = path.as_mut() {
                p.push(StepRecord::Jump { t: seg.t1, z: z.clone(), x_pre });
            }
        }
        if let Some(b) = &params.domain {
            if s.x.iter().zip(b).any(|(v, (lo, hi))| v < lo || v > hi) {
                status = TrajectoryStatus::LeftDomain { time: seg.t1 };
                break;
            }
        }
        record_outputs(k + 1, &s, &mut states, &mut next_out);
    }
    Trajectory { states, status, path, steps, max_step }
}

/// Integrates the characteristics from every point of `grid`, recording the
/// states at `output_times` (which must be points of the stepping grid).
pub fn integrate_path(
    coeffs: &CoefficientSet,
    driver: &DriverRealization,
    grid: &InitialGrid,
    output_times: &[f64],
    params: &IntegrationParams,
) -> Result<FlowSolution> {
    if grid.dim() != coeffs.dim() {
        return input(format!(
            "initial grid has dimension {} but d = {}",
            grid.dim(),
            coeffs.dim()
        ));
    }
    if grid.is_empty() {
        return input("initial grid is empty");
    }
    let plan = plan(coeffs, driver, output_times, params)?;
    let points = grid.points();
    let runs: Vec<Trajectory> = points
        .par_iter()
        .map(|p| integrate_one(coeffs, &plan, params, p, output_times.len()))
        .collect();

    let mut states = Vec::with_capacity(runs.len());
    let mut status = Vec::with_capacity(runs.len());
    let mut paths = params.record_paths.then(Vec::new);
    let (mut steps, mut max_step) = (0, 0.0f64);
    for r in runs {
        steps = steps.max(r.steps);
        max_step = max_step.max(r.max_step);
        states.push(r.states);
        status.push(r.status);
        if let (Some(all), Some(p)) = (paths.as_mut(), r.path) {
            all.push(p);
        }
    }
    let non_monotone = (0..output_times.len())
        .map(|k| {
            if grid.dim() != 1 {
                return false;
            }
            let xs: Vec<f64> = (0..points.len())
                .filter(|&p| status[p].valid_at(output_times[k]))
                .map(|p| states[p][k].x[0])
                .collect();
            xs.windows(2).any(|w| !(w[1] > w[0]))
        })
        .collect();
    Ok(FlowSolution {
        initial_grid: grid.clone(),
        initial_points: points,
        times: output_times.to_vec(),
        states,
        status,
        non_monotone,
        metadata: FlowMetadata {
            max_step,
            continuous_steps: steps,
            jumps: driver.jump_events.len() + driver.path_increments.len(),
            substeps: params.substeps,
            scheme: params.scheme,
            placement: params.placement,
            small_jump_mode: driver.small_jump_mode,
            seed: driver.seed,
            realization_index: driver.realization_index,
        },
        paths,
    })
}

/// `(φ_{0,t}(y), E_t(y), -I_t(y))` for a single starting point.
pub fn forward_map(
    coeffs: &CoefficientSet,
    driver: &DriverRealization,
    params: &IntegrationParams,
    y: &[f64],
    t: f64,
) -> Result<CharacteristicState> {
    if y.len() != coeffs.dim() {
        return input("starting point has the wrong dimension");
    }
    let mut p = params.clone();
    p.record_paths = false;
    let plan = plan(coeffs, driver, &[t], &p)?;
    let r = integrate_one(coeffs, &plan, &p, y, 1);
    match r.status {
        TrajectoryStatus::Ok => Ok(r.states.into_iter().next().unwrap()),
        TrajectoryStatus::Diverged { context, .. } => Err(Error::Divergence { context }),
        TrajectoryStatus::LeftDomain { time } => Err(Error::Divergence {
            context: format!("trajectory from {y:?} left the domain box at t = {time}"),
        }),
    }
}

/// Recomputes `ξ` along each recorded trajectory as
/// `exp(-∫b dr - ∫B∘dW - ∫β◇dZ)`, with the jump integrals `∫₀¹ β(h(r))·z dr`
/// evaluated by Simpson's rule on a doubled RK4 trajectory, and returns
/// `max |ξ_stored / ξ_exponential - 1|` over valid states.
pub fn xi_closed_form_check(flow: &FlowSolution, coeffs: &CoefficientSet) -> Result<f64> {
    let Some(paths) = &flow.paths else {
        return input("flow was integrated without recorded paths");
    };
    if coeffs.is_reaction_free() {
        return Ok(0.0);
    }
    let (d, m) = (coeffs.dim(), coeffs.noise_dim());
    let n = 2 * flow.metadata.substeps;
    let mut worst: f64 = 0.0;
    let mut ev = Evaluator::new(coeffs);
    for (p, path) in paths.iter().enumerate() {
        let mut log_xi = 0.0;
        let mut out_k = 0;
        let compare = |log_xi: f64, upto: f64, out_k: &mut usize, worst: &mut f64| {
            while *out_k < flow.times.len() && flow.times[*out_k] < upto {
                if flow.is_valid(p, *out_k) {
                    let stored = flow.states[p][*out_k].xi;
                    *worst = worst.max((stored / (-log_xi).exp() - 1.0).abs());
                }
                *out_k += 1;
            }
        };
        for rec in path {
            let t_rec = match rec {
                StepRecord::Continuous { t1, dt, .. } => t1 - dt,
                StepRecord::Jump { t, .. } => *t,
            };
            // Everything up to (and including jumps at) earlier times is done.
            let boundary = if matches!(rec, StepRecord::Jump { .. }) { t_rec } else { t_rec + 1e-12 * t_rec.abs().max(1.0) };
            compare(log_xi, boundary, &mut out_k, &mut worst);
            match rec {
                StepRecord::Continuous { dt, dw, dz, x0, x1, .. } => {
                    let mut scratch = vec![0.0; d];
                    let (r0, _) = ev.increments(x0, *dt, dw, dz, &mut scratch);
                    let (r1, _) = ev.increments(x1, *dt, dw, dz, &mut scratch);
                    log_xi += 0.5 * (r0 + r1);
                }
                StepRecord::Jump { z, x_pre, .. } => {
                    let mut mat = vec![0.0; d * m];
                    let mut g = |x: &[f64], out: &mut [f64]| {
                        coeffs.eval_jump_transport(x, &mut mat);
                        for i in 0..d {
                            out[i] = -(0..m).map(|j| mat[i * m + j] * z[j]).sum::<f64>();
                        }
                    };
                    let mut beta = vec![0.0; m];
                    let mut values = Vec::with_capacity(n + 1);
                    let mut h = x_pre.clone();
                    coeffs.eval_jump_reaction(&h, &mut beta);
                    values.push(dot(&beta, z));
                    for _ in 0..n {
                        h = rk4(&mut g, &h, 1.0 / n as f64, 1)?;
                        coeffs.eval_jump_reaction(&h, &mut beta);
                        values.push(dot(&beta, z));
                    }
                    let w = 1.0 / n as f64;
                    let simpson: f64 = (0..n / 2)
                        .map(|k| w / 3.0 * (values[2 * k] + 4.0 * values[2 * k + 1] + values[2 * k + 2]))
                        .sum();
                    log_xi += simpson;
                }
            }
        }
        compare(log_xi, f64::INFINITY, &mut out_k, &mut worst);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coefficients::scalar_field;
    use crate::levy_driver::{DriverConfig, JumpEvent, MarkDistribution};

    fn no_noise_driver(t: f64, steps: usize) -> DriverRealization {
        DriverRealization::from_events(t, steps, 1, vec![], &[]).unwrap()
    }

    #[test]
    fn constant_drift_step() {
        let c = CoefficientSet::zero(1, 1).unwrap().with_transport(|_, o| o[0] = 1.0);
        let s = step_continuous(&CharacteristicState::start(&[0.0]), &c, 0.5, &[0.0]).unwrap();
        assert!((s.x[0] + 0.5).abs() < 1e-15);
        assert!(step_continuous(&s, &c, 0.0, &[0.0]).is_err());
    }

    #[test]
    fn constant_reaction_decay() {
        let c = CoefficientSet::zero(1, 1).unwrap().with_reaction(|_| 0.7);
        let mut s = CharacteristicState::start(&[0.0]);
        for _ in 0..100 {
            s = step_continuous(&s, &c, 0.01, &[0.0]).unwrap();
        }
        assert!((s.xi - (-0.7f64).exp()).abs() < 1e-12);
    }

    #[test]
    fn jump_examples() {
        let c = CoefficientSet::zero(1, 1).unwrap().with_jump_transport(scalar_field(|x| x));
        let s = CharacteristicState { x: vec![1.5], xi: 2.0, zeta: 0.3, t: 0.4 };
        assert_eq!(apply_jump(&s, &c, &[0.0], 16).unwrap(), s);
        let j = apply_jump(&s, &c, &[0.4], 64).unwrap();
        assert!((j.x[0] - 1.5 * (-0.4f64).exp()).abs() < 1e-10);
        assert_eq!(j.t, 0.4);
    }

    #[test]
    fn zero_coefficients_constant_states() {
        let c = CoefficientSet::zero(1, 1).unwrap();
        let drv = no_noise_driver(1.0, 10);
        let f = integrate_path(&c, &drv, &InitialGrid::uniform(-1.0, 1.0, 5), &[0.0, 0.5, 1.0], &IntegrationParams::default()).unwrap();
        for (p, traj) in f.states.iter().enumerate() {
            for (k, s) in traj.iter().enumerate() {
                assert_eq!(s.x, f.initial_points[p]);
                assert_eq!(f.accumulators(p, k), (1.0, 0.0));
            }
        }
    }

    #[test]
    fn constant_drift_flow() {
        let c = CoefficientSet::zero(1, 1).unwrap().with_transport(|_, o| o[0] = 1.0);
        let f = integrate_path(&c, &no_noise_driver(1.0, 100), &InitialGrid::uniform(0.0, 0.0, 1), &[1.0], &IntegrationParams::default()).unwrap();
        assert!((f.states[0][0].x[0] + 1.0).abs() < 1e-12);
    }

    #[test]
    fn two_jump_sinh_path() {
        let c = CoefficientSet::zero(1, 1)
            .unwrap()
            .with_jump_transport(scalar_field(|x| (x * x + 1.0).sqrt()));
        let events = vec![
            JumpEvent { time: 0.3, mark: vec![0.5] },
            JumpEvent { time: 0.7, mark: vec![-0.2] },
        ];
        let drv = DriverRealization::from_events(1.0, 10, 1, events, &[]).unwrap();
        let grid = InitialGrid::uniform(-2.0, 2.0, 9);
        let f = integrate_path(&c, &drv, &grid, &[1.0], &IntegrationParams::default().with_substeps(64)).unwrap();
        for (p, y) in f.initial_points.iter().enumerate() {
            let exact = (y[0].asinh() - 0.3).sinh();
            assert!((f.states[p][0].x[0] - exact).abs() < 1e-8);
        }
        assert!(!f.non_monotone[0]);
    }

    #[test]
    fn stratonovich_linear_noise() {
        let c = CoefficientSet::zero(1, 1).unwrap().with_noise_transport(scalar_field(|x| x));
        let drv = DriverConfig::new(1.0, 1 << 12, 1).with_brownian(true).generate(21, 0).unwrap();
        let f = integrate_path(&c, &drv, &InitialGrid::uniform(1.0, 1.0, 1), &[1.0], &IntegrationParams::default()).unwrap();
        let w1 = drv.brownian_value_at(1.0).unwrap()[0];
        assert!((f.states[0][0].x[0] - (-w1).exp()).abs() < 1e-2);
    }

    #[test]
    fn ito_cross_check_agrees_in_the_mean() {
        let c = CoefficientSet::zero(1, 1)
            .unwrap()
            .with_noise_transport(scalar_field(|x| 0.5 * x))
            .with_noise_reaction(scalar_field(|x| 0.2 * x.sin()));
        let cfg = DriverConfig::new(1.0, 1 << 10, 1).with_brownian(true);
        let mut gap = 0.0;
        for k in 0..8 {
            let drv = cfg.generate(5, k).unwrap();
            let grid = InitialGrid::uniform(1.0, 1.0, 1);
            let heun = integrate_path(&c, &drv, &grid, &[1.0], &IntegrationParams::default()).unwrap();
            let ito = integrate_path(&c, &drv, &grid, &[1.0], &IntegrationParams::default().with_scheme(StepScheme::ItoEuler)).unwrap();
            gap += (heun.states[0][0].x[0] - ito.states[0][0].x[0]).abs();
            gap += (heun.states[0][0].xi - ito.states[0][0].xi).abs();
        }
        assert!(gap / 8.0 < 0.05, "{gap}");
    }

    #[test]
    fn output_time_off_grid_rejected() {
        let c = CoefficientSet::zero(1, 1).unwrap();
        let r = integrate_path(&c, &no_noise_driver(1.0, 10), &InitialGrid::uniform(0.0, 1.0, 2), &[0.55], &IntegrationParams::default());
        assert!(matches!(r, Err(Error::Input(_))));
    }

    #[test]
    fn unsorted_grid_flags_non_monotone() {
        let c = CoefficientSet::zero(1, 1).unwrap();
        let grid = InitialGrid::from_points_1d(vec![0.0, 1.0, 0.5]);
        let f = integrate_path(&c, &no_noise_driver(1.0, 4), &grid, &[1.0], &IntegrationParams::default()).unwrap();
        assert!(f.non_monotone[0]);
    }

    #[test]
    fn domain_exit_is_flagged() {
        let c = CoefficientSet::zero(1, 1).unwrap().with_transport(|_, o| o[0] = -5.0);
        let p = IntegrationParams::default().with_domain(vec![(-2.0, 2.0)]);
        let f = integrate_path(&c, &no_noise_driver(1.0, 10), &InitialGrid::uniform(0.0, 1.0, 3), &[0.1, 1.0], &p).unwrap();
        assert!(f.status.iter().all(|s| matches!(s, TrajectoryStatus::LeftDomain { .. })));
        assert!(f.is_valid(0, 0));
        assert!(!f.is_valid(0, 1));
    }

    #[test]
    fn xi_check_exact_for_constant_reaction() {
        let c = CoefficientSet::zero(1, 1).unwrap().with_reaction(|_| 0.3);
        let f = integrate_path(&c, &no_noise_driver(1.0, 50), &InitialGrid::uniform(0.0, 1.0, 3), &[0.5, 1.0], &IntegrationParams::default().recording()).unwrap();
        assert!(xi_closed_form_check(&f, &c).unwrap() <= 1e-10);
    }

    #[test]
    fn grid_snapped_defers_jumps() {
        let c = CoefficientSet::zero(1, 1)
            .unwrap()
            .with_transport(|x, o| o[0] = x[0])
            .with_jump_transport(|_, o| o[0] = 1.0);
        let ev = vec![JumpEvent { time: 0.25, mark: vec![1.0] }];
        let drv = DriverRealization::from_events(1.0, 2, 1, ev, &[]).unwrap();
        let grid = InitialGrid::uniform(0.0, 0.0, 1);
        let p = IntegrationParams::default().with_max_dt(1e-4).with_placement(EventPlacement::GridSnapped);
        let snapped = integrate_path(&c, &drv, &grid, &[0.5], &p).unwrap();
        // x' = -x on [0, 0.5], then the jump subtracts 1: exactly -1 since x(0) = 0.
        assert!((snapped.states[0][0].x[0] + 1.0).abs() < 1e-12);
        let inserted = integrate_path(&c, &drv, &grid, &[0.5], &p.clone().with_placement(EventPlacement::Inserted)).unwrap();
        assert!((inserted.states[0][0].x[0] + (-0.25f64).exp()).abs() < 1e-8);
    }

    #[test]
    fn compensator_trivial_cases() {
        let c = CoefficientSet::zero(1, 1).unwrap().with_jump_transport(scalar_field(|x| x));
        let s = CharacteristicState::start(&[0.8]);
        let none = LevyMeasureSpec::finite_activity(0.0, MarkDistribution::Uniform { low: -1.0, high: 1.0 });
        assert_eq!(small_jump_compensator(&c, &s, &none, (0.0, 1.0), 32, 1e-6).unwrap(), vec![0.0; 3]);
        let st = LevyMeasureSpec::alpha_stable(1.5, 0.2, 0.1);
        assert_eq!(small_jump_compensator(&c, &s, &st, (1.0, 1.0), 32, 1e-6).unwrap(), vec![0.0; 3]);
    }

    #[test]
    fn compensator_linear_field_closed_form() {
        // Σ(x)z = -x z: ∫ (x e^{-z} - x + x z) ν(dz) over the band.
        let c = CoefficientSet::zero(1, 1).unwrap().with_jump_transport(scalar_field(|x| x));
        let s = CharacteristicState::start(&[0.8]);
        let st = LevyMeasureSpec::alpha_stable(1.5, 0.2, 0.1);
        let v = small_jump_compensator(&c, &s, &st, (0.1, 1.0), 64, 1e-6).unwrap();
        let brute = st.integrate_1d(0.1, 1.0, 40, |z| 0.8 * ((-z).exp() - 1.0 + z));
        assert!(((v[0] - brute) / brute).abs() < 1e-4);
        assert_eq!(v[1], 0.0);
    }

    #[test]
    fn trajectory_csv_header() {
        let c = CoefficientSet::zero(1, 1).unwrap();
        let f = integrate_path(&c, &no_noise_driver(1.0, 2), &InitialGrid::uniform(0.0, 1.0, 2), &[0.0, 1.0], &IntegrationParams::default()).unwrap();
        let mut buf = Vec::new();
        f.write_trajectory_csv(1, &mut buf).unwrap();
        let s = String::from_utf8(buf).unwrap();
        assert!(s.starts_with("t,x_1,xi,zeta,E,I\n"));
        assert_eq!(s.lines().count(), 3);
    }
}
