//! Pointwise evaluation of the inverse flow `(φ_{t,0}, ξ_{t,0}, ζ_{t,0})` from a
//! forward [`FlowSolution`] table.
//!
//! The forward map `ξ = ξ0 E_t(y)`, `ζ = ζ0 - ξ0 I_t(y)` is affine in `(ξ0, ζ0)`,
//! so once `y = φ_{t,0}(x)` is known, `ξ_{t,0}(x, 1) = 1 / E_t(y)` and
//! `ζ_{t,0}(x, 1, 0) = I_t(y) / E_t(y)`.

use serde::{Deserialize, Serialize};

use crate::characteristics::{forward_map, FlowSolution, IntegrationParams};
use crate::coefficients::CoefficientSet;
use crate::error::{input, Error, Result};
use crate::interp::{bracket, lagrange4, lagrange_weights, pchip, stencil_start};
use crate::levy_driver::DriverRealization;
use crate::marcus_exp::norm;

/// Default inversion tolerance, in table units.
pub const DEFAULT_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InverseFlowQuery {
    pub t: f64,
    pub x: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InverseCoefficients {
    /// `φ_{t,0}(x)`
    pub y: Vec<f64>,
    /// `ξ_{t,0}(x, 1)`
    pub xi_inv: f64,
    /// `ζ_{t,0}(x, 1, 0)`
    pub zeta_inv: f64,
    /// `|φ_{0,t}(y) - x|` for the interpolated forward map.
    pub residual: f64,
}

/// The forward table `y ↦ (φ_{0,t}(y), E_t(y), I_t(y))` at one output time, `d = 1`.
#[derive(Debug, Clone)]
pub struct InverseTable1d {
    t: f64,
    ys: Vec<f64>,
    xs: Vec<f64>,
    es: Vec<f64>,
    is: Vec<f64>,
}

impl InverseTable1d {
    /// Builds the table from the valid trajectories at output index `k`.
    pub fn new(flow: &FlowSolution, k: usize) -> Result<Self> {
        if flow.dim() != 1 {
            return input("one-dimensional inversion needs d = 1");
        }
        let t = flow.times[k];
        let mut idx = Vec::new();
        for p in 0..flow.initial_points.len() {
            if flow.is_valid(p, k) {
                idx.push(p);
            }
        }
        if idx.len() < 2 {
            return input(format!("fewer than two valid trajectories at t = {t}"));
        }
        let ys: Vec<f64> = idx.iter().map(|&p| flow.initial_points[p][0]).collect();
        let xs: Vec<f64> = idx.iter().map(|&p| flow.states[p][k].x[0]).collect();
        for w in 0..idx.len() - 1 {
            if !(xs[w + 1] > xs[w]) || !(ys[w + 1] > ys[w]) {
                return Err(Error::DiffeomorphismViolation { t, index: idx[w], next: idx[w + 1] });
            }
        }
        let es = idx.iter().map(|&p| flow.accumulators(p, k).0).collect();
        let is = idx.iter().map(|&p| flow.accumulators(p, k).1).collect();
        Ok(Self { t, ys, xs, es, is })
    }

    pub fn range(&self) -> (f64, f64) {
        (self.xs[0], *self.xs.last().unwrap())
    }

    /// Interpolated `φ_{0,t}(y)` and its derivative.
    pub fn forward(&self, y: f64) -> (f64, f64) {
        lagrange4(&self.ys, &self.xs, y)
    }

    pub fn invert(&self, x: f64, tol: f64) -> Result<InverseCoefficients> {
        let (lo, hi) = self.range();
        let slack = tol.max(1e-12 * (hi - lo));
        if !(x >= lo - slack && x <= hi + slack) {
            return Err(Error::Extrapolation { t: self.t, x, lo, hi });
        }
        let x = x.clamp(lo, hi);
        let k = bracket(&self.xs, x);
        let (mut a, mut b) = (self.ys[k], self.ys[k + 1]);
        let mut y = pchip(&self.xs, &self.ys, x).clamp(a, b);
        let mut residual = f64::INFINITY;
        for _ in 0..100 {
            let (fx, dfx) = self.forward(y);
            let r = fx - x;
            residual = r.abs();
            if residual <= tol * 1e-3 {
                break;
            }
            if r > 0.0 {
                b = y;
            } else {
                a = y;
            }
            let newton = y - r / dfx;
            y = if dfx > 0.0 && newton > a && newton < b { newton } else { 0.5 * (a + b) };
            if b - a <= 4.0 * f64::EPSILON * y.abs().max(1.0) {
                residual = (self.forward(y).0 - x).abs();
                break;
            }
        }
        if residual > tol {
            return Err(Error::Iteration { iterations: 100, residual });
        }
        let s = stencil_start(self.ys.len(), bracket(&self.ys, y));
        let e = (s + 4).min(self.ys.len());
        let (w, _) = lagrange_weights(&self.ys[s..e], y);
        let ev: f64 = w.iter().zip(&self.es[s..e]).map(|(a, b)| a * b).sum();
        let iv: f64 = w.iter().zip(&self.is[s..e]).map(|(a, b)| a * b).sum();
        if !(ev > 0.0) {
            return Err(Error::Divergence { context: format!("interpolated E = {ev} at y = {y}") });
        }
        Ok(InverseCoefficients { y: vec![y], xi_inv: 1.0 / ev, zeta_inv: iv / ev, residual })
    }
}

fn time_index(flow: &FlowSolution, t: f64) -> Result<usize> {
    flow.time_index(t)
        .ok_or_else(|| Error::Input(format!("time {t} is not an output time of the flow")))
}

/// Inverts a one-dimensional flow at `query` by monotone interpolation and a
/// safeguarded Newton polish on the piecewise-cubic forward interpolant.
pub fn invert_1d(flow: &FlowSolution, query: &InverseFlowQuery) -> Result<InverseCoefficients> {
    if query.x.len() != 1 {
        return input("one-dimensional inversion needs a scalar query");
    }
    let k = time_index(flow, query.t)?;
    InverseTable1d::new(flow, k)?.invert(query.x[0], DEFAULT_TOLERANCE)
}

/// Tensor-product forward table for `d ≤ 3` at one output time.
#[derive(Debug, Clone)]
pub struct InverseTableNd {
    t: f64,
    axes: Vec<Vec<f64>>,
    /// Per node (row-major): forward endpoint, `E`, `I`.
    xs: Vec<Vec<f64>>,
    es: Vec<f64>,
    is: Vec<f64>,
    valid: Vec<bool>,
}

impl InverseTableNd {
    pub fn new(flow: &FlowSolution, k: usize) -> Result<Self> {
        let d = flow.dim();
        if d > 3 {
            return input("inversion is implemented for d ≤ 3");
        }
        let axes = flow.initial_grid.axes.clone();
        if axes.iter().any(|a| a.len() < 2 || a.windows(2).any(|w| w[1] <= w[0])) {
            return input("tensor inversion needs ≥ 2 strictly increasing nodes per axis");
        }
        let n = flow.initial_points.len();
        let valid: Vec<bool> = (0..n).map(|p| flow.is_valid(p, k)).collect();
        Ok(Self {
            t: flow.times[k],
            axes,
            xs: (0..n).map(|p| flow.states[p][k].x.clone()).collect(),
            es: (0..n).map(|p| flow.accumulators(p, k).0).collect(),
            is: (0..n).map(|p| flow.accumulators(p, k).1).collect(),
            valid,
        })
    }

    fn dim(&self) -> usize {
        self.axes.len()
    }

    /// Node indices and tensor weights of the interpolation stencil at `y`.
    fn stencil(&self, y: &[f64]) -> Vec<(usize, f64)> {
        let mut nodes = vec![(0usize, 1.0f64)];
        for (a, axis) in self.axes.iter().enumerate() {
            let s = stencil_start(axis.len(), bracket(axis, y[a]));
            let e = (s + 4).min(axis.len());
            let (w, _) = lagrange_weights(&axis[s..e], y[a]);
            nodes = nodes
                .into_iter()
                .flat_map(|(idx, wt)| {
                    let w = w.clone();
                    (s..e).map(move |i| (idx * axis.len() + i, wt * w[i - s]))
                })
                .collect();
        }
        nodes
    }

    fn interpolate(&self, y: &[f64]) -> Result<(Vec<f64>, f64, f64)> {
        let d = self.dim();
        let mut x = vec![0.0; d];
        let (mut e, mut i) = (0.0, 0.0);
        for (node, w) in self.stencil(y) {
            if !self.valid[node] {
                return Err(Error::Divergence {
                    context: format!("flagged trajectory in the stencil at y = {y:?}"),
                });
            }
            for c in 0..d {
                x[c] += w * self.xs[node][c];
            }
            e += w * self.es[node];
            i += w * self.is[node];
        }
        Ok((x, e, i))
    }

    fn inside(&self, y: &[f64]) -> bool {
        self.axes
            .iter()
            .zip(y)
            .all(|(a, v)| *v >= a[0] && *v <= *a.last().unwrap())
    }

    fn clamp(&self, y: &mut [f64]) {
        for (a, v) in self.axes.iter().zip(y.iter_mut()) {
            *v = v.clamp(a[0], *a.last().unwrap());
        }
    }

    pub fn invert(&self, x: &[f64], max_iter: usize, tol: f64) -> Result<InverseCoefficients> {
        let d = self.dim();
        if x.len() != d {
            return input("query dimension does not match the flow");
        }
        for c in 0..d {
            let (lo, hi) = self
                .xs
                .iter()
                .zip(&self.valid)
                .filter(|(_, v)| **v)
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), (p, _)| (lo.min(p[c]), hi.max(p[c])));
            if x[c] < lo || x[c] > hi {
                return Err(Error::Extrapolation { t: self.t, x: x[c], lo, hi });
            }
        }
        // Seed: initial point of the nearest valid forward endpoint.
        let seed = (0..self.xs.len())
            .filter(|&p| self.valid[p])
            .min_by(|&p, &q| {
                let dp = dist(&self.xs[p], x);
                let dq = dist(&self.xs[q], x);
                dp.total_cmp(&dq)
            })
            .ok_or_else(|| Error::Input("no valid trajectories".into()))?;
        let mut y = self.node_point(seed);
        let mut residual = f64::INFINITY;
        for _ in 0..max_iter {
            let (fx, _, _) = self.interpolate(&y)?;
            let r: Vec<f64> = fx.iter().zip(x).map(|(a, b)| a - b).collect();
            residual = norm(&r);
            if residual <= tol {
                return self.finish(y, residual);
            }
            let jac = self.jacobian(&y)?;
            let step = solve_small(jac, r.clone()).ok_or_else(|| Error::Conditioning { point: y.clone() })?;
            // Backtrack so the residual does not grow.
            let mut lambda = 1.0;
            let mut accepted = false;
            for _ in 0..30 {
                let mut trial: Vec<f64> = y.iter().zip(&step).map(|(a, s)| a - lambda * s).collect();
                self.clamp(&mut trial);
                let (ft, _, _) = self.interpolate(&trial)?;
                let rt: Vec<f64> = ft.iter().zip(x).map(|(a, b)| a - b).collect();
                if norm(&rt) < residual {
                    y = trial;
                    accepted = true;
                    break;
                }
                lambda *= 0.5;
            }
            if !accepted {
                break;
            }
        }
        let (fx, _, _) = self.interpolate(&y)?;
        let r: Vec<f64> = fx.iter().zip(x).map(|(a, b)| a - b).collect();
        if norm(&r) <= tol {
            return self.finish(y, norm(&r));
        }
        Err(Error::Iteration { iterations: max_iter, residual: residual.min(norm(&r)) })
    }

    fn finish(&self, y: Vec<f64>, residual: f64) -> Result<InverseCoefficients> {
        debug_assert!(self.inside(&y));
        let (_, e, i) = self.interpolate(&y)?;
        if !(e > 0.0) {
            return Err(Error::Divergence { context: format!("interpolated E = {e} at y = {y:?}") });
        }
        Ok(InverseCoefficients { y, xi_inv: 1.0 / e, zeta_inv: i / e, residual })
    }

    fn node_point(&self, node: usize) -> Vec<f64> {
        let mut rest = node;
        let mut out = vec![0.0; self.dim()];
        for a in (0..self.dim()).rev() {
            let len = self.axes[a].len();
            out[a] = self.axes[a][rest % len];
            rest /= len;
        }
        out
    }

    /// Central differences of the interpolated forward map with steps of one
    /// percent of the local grid spacing.
    fn jacobian(&self, y: &[f64]) -> Result<Vec<Vec<f64>>> {
        let d = self.dim();
        let mut jac = vec![vec![0.0; d]; d];
        for k in 0..d {
            let axis = &self.axes[k];
            let i = bracket(axis, y[k]);
            let h = 0.01 * (axis[i + 1] - axis[i]);
            let (mut up, mut down) = (y.to_vec(), y.to_vec());
            up[k] += h;
            down[k] -= h;
            self.clamp(&mut up);
            self.clamp(&mut down);
            let span = up[k] - down[k];
            let (fu, _, _) = self.interpolate(&up)?;
            let (fd, _, _) = self.interpolate(&down)?;
            for r in 0..d {
                jac[r][k] = (fu[r] - fd[r]) / span;
            }
        }
        Ok(jac)
    }
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>()
}

/// Gaussian elimination with partial pivoting; `None` when (nearly) singular.
fn solve_small(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Option<Vec<f64>> {
    let n = b.len();
    let scale = a.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()));
    if scale == 0.0 || !scale.is_finite() {
        return None;
    }
    for col in 0..n {
        let piv = (col..n).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[piv][col].abs() <= 1e-12 * scale {
            return None;
        }
        a.swap(col, piv);
        b.swap(col, piv);
        for r in col + 1..n {
            let f = a[r][col] / a[col][col];
            for c in col..n {
                a[r][c] -= f * a[col][c];
            }
            b[r] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for r in (0..n).rev() {
        let s: f64 = (r + 1..n).map(|c| a[r][c] * x[c]).sum();
        x[r] = (b[r] - s) / a[r][r];
    }
    Some(x)
}

/// Newton inversion on the tensor-product interpolant of the forward table.
pub fn invert_nd(
    flow: &FlowSolution,
    query: &InverseFlowQuery,
    max_iter: usize,
    tol: f64,
) -> Result<InverseCoefficients> {
    let k = time_index(flow, query.t)?;
    InverseTableNd::new(flow, k)?.invert(&query.x, max_iter, tol)
}

/// Inversion by [`invert_1d`] for `d = 1` and [`invert_nd`] otherwise.
pub fn invert(flow: &FlowSolution, query: &InverseFlowQuery) -> Result<InverseCoefficients> {
    if flow.dim() == 1 {
        invert_1d(flow, query)
    } else {
        invert_nd(flow, query, 50, DEFAULT_TOLERANCE)
    }
}

/// `max ‖φ_{0,t}(φ_{t,0}(x)) - x‖` over `samples`, where `forward` evaluates
/// the forward map independently of the table.
pub fn round_trip_residual(
    flow: &FlowSolution,
    t: f64,
    samples: &[Vec<f64>],
    forward: impl Fn(&[f64]) -> Result<Vec<f64>>,
) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for x in samples {
        let inv = invert(flow, &InverseFlowQuery { t, x: x.clone() })?;
        let back = forward(&inv.y)?;
        let diff: Vec<f64> = back.iter().zip(x).map(|(a, b)| a - b).collect();
        worst = worst.max(norm(&diff));
    }
    Ok(worst)
}

/// [`round_trip_residual`] with the forward map re-integrated along `driver`.
pub fn round_trip_residual_integrated(
    flow: &FlowSolution,
    coeffs: &CoefficientSet,
    driver: &DriverRealization,
    params: &IntegrationParams,
    t: f64,
    samples: &[Vec<f64>],
) -> Result<f64> {
    round_trip_residual(flow, t, samples, |y| Ok(forward_map(coeffs, driver, params, y, t)?.x))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::characteristics::{integrate_path, InitialGrid};
    use crate::coefficients::scalar_field;
    use crate::levy_driver::JumpEvent;

    fn flow_1d(c: &CoefficientSet, drv: &DriverRealization, n: usize) -> FlowSolution {
        integrate_path(c, drv, &InitialGrid::uniform(-3.0, 3.0, n), &[0.0, 1.0], &IntegrationParams::default()).unwrap()
    }

    fn quiet(m: usize, events: Vec<JumpEvent>) -> DriverRealization {
        DriverRealization::from_events(1.0, 20, m, events, &[]).unwrap()
    }

    #[test]
    fn identity_flow() {
        let c = CoefficientSet::zero(1, 1).unwrap();
        let f = flow_1d(&c, &quiet(1, vec![]), 21);
        let r = invert_1d(&f, &InverseFlowQuery { t: 1.0, x: vec![0.37] }).unwrap();
        assert!((r.y[0] - 0.37).abs() < 1e-14);
        assert_eq!((r.xi_inv, r.zeta_inv), (1.0, 0.0));
        let res = round_trip_residual(&f, 1.0, &[vec![0.1], vec![-2.5]], |y| Ok(y.to_vec())).unwrap();
        assert!(res < 1e-14);
    }

    #[test]
    fn constant_drift_shifts() {
        let c = CoefficientSet::zero(1, 1).unwrap().with_transport(|_, o| o[0] = 1.0);
        let f = flow_1d(&c, &quiet(1, vec![]), 31);
        let r = invert_1d(&f, &InverseFlowQuery { t: 1.0, x: vec![0.2] }).unwrap();
        assert!((r.y[0] - 1.2).abs() < 1e-12);
        assert!(matches!(
            invert_1d(&f, &InverseFlowQuery { t: 1.0, x: vec![2.5] }),
            Err(Error::Extrapolation { .. })
        ));
    }

    #[test]
    fn sinh_jump_inverse() {
        let c = CoefficientSet::zero(1, 1)
            .unwrap()
            .with_jump_transport(scalar_field(|x| (x * x + 1.0).sqrt()));
        let f = flow_1d(&c, &quiet(1, vec![JumpEvent { time: 0.5, mark: vec![0.4] }]), 201);
        for x in [-1.5, 0.0, 0.8] {
            let r = invert_1d(&f, &InverseFlowQuery { t: 1.0, x: vec![x] }).unwrap();
            assert!((r.y[0] - (f64::asinh(x) + 0.4).sinh()).abs() < 1e-6);
        }
    }

    #[test]
    fn non_monotone_table_rejected() {
        let c = CoefficientSet::zero(1, 1).unwrap();
        let grid = InitialGrid::from_points_1d(vec![-1.0, 0.5, 0.0, 1.0]);
        let f = integrate_path(&c, &quiet(1, vec![]), &grid, &[1.0], &IntegrationParams::default()).unwrap();
        assert!(matches!(
            invert_1d(&f, &InverseFlowQuery { t: 1.0, x: vec![0.2] }),
            Err(Error::DiffeomorphismViolation { .. })
        ));
    }

    #[test]
    fn xi_inverse_times_e_is_one() {
        let c = CoefficientSet::zero(1, 1)
            .unwrap()
            .with_reaction(|x| 0.3 * x[0].sin())
            .with_source(|x| x[0].cos())
            .with_transport(|x, o| o[0] = 0.2 + 0.1 * x[0].cos());
        let f = flow_1d(&c, &quiet(1, vec![]), 61);
        let table = InverseTable1d::new(&f, 1).unwrap();
        let r = table.invert(0.3, DEFAULT_TOLERANCE).unwrap();
        let s = stencil_start(table.ys.len(), bracket(&table.ys, r.y[0]));
        let (w, _) = lagrange_weights(&table.ys[s..s + 4], r.y[0]);
        let e: f64 = w.iter().zip(&table.es[s..s + 4]).map(|(a, b)| a * b).sum();
        assert!((r.xi_inv * e - 1.0).abs() < 1e-15);
    }

    fn flow_2d(c: &CoefficientSet, drv: &DriverRealization) -> FlowSolution {
        let axis: Vec<f64> = (0..17).map(|i| -2.0 + 0.25 * i as f64).collect();
        let grid = InitialGrid::tensor(vec![axis.clone(), axis]);
        integrate_path(c, drv, &grid, &[0.5, 1.0], &IntegrationParams::default()).unwrap()
    }

    #[test]
    fn nd_identity_and_drift() {
        let c = CoefficientSet::zero(2, 1).unwrap();
        let f = flow_2d(&c, &quiet(1, vec![]));
        let r = invert_nd(&f, &InverseFlowQuery { t: 1.0, x: vec![0.3, -0.7] }, 1, 1e-12).unwrap();
        assert!((r.y[0] - 0.3).abs() < 1e-12 && (r.y[1] + 0.7).abs() < 1e-12);

        let c = CoefficientSet::zero(2, 1).unwrap().with_transport(|_, o| {
            o[0] = 1.0;
            o[1] = 1.0;
        });
        let f = flow_2d(&c, &quiet(1, vec![]));
        let r = invert_nd(&f, &InverseFlowQuery { t: 0.5, x: vec![0.1, -0.2] }, 20, 1e-10).unwrap();
        assert!((r.y[0] - 0.6).abs() < 1e-9 && (r.y[1] - 0.3).abs() < 1e-9);
    }

    #[test]
    fn nd_linear_jump() {
        let c = CoefficientSet::zero(2, 2).unwrap().with_jump_transport(|x, o| {
            o[0] = x[0];
            o[1] = 0.0;
            o[2] = 0.0;
            o[3] = x[1];
        });
        let drv = quiet(2, vec![JumpEvent { time: 0.3, mark: vec![0.2, 0.2] }]);
        let f = flow_2d(&c, &drv);
        let r = invert_nd(&f, &InverseFlowQuery { t: 1.0, x: vec![0.5, -0.9] }, 30, 1e-10).unwrap();
        let g = 0.2f64.exp();
        assert!((r.y[0] - 0.5 * g).abs() < 1e-6 && (r.y[1] + 0.9 * g).abs() < 1e-6);
    }

    #[test]
    fn small_solver() {
        let x = solve_small(vec![vec![2.0, 1.0], vec![1.0, 3.0]], vec![3.0, 5.0]).unwrap();
        assert!((x[0] - 0.8).abs() < 1e-14 && (x[1] - 1.4).abs() < 1e-14);
        assert!(solve_small(vec![vec![1.0, 2.0], vec![2.0, 4.0]], vec![1.0, 1.0]).is_none());
    }
}
