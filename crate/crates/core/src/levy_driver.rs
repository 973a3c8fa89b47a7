//! Reproducible realizations of the driving noise `(W, Z)`.
//!
//! `Z` follows the decomposition into compensated jumps of size `‖z‖ ≤ 1` and
//! uncompensated jumps of size `‖z‖ > 1`. A simulator cannot resolve infinitely
//! many small jumps, so jumps with `‖z‖ > ε` become explicit [`JumpEvent`]s and
//! the remainder is either dropped or replaced by a Gaussian with matched second
//! moment ([`SmallJumpMode`]). For the α-stable driver the path can instead be
//! sampled directly by increments when only `Z_t` itself is needed.
//!
//! Random streams: realization `k` of master seed `s` draws from a ChaCha8
//! generator keyed by `hash(s, k)`, with one independent stream per noise
//! component. Realizations therefore do not depend on scheduling.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, Poisson, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::io::Write;

use crate::error::{input, Error, Result};
use crate::quadrature::{composite_gauss, geometric_breaks, with_extra_breaks};

/// Independent random streams within one realization.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Substream {
    Brownian = 0,
    Jumps = 1,
    SmallJumps = 2,
    Path = 3,
    BrownianBridge = 4,
    SmallJumpBridge = 5,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Generator for one `(seed, realization, substream)` triple.
pub fn stream_rng(seed: u64, realization_index: u64, stream: Substream) -> ChaCha8Rng {
    let key = splitmix64(seed ^ splitmix64(realization_index ^ 0x632B_E59B_D9B4_E019));
    let mut rng = ChaCha8Rng::seed_from_u64(key);
    rng.set_stream(stream as u64);
    rng
}

/// Parses a seed given as decimal or `0x`-prefixed hexadecimal.
pub fn parse_seed(text: &str) -> Result<u64> {
    let t = text.trim();
    let parsed = match t.strip_prefix("0x").or_else(|| t.strip_prefix("0X")) {
        Some(hex) => u64::from_str_radix(&hex.replace('_', ""), 16),
        None => t.replace('_', "").parse::<u64>(),
    };
    parsed.map_err(|e| Error::Input(format!("seed {t:?}: {e}")))
}

/// Piecewise-linear density on a table of nodes; zero outside the table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TabulatedDensity {
    pub points: Vec<f64>,
    pub density: Vec<f64>,
}

impl TabulatedDensity {
    pub fn new(points: Vec<f64>, density: Vec<f64>) -> Result<Self> {
        let t = Self { points, density };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        if self.points.len() < 2 || self.points.len() != self.density.len() {
            return input("density table needs ≥ 2 nodes and one value per node");
        }
        if self.points.windows(2).any(|w| w[1] <= w[0]) {
            return input("density table nodes must be strictly increasing");
        }
        if self.density.iter().any(|g| !(g.is_finite() && *g >= 0.0)) {
            return input("density table values must be finite and nonnegative");
        }
        if self.mass() <= 0.0 {
            return input("density table has zero mass");
        }
        Ok(())
    }

    pub fn mass(&self) -> f64 {
        self.points
            .windows(2)
            .zip(self.density.windows(2))
            .map(|(p, g)| 0.5 * (p[1] - p[0]) * (g[0] + g[1]))
            .sum()
    }

    pub fn pdf(&self, z: f64) -> f64 {
        let p = &self.points;
        if z < p[0] || z > p[p.len() - 1] {
            return 0.0;
        }
        let k = p.partition_point(|&v| v <= z).clamp(1, p.len() - 1) - 1;
        let s = (z - p[k]) / (p[k + 1] - p[k]);
        self.density[k] + s * (self.density[k + 1] - self.density[k])
    }

    fn is_symmetric(&self) -> bool {
        let n = self.points.len();
        (0..n).all(|k| {
            let j = n - 1 - k;
            (self.points[k] + self.points[j]).abs() <= 1e-12 * (1.0 + self.points[k].abs())
                && (self.density[k] - self.density[j]).abs() <= 1e-12 * (1.0 + self.density[k])
        })
    }

    /// Inverse-CDF draw from the normalized density.
    pub fn sample(&self, rng: &mut impl Rng) -> f64 {
        let masses: Vec<f64> = self
            .points
            .windows(2)
            .zip(self.density.windows(2))
            .map(|(p, g)| 0.5 * (p[1] - p[0]) * (g[0] + g[1]))
            .collect();
        let total: f64 = masses.iter().sum();
        let mut target = rng.random::<f64>() * total;
        let mut k = 0;
        while k + 1 < masses.len() && target > masses[k] {
            target -= masses[k];
            k += 1;
        }
        let h = self.points[k + 1] - self.points[k];
        let (g0, g1) = (self.density[k], self.density[k + 1]);
        let slope = (g1 - g0) / h;
        let s = if slope.abs() < 1e-14 * (g0 + g1).max(1e-300) / h {
            target / g0.max(1e-300)
        } else {
            (-g0 + (g0 * g0 + 2.0 * slope * target).max(0.0).sqrt()) / slope
        };
        self.points[k] + s.clamp(0.0, h)
    }
}

/// Per-coordinate mark law of a finite-activity driver.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "dist", rename_all = "kebab-case")]
pub enum MarkDistribution {
    Uniform { low: f64, high: f64 },
    Normal { mean: f64, std: f64 },
    Constant { value: f64 },
    Tabulated(TabulatedDensity),
}

impl MarkDistribution {
    fn validate(&self) -> Result<()> {
        match self {
            Self::Uniform { low, high } if !(low.is_finite() && high.is_finite() && low < high) => {
                input("uniform marks need finite low < high")
            }
            Self::Normal { mean, std } if !(mean.is_finite() && std.is_finite() && *std > 0.0) => {
                input("normal marks need finite mean and std > 0")
            }
            Self::Constant { value } if !(value.is_finite() && *value != 0.0) => {
                input("constant mark must be finite and nonzero")
            }
            Self::Tabulated(t) => t.validate(),
            _ => Ok(()),
        }
    }

    fn sample(&self, rng: &mut impl Rng) -> f64 {
        match self {
            Self::Uniform { low, high } => low + (high - low) * rng.random::<f64>(),
            Self::Normal { mean, std } => {
                let n: f64 = StandardNormal.sample(rng);
                mean + std * n
            }
            Self::Constant { value } => *value,
            Self::Tabulated(t) => t.sample(rng),
        }
    }

    fn pdf(&self, z: f64) -> f64 {
        match self {
            Self::Uniform { low, high } => {
                if z >= *low && z <= *high {
                    1.0 / (high - low)
                } else {
                    0.0
                }
            }
            Self::Normal { mean, std } => {
                let u = (z - mean) / std;
                (-0.5 * u * u).exp() / (std * (2.0 * PI).sqrt())
            }
            Self::Constant { .. } => 0.0,
            Self::Tabulated(t) => t.pdf(z) / t.mass(),
        }
    }

    fn breaks(&self) -> Vec<f64> {
        match self {
            Self::Uniform { low, high } => vec![*low, *high],
            Self::Normal { mean, .. } => vec![*mean],
            Self::Constant { .. } => vec![],
            Self::Tabulated(t) => t.points.clone(),
        }
    }

    fn is_symmetric(&self) -> bool {
        match self {
            Self::Uniform { low, high } => (low + high).abs() <= 1e-14 * (high - low),
            Self::Normal { mean, .. } => *mean == 0.0,
            Self::Constant { .. } => false,
            Self::Tabulated(t) => t.is_symmetric(),
        }
    }
}

/// The Lévy measure `ν` of the jump part.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum LevyKind {
    /// Compound Poisson: events at rate `intensity`, marks i.i.d. per coordinate.
    FiniteActivity {
        intensity: f64,
        marks: MarkDistribution,
    },
    /// Symmetric α-stable with `E e^{iλZ_1} = e^{-scale |λ|^α}`, i.i.d. coordinates.
    AlphaStable { alpha: f64, scale: f64 },
    /// Arbitrary one-dimensional density per coordinate (finite mass).
    Tabulated { table: TabulatedDensity },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevyMeasureSpec {
    #[serde(flatten)]
    pub kind: LevyKind,
    /// Jumps of size `≤ ε` are not resolved as events.
    #[serde(default)]
    pub truncation_epsilon: f64,
}

impl LevyMeasureSpec {
    pub fn finite_activity(intensity: f64, marks: MarkDistribution) -> Self {
        Self {
            kind: LevyKind::FiniteActivity { intensity, marks },
            truncation_epsilon: 0.0,
        }
    }

    pub fn alpha_stable(alpha: f64, scale: f64, truncation_epsilon: f64) -> Self {
        Self {
            kind: LevyKind::AlphaStable { alpha, scale },
            truncation_epsilon,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let eps = self.truncation_epsilon;
        if !(0.0..1.0).contains(&eps) {
            return input(format!("truncation_epsilon = {eps} must lie in [0, 1)"));
        }
        match &self.kind {
            LevyKind::FiniteActivity { intensity, marks } => {
                if !(intensity.is_finite() && *intensity >= 0.0) {
                    return input(format!("intensity = {intensity} must be finite and ≥ 0"));
                }
                if eps != 0.0 {
                    return input("finite-activity drivers resolve every jump: truncation_epsilon must be 0");
                }
                marks.validate()
            }
            LevyKind::AlphaStable { alpha, scale } => {
                validate_stable(*alpha, *scale)?;
                if *alpha < 2.0 && eps == 0.0 {
                    return input("α-stable event sampling needs truncation_epsilon > 0");
                }
                Ok(())
            }
            LevyKind::Tabulated { table } => table.validate(),
        }
    }

    /// Whether `ν` has infinite mass, so `Z` is only representable after truncation.
    pub fn is_infinite_activity(&self) -> bool {
        matches!(self.kind, LevyKind::AlphaStable { alpha, .. } if alpha < 2.0)
    }

    /// Whether `ν` concentrates on the coordinate axes (independent coordinates).
    fn is_axis_measure(&self) -> bool {
        !matches!(self.kind, LevyKind::FiniteActivity { .. })
    }

    pub fn is_symmetric(&self) -> bool {
        match &self.kind {
            LevyKind::FiniteActivity { marks, .. } => marks.is_symmetric(),
            LevyKind::AlphaStable { .. } => true,
            LevyKind::Tabulated { table } => table.is_symmetric(),
        }
    }

    /// Density of the one-dimensional (per-coordinate) measure.
    pub fn density_1d(&self, z: f64) -> f64 {
        match &self.kind {
            LevyKind::FiniteActivity { intensity, marks } => intensity * marks.pdf(z),
            LevyKind::AlphaStable { alpha, scale } => {
                if z == 0.0 || *alpha >= 2.0 {
                    0.0
                } else {
                    stable_levy_constant(*alpha, *scale) * z.abs().powf(-1.0 - alpha)
                }
            }
            LevyKind::Tabulated { table } => table.pdf(z),
        }
    }

    fn atoms_1d(&self) -> Vec<(f64, f64)> {
        match &self.kind {
            LevyKind::FiniteActivity {
                intensity,
                marks: MarkDistribution::Constant { value },
            } => vec![(*value, *intensity)],
            _ => vec![],
        }
    }

    fn breaks_1d(&self) -> Vec<f64> {
        match &self.kind {
            LevyKind::FiniteActivity { marks, .. } => marks.breaks(),
            LevyKind::Tabulated { table } => table.points.clone(),
            LevyKind::AlphaStable { .. } => vec![],
        }
    }

    /// `∫_{lo < |z| ≤ hi} f(z) ν(dz)` for the one-dimensional measure, by composite
    /// Gauss–Legendre on geometric panels (`splits` subdivisions per panel).
    ///
    /// For an infinite measure and `lo = 0` the quadrature starts at
    /// `δ = hi · 1e-12` and `[0, δ]` is added in closed form assuming
    /// `f(z) ≈ f(±δ) (z/δ)²` there, which suits integrands vanishing to second
    /// order at the origin.
    pub fn integrate_1d(
        &self,
        lo: f64,
        hi: f64,
        splits: usize,
        mut f: impl FnMut(f64) -> f64,
    ) -> f64 {
        if !(hi > lo) {
            return 0.0;
        }
        let mut total: f64 = self
            .atoms_1d()
            .into_iter()
            .filter(|(at, _)| at.abs() > lo && at.abs() <= hi)
            .map(|(at, mass)| mass * f(at))
            .sum();
        let finite_mass = !self.is_infinite_activity();
        let lo_eff = if lo > 0.0 {
            lo
        } else if finite_mass {
            0.0
        } else {
            hi * 1e-12
        };
        let base = if lo_eff > 0.0 {
            geometric_breaks(lo_eff, hi, 2.0)
        } else {
            vec![0.0, hi]
        };
        let extra: Vec<f64> = self.breaks_1d().iter().map(|b| b.abs()).collect();
        let breaks = with_extra_breaks(base, &extra);
        let mut pos = |z: f64| f(z) * self.density_1d(z);
        total += composite_gauss(&mut pos, &breaks, splits);
        let mut neg = |s: f64| f(-s) * self.density_1d(-s);
        total += composite_gauss(&mut neg, &breaks, splits);
        if let (true, LevyKind::AlphaStable { alpha, .. }) = (lo_eff > lo, &self.kind) {
            let d = lo_eff;
            for z in [d, -d] {
                total += f(z) * self.density_1d(z) * d / (2.0 - alpha);
            }
        }
        total
    }

    /// `∫_{|z| ≤ ε} z² ν(dz)` per coordinate: variance rate of the small jumps.
    pub fn small_jump_variance(&self) -> f64 {
        let eps = self.truncation_epsilon;
        if eps == 0.0 {
            return 0.0;
        }
        match &self.kind {
            LevyKind::AlphaStable { alpha, scale } if *alpha < 2.0 => {
                2.0 * stable_levy_constant(*alpha, *scale) * eps.powf(2.0 - alpha) / (2.0 - alpha)
            }
            _ => self.integrate_1d(0.0, eps, 4, |z| z * z),
        }
    }

    /// `∫_{lo < ‖z‖ ≤ hi} z ν(dz)`, one entry per noise coordinate.
    pub fn band_mean(&self, lo: f64, hi: f64, noise_dim: usize) -> Result<Vec<f64>> {
        if self.is_symmetric() {
            return Ok(vec![0.0; noise_dim]);
        }
        if noise_dim > 1 && !self.is_axis_measure() {
            return input(
                "asymmetric finite-activity marks are only supported for one-dimensional noise",
            );
        }
        let v = self.integrate_1d(lo, hi, 4, |z| z);
        Ok(vec![v; noise_dim])
    }

    /// Rate of events with `|z| > ε` per coordinate (axis measures) or in total.
    pub fn event_rate(&self) -> f64 {
        let eps = self.truncation_epsilon;
        match &self.kind {
            LevyKind::FiniteActivity { intensity, .. } => *intensity,
            LevyKind::AlphaStable { alpha, scale } => {
                if *alpha >= 2.0 {
                    0.0
                } else {
                    2.0 * stable_levy_constant(*alpha, *scale) * eps.powf(-alpha) / alpha
                }
            }
            LevyKind::Tabulated { table } => {
                if eps == 0.0 {
                    table.mass()
                } else {
                    let total = table.mass();
                    total - self.integrate_1d(0.0, eps, 4, |_| 1.0)
                }
            }
        }
    }
}

fn validate_stable(alpha: f64, scale: f64) -> Result<()> {
    if !(alpha > 0.0 && alpha <= 2.0) {
        return input(format!("stability index α = {alpha} must lie in (0, 2]"));
    }
    if !(scale > 0.0 && scale.is_finite()) {
        return input(format!("stable scale = {scale} must be finite and > 0"));
    }
    Ok(())
}

/// Constant `C` of the symmetric stable Lévy density `C |z|^{-1-α}` whose
/// characteristic exponent is `scale · |λ|^α`.
pub fn stable_levy_constant(alpha: f64, scale: f64) -> f64 {
    if (alpha - 1.0).abs() < 1e-12 {
        return scale / PI;
    }
    let g = statrs::function::gamma::gamma(1.0 - alpha);
    scale * alpha / (2.0 * g * (PI * alpha / 2.0).cos())
}

/// Whether small jumps below the truncation level are dropped or replaced by a
/// Gaussian with the same variance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SmallJumpMode {
    #[default]
    Drop,
    GaussianSubstitute,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JumpEvent {
    pub time: f64,
    pub mark: Vec<f64>,
}

impl JumpEvent {
    pub fn norm(&self) -> f64 {
        self.mark.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Increments of an `m`-dimensional Brownian motion over the intervals of `grid`.
pub fn sample_brownian(grid: &[f64], m: usize, rng: &mut impl Rng) -> Result<Vec<Vec<f64>>> {
    check_grid(grid)?;
    if m == 0 {
        return input("Brownian dimension must be ≥ 1");
    }
    Ok(grid
        .windows(2)
        .map(|w| {
            let s = (w[1] - w[0]).sqrt();
            (0..m)
                .map(|_| {
                    let n: f64 = StandardNormal.sample(rng);
                    s * n
                })
                .collect()
        })
        .collect())
}

fn check_grid(grid: &[f64]) -> Result<()> {
    if grid.iter().any(|t| !t.is_finite()) {
        return input("time grid contains non-finite points");
    }
    if let Some(w) = grid.windows(2).find(|w| w[1] <= w[0]) {
        return input(format!("time grid not strictly increasing at {} → {}", w[0], w[1]));
    }
    Ok(())
}

fn poisson_count(mean: f64, rng: &mut impl Rng) -> Result<u64> {
    if mean == 0.0 {
        return Ok(0);
    }
    let p = Poisson::new(mean).map_err(|e| Error::Input(format!("Poisson mean {mean}: {e}")))?;
    let n: f64 = p.sample(rng);
    Ok(n as u64)
}

/// Uniform time in `(0, horizon]`.
fn event_time(horizon: f64, rng: &mut impl Rng) -> f64 {
    horizon * (1.0 - rng.random::<f64>())
}

/// Events of a compound Poisson driver on `(0, horizon]`, sorted by time.
pub fn sample_compound_poisson(
    spec: &LevyMeasureSpec,
    horizon: f64,
    m: usize,
    rng: &mut impl Rng,
) -> Result<Vec<JumpEvent>> {
    let LevyKind::FiniteActivity { intensity, marks } = &spec.kind else {
        return input("sample_compound_poisson needs a finite-activity measure");
    };
    spec.validate()?;
    let n = poisson_count(intensity * horizon, rng)?;
    let mut events = Vec::with_capacity(n as usize);
    for _ in 0..n {
        let time = event_time(horizon, rng);
        let mut mark = vec![0.0; m];
        for _ in 0..64 {
            mark.iter_mut().for_each(|v| *v = marks.sample(rng));
            if mark.iter().any(|v| *v != 0.0) {
                break;
            }
        }
        events.push(JumpEvent { time, mark });
    }
    finish_events(events, horizon, rng)
}

/// Sorts by time and redraws the (probability-zero) exact ties.
fn finish_events(
    mut events: Vec<JumpEvent>,
    horizon: f64,
    rng: &mut impl Rng,
) -> Result<Vec<JumpEvent>> {
    for _ in 0..16 {
        events.sort_by(|a, b| a.time.total_cmp(&b.time));
        let mut tie = false;
        for k in 1..events.len() {
            if events[k].time == events[k - 1].time {
                events[k].time = event_time(horizon, rng);
                tie = true;
            }
        }
        if !tie {
            return Ok(events);
        }
    }
    input("could not separate coincident jump times")
}

/// Jumps with `|z| > ε` of the (per-coordinate) stable or tabulated measure.
fn sample_axis_events(
    spec: &LevyMeasureSpec,
    horizon: f64,
    m: usize,
    rng: &mut impl Rng,
) -> Result<Vec<JumpEvent>> {
    let eps = spec.truncation_epsilon;
    let rate = spec.event_rate();
    let mut events = Vec::new();
    for j in 0..m {
        let n = poisson_count(rate * horizon, rng)?;
        for _ in 0..n {
            let time = event_time(horizon, rng);
            let size = match &spec.kind {
                LevyKind::AlphaStable { alpha, .. } => {
                    let u = 1.0 - rng.random::<f64>();
                    let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
                    sign * eps * u.powf(-1.0 / alpha)
                }
                LevyKind::Tabulated { table } => {
                    let mut z = table.sample(rng);
                    let mut tries = 0;
                    while z.abs() <= eps {
                        tries += 1;
                        if tries > 1_000_000 {
                            return input("tabulated measure has no mass above ε");
                        }
                        z = table.sample(rng);
                    }
                    z
                }
                LevyKind::FiniteActivity { .. } => unreachable!(),
            };
            let mut mark = vec![0.0; m];
            mark[j] = size;
            events.push(JumpEvent { time, mark });
        }
    }
    finish_events(events, horizon, rng)
}

/// One draw of the standard symmetric stable law `E e^{iλX} = e^{-|λ|^α}`
/// (Chambers–Mallows–Stuck).
pub fn sample_standard_stable(alpha: f64, rng: &mut impl Rng) -> f64 {
    let mut u = rng.random::<f64>();
    while u == 0.0 {
        u = rng.random::<f64>();
    }
    let v = PI * (u - 0.5);
    let mut w: f64 = Exp1.sample(rng);
    while w == 0.0 {
        w = Exp1.sample(rng);
    }
    if (alpha - 1.0).abs() < 1e-12 {
        return v.tan();
    }
    let a = (alpha * v).sin() / v.cos().powf(1.0 / alpha);
    let b = (((1.0 - alpha) * v).cos() / w).powf((1.0 - alpha) / alpha);
    a * b
}

/// Per-interval increments of a symmetric α-stable Lévy process with
/// `E e^{iλZ_1} = e^{-scale |λ|^α}`, i.i.d. coordinates.
pub fn sample_stable_path(
    alpha: f64,
    scale: f64,
    grid: &[f64],
    m: usize,
    rng: &mut impl Rng,
) -> Result<Vec<Vec<f64>>> {
    validate_stable(alpha, scale)?;
    check_grid(grid)?;
    Ok(grid
        .windows(2)
        .map(|w| {
            let s = (scale * (w[1] - w[0])).powf(1.0 / alpha);
            (0..m).map(|_| s * sample_standard_stable(alpha, rng)).collect()
        })
        .collect())
}

/// Splits events into `‖z‖ ≤ threshold` and `‖z‖ > threshold`, preserving order.
pub fn decompose_events(
    events: &[JumpEvent],
    threshold: f64,
) -> (Vec<JumpEvent>, Vec<JumpEvent>) {
    events.iter().cloned().partition(|e| e.norm() <= threshold)
}

/// Recipe for generating [`DriverRealization`]s.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriverConfig {
    pub horizon: f64,
    /// Number of uniform base steps; the base step is `horizon / steps`.
    pub steps: usize,
    pub noise_dim: usize,
    pub brownian: bool,
    pub levy: Option<LevyMeasureSpec>,
    pub small_jump_mode: SmallJumpMode,
    /// Sample the stable path by increments instead of resolving jumps as events.
    pub direct_path: bool,
    /// Compensate the jumps of size `≤ 1` by their mean (the `Ñ` convention).
    pub compensated: bool,
    /// Times that must appear in the grid (output times).
    pub pinned_times: Vec<f64>,
}

impl DriverConfig {
    pub fn new(horizon: f64, steps: usize, noise_dim: usize) -> Self {
        Self {
            horizon,
            steps,
            noise_dim,
            brownian: false,
            levy: None,
            small_jump_mode: SmallJumpMode::Drop,
            direct_path: false,
            compensated: true,
            pinned_times: Vec::new(),
        }
    }

    /// Uniform step count closest to `horizon / dt` (at least one).
    pub fn steps_for(horizon: f64, dt: f64) -> usize {
        ((horizon / dt).round() as usize).max(1)
    }

    pub fn with_brownian(mut self, on: bool) -> Self {
        self.brownian = on;
        self
    }

    pub fn with_levy(mut self, levy: LevyMeasureSpec) -> Self {
        self.levy = Some(levy);
        self
    }

    pub fn with_pinned_times(mut self, times: &[f64]) -> Self {
        self.pinned_times = times.to_vec();
        self
    }

    pub fn with_direct_path(mut self, on: bool) -> Self {
        self.direct_path = on;
        self
    }

    pub fn with_small_jump_mode(mut self, mode: SmallJumpMode) -> Self {
        self.small_jump_mode = mode;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return input(format!("horizon = {} must be finite and > 0", self.horizon));
        }
        if self.steps == 0 || self.noise_dim == 0 {
            return input("steps and noise_dim must be ≥ 1");
        }
        if let Some(t) = self
            .pinned_times
            .iter()
            .find(|t| !(**t >= 0.0 && **t <= self.horizon * (1.0 + 1e-12)))
        {
            return input(format!("pinned time {t} outside [0, {}]", self.horizon));
        }
        if let Some(l) = &self.levy {
            let stable_alpha_two =
                matches!(l.kind, LevyKind::AlphaStable { alpha, .. } if alpha >= 2.0);
            if !(self.direct_path || stable_alpha_two) {
                l.validate()?;
            } else if let LevyKind::AlphaStable { alpha, scale } = l.kind {
                validate_stable(alpha, scale)?;
            } else {
                return input("direct path sampling is only available for α-stable drivers");
            }
        }
        Ok(())
    }

    pub fn generate(&self, seed: u64, realization_index: u64) -> Result<DriverRealization> {
        self.validate()?;
        let (t_end, m, n) = (self.horizon, self.noise_dim, self.steps);
        let base: Vec<f64> = (0..=n).map(|i| t_end * i as f64 / n as f64).collect();
        let tol = 1e-10 * t_end / n as f64;

        let direct = match &self.levy {
            Some(l) => {
                self.direct_path
                    || matches!(l.kind, LevyKind::AlphaStable { alpha, .. } if alpha >= 2.0)
            }
            None => false,
        };

        let mut events = match &self.levy {
            Some(l) if !direct => {
                let mut rng = stream_rng(seed, realization_index, Substream::Jumps);
                match l.kind {
                    LevyKind::FiniteActivity { .. } => {
                        sample_compound_poisson(l, t_end, m, &mut rng)?
                    }
                    _ => sample_axis_events(l, t_end, m, &mut rng)?,
                }
            }
            _ => Vec::new(),
        };

        // Snap inserted times onto base points within tolerance.
        let snap = |t: f64| -> f64 {
            let k = (t / t_end * n as f64).round() as usize;
            let b = base[k.min(n)];
            if (t - b).abs() <= tol {
                b
            } else {
                t
            }
        };
        for e in &mut events {
            e.time = snap(e.time);
        }
        let pinned: Vec<f64> = self.pinned_times.iter().map(|&t| snap(t.min(t_end))).collect();
        let mut grid = base.clone();
        grid.extend(events.iter().map(|e| e.time));
        grid.extend(pinned.iter().copied());
        grid.sort_by(f64::total_cmp);
        grid.dedup();
        if direct && grid.len() != base.len() {
            return input("directly sampled stable paths need pinned times on the uniform grid");
        }

        let brownian = if self.brownian {
            let mut rng = stream_rng(seed, realization_index, Substream::Brownian);
            let coarse = sample_brownian(&base, m, &mut rng)?;
            let mut bridge = stream_rng(seed, realization_index, Substream::BrownianBridge);
            refine_by_bridge(&base, &coarse, &grid, 1.0, &mut bridge)
        } else {
            vec![vec![0.0; m]; grid.len() - 1]
        };

        let mut small = Vec::new();
        let mut path = Vec::new();
        let mut drift = vec![0.0; m];
        if let Some(l) = &self.levy {
            if direct {
                let LevyKind::AlphaStable { alpha, scale } = l.kind else {
                    unreachable!()
                };
                let mut rng = stream_rng(seed, realization_index, Substream::Path);
                path = sample_stable_path(alpha, scale, &base, m, &mut rng)?;
            } else {
                if self.small_jump_mode == SmallJumpMode::GaussianSubstitute
                    && l.truncation_epsilon > 0.0
                {
                    let var = l.small_jump_variance();
                    let mut rng = stream_rng(seed, realization_index, Substream::SmallJumps);
                    let coarse: Vec<Vec<f64>> = sample_brownian(&base, m, &mut rng)?
                        .into_iter()
                        .map(|v| v.into_iter().map(|x| x * var.sqrt()).collect())
                        .collect();
                    let mut bridge =
                        stream_rng(seed, realization_index, Substream::SmallJumpBridge);
                    small = refine_by_bridge(&base, &coarse, &grid, var, &mut bridge);
                }
                if self.compensated {
                    let mean = l.band_mean(l.truncation_epsilon, 1.0, m)?;
                    drift = mean.into_iter().map(|v| -v).collect();
                }
            }
        }

        Ok(DriverRealization {
            horizon: t_end,
            noise_dim: m,
            base_steps: n,
            grid,
            brownian_increments: brownian,
            jump_events: events,
            small_jump_increments: small,
            path_increments: path,
            levy_drift: drift,
            pinned_times: pinned,
            seed,
            realization_index,
            small_jump_mode: self.small_jump_mode,
            has_brownian: self.brownian,
        })
    }

    /// Realizations `indices` generated in parallel; order follows `indices`.
    pub fn generate_many(&self, seed: u64, indices: &[u64]) -> Result<Vec<DriverRealization>> {
        indices
            .par_iter()
            .map(|&k| self.generate(seed, k))
            .collect()
    }
}

/// Splits the increments on `coarse_grid` onto the finer `fine_grid` (a superset)
/// by Brownian-bridge interpolation with variance rate `rate`.
fn refine_by_bridge(
    coarse_grid: &[f64],
    coarse: &[Vec<f64>],
    fine_grid: &[f64],
    rate: f64,
    rng: &mut impl Rng,
) -> Vec<Vec<f64>> {
    let mut out = Vec::with_capacity(fine_grid.len() - 1);
    let mut f = 0;
    for (k, inc) in coarse.iter().enumerate() {
        let (t0, t1) = (coarse_grid[k], coarse_grid[k + 1]);
        let mut remaining = inc.clone();
        let mut start = t0;
        while fine_grid[f + 1] < t1 {
            let s = fine_grid[f + 1];
            let frac = (s - start) / (t1 - start);
            let sd = (rate * (s - start) * (t1 - s) / (t1 - start)).sqrt();
            let piece: Vec<f64> = remaining
                .iter()
                .map(|r| {
                    let n: f64 = StandardNormal.sample(rng);
                    r * frac + sd * n
                })
                .collect();
            remaining.iter_mut().zip(&piece).for_each(|(r, p)| *r -= p);
            out.push(piece);
            start = s;
            f += 1;
        }
        out.push(remaining);
        f += 1;
    }
    out
}

/// One realized driving path: Brownian increments on a grid, resolved jump
/// events at grid points, and optional continuous Lévy components.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriverRealization {
    pub horizon: f64,
    pub noise_dim: usize,
    pub base_steps: usize,
    /// Uniform base points merged with event and pinned times.
    pub grid: Vec<f64>,
    pub brownian_increments: Vec<Vec<f64>>,
    pub jump_events: Vec<JumpEvent>,
    /// Gaussian substitute for the truncated small jumps (empty when unused).
    pub small_jump_increments: Vec<Vec<f64>>,
    /// Directly sampled Lévy increments (empty unless direct path sampling).
    pub path_increments: Vec<Vec<f64>>,
    /// Deterministic drift of `Z` per unit time (small-jump compensator).
    pub levy_drift: Vec<f64>,
    pub pinned_times: Vec<f64>,
    pub seed: u64,
    pub realization_index: u64,
    pub small_jump_mode: SmallJumpMode,
    pub has_brownian: bool,
}

impl DriverRealization {
    /// A driver with no Brownian part and the given jump events, on a uniform
    /// grid of `steps` intervals merged with the event and pinned times.
    pub fn from_events(
        horizon: f64,
        steps: usize,
        noise_dim: usize,
        events: Vec<JumpEvent>,
        pinned: &[f64],
    ) -> Result<Self> {
        let n = steps.max(1);
        let mut grid: Vec<f64> = (0..=n).map(|i| horizon * i as f64 / n as f64).collect();
        for e in &events {
            if !(e.time > 0.0 && e.time <= horizon) || e.mark.len() != noise_dim {
                return input(format!("event at t = {} is invalid for this driver", e.time));
            }
        }
        if events.windows(2).any(|w| w[1].time <= w[0].time) {
            return input("event times must be strictly increasing");
        }
        grid.extend(events.iter().map(|e| e.time));
        grid.extend_from_slice(pinned);
        grid.sort_by(f64::total_cmp);
        grid.dedup();
        let intervals = grid.len() - 1;
        Ok(Self {
            horizon,
            noise_dim,
            base_steps: n,
            grid,
            brownian_increments: vec![vec![0.0; noise_dim]; intervals],
            jump_events: events,
            small_jump_increments: Vec::new(),
            path_increments: Vec::new(),
            levy_drift: vec![0.0; noise_dim],
            pinned_times: pinned.to_vec(),
            seed: 0,
            realization_index: 0,
            small_jump_mode: SmallJumpMode::Drop,
            has_brownian: false,
        })
    }

    pub fn intervals(&self) -> usize {
        self.grid.len() - 1
    }

    pub fn base_dt(&self) -> f64 {
        self.horizon / self.base_steps as f64
    }

    /// Index of the grid point equal to `t` up to a relative tolerance.
    pub fn grid_index(&self, t: f64) -> Option<usize> {
        let tol = 1e-9 * self.base_dt();
        let k = self.grid.partition_point(|&g| g < t - tol);
        (k < self.grid.len() && (self.grid[k] - t).abs() <= tol).then_some(k)
    }

    fn require_index(&self, t: f64) -> Result<usize> {
        self.grid_index(t)
            .ok_or_else(|| Error::Input(format!("time {t} is not a point of the driver grid")))
    }

    /// `W_t`.
    pub fn brownian_value_at(&self, t: f64) -> Result<Vec<f64>> {
        let k = self.require_index(t)?;
        let mut w = vec![0.0; self.noise_dim];
        for inc in &self.brownian_increments[..k] {
            w.iter_mut().zip(inc).for_each(|(a, b)| *a += b);
        }
        Ok(w)
    }

    /// `Z_t` reconstructed from every component of the realization.
    pub fn levy_value_at(&self, t: f64) -> Result<Vec<f64>> {
        let k = self.require_index(t)?;
        let t_grid = self.grid[k];
        let mut z: Vec<f64> = self.levy_drift.iter().map(|v| v * t_grid).collect();
        for e in self.jump_events.iter().filter(|e| e.time <= t_grid) {
            z.iter_mut().zip(&e.mark).for_each(|(a, b)| *a += b);
        }
        for incs in [&self.small_jump_increments, &self.path_increments] {
            for inc in incs.iter().take(k) {
                z.iter_mut().zip(inc).for_each(|(a, b)| *a += b);
            }
        }
        Ok(z)
    }

    /// The same path on a coarser uniform base grid (`steps` must divide the
    /// current base step count); event and pinned times are retained.
    pub fn restrict(&self, steps: usize) -> Result<Self> {
        if steps == 0 || self.base_steps % steps != 0 {
            return input(format!(
                "cannot restrict {} base steps to {steps}",
                self.base_steps
            ));
        }
        let tol = 1e-9 * self.base_dt();
        let mut keep: Vec<f64> = (0..=steps)
            .map(|i| self.horizon * i as f64 / steps as f64)
            .collect();
        keep.extend(self.jump_events.iter().map(|e| e.time));
        keep.extend_from_slice(&self.pinned_times);
        keep.sort_by(f64::total_cmp);
        keep.dedup_by(|a, b| (*a - *b).abs() <= tol);

        let mut idx = Vec::with_capacity(keep.len());
        for &t in &keep {
            idx.push(self.grid_index(t).ok_or_else(|| {
                Error::Input(format!("time {t} missing from the fine grid"))
            })?);
        }
        let sum = |incs: &Vec<Vec<f64>>| -> Vec<Vec<f64>> {
            if incs.is_empty() {
                return Vec::new();
            }
            idx.windows(2)
                .map(|w| {
                    let mut acc = vec![0.0; self.noise_dim];
                    for inc in &incs[w[0]..w[1]] {
                        acc.iter_mut().zip(inc).for_each(|(a, b)| *a += b);
                    }
                    acc
                })
                .collect()
        };
        let mut out = self.clone();
        out.grid = idx.iter().map(|&k| self.grid[k]).collect();
        out.base_steps = steps;
        out.brownian_increments = sum(&self.brownian_increments);
        out.small_jump_increments = sum(&self.small_jump_increments);
        out.path_increments = sum(&self.path_increments);
        Ok(out)
    }

    /// `t,dW_1..dW_m` with `t` the left end of each interval.
    pub fn write_increments_csv(&self, w: &mut impl Write) -> std::io::Result<()> {
        write_header(w, "t", "dW", self.noise_dim)?;
        for (k, inc) in self.brownian_increments.iter().enumerate() {
            write_row(w, self.grid[k], inc)?;
        }
        Ok(())
    }

    /// `time,z_1..z_m`.
    pub fn write_events_csv(&self, w: &mut impl Write) -> std::io::Result<()> {
        write_header(w, "time", "z", self.noise_dim)?;
        for e in &self.jump_events {
            write_row(w, e.time, &e.mark)?;
        }
        Ok(())
    }

    /// `t,dZ_1..dZ_m` for the continuous Lévy components (direct path or
    /// Gaussian substitute plus drift), `t` the left end of each interval.
    pub fn write_levy_increments_csv(&self, w: &mut impl Write) -> std::io::Result<()> {
        write_header(w, "t", "dZ", self.noise_dim)?;
        for k in 0..self.intervals() {
            let dt = self.grid[k + 1] - self.grid[k];
            let mut v: Vec<f64> = self.levy_drift.iter().map(|d| d * dt).collect();
            for incs in [&self.small_jump_increments, &self.path_increments] {
                if let Some(inc) = incs.get(k) {
                    v.iter_mut().zip(inc).for_each(|(a, b)| *a += b);
                }
            }
            write_row(w, self.grid[k], &v)?;
        }
        Ok(())
    }
}

fn write_header(w: &mut impl Write, first: &str, stem: &str, m: usize) -> std::io::Result<()> {
    write!(w, "{first}")?;
    for j in 1..=m {
        write!(w, ",{stem}_{j}")?;
    }
    writeln!(w)
}

fn write_row(w: &mut impl Write, t: f64, values: &[f64]) -> std::io::Result<()> {
    write!(w, "{t:e}")?;
    for v in values {
        write!(w, ",{v:e}")?;
    }
    writeln!(w)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_grid_gives_no_increments() {
        let mut rng = stream_rng(1, 0, Substream::Brownian);
        assert!(sample_brownian(&[0.0], 3, &mut rng).unwrap().is_empty());
    }

    #[test]
    fn non_monotone_grid_rejected() {
        let mut rng = stream_rng(1, 0, Substream::Brownian);
        assert!(matches!(
            sample_brownian(&[0.0, 0.5, 0.4], 1, &mut rng),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn same_stream_same_increments() {
        let grid = [0.0, 0.1, 0.3, 1.0];
        let a = sample_brownian(&grid, 2, &mut stream_rng(7, 3, Substream::Brownian)).unwrap();
        let b = sample_brownian(&grid, 2, &mut stream_rng(7, 3, Substream::Brownian)).unwrap();
        assert_eq!(a, b);
        let c = sample_brownian(&grid, 2, &mut stream_rng(7, 4, Substream::Brownian)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn zero_intensity_has_no_events() {
        let spec = LevyMeasureSpec::finite_activity(
            0.0,
            MarkDistribution::Uniform { low: -1.0, high: 1.0 },
        );
        let mut rng = stream_rng(1, 0, Substream::Jumps);
        assert!(sample_compound_poisson(&spec, 5.0, 1, &mut rng).unwrap().is_empty());
    }

    #[test]
    fn negative_intensity_rejected() {
        let spec = LevyMeasureSpec::finite_activity(-1.0, MarkDistribution::Constant { value: 1.0 });
        let mut rng = stream_rng(1, 0, Substream::Jumps);
        assert!(sample_compound_poisson(&spec, 1.0, 1, &mut rng).is_err());
    }

    #[test]
    fn event_times_strictly_increasing() {
        let spec = LevyMeasureSpec::finite_activity(
            50.0,
            MarkDistribution::Normal { mean: 0.0, std: 1.0 },
        );
        let mut rng = stream_rng(9, 0, Substream::Jumps);
        let ev = sample_compound_poisson(&spec, 2.0, 2, &mut rng).unwrap();
        assert!(!ev.is_empty());
        assert!(ev.windows(2).all(|w| w[0].time < w[1].time));
        assert!(ev.iter().all(|e| e.time > 0.0 && e.time <= 2.0 && e.norm() > 0.0));
    }

    #[test]
    fn alpha_outside_range_rejected() {
        let mut rng = stream_rng(1, 0, Substream::Path);
        assert!(sample_stable_path(2.5, 1.0, &[0.0, 1.0], 1, &mut rng).is_err());
        assert!(sample_stable_path(0.0, 1.0, &[0.0, 1.0], 1, &mut rng).is_err());
        assert!(sample_stable_path(1.5, -1.0, &[0.0, 1.0], 1, &mut rng).is_err());
    }

    #[test]
    fn decompose_examples() {
        let (s, l) = decompose_events(&[], 1.0);
        assert!(s.is_empty() && l.is_empty());
        let ev = vec![
            JumpEvent { time: 0.1, mark: vec![0.5] },
            JumpEvent { time: 0.2, mark: vec![2.0] },
        ];
        let (s, l) = decompose_events(&ev, 1.0);
        assert_eq!(s, vec![ev[0].clone()]);
        assert_eq!(l, vec![ev[1].clone()]);
        let (s, l) = decompose_events(&ev, f64::INFINITY);
        assert_eq!(s.len(), 2);
        assert!(l.is_empty());
    }

    #[test]
    fn seeds_parse_decimal_and_hex() {
        assert_eq!(parse_seed("42").unwrap(), 42);
        assert_eq!(parse_seed("0x2A").unwrap(), 42);
        assert_eq!(parse_seed("0xdead_beef").unwrap(), 0xdead_beef);
        assert!(parse_seed("zz").is_err());
    }

    #[test]
    fn finite_activity_with_truncation_rejected() {
        let mut spec =
            LevyMeasureSpec::finite_activity(1.0, MarkDistribution::Constant { value: 0.5 });
        spec.truncation_epsilon = 0.1;
        assert!(spec.validate().is_err());
    }

    #[test]
    fn stable_constant_matches_characteristic_exponent() {
        // scale |λ|^α = ∫ (1 - cos λz) C |z|^{-1-α} dz, checked at λ = 1.
        for alpha in [0.5, 1.0, 1.5, 1.75] {
            let spec = LevyMeasureSpec::alpha_stable(alpha, 0.3, 0.5);
            let near = spec.integrate_1d(0.0, 1.0, 8, |z| 2.0 * (0.5 * z).sin().powi(2));
            // tail beyond 1 on half-period panels up to Z, then the mean tail
            // 2C ∫_Z^∞ z^{-1-α} dz (the cosine part is O(Z^{-1-α})).
            let c = stable_levy_constant(alpha, 0.3);
            let z_max = 2000.0;
            let mut breaks = vec![1.0];
            while *breaks.last().unwrap() < z_max {
                breaks.push(breaks.last().unwrap() + PI);
            }
            let mut tail = |z: f64| 2.0 * c * (1.0 - z.cos()) * z.powf(-1.0 - alpha);
            let top = *breaks.last().unwrap();
            let far = crate::quadrature::composite_gauss(&mut tail, &breaks, 2)
                + 2.0 * c * top.powf(-alpha) / alpha;
            assert!(
                (near + far - 0.3).abs() < 2e-3,
                "alpha {alpha}: {}",
                near + far
            );
        }
    }

    #[test]
    fn driver_grid_contains_events_and_pins() {
        let cfg = DriverConfig::new(1.0, 10, 1)
            .with_brownian(true)
            .with_levy(LevyMeasureSpec::finite_activity(
                5.0,
                MarkDistribution::Uniform { low: -1.0, high: 1.0 },
            ))
            .with_pinned_times(&[0.25, 0.5]);
        let d = cfg.generate(11, 2).unwrap();
        assert_eq!(d.brownian_increments.len(), d.grid.len() - 1);
        for e in &d.jump_events {
            assert!(d.grid.contains(&e.time));
        }
        assert!(d.grid_index(0.25).is_some());
        assert_eq!(d, cfg.generate(11, 2).unwrap());
    }

    #[test]
    fn bridge_preserves_base_increments() {
        let cfg = DriverConfig::new(1.0, 8, 2)
            .with_brownian(true)
            .with_pinned_times(&[0.3, 0.61]);
        let plain = DriverConfig::new(1.0, 8, 2).with_brownian(true).generate(5, 0).unwrap();
        let d = cfg.generate(5, 0).unwrap();
        for k in 0..=8 {
            let t = k as f64 / 8.0;
            let a = plain.brownian_value_at(t).unwrap();
            let b = d.brownian_value_at(t).unwrap();
            for (x, y) in a.iter().zip(&b) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn restrict_sums_increments() {
        let d = DriverConfig::new(1.0, 64, 1)
            .with_brownian(true)
            .generate(3, 0)
            .unwrap();
        let c = d.restrict(8).unwrap();
        assert_eq!(c.grid.len(), 9);
        let a = d.brownian_value_at(1.0).unwrap()[0];
        let b = c.brownian_value_at(1.0).unwrap()[0];
        assert!((a - b).abs() < 1e-12);
        assert!(d.restrict(7).is_err());
    }

    #[test]
    fn asymmetric_marks_compensated() {
        let spec = LevyMeasureSpec::finite_activity(
            2.0,
            MarkDistribution::Uniform { low: 0.0, high: 2.0 },
        );
        // ∫_{0<z≤1} z · 2 · ½ dz = ½
        let mean = spec.band_mean(0.0, 1.0, 1).unwrap();
        assert!((mean[0] - 0.5).abs() < 1e-12);
        let d = DriverConfig::new(1.0, 4, 1).with_levy(spec).generate(1, 0).unwrap();
        assert!((d.levy_drift[0] + 0.5).abs() < 1e-12);
    }

    #[test]
    fn csv_headers() {
        let d = DriverRealization::from_events(
            1.0,
            2,
            2,
            vec![JumpEvent { time: 0.3, mark: vec![0.5, -0.1] }],
            &[],
        )
        .unwrap();
        let mut buf = Vec::new();
        d.write_increments_csv(&mut buf).unwrap();
        assert!(String::from_utf8(buf).unwrap().starts_with("t,dW_1,dW_2\n"));
        let mut buf = Vec::new();
        d.write_events_csv(&mut buf).unwrap();
        let s = String::from_utf8(buf).unwrap();
        assert!(s.starts_with("time,z_1,z_2\n"));
        assert_eq!(s.lines().count(), 2);
    }
}
