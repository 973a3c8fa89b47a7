//! The Marcus jump exponential map.
//!
//! For a jump of size `z` the state moves along the vector field `φ(·, z)` for
//! unit fictitious time: `e^{φ(·,z)}(x) = h(1)` where `h' = φ(h, z)`, `h(0) = x`.
//! Integration is classical fixed-step RK4, so results are bit-reproducible.

use crate::coefficients::CoefficientSet;
use crate::error::{input, Error, Result};

/// Default number of RK4 substeps per jump.
pub const DEFAULT_SUBSTEPS: usize = 32;

/// A jump vector field `φ(x, z)`, usually linear in `z`.
pub trait JumpVectorField: Sync {
    fn dim(&self) -> usize;
    fn mark_dim(&self) -> usize;
    fn evaluate(&self, x: &[f64], z: &[f64], out: &mut [f64]);
}

/// A field given by a closure.
pub struct FnField<F> {
    dim: usize,
    mark_dim: usize,
    f: F,
}

impl<F> FnField<F>
where
    F: Fn(&[f64], &[f64], &mut [f64]) + Sync,
{
    pub fn new(dim: usize, mark_dim: usize, f: F) -> Self {
        Self { dim, mark_dim, f }
    }
}

impl<F> JumpVectorField for FnField<F>
where
    F: Fn(&[f64], &[f64], &mut [f64]) + Sync,
{
    fn dim(&self) -> usize {
        self.dim
    }
    fn mark_dim(&self) -> usize {
        self.mark_dim
    }
    fn evaluate(&self, x: &[f64], z: &[f64], out: &mut [f64]) {
        (self.f)(x, z, out)
    }
}

/// `Σ(X) z` on the `(d+2)`-dimensional state `X = (x, ξ, ζ)`:
/// `-(α(x) z, ξ β(x)·z, ξ σ(x)·z)`.
pub struct SigmaField<'a> {
    coeffs: &'a CoefficientSet,
}

impl<'a> SigmaField<'a> {
    pub fn new(coeffs: &'a CoefficientSet) -> Self {
        Self { coeffs }
    }
}

impl JumpVectorField for SigmaField<'_> {
    fn dim(&self) -> usize {
        self.coeffs.dim() + 2
    }
    fn mark_dim(&self) -> usize {
        self.coeffs.noise_dim()
    }
    fn evaluate(&self, state: &[f64], z: &[f64], out: &mut [f64]) {
        let (d, m) = (self.coeffs.dim(), self.coeffs.noise_dim());
        let x = &state[..d];
        let xi = state[d];
        let mut mat = vec![0.0; d * m];
        self.coeffs.eval_jump_transport(x, &mut mat);
        for i in 0..d {
            out[i] = -(0..m).map(|j| mat[i * m + j] * z[j]).sum::<f64>();
        }
        let mut v = vec![0.0; m];
        self.coeffs.eval_jump_reaction(x, &mut v);
        out[d] = -xi * dot(&v, z);
        self.coeffs.eval_jump_source(x, &mut v);
        out[d + 1] = -xi * dot(&v, z);
    }
}

/// The spatial block `-α(x) z` alone.
pub struct TransportField<'a> {
    coeffs: &'a CoefficientSet,
}

impl<'a> TransportField<'a> {
    pub fn new(coeffs: &'a CoefficientSet) -> Self {
        Self { coeffs }
    }
}

impl JumpVectorField for TransportField<'_> {
    fn dim(&self) -> usize {
        self.coeffs.dim()
    }
    fn mark_dim(&self) -> usize {
        self.coeffs.noise_dim()
    }
    fn evaluate(&self, x: &[f64], z: &[f64], out: &mut [f64]) {
        let (d, m) = (self.coeffs.dim(), self.coeffs.noise_dim());
        let mut mat = vec![0.0; d * m];
        self.coeffs.eval_jump_transport(x, &mut mat);
        for i in 0..d {
            out[i] = -(0..m).map(|j| mat[i * m + j] * z[j]).sum::<f64>();
        }
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExpMapResult {
    pub endpoint: Vec<f64>,
    pub substep_count: usize,
    /// `‖h_n(1) - h_{2n}(1)‖`, the step-doubling estimate.
    pub estimated_error: f64,
}

/// Fixed-step RK4 for the autonomous system `h' = g(h)` on `[0, span]`.
pub(crate) fn rk4(
    g: &mut impl FnMut(&[f64], &mut [f64]),
    x0: &[f64],
    span: f64,
    substeps: usize,
) -> Result<Vec<f64>> {
    let n = x0.len();
    let h = span / substeps as f64;
    let mut x = x0.to_vec();
    let (mut k1, mut k2, mut k3, mut k4) = (vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    let mut tmp = vec![0.0; n];
    for step in 0..substeps {
        g(&x, &mut k1);
        for i in 0..n {
            tmp[i] = x[i] + 0.5 * h * k1[i];
        }
        g(&tmp, &mut k2);
        for i in 0..n {
            tmp[i] = x[i] + 0.5 * h * k2[i];
        }
        g(&tmp, &mut k3);
        for i in 0..n {
            tmp[i] = x[i] + h * k3[i];
        }
        g(&tmp, &mut k4);
        for i in 0..n {
            x[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
        if x.iter().chain(&k1).chain(&k4).any(|v| !v.is_finite()) {
            return Err(Error::Divergence {
                context: format!(
                    "exponential map left the finite range in substep {} of {substeps} (u = {})",
                    step + 1,
                    (step + 1) as f64 * h
                ),
            });
        }
    }
    Ok(x)
}

fn check_shapes(field: &impl JumpVectorField, x0: &[f64], z: &[f64], substeps: usize) -> Result<()> {
    if substeps == 0 {
        return input("substeps must be ≥ 1");
    }
    if x0.len() != field.dim() || z.len() != field.mark_dim() {
        return input(format!(
            "expected x of length {} and z of length {}, got {} and {}",
            field.dim(),
            field.mark_dim(),
            x0.len(),
            z.len()
        ));
    }
    Ok(())
}

fn flow_to(field: &impl JumpVectorField, x0: &[f64], z: &[f64], u: f64, substeps: usize) -> Result<Vec<f64>> {
    rk4(&mut |x, out| field.evaluate(x, z, out), x0, u, substeps)
}

/// `e^{φ(·,z)}(x0)` with a step-doubling error estimate.
pub fn exp_map(
    field: &impl JumpVectorField,
    x0: &[f64],
    z: &[f64],
    substeps: usize,
) -> Result<ExpMapResult> {
    check_shapes(field, x0, z, substeps)?;
    let endpoint = flow_to(field, x0, z, 1.0, substeps)?;
    let fine = flow_to(field, x0, z, 1.0, 2 * substeps)?;
    let diff: Vec<f64> = endpoint.iter().zip(&fine).map(|(a, b)| a - b).collect();
    Ok(ExpMapResult {
        endpoint,
        substep_count: substeps,
        estimated_error: norm(&diff),
    })
}

/// `h(u)` for `u ∈ [0, 1]`.
pub fn exp_map_fractional(
    field: &impl JumpVectorField,
    x0: &[f64],
    z: &[f64],
    u: f64,
    substeps: usize,
) -> Result<Vec<f64>> {
    check_shapes(field, x0, z, substeps)?;
    if !(0.0..=1.0).contains(&u) {
        return input(format!("fictitious time u = {u} outside [0, 1]"));
    }
    if u == 0.0 {
        return Ok(x0.to_vec());
    }
    flow_to(field, x0, z, u, substeps)
}

/// `‖e^{φ(·,-z)}(e^{φ(·,z)}(x0)) - x0‖`; small for fields linear in `z`.
pub fn exp_map_inverse_check(
    field: &impl JumpVectorField,
    x0: &[f64],
    z: &[f64],
    substeps: usize,
) -> Result<f64> {
    check_shapes(field, x0, z, substeps)?;
    let there = flow_to(field, x0, z, 1.0, substeps)?;
    let minus: Vec<f64> = z.iter().map(|v| -v).collect();
    let back = flow_to(field, &there, &minus, 1.0, substeps)?;
    let diff: Vec<f64> = back.iter().zip(x0).map(|(a, b)| a - b).collect();
    Ok(norm(&diff))
}

/// Post-jump `(x, ξ, ζ)` of the characteristics system.
#[derive(Debug, Clone, PartialEq)]
pub struct StructuredJump {
    pub x: Vec<f64>,
    pub xi: f64,
    pub zeta: f64,
}

/// `e^{Σ(·)z}(x0, ξ0, ζ0)` using the block structure of `Σ`:
///
/// ```text
/// x = e^{-α(·)z}(x0)
/// ξ = ξ0 exp(-∫₀¹ β(h(r))·z dr)
/// ζ = ζ0 - ξ0 ∫₀¹ exp(-∫₀ˢ β(h(r))·z dr) σ(h(s))·z ds
/// ```
///
/// The trajectory `h` and both integrals are advanced together by RK4 in the
/// variables `(h, ℓ, q)` with `ℓ' = β(h)·z` and `q' = e^{-ℓ} σ(h)·z`.
pub fn exp_map_structured(
    coeffs: &CoefficientSet,
    x0: &[f64],
    xi0: f64,
    zeta0: f64,
    z: &[f64],
    substeps: usize,
) -> Result<StructuredJump> {
    let (d, m) = (coeffs.dim(), coeffs.noise_dim());
    if substeps == 0 {
        return input("substeps must be ≥ 1");
    }
    if x0.len() != d || z.len() != m {
        return input(format!("expected x of length {d} and z of length {m}"));
    }
    if z.iter().all(|v| *v == 0.0) {
        return Ok(StructuredJump { x: x0.to_vec(), xi: xi0, zeta: zeta0 });
    }
    let mut mat = vec![0.0; d * m];
    let mut v = vec![0.0; m];
    let mut g = |s: &[f64], out: &mut [f64]| {
        let h = &s[..d];
        coeffs.eval_jump_transport(h, &mut mat);
        for i in 0..d {
            out[i] = -(0..m).map(|j| mat[i * m + j] * z[j]).sum::<f64>();
        }
        coeffs.eval_jump_reaction(h, &mut v);
        out[d] = dot(&v, z);
        coeffs.eval_jump_source(h, &mut v);
        out[d + 1] = (-s[d]).exp() * dot(&v, z);
    };
    let mut s0 = x0.to_vec();
    s0.extend([0.0, 0.0]);
    let s = rk4(&mut g, &s0, 1.0, substeps)?;
    Ok(StructuredJump {
        x: s[..d].to_vec(),
        xi: xi0 * (-s[d]).exp(),
        zeta: zeta0 - xi0 * s[d + 1],
    })
}
