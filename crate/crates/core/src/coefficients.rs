//! The nine coefficient functions of the transport SPDE.
//!
//! Naming follows the role each coefficient plays in the operator it belongs to:
//! `transport` multiplies `∇u`, `reaction` multiplies `u`, and `source` is the
//! free term. The deterministic operator uses the plain names, the Brownian
//! operator the `noise_*` names, and the jump operator the `jump_*` names.
//!
//! Matrix-valued fields (`d × m`) are written row-major: entry `(i, j)` lives at
//! `out[i * m + j]`.

use std::fmt;
use std::sync::Arc;

use crate::error::{input, Result};

/// `ℝ^d → ℝ^k`, written into the output slice.
pub type VectorFn = Arc<dyn Fn(&[f64], &mut [f64]) + Send + Sync>;
/// `ℝ^d → ℝ`.
pub type ScalarFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;

/// Coefficients `a, b, c, A, B, C, α, β, σ`. Missing entries are identically zero.
#[derive(Clone)]
pub struct CoefficientSet {
    dim: usize,
    noise_dim: usize,
    /// `a: ℝ^d → ℝ^d`
    pub transport: Option<VectorFn>,
    /// `b: ℝ^d → ℝ`
    pub reaction: Option<ScalarFn>,
    /// `c: ℝ^d → ℝ`
    pub source: Option<ScalarFn>,
    /// `A: ℝ^d → ℝ^{d×m}`
    pub noise_transport: Option<VectorFn>,
    /// `B: ℝ^d → ℝ^m`
    pub noise_reaction: Option<VectorFn>,
    /// `C: ℝ^d → ℝ^m`
    pub noise_source: Option<VectorFn>,
    /// `α: ℝ^d → ℝ^{d×m}`
    pub jump_transport: Option<VectorFn>,
    /// `β: ℝ^d → ℝ^m`
    pub jump_reaction: Option<VectorFn>,
    /// `σ: ℝ^d → ℝ^m`
    pub jump_source: Option<VectorFn>,
    /// Derivatives of the columns of `A`: `∂_k A_{ij}` at `out[(i * m + j) * d + k]`.
    /// Only used by the Itô cross-check stepper; central differences otherwise.
    pub noise_transport_jacobian: Option<VectorFn>,
    /// The caller asserts bounded, several times differentiable coefficients.
    pub smoothness_declared: bool,
}

impl fmt::Debug for CoefficientSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let on = |o: bool| if o { "set" } else { "zero" };
        f.debug_struct("CoefficientSet")
            .field("dim", &self.dim)
            .field("noise_dim", &self.noise_dim)
            .field("a", &on(self.transport.is_some()))
            .field("b", &on(self.reaction.is_some()))
            .field("c", &on(self.source.is_some()))
            .field("A", &on(self.noise_transport.is_some()))
            .field("B", &on(self.noise_reaction.is_some()))
            .field("C", &on(self.noise_source.is_some()))
            .field("alpha", &on(self.jump_transport.is_some()))
            .field("beta", &on(self.jump_reaction.is_some()))
            .field("sigma", &on(self.jump_source.is_some()))
            .finish()
    }
}

impl CoefficientSet {
    /// All-zero coefficients in spatial dimension `dim` with `noise_dim`-dimensional noise.
    pub fn zero(dim: usize, noise_dim: usize) -> Result<Self> {
        if dim == 0 || noise_dim == 0 {
            return input("dimensions d and m must be at least 1");
        }
        Ok(Self {
            dim,
            noise_dim,
            transport: None,
            reaction: None,
            source: None,
            noise_transport: None,
            noise_reaction: None,
            noise_source: None,
            jump_transport: None,
            jump_reaction: None,
            jump_source: None,
            noise_transport_jacobian: None,
            smoothness_declared: false,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn noise_dim(&self) -> usize {
        self.noise_dim
    }

    pub fn with_transport(mut self, f: impl Fn(&[f64], &mut [f64]) + Send + Sync + 'static) -> Self {
        self.transport = Some(Arc::new(f));
        self
    }

    pub fn with_reaction(mut self, f: impl Fn(&[f64]) -> f64 + Send + Sync + 'static) -> Self {
        self.reaction = Some(Arc::new(f));
        self
    }

    pub fn with_source(mut self, f: impl Fn(&[f64]) -> f64 + Send + Sync + 'static) -> Self {
        self.source = Some(Arc::new(f));
        self
    }

    pub fn with_noise_transport(
        mut self,
        f: impl Fn(&[f64], &mut [f64]) + Send + Sync + 'static,
    ) -> Self {
        self.noise_transport = Some(Arc::new(f));
        self
    }

    pub fn with_noise_reaction(
        mut self,
        f: impl Fn(&[f64], &mut [f64]) + Send + Sync + 'static,
    ) -> Self {
        self.noise_reaction = Some(Arc::new(f));
        self
    }

    pub fn with_noise_source(
        mut self,
        f: impl Fn(&[f64], &mut [f64]) + Send + Sync + 'static,
    ) -> Self {
        self.noise_source = Some(Arc::new(f));
        self
    }

    pub fn with_jump_transport(
        mut self,
        f: impl Fn(&[f64], &mut [f64]) + Send + Sync + 'static,
    ) -> Self {
        self.jump_transport = Some(Arc::new(f));
        self
    }

    pub fn with_jump_reaction(
        mut self,
        f: impl Fn(&[f64], &mut [f64]) + Send + Sync + 'static,
    ) -> Self {
        self.jump_reaction = Some(Arc::new(f));
        self
    }

    pub fn with_jump_source(
        mut self,
        f: impl Fn(&[f64], &mut [f64]) + Send + Sync + 'static,
    ) -> Self {
        self.jump_source = Some(Arc::new(f));
        self
    }

    pub fn with_noise_transport_jacobian(
        mut self,
        f: impl Fn(&[f64], &mut [f64]) + Send + Sync + 'static,
    ) -> Self {
        self.noise_transport_jacobian = Some(Arc::new(f));
        self
    }

    pub fn declare_smooth(mut self) -> Self {
        self.smoothness_declared = true;
        self
    }

    /// No Brownian and no jump coefficients.
    pub fn is_noise_free(&self) -> bool {
        self.noise_transport.is_none()
            && self.noise_reaction.is_none()
            && self.noise_source.is_none()
            && self.jump_transport.is_none()
            && self.jump_reaction.is_none()
            && self.jump_source.is_none()
    }

    /// `c = C = σ = 0`: the solution operator is linear in `u0`.
    pub fn is_source_free(&self) -> bool {
        self.source.is_none() && self.noise_source.is_none() && self.jump_source.is_none()
    }

    /// `b = B = β = 0`: `ξ ≡ 1`.
    pub fn is_reaction_free(&self) -> bool {
        self.reaction.is_none() && self.noise_reaction.is_none() && self.jump_reaction.is_none()
    }

    pub fn has_jump_part(&self) -> bool {
        self.jump_transport.is_some() || self.jump_reaction.is_some() || self.jump_source.is_some()
    }

    pub fn has_noise_part(&self) -> bool {
        self.noise_transport.is_some()
            || self.noise_reaction.is_some()
            || self.noise_source.is_some()
    }

    pub fn eval_transport(&self, x: &[f64], out: &mut [f64]) {
        eval_or_zero(&self.transport, x, out);
    }

    pub fn eval_reaction(&self, x: &[f64]) -> f64 {
        self.reaction.as_ref().map_or(0.0, |f| f(x))
    }

    pub fn eval_source(&self, x: &[f64]) -> f64 {
        self.source.as_ref().map_or(0.0, |f| f(x))
    }

    pub fn eval_noise_transport(&self, x: &[f64], out: &mut [f64]) {
        eval_or_zero(&self.noise_transport, x, out);
    }

    pub fn eval_noise_reaction(&self, x: &[f64], out: &mut [f64]) {
        eval_or_zero(&self.noise_reaction, x, out);
    }

    pub fn eval_noise_source(&self, x: &[f64], out: &mut [f64]) {
        eval_or_zero(&self.noise_source, x, out);
    }

    pub fn eval_jump_transport(&self, x: &[f64], out: &mut [f64]) {
        eval_or_zero(&self.jump_transport, x, out);
    }

    pub fn eval_jump_reaction(&self, x: &[f64], out: &mut [f64]) {
        eval_or_zero(&self.jump_reaction, x, out);
    }

    pub fn eval_jump_source(&self, x: &[f64], out: &mut [f64]) {
        eval_or_zero(&self.jump_source, x, out);
    }

    /// Checks that every evaluator returns finite values at the given probe points.
    pub fn check_finite_on(&self, probes: &[Vec<f64>]) -> Result<()> {
        let (d, m) = (self.dim, self.noise_dim);
        let mut vd = vec![0.0; d];
        let mut vdm = vec![0.0; d * m];
        let mut vm = vec![0.0; m];
        for p in probes {
            if p.len() != d {
                return input(format!("probe point has dimension {} but d = {d}", p.len()));
            }
            self.eval_transport(p, &mut vd);
            let mut all = vd.clone();
            all.push(self.eval_reaction(p));
            all.push(self.eval_source(p));
            for f in [&self.noise_transport, &self.jump_transport] {
                eval_or_zero(f, p, &mut vdm);
                all.extend_from_slice(&vdm);
            }
            for f in [
                &self.noise_reaction,
                &self.noise_source,
                &self.jump_reaction,
                &self.jump_source,
            ] {
                eval_or_zero(f, p, &mut vm);
                all.extend_from_slice(&vm);
            }
            if let Some(bad) = all.iter().find(|v| !v.is_finite()) {
                return input(format!("coefficient evaluates to {bad} at {p:?}"));
            }
        }
        Ok(())
    }
}

fn eval_or_zero(f: &Option<VectorFn>, x: &[f64], out: &mut [f64]) {
    match f {
        Some(f) => f(x, out),
        None => out.iter_mut().for_each(|v| *v = 0.0),
    }
}

/// Wraps a scalar function of one variable as a `d = m = 1` vector field.
pub fn scalar_field(
    f: impl Fn(f64) -> f64 + Send + Sync + 'static,
) -> impl Fn(&[f64], &mut [f64]) + Send + Sync + 'static {
    move |x: &[f64], out: &mut [f64]| out[0] = f(x[0])
}
