//! Lévy-driven first-order linear SPDEs solved by stochastic characteristics.
//!
//! The solution of
//!
//! ```text
//! du = (∇u·a + u b + c) dt + (∇u·A + u B + C)∘dW + (∇u·α + u β + σ)◇dZ
//! ```
//!
//! is assembled from the inverse of the (d+2)-dimensional Marcus flow
//! `(φ, ξ, ζ)` as `u(t, x) = ξ_{t,0}(x, 1) u0(φ_{t,0}(x)) + ζ_{t,0}(x, 1, 0)`.
//!
//! Modules, bottom-up:
//!
//! * [`levy_driver`]: reproducible Brownian and Lévy driver realizations.
//! * [`marcus_exp`]: the jump exponential map `e^{φ(·, z)}`.
//! * [`characteristics`]: integration of the characteristics system along one driver.
//! * [`inverse_flow`]: pointwise inversion of the forward flow table.
//! * [`spde_solver`]: the solution field and the closed-form reference solutions.
//!
//! [`presets`] bundles the reference problems and [`studies`] the
//! convergence/identity sweeps that the CLI and the acceptance suite run.

pub mod characteristics;
pub mod coefficients;
mod error;
pub mod interp;
pub mod inverse_flow;
pub mod levy_driver;
pub mod marcus_exp;
pub mod presets;
pub mod quadrature;
pub mod spde_solver;
pub mod stats;
pub mod studies;

pub use characteristics::{
    integrate_path, CharacteristicState, EventPlacement, FlowSolution, InitialGrid,
    IntegrationParams, StepScheme,
};
pub use coefficients::CoefficientSet;
pub use error::{Error, Result};
pub use inverse_flow::{invert_1d, invert_nd, InverseCoefficients, InverseFlowQuery};
pub use levy_driver::{
    DriverConfig, DriverRealization, JumpEvent, LevyKind, LevyMeasureSpec, MarkDistribution,
    SmallJumpMode,
};
pub use marcus_exp::{exp_map, ExpMapResult, JumpVectorField};
pub use spde_solver::{
    solve, InitialCondition, OracleKind, OracleSpec, SolutionField, SolveParams,
};
