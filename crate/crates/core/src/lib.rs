//! Spectral-Galerkin exponential integrators for semilinear parabolic SPDEs
//! with multiplicative trace-class noise.
//!
//! The state lives in the span of the first `N` eigenfunctions of a
//! self-adjoint negative operator `A`. Noise is a `Q`-Wiener process with
//! diagonal covariance. Three one-step maps are provided: exponential Euler,
//! exponential Milstein and an exponential Wagner–Platen scheme driven by the
//! pair `(ΔW, ΔZ)` with `ΔZ = ∫ (s − t_0) dW(s)`.

pub mod coefficients;
pub mod error;
pub mod experiments;
pub mod schemes;
pub mod spectral;
pub mod stochastics;

pub use error::{Error, Result};
