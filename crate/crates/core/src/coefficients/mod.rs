//! Drift and diffusion coefficients together with the derivative actions the
//! schemes consume.
//!
//! Noise directions `u` are passed in `U`-coordinates (see
//! [`crate::stochastics`]), so `B(v)u` for `u = g_j` is `B(v)` applied to
//! `√q_j ũ_j`.

mod catalog;
mod verify;

pub use catalog::{Builtin, LinearMultiplicative, NemytskiiDrift, ScalarGbm, ZeroCoefficients};
pub use verify::{
    check_commutativity_first, check_commutativity_second, check_derivatives, verify_commutativity,
    CommutativityCheck, CommutativityReport, DerivativeCheck, ProbeConfig,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spectral::SpectralVector;
use crate::stochastics::NoiseSpec;

/// `F`, `B` and their first two Fréchet derivatives on the truncated space.
///
/// The bracketed arguments of the derivative actions are linear (`F′`,
/// `B′`) or symmetric bilinear (`F″`, `B″`). `B(v)u` and its derivatives are
/// linear in the noise direction `u`.
pub trait Coefficients: Send + Sync {
    fn state_dim(&self) -> usize;
    fn noise_dim(&self) -> usize;

    /// `F(v)`
    fn drift(&self, v: &SpectralVector) -> SpectralVector;
    /// `F′(v)[w]`
    fn drift_derivative(&self, v: &SpectralVector, w: &SpectralVector) -> SpectralVector;
    /// `F″(v)[w1, w2]`
    fn drift_second_derivative(&self, v: &SpectralVector, w1: &SpectralVector, w2: &SpectralVector) -> SpectralVector;

    /// `B(v)u`
    fn diffusion(&self, v: &SpectralVector, u: &[f64]) -> SpectralVector;
    /// `B′(v)(w)u`
    fn diffusion_derivative(&self, v: &SpectralVector, w: &SpectralVector, u: &[f64]) -> SpectralVector;
    /// `B″(v)(w1, w2)u`
    fn diffusion_second_derivative(
        &self,
        v: &SpectralVector,
        w1: &SpectralVector,
        w2: &SpectralVector,
        u: &[f64],
    ) -> SpectralVector;

    /// `F ≡ 0`; lets the schemes skip all drift terms.
    fn drift_vanishes(&self) -> bool {
        false
    }

    /// `F″ ≡ 0`.
    fn drift_is_affine(&self) -> bool {
        false
    }

    /// `B ≡ 0`.
    fn diffusion_vanishes(&self) -> bool {
        false
    }

    /// `B″ ≡ 0`.
    fn diffusion_is_affine(&self) -> bool {
        false
    }

    /// `Σ_j F″(v)[B(v)g_j, B(v)g_j]` over the canonical basis.
    fn drift_trace(&self, v: &SpectralVector, noise: &NoiseSpec) -> SpectralVector {
        trace_f2(self, v, &noise.basis())
    }

    /// `Σ_j B′(v)(B(v)g_j)g_j` over the canonical basis.
    fn diffusion_trace(&self, v: &SpectralVector, noise: &NoiseSpec) -> SpectralVector {
        trace_b1(self, v, &noise.basis())
    }

    /// `Σ_j B′(v)(B′(v)(B(v)g_j)g_j)u` over the canonical basis.
    fn diffusion_trace_nested(&self, v: &SpectralVector, noise: &NoiseSpec, u: &[f64]) -> SpectralVector {
        trace_b11(self, v, &noise.basis(), u)
    }

    /// `Σ_j B″(v)(B(v)g_j, B(v)g_j)u` over the canonical basis.
    fn diffusion_trace_second(&self, v: &SpectralVector, noise: &NoiseSpec, u: &[f64]) -> SpectralVector {
        trace_b2(self, v, &noise.basis(), u)
    }
}

fn sum_over<F>(n: usize, basis: &[Vec<f64>], mut term: F) -> SpectralVector
where
    F: FnMut(&[f64]) -> SpectralVector,
{
    let mut acc = SpectralVector::zeros(n);
    for g in basis {
        acc.add_scaled(1.0, &term(g));
    }
    acc
}

/// `Σ_j F″(v)[B(v)g_j, B(v)g_j]` for an arbitrary orthonormal basis of `U_0`.
pub fn trace_f2<C: Coefficients + ?Sized>(c: &C, v: &SpectralVector, basis: &[Vec<f64>]) -> SpectralVector {
    if c.drift_is_affine() || c.diffusion_vanishes() {
        return SpectralVector::zeros(c.state_dim());
    }
    sum_over(c.state_dim(), basis, |g| {
        let bg = c.diffusion(v, g);
        c.drift_second_derivative(v, &bg, &bg)
    })
}

/// `Σ_j B′(v)(B(v)g_j)g_j`.
pub fn trace_b1<C: Coefficients + ?Sized>(c: &C, v: &SpectralVector, basis: &[Vec<f64>]) -> SpectralVector {
    if c.diffusion_vanishes() {
        return SpectralVector::zeros(c.state_dim());
    }
    sum_over(c.state_dim(), basis, |g| {
        c.diffusion_derivative(v, &c.diffusion(v, g), g)
    })
}

/// `Σ_j B′(v)(B′(v)(B(v)g_j)g_j)u`.
pub fn trace_b11<C: Coefficients + ?Sized>(c: &C, v: &SpectralVector, basis: &[Vec<f64>], u: &[f64]) -> SpectralVector {
    if c.diffusion_vanishes() {
        return SpectralVector::zeros(c.state_dim());
    }
    // Linear in the inner argument: sum first, differentiate once.
    let inner = trace_b1(c, v, basis);
    c.diffusion_derivative(v, &inner, u)
}

/// `Σ_j B″(v)(B(v)g_j, B(v)g_j)u`.
pub fn trace_b2<C: Coefficients + ?Sized>(c: &C, v: &SpectralVector, basis: &[Vec<f64>], u: &[f64]) -> SpectralVector {
    if c.diffusion_is_affine() || c.diffusion_vanishes() {
        return SpectralVector::zeros(c.state_dim());
    }
    sum_over(c.state_dim(), basis, |g| {
        let bg = c.diffusion(v, g);
        c.diffusion_second_derivative(v, &bg, &bg, u)
    })
}

/// Regularity exponents `(α, β, γ, δ)` declared for a coefficient set.
///
/// Only the constraint chains are checked:
/// `γ ∈ [1, 3/2)`, `α ∈ (γ-1, γ]`, `β ∈ (γ-1/2, γ]`, `δ ∈ (γ-1, β]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Regularity {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub delta: f64,
}

impl Default for Regularity {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 1.0,
            gamma: 1.0,
            delta: 0.5,
        }
    }
}

impl Regularity {
    pub fn validate(&self) -> Result<()> {
        let Self {
            alpha,
            beta,
            gamma,
            delta,
        } = *self;
        let fail = |what: &str, val: f64| Err(Error::Constraint(format!("{what} (got {val})")));
        if !(1.0..1.5).contains(&gamma) {
            return fail("γ ∈ [1, 3/2)", gamma);
        }
        if !(alpha > gamma - 1.0 && alpha <= gamma) {
            return fail("α ∈ (γ − 1, γ]", alpha);
        }
        if !(beta > gamma - 0.5 && beta <= gamma) {
            return fail("β ∈ (γ − 1/2, γ]", beta);
        }
        if !(delta > gamma - 1.0 && delta <= beta) {
            return fail("δ ∈ (γ − 1, β]", delta);
        }
        Ok(())
    }
}
