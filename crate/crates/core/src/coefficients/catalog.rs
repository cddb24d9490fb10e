use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::Coefficients;
use crate::error::{Error, Result};
use crate::spectral::{GridProfile, SpectralVector};
use crate::stochastics::NoiseSpec;

/// Named built-in coefficient sets, as selected from a run configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case")]
pub enum Builtin {
    /// `F = 0`, `B = 0`.
    Zero,
    /// `F = 0`, `B(v)u = σ v·u` (pointwise product).
    LinearMult { sigma: f64 },
    /// `F(v)(x) = c f(v(x))` with `f(y) = y/(1+y²)`, plus `σ v·u` noise.
    NemytskiiDrift { c: f64, sigma: f64 },
    /// One mode, `B(v)g = σ√q v`.
    ScalarGbm { sigma: f64 },
}

impl Builtin {
    pub fn name(&self) -> &'static str {
        match self {
            Builtin::Zero => "zero",
            Builtin::LinearMult { .. } => "linear_mult",
            Builtin::NemytskiiDrift { .. } => "nemytskii_drift",
            Builtin::ScalarGbm { .. } => "scalar_gbm",
        }
    }

    pub fn build(&self, noise: &NoiseSpec) -> Result<Arc<dyn Coefficients>> {
        let n = noise.state_dim();
        Ok(match *self {
            Builtin::Zero => Arc::new(ZeroCoefficients::new(n, noise.dim())),
            Builtin::LinearMult { sigma } => Arc::new(LinearMultiplicative::new(sigma, noise.clone())?),
            Builtin::NemytskiiDrift { c, sigma } => Arc::new(NemytskiiDrift::new(c, sigma, noise.clone())?),
            Builtin::ScalarGbm { sigma } => {
                if n != 1 || noise.dim() != 1 {
                    return Err(Error::Configuration(
                        "scalar_gbm needs exactly one state mode and one noise mode".into(),
                    ));
                }
                Arc::new(ScalarGbm::new(sigma))
            }
        })
    }
}

/// `F ≡ 0`, `B ≡ 0`.
#[derive(Debug, Clone)]
pub struct ZeroCoefficients {
    n: usize,
    j: usize,
}

impl ZeroCoefficients {
    pub fn new(state_dim: usize, noise_dim: usize) -> Self {
        Self {
            n: state_dim,
            j: noise_dim,
        }
    }
}

impl Coefficients for ZeroCoefficients {
    fn state_dim(&self) -> usize {
        self.n
    }
    fn noise_dim(&self) -> usize {
        self.j
    }
    fn drift(&self, _: &SpectralVector) -> SpectralVector {
        SpectralVector::zeros(self.n)
    }
    fn drift_derivative(&self, _: &SpectralVector, _: &SpectralVector) -> SpectralVector {
        SpectralVector::zeros(self.n)
    }
    fn drift_second_derivative(&self, _: &SpectralVector, _: &SpectralVector, _: &SpectralVector) -> SpectralVector {
        SpectralVector::zeros(self.n)
    }
    fn diffusion(&self, _: &SpectralVector, _: &[f64]) -> SpectralVector {
        SpectralVector::zeros(self.n)
    }
    fn diffusion_derivative(&self, _: &SpectralVector, _: &SpectralVector, _: &[f64]) -> SpectralVector {
        SpectralVector::zeros(self.n)
    }
    fn diffusion_second_derivative(
        &self,
        _: &SpectralVector,
        _: &SpectralVector,
        _: &SpectralVector,
        _: &[f64],
    ) -> SpectralVector {
        SpectralVector::zeros(self.n)
    }
    fn drift_vanishes(&self) -> bool {
        true
    }
    fn drift_is_affine(&self) -> bool {
        true
    }
    fn diffusion_vanishes(&self) -> bool {
        true
    }
    fn diffusion_is_affine(&self) -> bool {
        true
    }
}

/// Linear multiplicative noise `B(v)u = σ v(x)·u(x)`, the stochastic heat
/// equation `dX = ΔX dt + σ X dW`.
///
/// Products are evaluated on the `N`-point collocation grid, where the sine
/// transform is invertible. The discrete operator is then an exact pointwise
/// product, so both commutativity conditions hold to rounding error.
#[derive(Debug, Clone)]
pub struct LinearMultiplicative {
    sigma: f64,
    noise: NoiseSpec,
    grid: GridProfile,
    /// `Σ_j q_j ẽ_j(x_m)²` at the nodes.
    trace_weight: Vec<f64>,
}

impl LinearMultiplicative {
    pub fn new(sigma: f64, noise: NoiseSpec) -> Result<Self> {
        if !sigma.is_finite() {
            return Err(Error::Configuration(format!("sigma must be finite, got {sigma}")));
        }
        let n = noise.state_dim();
        let grid = GridProfile::collocation(n)?;
        let mut trace_weight = vec![0.0; n];
        for (j, &q) in noise.q().iter().enumerate() {
            let mut u = vec![0.0; noise.dim()];
            u[j] = 1.0;
            let values = grid.to_grid(&noise.embed(&u))?;
            trace_weight.iter_mut().zip(&values).for_each(|(t, e)| *t += q * e * e);
        }
        Ok(Self {
            sigma,
            noise,
            grid,
            trace_weight,
        })
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    /// Global Lipschitz constant of `v ↦ B(v)` into Hilbert-Schmidt
    /// operators: `|σ| (max_m Σ_j q_j ẽ_j(x_m)²)^{1/2}`.
    pub fn lipschitz_constant(&self) -> f64 {
        self.sigma.abs() * self.trace_weight.iter().cloned().fold(0.0, f64::max).sqrt()
    }

    fn nodal(&self, v: &SpectralVector) -> Vec<f64> {
        self.grid.to_grid(v).expect("state dimension checked at construction")
    }

    fn project(&self, values: &[f64]) -> SpectralVector {
        self.grid.to_spectrum(values).expect("grid size fixed at construction")
    }

    fn times_noise(&self, w: &SpectralVector, u: &[f64], scale: f64) -> SpectralVector {
        let mut a = self.nodal(w);
        let b = self.nodal(&self.noise.embed(u));
        a.iter_mut().zip(&b).for_each(|(x, y)| *x *= scale * y);
        self.project(&a)
    }
}

impl Coefficients for LinearMultiplicative {
    fn state_dim(&self) -> usize {
        self.noise.state_dim()
    }
    fn noise_dim(&self) -> usize {
        self.noise.dim()
    }
    fn drift(&self, _: &SpectralVector) -> SpectralVector {
        SpectralVector::zeros(self.state_dim())
    }
    fn drift_derivative(&self, _: &SpectralVector, _: &SpectralVector) -> SpectralVector {
        SpectralVector::zeros(self.state_dim())
    }
    fn drift_second_derivative(&self, _: &SpectralVector, _: &SpectralVector, _: &SpectralVector) -> SpectralVector {
        SpectralVector::zeros(self.state_dim())
    }
    fn diffusion(&self, v: &SpectralVector, u: &[f64]) -> SpectralVector {
        self.times_noise(v, u, self.sigma)
    }
    fn diffusion_derivative(&self, _: &SpectralVector, w: &SpectralVector, u: &[f64]) -> SpectralVector {
        self.times_noise(w, u, self.sigma)
    }
    fn diffusion_second_derivative(
        &self,
        _: &SpectralVector,
        _: &SpectralVector,
        _: &SpectralVector,
        _: &[f64],
    ) -> SpectralVector {
        SpectralVector::zeros(self.state_dim())
    }
    fn drift_vanishes(&self) -> bool {
        true
    }
    fn drift_is_affine(&self) -> bool {
        true
    }
    fn diffusion_vanishes(&self) -> bool {
        self.sigma == 0.0
    }
    fn diffusion_is_affine(&self) -> bool {
        true
    }

    fn diffusion_trace(&self, v: &SpectralVector, _: &NoiseSpec) -> SpectralVector {
        let s2 = self.sigma * self.sigma;
        let mut a = self.nodal(v);
        a.iter_mut().zip(&self.trace_weight).for_each(|(x, t)| *x *= s2 * t);
        self.project(&a)
    }

    fn diffusion_trace_nested(&self, v: &SpectralVector, _: &NoiseSpec, u: &[f64]) -> SpectralVector {
        let s3 = self.sigma.powi(3);
        let mut a = self.nodal(v);
        let b = self.nodal(&self.noise.embed(u));
        for ((x, t), y) in a.iter_mut().zip(&self.trace_weight).zip(&b) {
            *x *= s3 * t * y;
        }
        self.project(&a)
    }

    fn diffusion_trace_second(&self, _: &SpectralVector, _: &NoiseSpec, _: &[f64]) -> SpectralVector {
        SpectralVector::zeros(self.state_dim())
    }
}

/// Smooth Nemytskii drift `F(v)(x) = c·v(x)/(1+v(x)²)`, evaluated on the
/// de-aliased `2N` grid and projected back, with optional linear
/// multiplicative noise of amplitude `σ`.
#[derive(Debug, Clone)]
pub struct NemytskiiDrift {
    c: f64,
    grid: GridProfile,
    noise: LinearMultiplicative,
}

impl NemytskiiDrift {
    pub fn new(c: f64, sigma: f64, noise: NoiseSpec) -> Result<Self> {
        if !c.is_finite() {
            return Err(Error::Configuration(format!("drift scale must be finite, got {c}")));
        }
        let grid = GridProfile::dealiased(noise.state_dim())?;
        Ok(Self {
            c,
            grid,
            noise: LinearMultiplicative::new(sigma, noise)?,
        })
    }

    fn f(y: f64) -> f64 {
        y / (1.0 + y * y)
    }

    fn f1(y: f64) -> f64 {
        let d = 1.0 + y * y;
        (1.0 - y * y) / (d * d)
    }

    fn f2(y: f64) -> f64 {
        let d = 1.0 + y * y;
        (2.0 * y * y * y - 6.0 * y) / (d * d * d)
    }

    fn pointwise<G>(&self, v: &SpectralVector, mut g: G) -> SpectralVector
    where
        G: FnMut(usize, f64) -> f64,
    {
        let values = self.grid.to_grid(v).expect("state dimension checked at construction");
        let out: Vec<f64> = values.iter().enumerate().map(|(m, &y)| g(m, y)).collect();
        self.grid.to_spectrum(&out).expect("grid size fixed at construction")
    }

    fn nodal(&self, w: &SpectralVector) -> Vec<f64> {
        self.grid.to_grid(w).expect("state dimension checked at construction")
    }
}

impl Coefficients for NemytskiiDrift {
    fn state_dim(&self) -> usize {
        self.noise.state_dim()
    }
    fn noise_dim(&self) -> usize {
        self.noise.noise_dim()
    }
    fn drift(&self, v: &SpectralVector) -> SpectralVector {
        self.pointwise(v, |_, y| self.c * Self::f(y))
    }
    fn drift_derivative(&self, v: &SpectralVector, w: &SpectralVector) -> SpectralVector {
        let wn = self.nodal(w);
        self.pointwise(v, |m, y| self.c * Self::f1(y) * wn[m])
    }
    fn drift_second_derivative(&self, v: &SpectralVector, w1: &SpectralVector, w2: &SpectralVector) -> SpectralVector {
        let a = self.nodal(w1);
        let b = self.nodal(w2);
        self.pointwise(v, |m, y| self.c * Self::f2(y) * a[m] * b[m])
    }
    fn diffusion(&self, v: &SpectralVector, u: &[f64]) -> SpectralVector {
        self.noise.diffusion(v, u)
    }
    fn diffusion_derivative(&self, v: &SpectralVector, w: &SpectralVector, u: &[f64]) -> SpectralVector {
        self.noise.diffusion_derivative(v, w, u)
    }
    fn diffusion_second_derivative(
        &self,
        v: &SpectralVector,
        w1: &SpectralVector,
        w2: &SpectralVector,
        u: &[f64],
    ) -> SpectralVector {
        self.noise.diffusion_second_derivative(v, w1, w2, u)
    }
    fn drift_vanishes(&self) -> bool {
        self.c == 0.0
    }
    fn drift_is_affine(&self) -> bool {
        self.c == 0.0
    }
    fn diffusion_vanishes(&self) -> bool {
        self.noise.diffusion_vanishes()
    }
    fn diffusion_is_affine(&self) -> bool {
        true
    }
    fn diffusion_trace(&self, v: &SpectralVector, noise: &NoiseSpec) -> SpectralVector {
        self.noise.diffusion_trace(v, noise)
    }
    fn diffusion_trace_nested(&self, v: &SpectralVector, noise: &NoiseSpec, u: &[f64]) -> SpectralVector {
        self.noise.diffusion_trace_nested(v, noise, u)
    }
    fn diffusion_trace_second(&self, v: &SpectralVector, noise: &NoiseSpec, u: &[f64]) -> SpectralVector {
        self.noise.diffusion_trace_second(v, noise, u)
    }
}

/// Geometric Brownian motion `dX = -λX dt + σX dW` on a single mode, where
/// `W` has variance `q t`. Exact solution
/// `X_t = X_0 exp((-λ - σ²q/2)t + σW_t)`.
#[derive(Debug, Clone)]
pub struct ScalarGbm {
    sigma: f64,
}

impl ScalarGbm {
    pub fn new(sigma: f64) -> Self {
        Self { sigma }
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    /// `X_t` given `X_0`, the decay rate `λ`, `q` and the increment `W_t - W_0`.
    pub fn exact(&self, x0: f64, lambda: f64, q: f64, t: f64, w: f64) -> f64 {
        x0 * ((-lambda - 0.5 * self.sigma * self.sigma * q) * t + self.sigma * w).exp()
    }
}

fn scalar(x: f64) -> SpectralVector {
    SpectralVector::from_raw(vec![x])
}

impl Coefficients for ScalarGbm {
    fn state_dim(&self) -> usize {
        1
    }
    fn noise_dim(&self) -> usize {
        1
    }
    fn drift(&self, _: &SpectralVector) -> SpectralVector {
        scalar(0.0)
    }
    fn drift_derivative(&self, _: &SpectralVector, _: &SpectralVector) -> SpectralVector {
        scalar(0.0)
    }
    fn drift_second_derivative(&self, _: &SpectralVector, _: &SpectralVector, _: &SpectralVector) -> SpectralVector {
        scalar(0.0)
    }
    fn diffusion(&self, v: &SpectralVector, u: &[f64]) -> SpectralVector {
        scalar(self.sigma * v.coeffs()[0] * u[0])
    }
    fn diffusion_derivative(&self, _: &SpectralVector, w: &SpectralVector, u: &[f64]) -> SpectralVector {
        scalar(self.sigma * w.coeffs()[0] * u[0])
    }
    fn diffusion_second_derivative(
        &self,
        _: &SpectralVector,
        _: &SpectralVector,
        _: &SpectralVector,
        _: &[f64],
    ) -> SpectralVector {
        scalar(0.0)
    }
    fn drift_vanishes(&self) -> bool {
        true
    }
    fn drift_is_affine(&self) -> bool {
        true
    }
    fn diffusion_vanishes(&self) -> bool {
        self.sigma == 0.0
    }
    fn diffusion_is_affine(&self) -> bool {
        true
    }
}

#[cfg(test)]
mod tests {
    use super::super::{trace_b1, trace_b11, trace_f2};
    use super::*;
    use crate::spectral::OperatorSpec;

    fn flagship(n: usize) -> (NoiseSpec, LinearMultiplicative) {
        let op = OperatorSpec::dirichlet_laplacian(n).unwrap();
        let q = op.eigenvalues().iter().map(|l| 1.0 / l).collect();
        let noise = NoiseSpec::diagonal(q, n).unwrap();
        let c = LinearMultiplicative::new(1.0, noise.clone()).unwrap();
        (noise, c)
    }

    fn state(n: usize, phase: f64) -> SpectralVector {
        SpectralVector::new((0..n).map(|i| (phase + i as f64).sin() / (1.0 + i as f64)).collect()).unwrap()
    }

    #[test]
    fn builtin_names_and_shapes() {
        let (noise, _) = flagship(4);
        for b in [
            Builtin::Zero,
            Builtin::LinearMult { sigma: 1.0 },
            Builtin::NemytskiiDrift { c: 1.0, sigma: 0.5 },
        ] {
            let c = b.build(&noise).unwrap();
            assert_eq!(c.state_dim(), 4);
            assert_eq!(c.noise_dim(), 4);
        }
        assert!(Builtin::ScalarGbm { sigma: 1.0 }.build(&noise).is_err());
        let toml_like = serde_json::to_string(&Builtin::LinearMult { sigma: 2.0 }).unwrap();
        assert_eq!(toml_like, r#"{"name":"linear_mult","sigma":2.0}"#);
    }

    #[test]
    fn linear_mult_on_basis_direction() {
        // B(v)g_j = √q_j P(v·ẽ_j).
        let (noise, c) = flagship(8);
        let v = state(8, 0.3);
        let g = &noise.basis()[2];
        let grid = GridProfile::collocation(8).unwrap();
        let expected = grid
            .product(&v, &SpectralVector::unit(8, 2))
            .unwrap()
            .scaled(noise.q()[2].sqrt());
        assert!(c.diffusion(&v, g).sub(&expected).norm() < 1e-14);
    }

    #[test]
    fn linear_mult_fast_traces_match_generic_sums() {
        let (noise, c) = flagship(10);
        let v = state(10, 1.1);
        let basis = noise.basis();
        let fast = c.diffusion_trace(&v, &noise);
        let slow = trace_b1(&c, &v, &basis);
        assert!(fast.sub(&slow).norm() < 1e-13 * slow.norm());
        let u: Vec<f64> = (0..10).map(|j| (j as f64 * 0.37).cos() * noise.q()[j].sqrt()).collect();
        let fast = c.diffusion_trace_nested(&v, &noise, &u);
        let slow = trace_b11(&c, &v, &basis, &u);
        assert!(fast.sub(&slow).norm() < 1e-13 * slow.norm());
    }

    #[test]
    fn lipschitz_bound_holds() {
        let (noise, c) = flagship(12);
        let basis = noise.basis();
        let l = c.lipschitz_constant();
        assert!(l <= (2.0 * noise.trace()).sqrt() * (1.0 + 1e-12));
        for k in 0..20 {
            let v = state(12, k as f64);
            let w = state(12, 0.5 * k as f64 + 0.2);
            let hs: f64 = basis
                .iter()
                .map(|g| c.diffusion(&v, g).sub(&c.diffusion(&w, g)).norm_sq())
                .sum::<f64>()
                .sqrt();
            assert!(hs <= l * v.sub(&w).norm() * (1.0 + 1e-12));
        }
    }

    #[test]
    fn trace_f2_examples() {
        let (noise, c) = flagship(6);
        assert_eq!(trace_f2(&c, &state(6, 0.0), &noise.basis()), SpectralVector::zeros(6));

        // One mode, F(v) = v³, B(v)g = v, q = 1: F″(v)[w,w] = 6vw², trace = 6v³.
        struct Cubic;
        impl Coefficients for Cubic {
            fn state_dim(&self) -> usize {
                1
            }
            fn noise_dim(&self) -> usize {
                1
            }
            fn drift(&self, v: &SpectralVector) -> SpectralVector {
                scalar(v.coeffs()[0].powi(3))
            }
            fn drift_derivative(&self, v: &SpectralVector, w: &SpectralVector) -> SpectralVector {
                scalar(3.0 * v.coeffs()[0].powi(2) * w.coeffs()[0])
            }
            fn drift_second_derivative(&self, v: &SpectralVector, a: &SpectralVector, b: &SpectralVector) -> SpectralVector {
                scalar(6.0 * v.coeffs()[0] * a.coeffs()[0] * b.coeffs()[0])
            }
            fn diffusion(&self, v: &SpectralVector, u: &[f64]) -> SpectralVector {
                scalar(v.coeffs()[0] * u[0])
            }
            fn diffusion_derivative(&self, _: &SpectralVector, w: &SpectralVector, u: &[f64]) -> SpectralVector {
                scalar(w.coeffs()[0] * u[0])
            }
            fn diffusion_second_derivative(
                &self,
                _: &SpectralVector,
                _: &SpectralVector,
                _: &SpectralVector,
                _: &[f64],
            ) -> SpectralVector {
                scalar(0.0)
            }
        }
        let noise = NoiseSpec::diagonal(vec![1.0], 1).unwrap();
        for x in [-1.5, 0.3, 2.0] {
            let out = trace_f2(&Cubic, &scalar(x), &noise.basis());
            assert!((out.coeffs()[0] - 6.0 * x * x * x).abs() < 1e-14 * x.abs().powi(3));
        }
    }

    #[test]
    fn gbm_exact_solution() {
        let g = ScalarGbm::new(0.5);
        assert!((g.exact(2.0, 1.0, 1.0, 0.0, 0.0) - 2.0).abs() < 1e-15);
        let x = g.exact(1.0, 1.0, 4.0, 1.0, 0.3);
        assert!((x - ((-1.0 - 0.5 * 0.25 * 4.0) + 0.15f64).exp()).abs() < 1e-15);
    }
}
