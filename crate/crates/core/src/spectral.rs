//! Finite-dimensional spectral representation of the state space.
//!
//! States are stored as coefficients in the eigenbasis `e_i(x) = √2 sin(iπx)`
//! of a diagonal operator `A = -diag(λ_i)`. The semigroup `e^{At}` and the
//! fractional powers `(-A)^r` act mode by mode. [`GridProfile`] moves
//! between coefficients and point values on a uniform interior grid through
//! an odd-extension discrete sine transform, which is how pointwise
//! (Nemytskii) nonlinearities and products are evaluated.

use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Coefficients of a state in the eigenbasis of `A`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectralVector {
    coeffs: Vec<f64>,
}

impl SpectralVector {
    /// Rejects NaN and infinite entries.
    pub fn new(coeffs: Vec<f64>) -> Result<Self> {
        if let Some(i) = coeffs.iter().position(|c| !c.is_finite()) {
            return Err(Error::NonFinite(format!("spectral coefficient {i}")));
        }
        Ok(Self { coeffs })
    }

    /// Unchecked constructor for internal arithmetic; callers that can
    /// produce non-finite values check [`SpectralVector::is_finite`].
    pub(crate) fn from_raw(coeffs: Vec<f64>) -> Self {
        Self { coeffs }
    }

    pub fn zeros(n: usize) -> Self {
        Self { coeffs: vec![0.0; n] }
    }

    /// The `index`-th basis vector (zero based, so `unit(n, 0)` is `e_1`).
    pub fn unit(n: usize, index: usize) -> Self {
        let mut v = Self::zeros(n);
        v.coeffs[index] = 1.0;
        v
    }

    pub fn len(&self) -> usize {
        self.coeffs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coeffs.is_empty()
    }

    pub fn coeffs(&self) -> &[f64] {
        &self.coeffs
    }

    pub fn into_coeffs(self) -> Vec<f64> {
        self.coeffs
    }

    pub fn is_finite(&self) -> bool {
        self.coeffs.iter().all(|c| c.is_finite())
    }

    pub fn dot(&self, other: &Self) -> f64 {
        self.coeffs
            .iter()
            .zip(&other.coeffs)
            .map(|(a, b)| a * b)
            .sum()
    }

    pub fn norm_sq(&self) -> f64 {
        self.dot(self)
    }

    /// Plain ℓ² norm, i.e. the `H = H_0` norm.
    pub fn norm(&self) -> f64 {
        self.norm_sq().sqrt()
    }

    /// `self += a * other`.
    pub fn add_scaled(&mut self, a: f64, other: &Self) {
        debug_assert_eq!(self.len(), other.len());
        for (s, o) in self.coeffs.iter_mut().zip(&other.coeffs) {
            *s += a * o;
        }
    }

    pub fn scale(&mut self, a: f64) {
        self.coeffs.iter_mut().for_each(|c| *c *= a);
    }

    pub fn scaled(&self, a: f64) -> Self {
        let mut out = self.clone();
        out.scale(a);
        out
    }

    /// `self - other`.
    pub fn sub(&self, other: &Self) -> Self {
        let mut out = self.clone();
        out.add_scaled(-1.0, other);
        out
    }

    pub(crate) fn map_modes(&self, factors: &[f64]) -> Self {
        Self::from_raw(
            self.coeffs
                .iter()
                .zip(factors)
                .map(|(c, f)| c * f)
                .collect(),
        )
    }
}

impl fmt::Display for SpectralVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[")?;
        for (i, c) in self.coeffs.iter().enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{c}")?;
        }
        write!(f, "]")
    }
}

/// Spectrum `0 < λ_1 ≤ … ≤ λ_N` of `-A` on the retained modes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OperatorSpec {
    eigenvalues: Vec<f64>,
}

impl OperatorSpec {
    pub fn new(eigenvalues: Vec<f64>) -> Result<Self> {
        if eigenvalues.is_empty() {
            return Err(Error::Configuration("operator needs at least one mode".into()));
        }
        for (i, &l) in eigenvalues.iter().enumerate() {
            if !(l.is_finite() && l > 0.0) {
                return Err(Error::Configuration(format!(
                    "eigenvalue {} = {l} must be finite and strictly positive",
                    i + 1
                )));
            }
        }
        if eigenvalues.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::Configuration(
                "eigenvalues must be stored in nondecreasing order".into(),
            ));
        }
        Ok(Self { eigenvalues })
    }

    /// Dirichlet Laplacian on (0,1): `λ_i = π² i²`, `i = 1..=n`.
    pub fn dirichlet_laplacian(n: usize) -> Result<Self> {
        Self::new((1..=n).map(|i| PI * PI * (i * i) as f64).collect())
    }

    /// Builds the operator from a dense matrix representation of `-A` in the
    /// eigenbasis. Only diagonal matrices are accepted.
    pub fn from_dense(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        let mut diag = Vec::with_capacity(n);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != n {
                return Err(Error::DimensionMismatch {
                    context: "operator matrix row",
                    expected: n,
                    found: row.len(),
                });
            }
            for (j, &a) in row.iter().enumerate() {
                if i != j && a != 0.0 {
                    return Err(Error::Configuration(format!(
                        "only diagonal operators are supported; entry ({i},{j}) = {a}"
                    )));
                }
            }
            diag.push(row[i]);
        }
        Self::new(diag)
    }

    pub fn dim(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    /// `‖A^{-1}‖ = 1/λ_1`.
    pub fn inverse_norm(&self) -> f64 {
        1.0 / self.eigenvalues[0]
    }

    /// Per-mode factors `exp(-λ_i t)`.
    pub fn semigroup_factors(&self, t: f64) -> Result<Vec<f64>> {
        if !(t >= 0.0) {
            return Err(Error::Domain(format!("semigroup time must be nonnegative, got {t}")));
        }
        Ok(self.eigenvalues.iter().map(|l| (-l * t).exp()).collect())
    }

    /// `A v`, i.e. `-λ_i v_i`.
    pub fn apply_generator(&self, v: &SpectralVector) -> SpectralVector {
        SpectralVector::from_raw(
            self.eigenvalues
                .iter()
                .zip(v.coeffs())
                .map(|(l, c)| -l * c)
                .collect(),
        )
    }

    /// `‖v‖_{H_r}² = Σ λ_i^{2r} v_i²`.
    pub fn norm_sq(&self, r: f64, v: &SpectralVector) -> f64 {
        if r == 0.0 {
            return v.norm_sq();
        }
        self.eigenvalues
            .iter()
            .zip(v.coeffs())
            .map(|(l, c)| l.powf(2.0 * r) * c * c)
            .sum()
    }

    pub fn norm(&self, r: f64, v: &SpectralVector) -> f64 {
        self.norm_sq(r, v).sqrt()
    }

    /// `sup_i λ_i^κ e^{-λ_i t}` over the retained modes.
    pub fn smoothing_bound(&self, kappa: f64, t: f64) -> f64 {
        self.eigenvalues
            .iter()
            .map(|l| l.powf(kappa) * (-l * t).exp())
            .fold(0.0, f64::max)
    }
}

/// `e^{At} v`.
pub fn semigroup_apply(op: &OperatorSpec, t: f64, v: &SpectralVector) -> Result<SpectralVector> {
    check_dim(op, v)?;
    if t == 0.0 {
        return Ok(v.clone());
    }
    let factors = op.semigroup_factors(t)?;
    Ok(v.map_modes(&factors))
}

/// `(-A)^r v`.
pub fn fractional_apply(op: &OperatorSpec, r: f64, v: &SpectralVector) -> Result<SpectralVector> {
    check_dim(op, v)?;
    if r == 0.0 {
        return Ok(v.clone());
    }
    let factors: Vec<f64> = op.eigenvalues.iter().map(|l| l.powf(r)).collect();
    Ok(v.map_modes(&factors))
}

fn check_dim(op: &OperatorSpec, v: &SpectralVector) -> Result<()> {
    if op.dim() != v.len() {
        return Err(Error::DimensionMismatch {
            context: "operator/state",
            expected: op.dim(),
            found: v.len(),
        });
    }
    Ok(())
}

/// Uniform interior grid `x_m = m/(G+1)`, `m = 1..=G`, together with the
/// sine transform linking it to the first `N` spectral modes.
///
/// `G ≥ N` is required. With `G = N` ([`GridProfile::collocation`]) the
/// transform is a bijection, so pointwise products stay exactly commutative
/// and associative after projection. With `G = 2N`
/// ([`GridProfile::dealiased`]) quadratic products of band-limited inputs
/// are resolved without aliasing before truncation.
#[derive(Clone)]
pub struct GridProfile {
    modes: usize,
    size: usize,
    weights: Vec<f64>,
    fft: Arc<dyn Fft<f64>>,
}

impl fmt::Debug for GridProfile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("GridProfile")
            .field("modes", &self.modes)
            .field("size", &self.size)
            .finish()
    }
}

impl GridProfile {
    pub fn new(modes: usize, size: usize) -> Result<Self> {
        if modes == 0 {
            return Err(Error::Configuration("grid needs at least one mode".into()));
        }
        if size < modes {
            return Err(Error::Configuration(format!(
                "grid of size {size} cannot represent {modes} modes"
            )));
        }
        let fft = FftPlanner::new().plan_fft_forward(2 * (size + 1));
        Ok(Self {
            modes,
            size,
            weights: vec![1.0 / (size + 1) as f64; size],
            fft,
        })
    }

    /// `G = N`: exact nodal collocation.
    pub fn collocation(modes: usize) -> Result<Self> {
        Self::new(modes, modes)
    }

    /// `G = 2N`: alias-free quadratic products.
    pub fn dealiased(modes: usize) -> Result<Self> {
        Self::new(modes, 2 * modes)
    }

    pub fn modes(&self) -> usize {
        self.modes
    }

    pub fn size(&self) -> usize {
        self.size
    }

    /// Quadrature weights of the discrete inner product on the grid.
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn nodes(&self) -> Vec<f64> {
        (1..=self.size)
            .map(|m| m as f64 / (self.size + 1) as f64)
            .collect()
    }

    /// `Σ_{k≤len} x_k sin(πkm/(G+1))` for `m = 1..=G`, or the transpose
    /// direction (the matrix is symmetric) via the same FFT.
    fn sine_sum(&self, input: &[f64], out_len: usize) -> Vec<f64> {
        let g1 = self.size + 1;
        let mut buf = vec![Complex64::new(0.0, 0.0); 2 * g1];
        for (k, &x) in input.iter().enumerate() {
            buf[k + 1].re = x;
            buf[2 * g1 - k - 1].re = -x;
        }
        self.fft.process(&mut buf);
        (1..=out_len).map(|m| -0.5 * buf[m].im).collect()
    }

    /// Point values of `v` at the grid nodes.
    pub fn to_grid(&self, v: &SpectralVector) -> Result<Vec<f64>> {
        if v.len() != self.modes {
            return Err(Error::DimensionMismatch {
                context: "grid synthesis",
                expected: self.modes,
                found: v.len(),
            });
        }
        let mut values = self.sine_sum(v.coeffs(), self.size);
        values.iter_mut().for_each(|x| *x *= std::f64::consts::SQRT_2);
        Ok(values)
    }

    /// Discrete projection of grid values onto the first `N` modes.
    pub fn to_spectrum(&self, values: &[f64]) -> Result<SpectralVector> {
        if values.len() != self.size {
            return Err(Error::DimensionMismatch {
                context: "grid analysis",
                expected: self.size,
                found: values.len(),
            });
        }
        let mut coeffs = self.sine_sum(values, self.modes);
        let scale = std::f64::consts::SQRT_2 / (self.size + 1) as f64;
        coeffs.iter_mut().for_each(|c| *c *= scale);
        Ok(SpectralVector::from_raw(coeffs))
    }

    /// Pointwise product of two states, projected back onto the modes.
    pub fn product(&self, a: &SpectralVector, b: &SpectralVector) -> Result<SpectralVector> {
        let mut ga = self.to_grid(a)?;
        let gb = self.to_grid(b)?;
        ga.iter_mut().zip(&gb).for_each(|(x, y)| *x *= y);
        self.to_spectrum(&ga)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn v(c: &[f64]) -> SpectralVector {
        SpectralVector::new(c.to_vec()).unwrap()
    }

    #[test]
    fn rejects_non_finite_coefficients() {
        assert!(SpectralVector::new(vec![1.0, f64::NAN]).is_err());
        assert!(SpectralVector::new(vec![f64::INFINITY]).is_err());
    }

    #[test]
    fn operator_invariants() {
        assert!(OperatorSpec::new(vec![]).is_err());
        assert!(OperatorSpec::new(vec![1.0, 0.0]).is_err());
        assert!(OperatorSpec::new(vec![2.0, 1.0]).is_err());
        assert!(OperatorSpec::new(vec![1.0, 1.0, 3.0]).is_ok());
        let diag = OperatorSpec::from_dense(&[vec![1.0, 0.0], vec![0.0, 4.0]]).unwrap();
        assert_eq!(diag.eigenvalues(), &[1.0, 4.0]);
        let err = OperatorSpec::from_dense(&[vec![1.0, 0.5], vec![0.0, 4.0]]).unwrap_err();
        assert!(matches!(err, Error::Configuration(_)));
    }

    #[test]
    fn semigroup_examples() {
        let op = OperatorSpec::new(vec![1.0]).unwrap();
        let out = semigroup_apply(&op, 1.0, &v(&[1.0])).unwrap();
        assert_relative_eq!(out.coeffs()[0], 0.367_879_441_171_442_32, max_relative = 1e-15);
        assert_eq!(semigroup_apply(&op, 0.0, &v(&[3.5])).unwrap(), v(&[3.5]));
        assert!(matches!(
            semigroup_apply(&op, -1e-3, &v(&[1.0])),
            Err(Error::Domain(_))
        ));

        // Dirichlet Laplacian, t = 0.01 (values from 30-digit arithmetic).
        let op = OperatorSpec::dirichlet_laplacian(3).unwrap();
        let out = semigroup_apply(&op, 0.01, &v(&[1.0, 1.0, 1.0])).unwrap();
        let expected = [
            0.906_018_055_788_922_97,
            0.673_825_451_231_433_56,
            0.411_369_107_350_624_90,
        ];
        for (a, b) in out.coeffs().iter().zip(expected) {
            assert_relative_eq!(*a, b, max_relative = 1e-14);
        }
    }

    #[test]
    fn fractional_examples() {
        let op = OperatorSpec::new(vec![2.0, 3.0]).unwrap();
        let x = v(&[1.0, 1.0]);
        assert_eq!(fractional_apply(&op, 0.0, &x).unwrap(), x);
        assert_eq!(fractional_apply(&op, 1.0, &x).unwrap(), v(&[2.0, 3.0]));
        let back = fractional_apply(&op, 1.0, &fractional_apply(&op, -1.0, &x).unwrap()).unwrap();
        for (a, b) in back.coeffs().iter().zip(x.coeffs()) {
            assert_relative_eq!(*a, *b, max_relative = 1e-14);
        }
    }

    #[test]
    fn grid_rejects_undersized_profiles() {
        assert!(matches!(GridProfile::new(8, 7), Err(Error::Configuration(_))));
        assert!(GridProfile::new(8, 8).is_ok());
    }

    #[test]
    fn unit_mode_round_trip_matches_sine_samples() {
        let g = GridProfile::dealiased(4).unwrap();
        let e1 = SpectralVector::unit(4, 0);
        let values = g.to_grid(&e1).unwrap();
        for (x, val) in g.nodes().iter().zip(&values) {
            assert_relative_eq!(*val, 2f64.sqrt() * (PI * x).sin(), epsilon = 1e-14);
        }
        let back = g.to_spectrum(&values).unwrap();
        for (a, b) in back.coeffs().iter().zip(e1.coeffs()) {
            assert!((a - b).abs() < 1e-14);
        }
        let zero = SpectralVector::zeros(4);
        assert!(g.to_grid(&zero).unwrap().iter().all(|&x| x == 0.0));
        assert_eq!(g.to_spectrum(&vec![0.0; 8]).unwrap(), zero);
    }

    #[test]
    fn squared_first_mode_has_only_odd_content() {
        // 2 sin²(πx) is symmetric about x = 1/2, so even sine modes vanish.
        // The grid inner product converges to 8√2/(3π) at rate O(G^-2).
        let exact = 1.200_421_754_876_141_4;
        let mut last_err = f64::INFINITY;
        for n in [8, 16, 32, 64] {
            let g = GridProfile::dealiased(n).unwrap();
            let e1 = SpectralVector::unit(n, 0);
            let p = g.product(&e1, &e1).unwrap();
            for (k, c) in p.coeffs().iter().enumerate() {
                if k % 2 == 1 {
                    assert!(c.abs() < 1e-13, "mode {} = {c}", k + 1);
                }
            }
            let err = (p.coeffs()[0] - exact).abs();
            assert!(err < last_err / 3.0);
            last_err = err;
        }
        assert!(last_err < 1e-4);
    }

    #[test]
    fn collocation_products_commute_and_associate() {
        let g = GridProfile::collocation(12).unwrap();
        let a = SpectralVector::new((0..12).map(|i| (i as f64 * 0.7).sin()).collect()).unwrap();
        let b = SpectralVector::new((0..12).map(|i| 1.0 / (1.0 + i as f64)).collect()).unwrap();
        let c = SpectralVector::new((0..12).map(|i| (i as f64).cos()).collect()).unwrap();
        let ab_c = g.product(&g.product(&a, &b).unwrap(), &c).unwrap();
        let ac_b = g.product(&g.product(&a, &c).unwrap(), &b).unwrap();
        assert!(ab_c.sub(&ac_b).norm() < 1e-14 * ab_c.norm());
    }

    #[test]
    fn smoothing_bound_and_norms() {
        let op = OperatorSpec::dirichlet_laplacian(5).unwrap();
        let x = v(&[1.0, -2.0, 0.5, 0.0, 3.0]);
        assert_eq!(op.norm(0.0, &x), x.norm());
        let t = 0.003;
        let lhs = fractional_apply(&op, 0.75, &semigroup_apply(&op, t, &x).unwrap())
            .unwrap()
            .norm();
        assert!(lhs <= op.smoothing_bound(0.75, t) * x.norm() * (1.0 + 1e-14));
    }

    fn spectrum() -> impl Strategy<Value = Vec<f64>> {
        proptest::collection::vec(1e-3f64..1e3, 1..12).prop_map(|mut l| {
            l.sort_by(f64::total_cmp);
            l
        })
    }

    proptest! {
        #[test]
        fn semigroup_law(lam in spectrum(), s in 0.0f64..2.0, t in 0.0f64..2.0, seed in any::<u64>()) {
            let op = OperatorSpec::new(lam.clone()).unwrap();
            let x = SpectralVector::new(
                (0..lam.len()).map(|i| ((seed.wrapping_add(i as u64) % 97) as f64) - 48.0).collect()
            ).unwrap();
            let direct = semigroup_apply(&op, s + t, &x).unwrap();
            let composed = semigroup_apply(&op, s, &semigroup_apply(&op, t, &x).unwrap()).unwrap();
            for ((a, b), l) in direct.coeffs().iter().zip(composed.coeffs()).zip(&lam) {
                // exp amplifies argument rounding by the magnitude of the exponent.
                let rel = 4.0 * f64::EPSILON * (1.0 + l * (s + t));
                prop_assert!((a - b).abs() <= rel * a.abs().max(b.abs()) + 1e-300);
            }
            prop_assert!(direct.norm() <= x.norm() * (1.0 + 1e-15));
        }

        #[test]
        fn band_limited_round_trip(coeffs in proptest::collection::vec(-5.0f64..5.0, 1..40), extra in 0usize..40) {
            let n = coeffs.len();
            let g = GridProfile::new(n, n + extra).unwrap();
            let x = SpectralVector::new(coeffs).unwrap();
            let back = g.to_spectrum(&g.to_grid(&x).unwrap()).unwrap();
            let scale = x.norm().max(1e-300);
            for (a, b) in back.coeffs().iter().zip(x.coeffs()) {
                prop_assert!((a - b).abs() <= 1e-12 * scale);
            }
        }
    }
}
