//! Exponential Euler, exponential Milstein and exponential Wagner–Platen
//! one-step maps.
//!
//! All increments are `U`-coordinate vectors (see [`crate::stochastics`]).
//! `ΔZ` is the time integral `∫ (W_s − W_{t_0}) ds` over the step.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::coefficients::{verify_commutativity, Coefficients, CommutativityReport, ProbeConfig};
use crate::error::{Error, Result};
use crate::spectral::{OperatorSpec, SpectralVector};
use crate::stochastics::{IncrementPair, NoiseSpec, SuppliedIntegrals};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    #[serde(alias = "exp_euler")]
    Euler,
    #[serde(alias = "exp_milstein")]
    Milstein,
    #[serde(alias = "wp")]
    WagnerPlaten,
}

impl Scheme {
    pub const ALL: [Scheme; 3] = [Scheme::Euler, Scheme::Milstein, Scheme::WagnerPlaten];

    pub fn name(&self) -> &'static str {
        match self {
            Scheme::Euler => "euler",
            Scheme::Milstein => "milstein",
            Scheme::WagnerPlaten => "wagner_platen",
        }
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// How the iterated stochastic integrals are obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IntegralMode {
    /// Closed forms in `(ΔW, ΔZ)`; needs both commutativity checks.
    #[default]
    ClosedForm,
    /// Iterated integrals handed in by the caller.
    SuppliedIntegrals,
}

/// Operator, coefficients and noise, plus the commutativity verdict obtained
/// when the model was assembled.
#[derive(Clone)]
pub struct Model {
    op: OperatorSpec,
    coeffs: Arc<dyn Coefficients>,
    noise: NoiseSpec,
    commutativity: CommutativityReport,
}

impl fmt::Debug for Model {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Model")
            .field("op", &self.op)
            .field("noise", &self.noise)
            .field("commutativity", &self.commutativity)
            .finish_non_exhaustive()
    }
}

impl Model {
    pub fn new(op: OperatorSpec, coeffs: Arc<dyn Coefficients>, noise: NoiseSpec) -> Result<Self> {
        Self::with_probes(op, coeffs, noise, &ProbeConfig::default())
    }

    pub fn with_probes(
        op: OperatorSpec,
        coeffs: Arc<dyn Coefficients>,
        noise: NoiseSpec,
        probes: &ProbeConfig,
    ) -> Result<Self> {
        let n = op.dim();
        for (context, found) in [
            ("coefficient state dimension", coeffs.state_dim()),
            ("noise state dimension", noise.state_dim()),
        ] {
            if found != n {
                return Err(Error::DimensionMismatch {
                    context,
                    expected: n,
                    found,
                });
            }
        }
        if coeffs.noise_dim() != noise.dim() {
            return Err(Error::DimensionMismatch {
                context: "coefficient noise dimension",
                expected: noise.dim(),
                found: coeffs.noise_dim(),
            });
        }
        let commutativity = verify_commutativity(coeffs.as_ref(), &noise, probes);
        Ok(Self {
            op,
            coeffs,
            noise,
            commutativity,
        })
    }

    pub fn op(&self) -> &OperatorSpec {
        &self.op
    }

    pub fn coeffs(&self) -> &dyn Coefficients {
        self.coeffs.as_ref()
    }

    pub fn coeffs_arc(&self) -> Arc<dyn Coefficients> {
        Arc::clone(&self.coeffs)
    }

    pub fn noise(&self) -> &NoiseSpec {
        &self.noise
    }

    pub fn commutativity(&self) -> &CommutativityReport {
        &self.commutativity
    }
}

/// Per-step data: the model, `Δ = T/M`, and cached semigroup factors
/// `e^{-λ_i Δ/2}`, `e^{-λ_i Δ}`.
#[derive(Debug, Clone)]
pub struct StepContext<'a> {
    model: &'a Model,
    dt: f64,
    mode: IntegralMode,
    half: Vec<f64>,
    full: Vec<f64>,
}

impl<'a> StepContext<'a> {
    pub fn new(model: &'a Model, dt: f64, mode: IntegralMode) -> Result<Self> {
        if !(dt.is_finite() && dt > 0.0) {
            return Err(Error::Domain(format!("step size must be positive, got {dt}")));
        }
        Ok(Self {
            model,
            dt,
            mode,
            half: model.op.semigroup_factors(0.5 * dt)?,
            full: model.op.semigroup_factors(dt)?,
        })
    }

    /// Context for `M` uniform steps over `[0, T]`.
    pub fn uniform(model: &'a Model, horizon: f64, steps: usize, mode: IntegralMode) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Domain("number of steps must be at least 1".into()));
        }
        Self::new(model, horizon / steps as f64, mode)
    }

    pub fn model(&self) -> &'a Model {
        self.model
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn mode(&self) -> IntegralMode {
        self.mode
    }

    fn require_first_kind(&self, scheme: &'static str) -> Result<()> {
        let first = self.model.commutativity.first;
        if !first.passed {
            return Err(Error::CommutativityRefused {
                scheme,
                kind: "first",
                residual: first.max_residual,
            });
        }
        Ok(())
    }

    fn require_closed_form(&self, scheme: &'static str) -> Result<()> {
        if self.mode != IntegralMode::ClosedForm {
            return Err(Error::Configuration(format!(
                "{scheme} closed form requested in supplied-integral mode"
            )));
        }
        self.require_first_kind(scheme)?;
        let second = self.model.commutativity.second;
        if !second.passed {
            return Err(Error::CommutativityRefused {
                scheme,
                kind: "second",
                residual: second.max_residual,
            });
        }
        Ok(())
    }

    fn check_state(&self, y: &SpectralVector) -> Result<()> {
        if y.len() != self.model.op.dim() {
            return Err(Error::DimensionMismatch {
                context: "state",
                expected: self.model.op.dim(),
                found: y.len(),
            });
        }
        Ok(())
    }

    fn check_pair(&self, pair: &IncrementPair) -> Result<()> {
        let j = self.model.noise.dim();
        if pair.dw.len() != j || pair.dz.len() != j {
            return Err(Error::DimensionMismatch {
                context: "increment pair",
                expected: j,
                found: pair.dw.len().min(pair.dz.len()),
            });
        }
        Ok(())
    }
}

fn finite(term: &'static str, v: SpectralVector) -> Result<SpectralVector> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Overflow { term, step: 0 })
    }
}

/// `e^{AΔ}(Y + ΔF(Y) + B(Y)ΔW)`.
pub fn exp_euler_step(ctx: &StepContext<'_>, y: &SpectralVector, pair: &IncrementPair) -> Result<SpectralVector> {
    ctx.check_state(y)?;
    ctx.check_pair(pair)?;
    let c = ctx.model.coeffs();
    let mut inner = y.clone();
    if !c.drift_vanishes() {
        inner.add_scaled(ctx.dt, &finite("F(Y)", c.drift(y))?);
    }
    if !c.diffusion_vanishes() {
        inner.add_scaled(1.0, &finite("B(Y)ΔW", c.diffusion(y, &pair.dw))?);
    }
    finite("e^{AΔ}{…}", inner.map_modes(&ctx.full))
}

/// Euler plus `½B′(Y)(B(Y)ΔW)ΔW − (Δ/2)Σ_j B′(Y)(B(Y)g_j)g_j` inside the
/// semigroup factor.
pub fn exp_milstein_step(ctx: &StepContext<'_>, y: &SpectralVector, pair: &IncrementPair) -> Result<SpectralVector> {
    ctx.require_first_kind("milstein")?;
    ctx.check_state(y)?;
    ctx.check_pair(pair)?;
    let c = ctx.model.coeffs();
    let mut inner = y.clone();
    if !c.drift_vanishes() {
        inner.add_scaled(ctx.dt, &finite("F(Y)", c.drift(y))?);
    }
    if !c.diffusion_vanishes() {
        let bdw = finite("B(Y)ΔW", c.diffusion(y, &pair.dw))?;
        inner.add_scaled(1.0, &bdw);
        let mut corr = finite("B′(Y)(B(Y)ΔW)ΔW", c.diffusion_derivative(y, &bdw, &pair.dw))?.scaled(0.5);
        let trace = finite("Σ B′(Y)(B(Y)g_j)g_j", c.diffusion_trace(y, &ctx.model.noise))?;
        corr.add_scaled(-0.5 * ctx.dt, &trace);
        inner.add_scaled(1.0, &corr);
    }
    finite("e^{AΔ}{…}", inner.map_modes(&ctx.full))
}

/// Closed-form exponential Wagner–Platen step for commutative noise.
pub fn wagner_platen_step(ctx: &StepContext<'_>, y: &SpectralVector, pair: &IncrementPair) -> Result<SpectralVector> {
    ctx.require_closed_form("wagner_platen")?;
    ctx.check_state(y)?;
    ctx.check_pair(pair)?;
    let model = ctx.model;
    let (c, noise, h) = (model.coeffs(), &model.noise, ctx.dt);
    let (dw, dz) = (&pair.dw[..], &pair.dz[..]);

    let mut inner = y.map_modes(&ctx.half);
    let (f, ay_f) = drift_parts(model, y)?;
    if !c.drift_vanishes() {
        inner.add_scaled(h, &f);
        inner.add_scaled(0.5 * h * h, &finite("F′(Y)[AY+F(Y)]", c.drift_derivative(y, &ay_f))?);
    }
    if !c.diffusion_vanishes() {
        let bdw = finite("B(Y)ΔW", c.diffusion(y, dw))?;
        let bdz = finite("B(Y)ΔZ", c.diffusion(y, dz))?;
        if !c.drift_vanishes() {
            inner.add_scaled(1.0, &finite("F′(Y)[B(Y)ΔZ]", c.drift_derivative(y, &bdz))?);
            if !c.drift_is_affine() {
                inner.add_scaled(0.25 * h * h, &finite("Σ F″(Y)(B(Y)g_j, B(Y)g_j)", c.drift_trace(y, noise))?);
            }
        }
        inner.add_scaled(1.0, &bdw);
        let mut lag = bdz.clone();
        lag.add_scaled(-0.5 * h, &bdw);
        inner.add_scaled(1.0, &finite("A[B(Y)ΔZ − (Δ/2)B(Y)ΔW]", model.op.apply_generator(&lag))?);

        let lever: Vec<f64> = dw.iter().zip(dz).map(|(w, z)| h * w - z).collect();
        inner.add_scaled(1.0, &finite("B′(Y)(AY+F(Y))(ΔΔW − ΔZ)", c.diffusion_derivative(y, &ay_f, &lever))?);

        let b1 = finite("B′(Y)(B(Y)ΔW)ΔW", c.diffusion_derivative(y, &bdw, dw))?;
        inner.add_scaled(0.5, &b1);
        inner.add_scaled(1.0 / 6.0, &finite("B′(Y)(B′(Y)(B(Y)ΔW)ΔW)ΔW", c.diffusion_derivative(y, &b1, dw))?);
        inner.add_scaled(-0.5 * h, &finite("Σ B′(Y)(B(Y)g_j)g_j", c.diffusion_trace(y, noise))?);
        inner.add_scaled(
            -0.5 * h,
            &finite("Σ B′(Y)(B′(Y)(B(Y)g_j)g_j)ΔW", c.diffusion_trace_nested(y, noise, dw))?,
        );
        if !c.diffusion_is_affine() {
            inner.add_scaled(
                1.0 / 6.0,
                &finite("B″(Y)(B(Y)ΔW, B(Y)ΔW)ΔW", c.diffusion_second_derivative(y, &bdw, &bdw, dw))?,
            );
            inner.add_scaled(
                -0.5 * h,
                &finite("Σ B″(Y)(B(Y)g_j, B(Y)g_j)ΔW", c.diffusion_trace_second(y, noise, dw))?,
            );
            inner.add_scaled(
                0.5,
                &finite("Σ B″(Y)(B(Y)g_j, B(Y)g_j)(ΔΔW − ΔZ)", c.diffusion_trace_second(y, noise, &lever))?,
            );
        }
    }
    let inner = finite("inner sum", inner)?;
    finite("e^{AΔ/2}{…}", inner.map_modes(&ctx.half))
}

/// `F(Y)` and `AY + F(Y)`.
fn drift_parts(model: &Model, y: &SpectralVector) -> Result<(SpectralVector, SpectralVector)> {
    let c = model.coeffs();
    let f = if c.drift_vanishes() {
        SpectralVector::zeros(y.len())
    } else {
        finite("F(Y)", c.drift(y))?
    };
    let mut ay_f = finite("AY", model.op.apply_generator(y))?;
    ay_f.add_scaled(1.0, &f);
    Ok((f, ay_f))
}

/// Wagner–Platen step with the iterated integrals taken from `ints`
/// (`g`-basis coordinates), term by term and without any commutativity
/// assumption.
pub fn wagner_platen_step_integral_form(
    ctx: &StepContext<'_>,
    y: &SpectralVector,
    ints: &SuppliedIntegrals,
) -> Result<SpectralVector> {
    ctx.check_state(y)?;
    ints.validate()?;
    let model = ctx.model;
    let (c, noise, h) = (model.coeffs(), &model.noise, ctx.dt);
    let j = noise.dim();
    if ints.modes() != j {
        return Err(Error::DimensionMismatch {
            context: "supplied integrals",
            expected: j,
            found: ints.modes(),
        });
    }
    if (ints.dt - h).abs() > 1e-12 * h {
        return Err(Error::Domain(format!(
            "supplied integrals span {} but the step is {h}",
            ints.dt
        )));
    }
    let sq: Vec<f64> = noise.q().iter().map(|q| q.sqrt()).collect();
    let dw: Vec<f64> = ints.single.iter().zip(&sq).map(|(i, s)| i * s).collect();
    let dz: Vec<f64> = ints.time.iter().zip(&sq).map(|(i, s)| i * s).collect();

    let mut inner = y.map_modes(&ctx.half);
    let (f, ay_f) = drift_parts(model, y)?;
    if !c.drift_vanishes() {
        inner.add_scaled(h, &f);
        inner.add_scaled(0.5 * h * h, &finite("F′(Y)[AY+F(Y)]", c.drift_derivative(y, &ay_f))?);
    }
    if c.diffusion_vanishes() {
        return finite("e^{AΔ/2}{…}", inner.map_modes(&ctx.half));
    }
    let n = y.len();
    let basis = noise.basis();
    let bg: Vec<SpectralVector> = basis.iter().map(|g| c.diffusion(y, g)).collect();
    let bdw = finite("B(Y)ΔW", c.diffusion(y, &dw))?;
    let bdz = finite("B(Y)ΔZ", c.diffusion(y, &dz))?;

    if !c.drift_vanishes() {
        inner.add_scaled(1.0, &finite("F′(Y)[B(Y)ΔZ]", c.drift_derivative(y, &bdz))?);
        if !c.drift_is_affine() {
            let mut tr = SpectralVector::zeros(n);
            for b in &bg {
                tr.add_scaled(1.0, &c.drift_second_derivative(y, b, b));
            }
            inner.add_scaled(0.25 * h * h, &finite("Σ F″(Y)(B(Y)g_j, B(Y)g_j)", tr)?);
        }
    }
    inner.add_scaled(1.0, &bdw);
    let mut lag = bdz.clone();
    lag.add_scaled(-0.5 * h, &bdw);
    inner.add_scaled(1.0, &finite("A[B(Y)ΔZ − (Δ/2)B(Y)ΔW]", model.op.apply_generator(&lag))?);
    let lever: Vec<f64> = dw.iter().zip(&dz).map(|(w, z)| h * w - z).collect();
    inner.add_scaled(1.0, &finite("B′(Y)(AY+F(Y))(ΔΔW − ΔZ)", c.diffusion_derivative(y, &ay_f, &lever))?);

    // D_ij = B′(Y)(B(Y)g_i)g_j
    let d: Vec<SpectralVector> = (0..j * j)
        .map(|ij| c.diffusion_derivative(y, &bg[ij / j], &basis[ij % j]))
        .collect();
    let mut double = SpectralVector::zeros(n);
    for (ij, dij) in d.iter().enumerate() {
        double.add_scaled(ints.double[ij], dij);
    }
    inner.add_scaled(1.0, &finite("Σ B′(Y)(B(Y)g_i)g_j I_ij", double)?);

    // Σ_k B′(Y)(Σ_ij D_ij I_ijk) g_k
    let mut triple = SpectralVector::zeros(n);
    for k in 0..j {
        let mut s = SpectralVector::zeros(n);
        for (ij, dij) in d.iter().enumerate() {
            s.add_scaled(ints.triple[ij * j + k], dij);
        }
        triple.add_scaled(1.0, &c.diffusion_derivative(y, &s, &basis[k]));
    }
    inner.add_scaled(1.0, &finite("Σ B′(Y)(B′(Y)(B(Y)g_i)g_j)g_k I_ijk", triple)?);

    if !c.diffusion_is_affine() {
        // ½ Σ B″(Y)(B(Y)g_i, B(Y)g_j)g_k (I_ijk + I_jik + δ_ij(Δ I_k − z_k))
        let mut second = SpectralVector::zeros(n);
        let mut u = vec![0.0; j];
        for a in 0..j {
            for b in 0..j {
                for (k, uk) in u.iter_mut().enumerate() {
                    *uk = 0.5 * (ints.triple(a, b, k) + ints.triple(b, a, k)) * sq[k];
                }
                second.add_scaled(1.0, &c.diffusion_second_derivative(y, &bg[a], &bg[b], &u));
            }
            second.add_scaled(0.5, &c.diffusion_second_derivative(y, &bg[a], &bg[a], &lever));
        }
        inner.add_scaled(1.0, &finite("Σ B″(Y)(B(Y)g_i, B(Y)g_j)g_k ∫β_iβ_j dβ_k", second)?);
    }
    let inner = finite("inner sum", inner)?;
    finite("e^{AΔ/2}{…}", inner.map_modes(&ctx.half))
}

/// One step of `scheme` driven by `pair`.
pub fn step(ctx: &StepContext<'_>, scheme: Scheme, y: &SpectralVector, pair: &IncrementPair) -> Result<SpectralVector> {
    match scheme {
        Scheme::Euler => exp_euler_step(ctx, y, pair),
        Scheme::Milstein => exp_milstein_step(ctx, y, pair),
        Scheme::WagnerPlaten => wagner_platen_step(ctx, y, pair),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepNorms {
    pub h: f64,
    pub h_gamma: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub terminal: SpectralVector,
    /// Norms after each step, if requested.
    pub norms: Vec<StepNorms>,
}

fn at_step(e: Error, step: usize) -> Error {
    match e {
        Error::Overflow { term, .. } => Error::Overflow { term, step },
        other => other,
    }
}

/// Folds `step` over `pairs`. With `record = Some(γ)` the `H` and `H_γ`
/// norms after every step are kept.
pub fn evolve(
    ctx: &StepContext<'_>,
    scheme: Scheme,
    y0: &SpectralVector,
    pairs: &[IncrementPair],
    record: Option<f64>,
) -> Result<Trajectory> {
    if pairs.is_empty() {
        return Err(Error::Domain("number of steps must be at least 1".into()));
    }
    let mut y = y0.clone();
    let mut norms = Vec::with_capacity(if record.is_some() { pairs.len() } else { 0 });
    for (m, pair) in pairs.iter().enumerate() {
        y = step(ctx, scheme, &y, pair).map_err(|e| at_step(e, m))?;
        if let Some(gamma) = record {
            norms.push(StepNorms {
                h: y.norm(),
                h_gamma: ctx.model.op.norm(gamma, &y),
            });
        }
    }
    Ok(Trajectory { terminal: y, norms })
}

/// [`evolve`] for the integral-form Wagner–Platen step.
pub fn evolve_with_integrals(
    ctx: &StepContext<'_>,
    y0: &SpectralVector,
    ints: &[SuppliedIntegrals],
) -> Result<SpectralVector> {
    if ints.is_empty() {
        return Err(Error::Domain("number of steps must be at least 1".into()));
    }
    let mut y = y0.clone();
    for (m, i) in ints.iter().enumerate() {
        y = wagner_platen_step_integral_form(ctx, &y, i).map_err(|e| at_step(e, m))?;
    }
    Ok(y)
}
