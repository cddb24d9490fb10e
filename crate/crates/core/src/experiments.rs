//! Strong-convergence studies: coupled reference solutions, RMS errors,
//! order fits, moment probes and the report artifacts.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::coefficients::{Builtin, CommutativityReport, Regularity, ScalarGbm};
use crate::error::{Error, Result};
use crate::schemes::{evolve, IntegralMode, Model, Scheme, StepContext};
use crate::spectral::{semigroup_apply, OperatorSpec, SpectralVector};
use crate::stochastics::{FineStream, NoiseSpec, PathSeed};

/// Covariance eigenvalues `q_j` of the driving noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Covariance {
    /// `q_j = 1/λ_j`, i.e. `Q = (-A)^{-1}`.
    InverseOperator,
    /// `q_j = λ_j^{-p}`.
    InversePower { power: f64 },
    Explicit { q: Vec<f64> },
}

/// Initial state `ξ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InitialCondition {
    /// `x(1 − x)` on `(0, 1)`: `c_k = 4√2/(π³k³)` for odd `k`, zero otherwise.
    Parabola,
    /// `amplitude · e_index` (zero-based index).
    Mode { index: usize, amplitude: f64 },
    Coefficients { values: Vec<f64> },
}

impl InitialCondition {
    pub fn build(&self, n: usize) -> Result<SpectralVector> {
        match self {
            InitialCondition::Parabola => {
                let c = 4.0 * std::f64::consts::SQRT_2 / std::f64::consts::PI.powi(3);
                Ok(SpectralVector::from_raw(
                    (1..=n)
                        .map(|k| if k % 2 == 1 { c / (k as f64).powi(3) } else { 0.0 })
                        .collect(),
                ))
            }
            &InitialCondition::Mode { index, amplitude } => {
                if index >= n {
                    return Err(Error::Configuration(format!(
                        "initial mode {index} outside the {n} retained modes"
                    )));
                }
                Ok(SpectralVector::unit(n, index).scaled(amplitude))
            }
            InitialCondition::Coefficients { values } => {
                if values.len() != n {
                    return Err(Error::DimensionMismatch {
                        context: "initial coefficients",
                        expected: n,
                        found: values.len(),
                    });
                }
                SpectralVector::new(values.clone())
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorNorm {
    #[default]
    H,
    HGamma,
}

/// A strong-convergence study.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StudyPlan {
    pub coefficients: Builtin,
    /// Retained modes `N`.
    pub modes: usize,
    /// Eigenvalues of `-A`; the Dirichlet Laplacian `π²i²` when absent.
    pub eigenvalues: Option<Vec<f64>>,
    pub covariance: Covariance,
    /// Multiplies every `q_j`.
    pub noise_scale: f64,
    pub initial: InitialCondition,
    pub horizon: f64,
    pub resolutions: Vec<usize>,
    /// `M_ref = reference_multiplier · max(M)`.
    pub reference_multiplier: usize,
    pub paths: usize,
    pub schemes: Vec<Scheme>,
    pub seed: u64,
    pub norm: ErrorNorm,
    pub regularity: Regularity,
    /// Compare the reference with a twice-finer one on a path subset.
    pub reference_check: bool,
    /// Record wall-clock seconds; when off the column holds `NA` so reports
    /// stay byte-reproducible.
    pub timing: bool,
}

impl Default for StudyPlan {
    fn default() -> Self {
        Self {
            coefficients: Builtin::LinearMult { sigma: 1.0 },
            modes: 32,
            eigenvalues: None,
            covariance: Covariance::InverseOperator,
            noise_scale: 1.0,
            initial: InitialCondition::Parabola,
            horizon: 1.0,
            resolutions: vec![4, 8, 16, 32, 64],
            reference_multiplier: 16,
            paths: 200,
            schemes: Scheme::ALL.to_vec(),
            seed: 20_240_601,
            norm: ErrorNorm::H,
            regularity: Regularity::default(),
            reference_check: true,
            timing: false,
        }
    }
}

/// How the surrogate for the exact solution is obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReferenceKind {
    /// Closed-form solution (scalar geometric Brownian motion).
    Exact,
    /// Wagner–Platen on the fine grid.
    WagnerPlaten { steps: usize },
}

impl StudyPlan {
    /// The flagship configuration: `LINEAR_MULT`, `Q = (-A)^{-1}`, `N = 32`.
    pub fn flagship() -> Self {
        Self::default()
    }

    /// Scalar geometric Brownian motion with exact reference.
    pub fn scalar_gbm(lambda: f64, sigma: f64, q: f64) -> Self {
        Self {
            coefficients: Builtin::ScalarGbm { sigma },
            modes: 1,
            eigenvalues: Some(vec![lambda]),
            covariance: Covariance::Explicit { q: vec![q] },
            initial: InitialCondition::Mode {
                index: 0,
                amplitude: 1.0,
            },
            paths: 2000,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |m: String| Err(Error::Configuration(m));
        if self.modes == 0 {
            return cfg("modes must be at least 1".into());
        }
        if !(self.horizon.is_finite() && self.horizon > 0.0) {
            return cfg(format!("horizon must be positive, got {}", self.horizon));
        }
        if self.paths < 2 {
            return cfg(format!("paths must be at least 2, got {}", self.paths));
        }
        if self.resolutions.len() < 3 {
            return cfg("at least three resolutions are needed for an order fit".into());
        }
        if self.resolutions.windows(2).any(|w| w[0] >= w[1]) {
            return cfg("resolutions must be strictly increasing".into());
        }
        if let Some(m) = self.resolutions.iter().find(|m| !m.is_power_of_two()) {
            return cfg(format!("resolutions must be powers of two, got {m}"));
        }
        if self.reference_multiplier < 8 || !self.reference_multiplier.is_power_of_two() {
            return cfg(format!(
                "reference_multiplier must be a power of two and at least 8, got {}",
                self.reference_multiplier
            ));
        }
        if self.schemes.is_empty() {
            return cfg("at least one scheme is required".into());
        }
        if !(self.noise_scale.is_finite() && self.noise_scale > 0.0) {
            return cfg(format!("noise_scale must be positive, got {}", self.noise_scale));
        }
        self.regularity.validate()
    }

    pub fn max_resolution(&self) -> usize {
        self.resolutions.iter().copied().max().unwrap_or(1)
    }

    pub fn reference_kind(&self) -> ReferenceKind {
        match self.coefficients {
            Builtin::ScalarGbm { .. } => ReferenceKind::Exact,
            _ => ReferenceKind::WagnerPlaten {
                steps: self.reference_multiplier * self.max_resolution(),
            },
        }
    }

    /// Steps of the fine increment stream every resolution is coarsened from.
    pub fn fine_steps(&self) -> usize {
        match self.reference_kind() {
            ReferenceKind::Exact => self.max_resolution(),
            ReferenceKind::WagnerPlaten { steps } => steps,
        }
    }

    pub fn operator(&self) -> Result<OperatorSpec> {
        match &self.eigenvalues {
            Some(l) if l.len() != self.modes => Err(Error::DimensionMismatch {
                context: "eigenvalues",
                expected: self.modes,
                found: l.len(),
            }),
            Some(l) => OperatorSpec::new(l.clone()),
            None => OperatorSpec::dirichlet_laplacian(self.modes),
        }
    }

    pub fn noise(&self, op: &OperatorSpec) -> Result<NoiseSpec> {
        let q: Vec<f64> = match &self.covariance {
            Covariance::InverseOperator => op.eigenvalues().iter().map(|l| 1.0 / l).collect(),
            Covariance::InversePower { power } => op.eigenvalues().iter().map(|l| l.powf(-power)).collect(),
            Covariance::Explicit { q } => q.clone(),
        };
        NoiseSpec::diagonal(q, self.modes)?.scaled(self.noise_scale)
    }

    pub fn model(&self) -> Result<Model> {
        let op = self.operator()?;
        let noise = self.noise(&op)?;
        let coeffs = self.coefficients.build(&noise)?;
        Model::new(op, coeffs, noise)
    }

    fn norm_exponent(&self) -> f64 {
        match self.norm {
            ErrorNorm::H => 0.0,
            ErrorNorm::HGamma => self.regularity.gamma,
        }
    }
}

/// Sum in a fixed binary tree, independent of thread count.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    if xs.len() <= 8 {
        return xs.iter().sum();
    }
    let mid = xs.len() / 2;
    pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
}

/// Mean and standard error of the mean.
pub fn mean_stderr(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = pairwise_sum(xs) / n;
    if xs.len() < 2 {
        return (mean, f64::NAN);
    }
    let dev: Vec<f64> = xs.iter().map(|x| (x - mean).powi(2)).collect();
    let var = pairwise_sum(&dev) / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// `(rms, stderr)` from per-path squared errors; the standard error of
/// `sqrt(mean)` follows from the delta method.
pub fn rms_from_squares(squares: &[f64]) -> Result<(f64, f64)> {
    if squares.is_empty() {
        return Err(Error::Study("no surviving paths".into()));
    }
    let (mean, se) = mean_stderr(squares);
    let rms = mean.sqrt();
    let stderr = if rms > 0.0 { se / (2.0 * rms) } else { 0.0 };
    Ok((rms, stderr))
}

/// Terminal reference state for one path.
pub fn reference_solution(plan: &StudyPlan, model: &Model, fine: &FineStream) -> Result<SpectralVector> {
    let y0 = plan.initial.build(plan.modes)?;
    match (plan.reference_kind(), &plan.coefficients) {
        (ReferenceKind::Exact, &Builtin::ScalarGbm { sigma }) => {
            let x = ScalarGbm::new(sigma).exact(
                y0.coeffs()[0],
                model.op().eigenvalues()[0],
                model.noise().q()[0],
                plan.horizon,
                fine.total()[0],
            );
            SpectralVector::new(vec![x]).map_err(|_| Error::Overflow {
                term: "exact solution",
                step: 0,
            })
        }
        _ => {
            let ctx = StepContext::new(model, fine.dt(), IntegralMode::ClosedForm)?;
            Ok(evolve(&ctx, Scheme::WagnerPlaten, &y0, &fine.pairs(), None)?.terminal)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorRow {
    pub scheme: Scheme,
    pub m: usize,
    pub rms: f64,
    pub stderr: f64,
    pub aborted: usize,
    pub seconds: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OrderFit {
    /// Positive order: minus the OLS slope of `log₂ rms` against `log₂ M`.
    pub order: f64,
    pub intercept: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrderRow {
    pub scheme: Scheme,
    pub fit: OrderFit,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReferenceCheck {
    pub paths: usize,
    /// RMS distance between the references at `M_ref` and `2 M_ref`.
    pub rms_gap: f64,
    /// Half the smallest error measured at the coarsest resolution.
    pub threshold: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceReport {
    pub reference: ReferenceKind,
    pub rows: Vec<ErrorRow>,
    pub orders: Vec<OrderRow>,
    pub aborted_references: usize,
    pub reference_check: Option<ReferenceCheck>,
    pub commutativity: CommutativityReport,
}

impl ConvergenceReport {
    pub fn row(&self, scheme: Scheme, m: usize) -> Option<&ErrorRow> {
        self.rows.iter().find(|r| r.scheme == scheme && r.m == m)
    }

    pub fn order(&self, scheme: Scheme) -> Option<&OrderFit> {
        self.orders.iter().find(|o| o.scheme == scheme).map(|o| &o.fit)
    }
}

/// OLS fit of `log₂ rms` on `log₂ M` with a two-sided 95% t interval.
pub fn fit_order(points: &[(usize, f64)]) -> Result<OrderFit> {
    if points.len() < 3 {
        return Err(Error::Domain(format!(
            "an order fit needs at least three points, got {}",
            points.len()
        )));
    }
    if let Some(&(m, r)) = points.iter().find(|(m, r)| !(*r > 0.0 && r.is_finite()) || *m == 0) {
        return Err(Error::Domain(format!("nonpositive error {r} at M = {m}")));
    }
    let n = points.len() as f64;
    let x: Vec<f64> = points.iter().map(|(m, _)| (*m as f64).log2()).collect();
    let y: Vec<f64> = points.iter().map(|(_, r)| r.log2()).collect();
    let mx = pairwise_sum(&x) / n;
    let my = pairwise_sum(&y) / n;
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let sxy: f64 = x.iter().zip(&y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let sse: f64 = x.iter().zip(&y).map(|(a, b)| (b - intercept - slope * a).powi(2)).sum();
    let se = (sse / (n - 2.0) / sxx).sqrt();
    let t = StudentsT::new(0.0, 1.0, n - 2.0)
        .map_err(|e| Error::Domain(e.to_string()))?
        .inverse_cdf(0.975);
    Ok(OrderFit {
        order: -slope,
        intercept,
        ci_lo: -slope - t * se,
        ci_hi: -slope + t * se,
    })
}

/// Squared errors (or `None` if aborted) and seconds for every
/// `(scheme, M)` configuration of one path.
struct PathOutcome {
    reference_aborted: bool,
    squares: Vec<Option<f64>>,
    seconds: Vec<f64>,
}

fn run_path(plan: &StudyPlan, model: &Model, ctxs: &[StepContext<'_>], p: usize) -> Result<PathOutcome> {
    let configs = plan.schemes.len() * plan.resolutions.len();
    let fine = FineStream::generate(model.noise(), plan.horizon, plan.fine_steps(), PathSeed::new(plan.seed, p as u64))?;
    let reference = match reference_solution(plan, model, &fine) {
        Ok(r) => r,
        Err(Error::Overflow { .. }) => {
            return Ok(PathOutcome {
                reference_aborted: true,
                squares: vec![None; configs],
                seconds: vec![0.0; configs],
            })
        }
        Err(e) => return Err(e),
    };
    let y0 = plan.initial.build(plan.modes)?;
    let r = plan.norm_exponent();
    let mut squares = Vec::with_capacity(configs);
    let mut seconds = Vec::with_capacity(configs);
    for &scheme in &plan.schemes {
        for (ctx, &m) in ctxs.iter().zip(&plan.resolutions) {
            let start = plan.timing.then(Instant::now);
            let pairs = fine.coarse_pairs(m)?;
            let sq = match evolve(ctx, scheme, &y0, &pairs, None) {
                Ok(t) => Some(model.op().norm_sq(r, &reference.sub(&t.terminal))),
                Err(Error::Overflow { .. }) => None,
                Err(e) => return Err(e),
            };
            squares.push(sq);
            seconds.push(start.map_or(0.0, |s| s.elapsed().as_secs_f64()));
        }
    }
    Ok(PathOutcome {
        reference_aborted: false,
        squares,
        seconds,
    })
}

/// Runs the full study. Paths are processed in parallel and merged in path
/// order, so the report does not depend on the thread count.
pub fn run_study(plan: &StudyPlan) -> Result<ConvergenceReport> {
    plan.validate()?;
    let model = plan.model()?;
    let ctxs: Vec<StepContext<'_>> = plan
        .resolutions
        .iter()
        .map(|&m| StepContext::uniform(&model, plan.horizon, m, IntegralMode::ClosedForm))
        .collect::<Result<_>>()?;
    let outcomes: Vec<PathOutcome> = (0..plan.paths)
        .into_par_iter()
        .map(|p| run_path(plan, &model, &ctxs, p))
        .collect::<Result<_>>()?;

    let aborted_references = outcomes.iter().filter(|o| o.reference_aborted).count();
    let mut rows = Vec::new();
    let mut idx = 0;
    for &scheme in &plan.schemes {
        for &m in &plan.resolutions {
            let squares: Vec<f64> = outcomes.iter().filter_map(|o| o.squares[idx]).collect();
            let aborted = plan.paths - squares.len();
            let (rms, stderr) = rms_from_squares(&squares)
                .map_err(|_| Error::Study(format!("all paths aborted for {scheme} at M = {m}")))?;
            let seconds = plan
                .timing
                .then(|| pairwise_sum(&outcomes.iter().map(|o| o.seconds[idx]).collect::<Vec<_>>()));
            rows.push(ErrorRow {
                scheme,
                m,
                rms,
                stderr,
                aborted,
                seconds,
            });
            idx += 1;
        }
    }
    let orders = plan
        .schemes
        .iter()
        .map(|&scheme| {
            let pts: Vec<(usize, f64)> = rows
                .iter()
                .filter(|r| r.scheme == scheme)
                .map(|r| (r.m, r.rms))
                .collect();
            fit_order(&pts).map(|fit| OrderRow { scheme, fit })
        })
        .collect::<Result<Vec<_>>>()?;

    let reference_check = match (plan.reference_check, plan.reference_kind()) {
        (true, ReferenceKind::WagnerPlaten { steps }) => {
            let coarsest = plan.resolutions[0];
            let floor = rows
                .iter()
                .filter(|r| r.m == coarsest)
                .map(|r| r.rms)
                .fold(f64::INFINITY, f64::min);
            Some(check_reference(plan, &model, steps, floor)?)
        }
        _ => None,
    };

    Ok(ConvergenceReport {
        reference: plan.reference_kind(),
        rows,
        orders,
        aborted_references,
        reference_check,
        commutativity: *model.commutativity(),
    })
}

/// Self-consistency of the reference: `M_ref` versus `2 M_ref` on a subset of
/// paths with their own fine streams.
fn check_reference(plan: &StudyPlan, model: &Model, steps: usize, coarsest_error: f64) -> Result<ReferenceCheck> {
    let paths = plan.paths.min(32);
    let y0 = plan.initial.build(plan.modes)?;
    let coarse = StepContext::uniform(model, plan.horizon, steps, IntegralMode::ClosedForm)?;
    let fine = StepContext::uniform(model, plan.horizon, 2 * steps, IntegralMode::ClosedForm)?;
    let gaps: Vec<Option<f64>> = (0..paths)
        .into_par_iter()
        .map(|p| {
            let seed = PathSeed::new(plan.seed ^ 0x9e37_79b9_7f4a_7c15, p as u64);
            let stream = FineStream::generate(model.noise(), plan.horizon, 2 * steps, seed)?;
            let a = evolve(&fine, Scheme::WagnerPlaten, &y0, &stream.pairs(), None);
            let b = evolve(&coarse, Scheme::WagnerPlaten, &y0, &stream.coarse_pairs(steps)?, None);
            Ok(match (a, b) {
                (Ok(a), Ok(b)) => Some(model.op().norm_sq(plan.norm_exponent(), &a.terminal.sub(&b.terminal))),
                _ => None,
            })
        })
        .collect::<Result<_>>()?;
    let squares: Vec<f64> = gaps.into_iter().flatten().collect();
    let (rms_gap, _) = rms_from_squares(&squares)?;
    let threshold = 0.5 * coarsest_error;
    Ok(ReferenceCheck {
        paths,
        rms_gap,
        threshold,
        passed: rms_gap < threshold,
    })
}

/// Spearman rank correlation; ties receive average ranks.
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = ((n + 1.0) / 2.0, (n + 1.0) / 2.0);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    if vx == 0.0 || vy == 0.0 {
        0.0
    } else {
        cov / (vx * vy).sqrt()
    }
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut out = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = avg;
        }
        i = j + 1;
    }
    out
}

/// One-sided p-value of Spearman's ρ against "no increasing trend" for
/// `values` indexed by position. Exact permutation distribution up to eight
/// points, Student-t approximation beyond.
pub fn spearman_trend_p(values: &[f64]) -> f64 {
    let n = values.len();
    let pos: Vec<f64> = (0..n).map(|i| i as f64).collect();
    let rho = spearman(&pos, values);
    if n <= 8 {
        let ry = ranks(values);
        let mut perm: Vec<usize> = (0..n).collect();
        let (mut hits, mut total) = (0u64, 0u64);
        permute(&mut perm, 0, &mut |p| {
            let shuffled: Vec<f64> = p.iter().map(|&k| ry[k]).collect();
            if spearman(&pos, &shuffled) >= rho - 1e-12 {
                hits += 1;
            }
            total += 1;
        });
        hits as f64 / total as f64
    } else {
        let df = (n - 2) as f64;
        let t = rho * (df / (1.0 - rho * rho).max(1e-300)).sqrt();
        1.0 - StudentsT::new(0.0, 1.0, df).map(|d| d.cdf(t)).unwrap_or(f64::NAN)
    }
}

fn permute(v: &mut Vec<usize>, k: usize, visit: &mut dyn FnMut(&[usize])) {
    if k == v.len() {
        visit(v);
        return;
    }
    for i in k..v.len() {
        v.swap(k, i);
        permute(v, k + 1, visit);
        v.swap(k, i);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MomentRow {
    pub m: usize,
    pub mean: f64,
    pub stderr: f64,
    pub aborted: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentProbe {
    pub gamma: f64,
    pub rows: Vec<MomentRow>,
    pub spearman_rho: f64,
    pub trend_p: f64,
    /// `max − min` of the per-`M` means.
    pub spread: f64,
    /// Three standard errors of the difference between the largest and
    /// smallest mean.
    pub allowance: f64,
    pub no_trend: bool,
    pub bounded: bool,
}

impl MomentProbe {
    pub fn passed(&self) -> bool {
        self.no_trend && self.bounded
    }
}

/// Estimates `E‖Y^M_M‖²_{H_γ}` for each `M` with `paths` independent paths
/// per resolution and judges boundedness in `M`.
pub fn moment_probe(plan: &StudyPlan, scheme: Scheme, resolutions: &[usize], paths: usize) -> Result<MomentProbe> {
    if resolutions.len() < 3 || paths < 2 {
        return Err(Error::Configuration(
            "moment probe needs at least three resolutions and two paths".into(),
        ));
    }
    let model = plan.model()?;
    let gamma = plan.regularity.gamma;
    let y0 = plan.initial.build(plan.modes)?;
    let mut rows = Vec::with_capacity(resolutions.len());
    for (k, &m) in resolutions.iter().enumerate() {
        let ctx = StepContext::uniform(&model, plan.horizon, m, IntegralMode::ClosedForm)?;
        let offset = ((k as u64) + 1) << 32;
        let values: Vec<Option<f64>> = (0..paths)
            .into_par_iter()
            .map(|p| {
                let seed = PathSeed::new(plan.seed, offset + p as u64);
                let stream = FineStream::generate(model.noise(), plan.horizon, m, seed)?;
                match evolve(&ctx, scheme, &y0, &stream.pairs(), None) {
                    Ok(t) => Ok(Some(model.op().norm_sq(gamma, &t.terminal))),
                    Err(Error::Overflow { .. }) => Ok(None),
                    Err(e) => Err(e),
                }
            })
            .collect::<Result<_>>()?;
        let kept: Vec<f64> = values.iter().flatten().copied().collect();
        let aborted = paths - kept.len();
        let (mean, stderr) = if kept.is_empty() {
            (f64::INFINITY, f64::INFINITY)
        } else {
            mean_stderr(&kept)
        };
        rows.push(MomentRow {
            m,
            mean,
            stderr,
            aborted,
        });
    }
    let means: Vec<f64> = rows.iter().map(|r| r.mean).collect();
    let pos: Vec<f64> = (0..means.len()).map(|i| i as f64).collect();
    let spearman_rho = spearman(&pos, &means);
    let trend_p = spearman_trend_p(&means);
    let hi = rows.iter().max_by(|a, b| a.mean.total_cmp(&b.mean)).copied().unwrap_or(rows[0]);
    let lo = rows.iter().min_by(|a, b| a.mean.total_cmp(&b.mean)).copied().unwrap_or(rows[0]);
    let spread = hi.mean - lo.mean;
    let allowance = 3.0 * (hi.stderr.powi(2) + lo.stderr.powi(2)).sqrt();
    Ok(MomentProbe {
        gamma,
        rows,
        spearman_rho,
        trend_p,
        spread,
        allowance,
        no_trend: trend_p >= 0.05,
        bounded: spread.is_finite() && spread <= allowance,
    })
}

/// `‖e^{AT}ξ‖²_{H_γ}`, the moment of the noise-free flow.
pub fn deterministic_moment(plan: &StudyPlan) -> Result<f64> {
    let op = plan.operator()?;
    let y = semigroup_apply(&op, plan.horizon, &plan.initial.build(plan.modes)?)?;
    Ok(op.norm_sq(plan.regularity.gamma, &y))
}

pub fn moments_csv(probe: &MomentProbe) -> String {
    let mut s = String::from("M,mean,stderr,aborted\n");
    for r in &probe.rows {
        let _ = writeln!(s, "{},{:e},{:e},{}", r.m, r.mean, r.stderr, r.aborted);
    }
    s
}

pub fn report_csv(report: &ConvergenceReport) -> String {
    let mut s = String::from("scheme,M,rms,stderr,aborted,seconds\n");
    for r in &report.rows {
        let secs = r.seconds.map_or_else(|| "NA".to_string(), |t| format!("{t:.6}"));
        let _ = writeln!(s, "{},{},{:e},{:e},{},{}", r.scheme, r.m, r.rms, r.stderr, r.aborted, secs);
    }
    s
}

pub fn orders_csv(report: &ConvergenceReport) -> String {
    let mut s = String::from("scheme,slope,ci_lo,ci_hi\n");
    for o in &report.orders {
        let _ = writeln!(s, "{},{:.6},{:.6},{:.6}", o.scheme, o.fit.order, o.fit.ci_lo, o.fit.ci_hi);
    }
    s
}

/// Fixed-size log-log plot of RMS error against `M`, one polyline per
/// scheme.
pub fn convergence_svg(report: &ConvergenceReport) -> String {
    const W: f64 = 640.0;
    const H: f64 = 480.0;
    const PAD: f64 = 64.0;
    const COLORS: [&str; 3] = ["#1f77b4", "#d62728", "#2ca02c"];
    let xs: Vec<f64> = report.rows.iter().map(|r| (r.m as f64).log2()).collect();
    let ys: Vec<f64> = report.rows.iter().map(|r| r.rms.max(1e-300).log10()).collect();
    let (x0, x1) = (xs.iter().cloned().fold(f64::INFINITY, f64::min), xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max));
    let (y0, y1) = (
        ys.iter().cloned().fold(f64::INFINITY, f64::min).floor(),
        ys.iter().cloned().fold(f64::NEG_INFINITY, f64::max).ceil(),
    );
    let (x1, y1) = (if x1 > x0 { x1 } else { x0 + 1.0 }, if y1 > y0 { y1 } else { y0 + 1.0 });
    let px = |x: f64| PAD + (x - x0) / (x1 - x0) * (W - 2.0 * PAD);
    let py = |y: f64| H - PAD - (y - y0) / (y1 - y0) * (H - 2.0 * PAD);

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<path d="M{a} {b} H{c} M{a} {b} V{d}" stroke="black" fill="none"/>"#,
        a = PAD,
        b = H - PAD,
        c = W - PAD,
        d = PAD
    );
    let mut m = x0.round() as i32;
    while f64::from(m) <= x1 + 1e-9 {
        let x = px(f64::from(m));
        let _ = writeln!(s, r#"<line x1="{x:.1}" y1="{:.1}" x2="{x:.1}" y2="{:.1}" stroke="black"/>"#, H - PAD, H - PAD + 5.0);
        let _ = writeln!(s, r#"<text x="{x:.1}" y="{:.1}" text-anchor="middle">{}</text>"#, H - PAD + 20.0, 1u64 << m.max(0));
        m += 1;
    }
    let mut e = y0 as i32;
    while f64::from(e) <= y1 + 1e-9 {
        let y = py(f64::from(e));
        let _ = writeln!(s, r#"<line x1="{:.1}" y1="{y:.1}" x2="{PAD}" y2="{y:.1}" stroke="black"/>"#, PAD - 5.0);
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="end">1e{e}</text>"#, PAD - 8.0, y + 4.0);
        e += 1;
    }
    let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">M</text>"#, W / 2.0, H - 16.0);
    let _ = writeln!(s, r#"<text x="16" y="{:.1}" transform="rotate(-90 16 {:.1})" text-anchor="middle">RMS error</text>"#, H / 2.0, H / 2.0);

    let mut schemes: Vec<Scheme> = report.rows.iter().map(|r| r.scheme).collect();
    schemes.dedup();
    for (k, scheme) in schemes.iter().enumerate() {
        let color = COLORS[k % COLORS.len()];
        let pts: Vec<String> = report
            .rows
            .iter()
            .filter(|r| r.scheme == *scheme)
            .map(|r| format!("{:.1},{:.1}", px((r.m as f64).log2()), py(r.rms.max(1e-300).log10())))
            .collect();
        let _ = writeln!(s, r#"<polyline points="{}" stroke="{color}" stroke-width="2" fill="none"/>"#, pts.join(" "));
        let label = match report.order(*scheme) {
            Some(f) => format!("{scheme} ({:.2})", f.order),
            None => scheme.to_string(),
        };
        let ly = PAD + 18.0 * k as f64;
        let _ = writeln!(s, r#"<line x1="{:.1}" y1="{ly:.1}" x2="{:.1}" y2="{ly:.1}" stroke="{color}" stroke-width="2"/>"#, W - PAD - 170.0, W - PAD - 150.0);
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}">{label}</text>"#, W - PAD - 145.0, ly + 4.0);
    }
    s.push_str("</svg>\n");
    s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub library: String,
    pub version: String,
    pub plan: StudyPlan,
    pub seed: u64,
    pub reference: ReferenceKind,
    pub reference_check: Option<ReferenceCheck>,
    pub aborted_references: usize,
    pub commutativity: CommutativityReport,
    pub artifacts: Vec<String>,
}

/// Writes `report.csv`, `orders.csv`, optionally `convergence.svg`, any
/// `extra` `(name, contents)` files, and `manifest.json` listing all of them
/// into `dir`.
pub fn write_artifacts(
    plan: &StudyPlan,
    report: &ConvergenceReport,
    dir: &Path,
    svg: bool,
    extra: &[(String, String)],
) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut files = vec![
        ("report.csv".to_string(), report_csv(report)),
        ("orders.csv".to_string(), orders_csv(report)),
    ];
    if svg {
        files.push(("convergence.svg".into(), convergence_svg(report)));
    }
    files.extend(extra.iter().cloned());
    let mut artifacts: Vec<String> = files.iter().map(|(n, _)| n.clone()).collect();
    artifacts.push("manifest.json".into());
    let manifest = Manifest {
        library: env!("CARGO_PKG_NAME").into(),
        version: env!("CARGO_PKG_VERSION").into(),
        plan: plan.clone(),
        seed: plan.seed,
        reference: report.reference,
        reference_check: report.reference_check,
        aborted_references: report.aborted_references,
        commutativity: report.commutativity,
        artifacts,
    };
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Io(e.to_string()))?;
    files.push(("manifest.json".into(), json + "\n"));
    let mut written = Vec::new();
    for (name, body) in files {
        let path = dir.join(&name);
        fs::write(&path, body)?;
        written.push(path);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::Rng;

    #[test]
    fn fit_order_examples() {
        let pts: Vec<(usize, f64)> = [4usize, 8, 16, 32].iter().map(|&m| (m, 4.0 * (m as f64).powf(-1.5))).collect();
        let f = fit_order(&pts).unwrap();
        assert_relative_eq!(f.order, 1.5, max_relative = 1e-12);
        assert!(f.ci_hi - f.ci_lo < 1e-10);

        let flat = fit_order(&[(4, 0.3), (8, 0.3), (16, 0.3)]).unwrap();
        assert_eq!(flat.order, 0.0);

        assert!(matches!(fit_order(&[(4, 0.3), (8, 0.0), (16, 0.1)]), Err(Error::Domain(_))));
        assert!(matches!(fit_order(&[(4, 0.3), (8, 0.1)]), Err(Error::Domain(_))));
    }

    #[test]
    fn fit_order_with_multiplicative_noise() {
        let mut rng = PathSeed::new(3, 0).rng();
        let mut inside = 0;
        for _ in 0..200 {
            let pts: Vec<(usize, f64)> = [4usize, 8, 16, 32]
                .iter()
                .map(|&m| {
                    let n: f64 = rng.sample(rand_distr::StandardNormal);
                    (m, 4.0 * (m as f64).powf(-1.5) * (1.0 + 0.05 * n))
                })
                .collect();
            let f = fit_order(&pts).unwrap();
            if (1.35..=1.65).contains(&f.order) {
                inside += 1;
            }
        }
        assert!(inside >= 190, "{inside}");
    }

    #[test]
    fn pairwise_sum_and_stderr() {
        let xs: Vec<f64> = (1..=100).map(f64::from).collect();
        assert_eq!(pairwise_sum(&xs), 5050.0);
        let (m, se) = mean_stderr(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m, 2.5);
        assert_relative_eq!(se, (5.0f64 / 12.0).sqrt(), max_relative = 1e-15);
        let (r, s) = rms_from_squares(&[4.0, 4.0]).unwrap();
        assert_eq!((r, s), (2.0, 0.0));
        assert!(rms_from_squares(&[]).is_err());
    }

    #[test]
    fn spearman_examples() {
        assert_relative_eq!(spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]), 1.0);
        assert_relative_eq!(spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]), -1.0);
        // Strictly increasing 7 points: only the identity permutation ties.
        let p = spearman_trend_p(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0]);
        assert_relative_eq!(p, 1.0 / 5040.0, max_relative = 1e-12);
        assert_eq!(spearman_trend_p(&[7.0, 6.0, 5.0, 4.0, 3.0, 2.0, 1.0]), 1.0);
        assert_eq!(spearman_trend_p(&[2.0; 5]), 1.0);
        let big: Vec<f64> = (0..20).map(f64::from).collect();
        assert!(spearman_trend_p(&big) < 1e-6);
    }

    #[test]
    fn plan_validation() {
        assert!(StudyPlan::default().validate().is_ok());
        let bad = [
            StudyPlan {
                paths: 1,
                ..Default::default()
            },
            StudyPlan {
                resolutions: vec![4, 8],
                ..Default::default()
            },
            StudyPlan {
                resolutions: vec![8, 4, 16],
                ..Default::default()
            },
            StudyPlan {
                resolutions: vec![4, 6, 8],
                ..Default::default()
            },
            StudyPlan {
                reference_multiplier: 4,
                ..Default::default()
            },
            StudyPlan {
                schemes: vec![],
                ..Default::default()
            },
        ];
        for p in bad {
            assert!(matches!(p.validate(), Err(Error::Configuration(_))), "{p:?}");
        }
        let p = StudyPlan {
            regularity: Regularity {
                gamma: 1.6,
                ..Default::default()
            },
            ..Default::default()
        };
        assert!(matches!(p.validate(), Err(Error::Constraint(_))));
    }

    #[test]
    fn parabola_coefficients() {
        let v = InitialCondition::Parabola.build(4).unwrap();
        assert_relative_eq!(v.coeffs()[0], 0.182_442_229_611_094_35, max_relative = 1e-14);
        assert_eq!(v.coeffs()[1], 0.0);
        assert_relative_eq!(v.coeffs()[2], 0.182_442_229_611_094_35 / 27.0, max_relative = 1e-14);
    }

    fn zero_plan() -> StudyPlan {
        StudyPlan {
            coefficients: Builtin::Zero,
            modes: 6,
            paths: 4,
            resolutions: vec![2, 4, 8],
            reference_multiplier: 8,
            ..Default::default()
        }
    }

    #[test]
    fn zero_reference_is_semigroup_flow() {
        let plan = zero_plan();
        let model = plan.model().unwrap();
        let fine = FineStream::generate(model.noise(), 1.0, plan.fine_steps(), PathSeed::new(1, 0)).unwrap();
        let r = reference_solution(&plan, &model, &fine).unwrap();
        let exact = semigroup_apply(model.op(), 1.0, &plan.initial.build(6).unwrap()).unwrap();
        assert!(r.sub(&exact).norm() <= 1e-13 * exact.norm());
        let m = deterministic_moment(&plan).unwrap();
        let probe = moment_probe(&plan, Scheme::WagnerPlaten, &[2, 4, 8, 16], 3).unwrap();
        for row in &probe.rows {
            assert_relative_eq!(row.mean, m, max_relative = 1e-12);
        }
    }

    #[test]
    fn self_comparison_has_zero_error() {
        // Measuring Wagner–Platen at M_ref against itself.
        let plan = StudyPlan {
            modes: 4,
            paths: 3,
            resolutions: vec![1, 2, 4],
            reference_multiplier: 8,
            schemes: vec![Scheme::WagnerPlaten],
            reference_check: false,
            ..Default::default()
        };
        let model = plan.model().unwrap();
        let fine = FineStream::generate(model.noise(), 1.0, 32, PathSeed::new(plan.seed, 0)).unwrap();
        let r = reference_solution(&plan, &model, &fine).unwrap();
        let ctx = StepContext::uniform(&model, 1.0, 32, IntegralMode::ClosedForm).unwrap();
        let y = evolve(&ctx, Scheme::WagnerPlaten, &plan.initial.build(4).unwrap(), &fine.coarse_pairs(32).unwrap(), None)
            .unwrap();
        assert_eq!(y.terminal, r);
    }

    #[test]
    fn gbm_study_rates_and_determinism() {
        let plan = StudyPlan {
            paths: 400,
            ..StudyPlan::scalar_gbm(1.0, 1.0, 1.0)
        };
        let a = run_study(&plan).unwrap();
        assert_eq!(a.reference, ReferenceKind::Exact);
        let euler: Vec<f64> = a.rows.iter().filter(|r| r.scheme == Scheme::Euler).map(|r| r.rms).collect();
        for w in euler.windows(2) {
            assert!(w[1] < w[0]);
        }
        assert!(a.order(Scheme::WagnerPlaten).unwrap().order > a.order(Scheme::Milstein).unwrap().order);
        let b = run_study(&plan).unwrap();
        assert_eq!(report_csv(&a), report_csv(&b));
        assert!(report_csv(&a).lines().nth(1).unwrap().ends_with(",NA"));
    }

    #[test]
    fn artifacts_are_written_and_listed() {
        let plan = zero_plan();
        let report = run_study(&StudyPlan {
            coefficients: Builtin::LinearMult { sigma: 0.5 },
            ..plan.clone()
        })
        .unwrap();
        let dir = std::env::temp_dir().join(format!("expwp-artifacts-{}", std::process::id()));
        let files = write_artifacts(&plan, &report, &dir, true, &[("extra.txt".into(), "x\n".into())]).unwrap();
        assert_eq!(files.len(), 5);
        let manifest: Manifest = serde_json::from_str(&fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap();
        assert_eq!(manifest.artifacts.len(), 5);
        assert!(manifest.artifacts.contains(&"extra.txt".to_string()));
        assert_eq!(manifest.plan, plan);
        let svg = fs::read_to_string(dir.join("convergence.svg")).unwrap();
        assert_eq!(svg.matches("<polyline").count(), 3);
        fs::remove_dir_all(dir).unwrap();
    }

    #[test]
    fn plan_round_trips_through_json() {
        let plan = StudyPlan::scalar_gbm(1.0, 0.5, 2.0);
        let s = serde_json::to_string(&plan).unwrap();
        assert_eq!(serde_json::from_str::<StudyPlan>(&s).unwrap(), plan);
        let partial: StudyPlan = serde_json::from_str(r#"{"paths": 10}"#).unwrap();
        assert_eq!(partial.paths, 10);
        assert_eq!(partial.modes, 32);
        assert!(serde_json::from_str::<StudyPlan>(r#"{"pathz": 10}"#).is_err());
    }
}
