//! Randomized probes for the structural hypotheses the schemes rely on.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::Coefficients;
use crate::spectral::SpectralVector;
use crate::stochastics::{NoiseSpec, PathSeed};

/// How many random probes to draw and what residual counts as a pass.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    pub probes: usize,
    pub tol: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            probes: 32,
            tol: 1e-8,
            seed: 0x5eed_c0ff_ee00,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CommutativityCheck {
    pub passed: bool,
    pub max_residual: f64,
}

impl CommutativityCheck {
    fn from_residual(max_residual: f64, tol: f64) -> Self {
        Self {
            passed: max_residual <= tol,
            max_residual,
        }
    }
}

/// Outcome of both commutativity checks over several random states.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CommutativityReport {
    pub first: CommutativityCheck,
    pub second: CommutativityCheck,
}

impl CommutativityReport {
    pub fn passed(&self) -> bool {
        self.first.passed && self.second.passed
    }
}

fn normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.sample(StandardNormal)
}

/// Random `U_0` direction `Σ a_j g_j`, `a_j ~ N(0,1)`.
fn probe_direction<R: Rng + ?Sized>(noise: &NoiseSpec, rng: &mut R) -> Vec<f64> {
    noise.q().iter().map(|q| normal(rng) * q.sqrt()).collect()
}

fn probe_state<R: Rng + ?Sized>(n: usize, rng: &mut R) -> SpectralVector {
    SpectralVector::from_raw((0..n).map(|i| normal(rng) / (1.0 + i as f64)).collect())
}

fn relative_gap(a: &SpectralVector, b: &SpectralVector) -> f64 {
    let scale = a.norm().max(b.norm());
    if scale == 0.0 {
        0.0
    } else {
        a.sub(b).norm() / scale
    }
}

/// Symmetry of `(u1, u2) ↦ B′(v)(B(v)u1)u2` on random probes.
pub fn check_commutativity_first<C: Coefficients + ?Sized>(
    c: &C,
    v: &SpectralVector,
    noise: &NoiseSpec,
    cfg: &ProbeConfig,
) -> CommutativityCheck {
    let mut rng = PathSeed::new(cfg.seed, 1).rng();
    let mut worst: f64 = 0.0;
    for _ in 0..cfg.probes {
        let u1 = probe_direction(noise, &mut rng);
        let u2 = probe_direction(noise, &mut rng);
        let a = c.diffusion_derivative(v, &c.diffusion(v, &u1), &u2);
        let b = c.diffusion_derivative(v, &c.diffusion(v, &u2), &u1);
        worst = worst.max(relative_gap(&a, &b));
    }
    CommutativityCheck::from_residual(worst, cfg.tol)
}

fn trilinear<C: Coefficients + ?Sized>(c: &C, v: &SpectralVector, u: [&[f64]; 3]) -> SpectralVector {
    let b1 = c.diffusion(v, u[0]);
    let mut out = c.diffusion_derivative(v, &c.diffusion_derivative(v, &b1, u[1]), u[2]);
    if !c.diffusion_is_affine() {
        let b2 = c.diffusion(v, u[1]);
        out.add_scaled(1.0, &c.diffusion_second_derivative(v, &b1, &b2, u[2]));
    }
    out
}

/// Full `S_3` symmetry of
/// `(u1, u2, u3) ↦ [B′(v)(B′(v)(B(v)u1)u2) + B″(v)(B(v)u1, B(v)u2)]u3`.
pub fn check_commutativity_second<C: Coefficients + ?Sized>(
    c: &C,
    v: &SpectralVector,
    noise: &NoiseSpec,
    cfg: &ProbeConfig,
) -> CommutativityCheck {
    const PERMS: [[usize; 3]; 5] = [[0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
    let mut rng = PathSeed::new(cfg.seed, 2).rng();
    let mut worst: f64 = 0.0;
    for _ in 0..cfg.probes {
        let u: Vec<Vec<f64>> = (0..3).map(|_| probe_direction(noise, &mut rng)).collect();
        let base = trilinear(c, v, [&u[0], &u[1], &u[2]]);
        for p in PERMS {
            let other = trilinear(c, v, [&u[p[0]], &u[p[1]], &u[p[2]]]);
            worst = worst.max(relative_gap(&base, &other));
        }
    }
    CommutativityCheck::from_residual(worst, cfg.tol)
}

/// Runs both checks at `cfg.probes` random states and keeps the worst
/// residual of each.
pub fn verify_commutativity<C: Coefficients + ?Sized>(c: &C, noise: &NoiseSpec, cfg: &ProbeConfig) -> CommutativityReport {
    let mut rng = PathSeed::new(cfg.seed, 0).rng();
    let states = 4;
    let per_state = ProbeConfig {
        probes: cfg.probes.div_ceil(states).max(1),
        ..*cfg
    };
    let mut first: f64 = 0.0;
    let mut second: f64 = 0.0;
    for s in 0..states {
        let v = probe_state(c.state_dim(), &mut rng);
        let cfg_s = ProbeConfig {
            seed: cfg.seed.wrapping_add(s as u64 + 1),
            ..per_state
        };
        first = first.max(check_commutativity_first(c, &v, noise, &cfg_s).max_residual);
        second = second.max(check_commutativity_second(c, &v, noise, &cfg_s).max_residual);
    }
    CommutativityReport {
        first: CommutativityCheck::from_residual(first, cfg.tol),
        second: CommutativityCheck::from_residual(second, cfg.tol),
    }
}

/// Worst relative discrepancies between the analytic derivative actions and
/// central finite differences, plus the worst linearity/symmetry defect.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct DerivativeCheck {
    pub drift_first: f64,
    pub drift_second: f64,
    pub diffusion_first: f64,
    pub diffusion_second: f64,
    pub linearity: f64,
    pub symmetry: f64,
}

/// Compares `F′, F″, B′, B″` with central differences of `F, F′, B, B′`
/// along random directions at `v`, using step `h`.
pub fn check_derivatives<C: Coefficients + ?Sized>(
    c: &C,
    v: &SpectralVector,
    noise: &NoiseSpec,
    h: f64,
    cfg: &ProbeConfig,
) -> DerivativeCheck {
    let n = c.state_dim();
    let mut rng = PathSeed::new(cfg.seed, 3).rng();
    let mut out = DerivativeCheck::default();
    let shifted = |w: &SpectralVector, s: f64| {
        let mut x = v.clone();
        x.add_scaled(s, w);
        x
    };
    for _ in 0..cfg.probes {
        let w1 = probe_state(n, &mut rng);
        let w2 = probe_state(n, &mut rng);
        let u = probe_direction(noise, &mut rng);
        let (vp, vm) = (shifted(&w1, h), shifted(&w1, -h));

        let fd = c.drift(&vp).sub(&c.drift(&vm)).scaled(0.5 / h);
        out.drift_first = out.drift_first.max(relative_gap(&fd, &c.drift_derivative(v, &w1)));

        let fd = c
            .drift_derivative(&vp, &w2)
            .sub(&c.drift_derivative(&vm, &w2))
            .scaled(0.5 / h);
        let f2 = c.drift_second_derivative(v, &w1, &w2);
        out.drift_second = out.drift_second.max(relative_gap(&fd, &f2));

        let fd = c.diffusion(&vp, &u).sub(&c.diffusion(&vm, &u)).scaled(0.5 / h);
        out.diffusion_first = out
            .diffusion_first
            .max(relative_gap(&fd, &c.diffusion_derivative(v, &w1, &u)));

        let fd = c
            .diffusion_derivative(&vp, &w2, &u)
            .sub(&c.diffusion_derivative(&vm, &w2, &u))
            .scaled(0.5 / h);
        let b2 = c.diffusion_second_derivative(v, &w1, &w2, &u);
        out.diffusion_second = out.diffusion_second.max(relative_gap(&fd, &b2));

        // Linearity in the bracketed slot: D(a w1 + b w2) = a D(w1) + b D(w2).
        let (a, b) = (normal(&mut rng), normal(&mut rng));
        let mut combo = w1.scaled(a);
        combo.add_scaled(b, &w2);
        let mut lin = c.drift_derivative(v, &w1).scaled(a);
        lin.add_scaled(b, &c.drift_derivative(v, &w2));
        out.linearity = out.linearity.max(relative_gap(&c.drift_derivative(v, &combo), &lin));
        let mut lin = c.diffusion_derivative(v, &w1, &u).scaled(a);
        lin.add_scaled(b, &c.diffusion_derivative(v, &w2, &u));
        out.linearity = out
            .linearity
            .max(relative_gap(&c.diffusion_derivative(v, &combo, &u), &lin));
        let mut lin = c.drift_second_derivative(v, &w1, &w2).scaled(a);
        lin.add_scaled(b, &c.drift_second_derivative(v, &w2, &w2));
        out.linearity = out
            .linearity
            .max(relative_gap(&c.drift_second_derivative(v, &combo, &w2), &lin));
        let mut lin = c.diffusion_second_derivative(v, &w1, &w2, &u).scaled(a);
        lin.add_scaled(b, &c.diffusion_second_derivative(v, &w2, &w2, &u));
        out.linearity = out
            .linearity
            .max(relative_gap(&c.diffusion_second_derivative(v, &combo, &w2, &u), &lin));

        out.symmetry = out
            .symmetry
            .max(relative_gap(&f2, &c.drift_second_derivative(v, &w2, &w1)));
        out.symmetry = out
            .symmetry
            .max(relative_gap(&b2, &c.diffusion_second_derivative(v, &w2, &w1, &u)));
    }
    out
}
