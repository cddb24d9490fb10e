//! Q-Wiener increments, their time integrals and path coupling.
//!
//! Noise lives in `U = span(ũ_1, …, ũ_J)`. Vectors in `U` are stored by their
//! coordinates in `(ũ_j)`; the orthonormal basis of `U_0 = Q^{1/2}(U)` is
//! `g_j = √q_j ũ_j`. Per step and mode we draw the pair
//! `(ΔW_j, ΔZ_j) = (W_{t+Δ} - W_t, ∫_t^{t+Δ} (W_s - W_t) ds)` with
//! covariance `q_j [[Δ, Δ²/2], [Δ²/2, Δ³/3]]`.

use std::io::{BufRead, Write};

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spectral::SpectralVector;

/// Eigenvalues of the covariance `Q` and the embedding of noise modes into
/// the state basis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    q: Vec<f64>,
    mode_map: Vec<usize>,
    state_dim: usize,
}

impl NoiseSpec {
    /// `mode_map[j]` is the (zero based) state index that noise mode `j`
    /// is identified with. The map must be injective.
    pub fn new(q: Vec<f64>, mode_map: Vec<usize>, state_dim: usize) -> Result<Self> {
        if q.is_empty() {
            return Err(Error::Configuration("noise needs at least one mode".into()));
        }
        if q.len() != mode_map.len() {
            return Err(Error::DimensionMismatch {
                context: "noise mode map",
                expected: q.len(),
                found: mode_map.len(),
            });
        }
        for (j, &qj) in q.iter().enumerate() {
            if !(qj.is_finite() && qj > 0.0) {
                return Err(Error::Configuration(format!(
                    "covariance eigenvalue q_{} = {qj} must be finite and positive",
                    j + 1
                )));
            }
        }
        let mut seen = vec![false; state_dim];
        for &m in &mode_map {
            if m >= state_dim {
                return Err(Error::Configuration(format!(
                    "noise mode mapped to state index {m} outside 0..{state_dim}"
                )));
            }
            if std::mem::replace(&mut seen[m], true) {
                return Err(Error::Configuration(format!(
                    "noise mode map is not injective (index {m} repeated)"
                )));
            }
        }
        Ok(Self {
            q,
            mode_map,
            state_dim,
        })
    }

    /// Identity mode map; requires `q.len() <= state_dim`.
    pub fn diagonal(q: Vec<f64>, state_dim: usize) -> Result<Self> {
        let map = (0..q.len()).collect();
        Self::new(q, map, state_dim)
    }

    pub fn dim(&self) -> usize {
        self.q.len()
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn q(&self) -> &[f64] {
        &self.q
    }

    pub fn mode_map(&self) -> &[usize] {
        &self.mode_map
    }

    pub fn trace(&self) -> f64 {
        self.q.iter().sum()
    }

    /// Same modes, every `q_j` multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> Result<Self> {
        Self::new(
            self.q.iter().map(|q| q * factor).collect(),
            self.mode_map.clone(),
            self.state_dim,
        )
    }

    /// The canonical orthonormal basis `(g_j)` of `U_0` in `U`-coordinates.
    pub fn basis(&self) -> Vec<Vec<f64>> {
        (0..self.dim())
            .map(|j| {
                let mut g = vec![0.0; self.dim()];
                g[j] = self.q[j].sqrt();
                g
            })
            .collect()
    }

    /// `⟨u, w⟩_{U_0} = Σ u_j w_j / q_j`.
    pub fn u0_inner(&self, u: &[f64], w: &[f64]) -> f64 {
        u.iter()
            .zip(w)
            .zip(&self.q)
            .map(|((a, b), q)| a * b / q)
            .sum()
    }

    /// Identifies a noise vector with a state vector through the mode map.
    pub fn embed(&self, u: &[f64]) -> SpectralVector {
        let mut out = vec![0.0; self.state_dim];
        for (&m, &x) in self.mode_map.iter().zip(u) {
            out[m] = x;
        }
        SpectralVector::from_raw(out)
    }
}

/// One step's worth of `(ΔW, ΔZ)` in `U`-coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IncrementPair {
    pub dw: Vec<f64>,
    pub dz: Vec<f64>,
}

impl IncrementPair {
    pub fn zeros(modes: usize) -> Self {
        Self {
            dw: vec![0.0; modes],
            dz: vec![0.0; modes],
        }
    }

    pub fn modes(&self) -> usize {
        self.dw.len()
    }
}

/// Maps two standard normals per mode onto an increment pair:
/// `ΔW = √(qΔ) ξ`, `ΔZ = √q Δ^{3/2} (ξ/2 + η/(2√3))`.
pub fn pair_from_normals(noise: &NoiseSpec, dt: f64, xi: &[f64], eta: &[f64]) -> Result<IncrementPair> {
    check_dt(dt)?;
    let j = noise.dim();
    if xi.len() != j || eta.len() != j {
        return Err(Error::DimensionMismatch {
            context: "normal variates",
            expected: j,
            found: xi.len().min(eta.len()),
        });
    }
    let mut pair = IncrementPair::zeros(j);
    let sdt = dt.sqrt();
    let dt32 = dt * sdt;
    let c = 0.5 / 3f64.sqrt();
    for m in 0..j {
        let sq = noise.q[m].sqrt();
        pair.dw[m] = sq * sdt * xi[m];
        pair.dz[m] = sq * dt32 * (0.5 * xi[m] + c * eta[m]);
    }
    Ok(pair)
}

/// Draws `(ΔW_j, ΔZ_j)` for every mode, consuming `ξ` then `η` per mode.
pub fn sample_pair<R: rand::Rng + ?Sized>(noise: &NoiseSpec, dt: f64, rng: &mut R) -> Result<IncrementPair> {
    check_dt(dt)?;
    let mut pair = IncrementPair::zeros(noise.dim());
    fill_pair(noise, dt, rng, &mut pair.dw, &mut pair.dz);
    Ok(pair)
}

fn fill_pair<R: rand::Rng + ?Sized>(noise: &NoiseSpec, dt: f64, rng: &mut R, dw: &mut [f64], dz: &mut [f64]) {
    let sdt = dt.sqrt();
    let dt32 = dt * sdt;
    let c = 0.5 / 3f64.sqrt();
    for m in 0..noise.dim() {
        let xi: f64 = StandardNormal.sample(rng);
        let eta: f64 = StandardNormal.sample(rng);
        let sq = noise.q[m].sqrt();
        dw[m] = sq * sdt * xi;
        dz[m] = sq * dt32 * (0.5 * xi + c * eta);
    }
}

fn check_dt(dt: f64) -> Result<()> {
    if !(dt.is_finite() && dt > 0.0) {
        return Err(Error::Domain(format!("step size must be positive, got {dt}")));
    }
    Ok(())
}

/// Combines consecutive sub-step pairs of common length `delta` into the
/// pair over their union. Exact:
/// `ΔZ = Σ_m (ΔZ_m + (k-1-m) δ ΔW_m)`.
pub fn aggregate_pairs(pairs: &[IncrementPair], delta: f64) -> Result<IncrementPair> {
    let first = pairs
        .first()
        .ok_or_else(|| Error::Domain("cannot aggregate an empty sequence of increments".into()))?;
    check_dt(delta)?;
    let j = first.modes();
    let k = pairs.len();
    let mut out = IncrementPair::zeros(j);
    for (m, p) in pairs.iter().enumerate() {
        if p.modes() != j || p.dz.len() != j {
            return Err(Error::DimensionMismatch {
                context: "aggregated increments",
                expected: j,
                found: p.modes(),
            });
        }
        let lever = (k - 1 - m) as f64 * delta;
        for i in 0..j {
            out.dw[i] += p.dw[i];
            out.dz[i] += p.dz[i] + lever * p.dw[i];
        }
    }
    Ok(out)
}

/// Identifies one Monte-Carlo path: `(master seed, path index)`.
///
/// The generator is ChaCha12 keyed by the master seed with the path index
/// as stream id, so every path is an independent, reproducible stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PathSeed {
    pub master: u64,
    pub path: u64,
}

impl PathSeed {
    pub fn new(master: u64, path: u64) -> Self {
        Self { master, path }
    }

    pub fn rng(&self) -> ChaCha12Rng {
        let mut rng = ChaCha12Rng::seed_from_u64(self.master);
        rng.set_stream(self.path);
        rng
    }
}

/// All increments of one path at the finest resolution of a study.
///
/// Variates are drawn step-major, mode-minor, `ξ` before `η`. Every coarser
/// resolution is obtained by [`FineStream::coarse_pairs`], so all schemes
/// and step counts see the same Brownian path.
#[derive(Debug, Clone, PartialEq)]
pub struct FineStream {
    steps: usize,
    modes: usize,
    dt: f64,
    dw: Vec<f64>,
    dz: Vec<f64>,
}

impl FineStream {
    pub fn generate(noise: &NoiseSpec, horizon: f64, steps: usize, seed: PathSeed) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Domain("fine stream needs at least one step".into()));
        }
        let dt = horizon / steps as f64;
        check_dt(dt)?;
        let j = noise.dim();
        let mut rng = seed.rng();
        let mut dw = vec![0.0; steps * j];
        let mut dz = vec![0.0; steps * j];
        for (cw, cz) in dw.chunks_exact_mut(j).zip(dz.chunks_exact_mut(j)) {
            fill_pair(noise, dt, &mut rng, cw, cz);
        }
        Ok(Self {
            steps,
            modes: j,
            dt,
            dw,
            dz,
        })
    }

    pub fn from_pairs(pairs: &[IncrementPair], dt: f64) -> Result<Self> {
        check_dt(dt)?;
        let first = pairs
            .first()
            .ok_or_else(|| Error::Domain("empty increment sequence".into()))?;
        let modes = first.modes();
        let mut dw = Vec::with_capacity(pairs.len() * modes);
        let mut dz = Vec::with_capacity(pairs.len() * modes);
        for p in pairs {
            if p.modes() != modes || p.dz.len() != modes {
                return Err(Error::DimensionMismatch {
                    context: "fine stream",
                    expected: modes,
                    found: p.modes(),
                });
            }
            dw.extend_from_slice(&p.dw);
            dz.extend_from_slice(&p.dz);
        }
        Ok(Self {
            steps: pairs.len(),
            modes,
            dt,
            dw,
            dz,
        })
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn modes(&self) -> usize {
        self.modes
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn pair(&self, step: usize) -> IncrementPair {
        let r = step * self.modes..(step + 1) * self.modes;
        IncrementPair {
            dw: self.dw[r.clone()].to_vec(),
            dz: self.dz[r].to_vec(),
        }
    }

    pub fn pairs(&self) -> Vec<IncrementPair> {
        (0..self.steps).map(|s| self.pair(s)).collect()
    }

    /// Increments for `coarse_steps` equal steps over the same horizon.
    pub fn coarse_pairs(&self, coarse_steps: usize) -> Result<Vec<IncrementPair>> {
        if coarse_steps == 0 || self.steps % coarse_steps != 0 {
            return Err(Error::Configuration(format!(
                "{coarse_steps} steps do not divide the fine resolution {}",
                self.steps
            )));
        }
        let k = self.steps / coarse_steps;
        let j = self.modes;
        let mut out = Vec::with_capacity(coarse_steps);
        for c in 0..coarse_steps {
            let mut pair = IncrementPair::zeros(j);
            for m in 0..k {
                let s = c * k + m;
                let lever = (k - 1 - m) as f64 * self.dt;
                let base = s * j;
                for i in 0..j {
                    let w = self.dw[base + i];
                    pair.dw[i] += w;
                    pair.dz[i] += self.dz[base + i] + lever * w;
                }
            }
            out.push(pair);
        }
        Ok(out)
    }

    /// Total `W_T - W_0`.
    pub fn total(&self) -> Vec<f64> {
        let mut w = vec![0.0; self.modes];
        for chunk in self.dw.chunks_exact(self.modes) {
            w.iter_mut().zip(chunk).for_each(|(a, b)| *a += b);
        }
        w
    }
}

/// Writes increments as CSV rows `step,j,dW,dZ` (one row per step and mode).
pub fn write_increment_trace<W: Write>(mut out: W, pairs: &[IncrementPair]) -> Result<()> {
    writeln!(out, "step,j,dW,dZ")?;
    for (s, p) in pairs.iter().enumerate() {
        for (j, (w, z)) in p.dw.iter().zip(&p.dz).enumerate() {
            writeln!(out, "{s},{j},{w:e},{z:e}")?;
        }
    }
    Ok(())
}

/// Reads back a trace written by [`write_increment_trace`].
pub fn read_increment_trace<R: BufRead>(input: R) -> Result<Vec<IncrementPair>> {
    let mut pairs: Vec<IncrementPair> = Vec::new();
    for (lineno, line) in input.lines().enumerate() {
        let line = line?;
        if lineno == 0 || line.trim().is_empty() {
            continue;
        }
        let bad = || Error::Io(format!("malformed trace line {}: {line}", lineno + 1));
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 4 {
            return Err(bad());
        }
        let step: usize = fields[0].parse().map_err(|_| bad())?;
        let j: usize = fields[1].parse().map_err(|_| bad())?;
        let w: f64 = fields[2].parse().map_err(|_| bad())?;
        let z: f64 = fields[3].parse().map_err(|_| bad())?;
        if step == pairs.len() && j == 0 {
            pairs.push(IncrementPair::zeros(0));
        }
        let p = pairs.get_mut(step).ok_or_else(bad)?;
        if p.dw.len() != j {
            return Err(bad());
        }
        p.dw.push(w);
        p.dz.push(z);
    }
    Ok(pairs)
}

/// Iterated Itô integrals of the scalar Brownian motions `β_j = ⟨g_j, W⟩_{U_0}`
/// over one step, plus the time integrals `∫ (β_s - β_{t0}) ds`.
///
/// `double[i * J + j] = I_{(i,j)}` and
/// `triple[(i * J + j) * J + k] = I_{(i,j,k)}`, with the innermost index
/// first as in `I_{(i,j)} = ∫∫ dβ_i dβ_j`.
#[derive(Debug, Clone, PartialEq)]
pub struct SuppliedIntegrals {
    pub dt: f64,
    pub single: Vec<f64>,
    pub double: Vec<f64>,
    pub triple: Vec<f64>,
    pub time: Vec<f64>,
}

impl SuppliedIntegrals {
    pub fn modes(&self) -> usize {
        self.single.len()
    }

    pub fn validate(&self) -> Result<()> {
        let j = self.single.len();
        let checks = [
            ("double integrals", j * j, self.double.len()),
            ("triple integrals", j * j * j, self.triple.len()),
            ("time integrals", j, self.time.len()),
        ];
        for (context, expected, found) in checks {
            if expected != found {
                return Err(Error::DimensionMismatch {
                    context,
                    expected,
                    found,
                });
            }
        }
        Ok(())
    }

    pub fn double(&self, i: usize, j: usize) -> f64 {
        self.double[i * self.modes() + j]
    }

    pub fn triple(&self, i: usize, j: usize, k: usize) -> f64 {
        let n = self.modes();
        self.triple[(i * n + j) * n + k]
    }

    /// The symmetric parts implied by the Itô product identities, i.e. what
    /// the commutative closed forms substitute for the iterated integrals:
    /// `I_{(i,j)} → (I_i I_j - δ_ij Δ)/2` and
    /// `I_{(i,j,k)} → (I_i I_j I_k - Δ(δ_ij I_k + δ_ik I_j + δ_jk I_i))/6`.
    pub fn symmetrized(noise: &NoiseSpec, pair: &IncrementPair, dt: f64) -> Result<Self> {
        check_dt(dt)?;
        let n = noise.dim();
        if pair.modes() != n {
            return Err(Error::DimensionMismatch {
                context: "increment pair",
                expected: n,
                found: pair.modes(),
            });
        }
        let single: Vec<f64> = (0..n).map(|i| pair.dw[i] / noise.q[i].sqrt()).collect();
        let time: Vec<f64> = (0..n).map(|i| pair.dz[i] / noise.q[i].sqrt()).collect();
        let d = |a: usize, b: usize| if a == b { 1.0 } else { 0.0 };
        let mut double = vec![0.0; n * n];
        let mut triple = vec![0.0; n * n * n];
        for i in 0..n {
            for j in 0..n {
                double[i * n + j] = 0.5 * (single[i] * single[j] - d(i, j) * dt);
                for k in 0..n {
                    triple[(i * n + j) * n + k] = (single[i] * single[j] * single[k]
                        - dt * (d(i, j) * single[k] + d(i, k) * single[j] + d(j, k) * single[i]))
                        / 6.0;
                }
            }
        }
        Ok(Self {
            dt,
            single,
            double,
            triple,
            time,
        })
    }
}

/// Brute-force iterated integrals from a path sampled on `n` equal
/// sub-steps: left-point Itô sums for the double and triple integrals, exact
/// aggregation for the single and time integrals. Test oracle only; cost is
/// `O(n J³)`.
pub fn iterated_integrals_oracle(noise: &NoiseSpec, substeps: &[IncrementPair], delta: f64) -> Result<SuppliedIntegrals> {
    let total = aggregate_pairs(substeps, delta)?;
    let n = noise.dim();
    if total.modes() != n {
        return Err(Error::DimensionMismatch {
            context: "oracle increments",
            expected: n,
            found: total.modes(),
        });
    }
    let inv: Vec<f64> = noise.q.iter().map(|q| 1.0 / q.sqrt()).collect();
    let mut single = vec![0.0; n];
    let mut double = vec![0.0; n * n];
    let mut triple = vec![0.0; n * n * n];
    let mut db = vec![0.0; n];
    for p in substeps {
        for i in 0..n {
            db[i] = p.dw[i] * inv[i];
        }
        // Left-point: use running values before this sub-step.
        for (ij, &d2) in double.iter().enumerate() {
            if d2 != 0.0 {
                let row = &mut triple[ij * n..(ij + 1) * n];
                row.iter_mut().zip(&db).for_each(|(t, b)| *t += d2 * b);
            }
        }
        for i in 0..n {
            let si = single[i];
            if si != 0.0 {
                let row = &mut double[i * n..(i + 1) * n];
                row.iter_mut().zip(&db).for_each(|(d, b)| *d += si * b);
            }
        }
        single.iter_mut().zip(&db).for_each(|(s, b)| *s += b);
    }
    Ok(SuppliedIntegrals {
        dt: delta * substeps.len() as f64,
        single,
        double,
        triple,
        time: total.dz.iter().zip(&inv).map(|(z, c)| z * c).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn noise(q: &[f64]) -> NoiseSpec {
        NoiseSpec::diagonal(q.to_vec(), q.len()).unwrap()
    }

    #[test]
    fn noise_spec_validation() {
        assert!(NoiseSpec::diagonal(vec![1.0, 0.0], 2).is_err());
        assert!(NoiseSpec::diagonal(vec![1.0, 1.0], 1).is_err());
        assert!(NoiseSpec::new(vec![1.0, 1.0], vec![1, 1], 3).is_err());
        let n = NoiseSpec::new(vec![4.0, 9.0], vec![2, 0], 3).unwrap();
        let basis = n.basis();
        for a in 0..2 {
            for b in 0..2 {
                let expected = if a == b { 1.0 } else { 0.0 };
                assert_relative_eq!(n.u0_inner(&basis[a], &basis[b]), expected);
            }
        }
        assert_eq!(n.embed(&[1.0, 2.0]).coeffs(), &[2.0, 0.0, 1.0]);
    }

    #[test]
    fn pair_scaling_with_unit_normals() {
        let n = noise(&[1.0]);
        for dt in [1.0, 0.25, 1e-3] {
            let p = pair_from_normals(&n, dt, &[1.0], &[1.0]).unwrap();
            assert_relative_eq!(p.dw[0], dt.sqrt(), max_relative = 1e-15);
            assert_relative_eq!(
                p.dz[0],
                dt.powf(1.5) * 0.788_675_134_594_812_88,
                max_relative = 1e-15
            );
        }
        assert!(matches!(pair_from_normals(&n, 0.0, &[1.0], &[1.0]), Err(Error::Domain(_))));
        let mut rng = PathSeed::new(1, 0).rng();
        assert!(sample_pair(&n, -1.0, &mut rng).is_err());
    }

    #[test]
    fn covariance_formula_second_moments() {
        // With ΔW = a ξ, ΔZ = b ξ + c η: E[ΔW²] = a², E[ΔWΔZ] = ab, E[ΔZ²] = b² + c².
        let (q, dt): (f64, f64) = (0.3, 0.2);
        let a = (q * dt).sqrt();
        let b = q.sqrt() * dt.powf(1.5) * 0.5;
        let c = q.sqrt() * dt.powf(1.5) * 0.5 / 3f64.sqrt();
        assert_relative_eq!(a * a, q * dt, max_relative = 1e-15);
        assert_relative_eq!(a * b, q * dt * dt / 2.0, max_relative = 1e-15);
        assert_relative_eq!(b * b + c * c, q * dt.powi(3) / 3.0, max_relative = 1e-14);
    }

    #[test]
    fn empirical_moments_and_mode_independence() {
        let n = noise(&[1.0, 0.25]);
        let dt = 0.1;
        let samples = 100_000;
        let mut rng = PathSeed::new(7, 3).rng();
        let (mut ww, mut wz, mut w0w1) = (0.0, 0.0, 0.0);
        for _ in 0..samples {
            let p = sample_pair(&n, dt, &mut rng).unwrap();
            ww += p.dw[1] * p.dw[1];
            wz += p.dw[1] * p.dz[1];
            w0w1 += p.dw[0] * p.dw[1];
        }
        let s = samples as f64;
        let tol = 4.0 / s.sqrt();
        assert!((ww / s / (0.25 * dt) - 1.0).abs() < 4.0 * 2f64.sqrt() / s.sqrt());
        assert!((wz / s / (0.25 * dt * dt / 2.0) - 1.0).abs() < 4.0 * tol);
        let corr = w0w1 / s / ((1.0 * dt) * (0.25 * dt)).sqrt();
        assert!(corr.abs() < tol);
    }

    #[test]
    fn aggregation_examples() {
        let one = IncrementPair {
            dw: vec![0.3, -1.0],
            dz: vec![0.01, 0.02],
        };
        assert_eq!(aggregate_pairs(&[one.clone()], 0.1).unwrap(), one);
        assert!(matches!(aggregate_pairs(&[], 0.1), Err(Error::Domain(_))));

        let (a1, z1, a2, z2, d) = (0.7, 0.05, -0.4, 0.02, 0.25);
        let p = |a, z| IncrementPair { dw: vec![a], dz: vec![z] };
        let agg = aggregate_pairs(&[p(a1, z1), p(a2, z2)], d).unwrap();
        assert_relative_eq!(agg.dw[0], a1 + a2);
        assert_relative_eq!(agg.dz[0], z1 + z2 + d * a1);
    }

    #[test]
    fn aggregation_matches_piecewise_linear_quadrature() {
        // A piecewise-linear path has exact cell integrals; aggregating them
        // must reproduce the integral of the whole path.
        let knots = [0.0, 0.4, -0.1, 0.3, 0.9, 0.2, -0.5, 0.0, 0.6];
        let delta = 0.125;
        let cells: Vec<IncrementPair> = knots
            .windows(2)
            .map(|w| IncrementPair {
                dw: vec![w[1] - w[0]],
                dz: vec![delta * (w[1] - w[0]) / 2.0],
            })
            .collect();
        let agg = aggregate_pairs(&cells, delta).unwrap();
        // Trapezoid rule is exact for piecewise-linear integrands.
        let integral: f64 = knots.windows(2).map(|w| delta * (w[0] + w[1]) / 2.0).sum();
        assert_relative_eq!(agg.dz[0], integral - knots[0] * delta * 8.0, max_relative = 1e-14);
        assert_relative_eq!(agg.dw[0], knots[8] - knots[0], epsilon = 1e-15);
    }

    #[test]
    fn aggregated_covariance_matches_direct_law() {
        let n = noise(&[2.0]);
        let (delta, k, samples) = (0.05, 4, 40_000);
        let big = delta * k as f64;
        let mut rng = PathSeed::new(11, 0).rng();
        let (mut ww, mut wz, mut zz) = (0.0, 0.0, 0.0);
        for _ in 0..samples {
            let subs: Vec<_> = (0..k).map(|_| sample_pair(&n, delta, &mut rng).unwrap()).collect();
            let p = aggregate_pairs(&subs, delta).unwrap();
            ww += p.dw[0] * p.dw[0];
            wz += p.dw[0] * p.dz[0];
            zz += p.dz[0] * p.dz[0];
        }
        let s = samples as f64;
        let tol = 6.0 / s.sqrt() * 2f64.sqrt();
        assert!((ww / s / (2.0 * big) - 1.0).abs() < tol);
        assert!((wz / s / (2.0 * big * big / 2.0) - 1.0).abs() < tol);
        assert!((zz / s / (2.0 * big.powi(3) / 3.0) - 1.0).abs() < tol);
    }

    #[test]
    fn coupling_is_reproducible_and_consistent() {
        let n = noise(&[1.0, 0.5, 0.1]);
        let seed = PathSeed::new(42, 17);
        let a = FineStream::generate(&n, 1.0, 64, seed).unwrap();
        let b = FineStream::generate(&n, 1.0, 64, seed).unwrap();
        assert_eq!(a, b);
        let coarse = a.coarse_pairs(8).unwrap();
        assert_eq!(coarse, b.coarse_pairs(8).unwrap());

        // Two-stage coarsening agrees with direct coarsening to rounding.
        let mid = FineStream::from_pairs(&a.coarse_pairs(32).unwrap(), 1.0 / 32.0).unwrap();
        for (x, y) in mid.coarse_pairs(8).unwrap().iter().zip(&coarse) {
            for i in 0..3 {
                assert!((x.dw[i] - y.dw[i]).abs() < 1e-14);
                assert!((x.dz[i] - y.dz[i]).abs() < 1e-14);
            }
        }
        assert!(a.coarse_pairs(6).is_err());
        let other = FineStream::generate(&n, 1.0, 64, PathSeed::new(42, 18)).unwrap();
        assert_ne!(a, other);
    }

    #[test]
    fn trace_round_trip() {
        let n = noise(&[1.0, 0.5]);
        let s = FineStream::generate(&n, 1.0, 5, PathSeed::new(1, 2)).unwrap();
        let mut buf = Vec::new();
        write_increment_trace(&mut buf, &s.pairs()).unwrap();
        let back = read_increment_trace(std::io::Cursor::new(buf)).unwrap();
        assert_eq!(back, s.pairs());
    }

    #[test]
    fn oracle_single_cell_has_no_iterated_part() {
        let n = noise(&[1.0, 3.0]);
        let mut rng = PathSeed::new(5, 5).rng();
        let p = sample_pair(&n, 0.1, &mut rng).unwrap();
        let o = iterated_integrals_oracle(&n, &[p.clone()], 0.1).unwrap();
        assert!(o.double.iter().all(|&x| x == 0.0));
        assert!(o.triple.iter().all(|&x| x == 0.0));
        assert_relative_eq!(o.single[1], p.dw[1] / 3f64.sqrt());
    }

    #[test]
    fn ito_identity_residuals_decay_with_refinement() {
        // I_i I_j = I_(i,j) + I_(j,i) and the six-permutation triple identity.
        let n = noise(&[1.0, 0.5, 0.2]);
        let (paths, finest) = (1000, 512);
        let mut rms = [[0.0; 2]; 3];
        for p in 0..paths {
            let fine = FineStream::generate(&n, 1.0, finest, PathSeed::new(99, p)).unwrap();
            for (level, sub) in [8usize, 64, 512].into_iter().enumerate() {
                let o = iterated_integrals_oracle(&n, &fine.coarse_pairs(sub).unwrap(), 1.0 / sub as f64)
                    .unwrap();
                let r2 = o.single[0] * o.single[1] - o.double(0, 1) - o.double(1, 0);
                let (i, j, k) = (0, 1, 2);
                let perms = o.triple(i, j, k)
                    + o.triple(j, i, k)
                    + o.triple(j, k, i)
                    + o.triple(i, k, j)
                    + o.triple(k, j, i)
                    + o.triple(k, i, j);
                let r3 = perms - o.single[0] * o.single[1] * o.single[2];
                rms[level][0] += r2 * r2;
                rms[level][1] += r3 * r3;
            }
        }
        for w in rms.windows(2) {
            assert!(w[1][0] < w[0][0]);
            assert!(w[1][1] < w[0][1]);
        }
    }

    proptest! {
        #[test]
        fn symmetrized_integrals_satisfy_ito_identities(
            w in proptest::collection::vec(-2.0f64..2.0, 3), dt in 0.01f64..1.0
        ) {
            let n = noise(&[1.0, 1.0, 1.0]);
            let pair = IncrementPair { dw: w.clone(), dz: vec![0.0; 3] };
            let s = SuppliedIntegrals::symmetrized(&n, &pair, dt).unwrap();
            for i in 0..3 {
                for j in 0..3 {
                    let lhs = s.double(i, j) + s.double(j, i) + if i == j { dt } else { 0.0 };
                    prop_assert!((lhs - w[i] * w[j]).abs() < 1e-12);
                }
                let iii = (w[i] * w[i] - 3.0 * dt) * w[i] / 6.0;
                prop_assert!((s.triple(i, i, i) - iii).abs() < 1e-12);
            }
        }
    }
}
