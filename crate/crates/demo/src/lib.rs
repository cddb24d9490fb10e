//! WebAssembly bindings behind `www/index.html`.
//!
//! Each export takes plain numbers and strings and returns JSON, so the page
//! needs no generated glue beyond `wasm-bindgen`'s own.

use expwp_core::experiments::{run_study, StudyPlan};
use expwp_core::schemes::{step, IntegralMode, Scheme, StepContext};
use expwp_core::spectral::GridProfile;
use expwp_core::stochastics::{sample_pair, FineStream, NoiseSpec, PathSeed};
use serde::Serialize;
use wasm_bindgen::prelude::*;

fn js_err(e: impl std::fmt::Display) -> JsError {
    JsError::new(&e.to_string())
}

fn parse_scheme(name: &str) -> expwp_core::Result<Scheme> {
    serde_json::from_value(serde_json::Value::String(name.to_string()))
        .map_err(|_| expwp_core::Error::Configuration(format!("unknown scheme `{name}`")))
}

#[derive(Debug, Serialize)]
pub struct Field {
    pub scheme: String,
    pub nodes: Vec<f64>,
    pub times: Vec<f64>,
    /// One row of grid values per recorded time.
    pub values: Vec<Vec<f64>>,
}

/// One path of the default linear multiplicative problem, sampled on the grid.
pub fn field(scheme: &str, modes: usize, steps: usize, sigma: f64, seed: u64) -> expwp_core::Result<Field> {
    let scheme = parse_scheme(scheme)?;
    let mut plan = StudyPlan::default();
    plan.modes = modes;
    plan.seed = seed;
    plan.coefficients = expwp_core::coefficients::Builtin::LinearMult { sigma };
    let model = plan.model()?;
    let ctx = StepContext::uniform(&model, plan.horizon, steps, IntegralMode::ClosedForm)?;
    let stream = FineStream::generate(model.noise(), plan.horizon, steps, PathSeed::new(seed, 0))?;
    let grid = GridProfile::collocation(modes)?;
    let mut y = plan.initial.build(modes)?;
    let mut times = vec![0.0];
    let mut values = vec![grid.to_grid(&y)?];
    for (m, pair) in stream.pairs().iter().enumerate() {
        y = step(&ctx, scheme, &y, pair)?;
        times.push(ctx.dt() * (m + 1) as f64);
        values.push(grid.to_grid(&y)?);
    }
    Ok(Field { scheme: scheme.name().to_string(), nodes: grid.nodes(), times, values })
}

#[derive(Debug, Serialize)]
pub struct Curve {
    pub scheme: String,
    pub order: f64,
    pub m: Vec<usize>,
    pub rms: Vec<f64>,
}

/// A small convergence study for every scheme.
pub fn convergence(modes: usize, paths: usize, seed: u64) -> expwp_core::Result<Vec<Curve>> {
    let mut plan = StudyPlan::default();
    plan.modes = modes;
    plan.paths = paths;
    plan.seed = seed;
    plan.resolutions = vec![4, 8, 16, 32];
    plan.reference_multiplier = 8;
    plan.reference_check = false;
    let report = run_study(&plan)?;
    Ok(plan
        .schemes
        .iter()
        .map(|&s| {
            let rows: Vec<_> = report.rows.iter().filter(|r| r.scheme == s).collect();
            Curve {
                scheme: s.name().to_string(),
                order: report.order(s).map_or(f64::NAN, |f| f.order),
                m: rows.iter().map(|r| r.m).collect(),
                rms: rows.iter().map(|r| r.rms).collect(),
            }
        })
        .collect())
}

/// `count` draws of `(ΔW, ΔZ)` for one mode with variance `q`, interleaved.
pub fn increments(q: f64, dt: f64, count: usize, seed: u64) -> expwp_core::Result<Vec<f64>> {
    let noise = NoiseSpec::diagonal(vec![q], 1)?;
    let mut rng = PathSeed::new(seed, 0).rng();
    let mut out = Vec::with_capacity(2 * count);
    for _ in 0..count {
        let p = sample_pair(&noise, dt, &mut rng)?;
        out.push(p.dw[0]);
        out.push(p.dz[0]);
    }
    Ok(out)
}

#[wasm_bindgen(js_name = simulateField)]
pub fn simulate_field(scheme: &str, modes: usize, steps: usize, sigma: f64, seed: u32) -> Result<String, JsError> {
    let f = field(scheme, modes, steps, sigma, seed.into()).map_err(js_err)?;
    serde_json::to_string(&f).map_err(js_err)
}

#[wasm_bindgen(js_name = convergenceCurves)]
pub fn convergence_curves(modes: usize, paths: usize, seed: u32) -> Result<String, JsError> {
    let c = convergence(modes, paths, seed.into()).map_err(js_err)?;
    serde_json::to_string(&c).map_err(js_err)
}

#[wasm_bindgen(js_name = sampleIncrements)]
pub fn sample_increments(q: f64, dt: f64, count: usize, seed: u32) -> Result<Vec<f64>, JsError> {
    increments(q, dt, count, seed.into()).map_err(js_err)
}
