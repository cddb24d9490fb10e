//! Command-line driver: configuration loading, subcommand dispatch and
//! exit-code mapping.

pub mod config;

use std::fmt::Write as _;
use std::fs;
use std::path::PathBuf;

use clap::{Parser, Subcommand};
use expwp_core::coefficients::check_derivatives;
use expwp_core::experiments::{moment_probe, moments_csv, run_study, write_artifacts};
use expwp_core::schemes::{evolve, IntegralMode, StepContext};
use expwp_core::spectral::{GridProfile, SpectralVector};
use expwp_core::stochastics::{sample_pair, write_increment_trace, FineStream, PathSeed};
use expwp_core::Error;

pub use config::{RunConfig, Verbosity};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    MissingFile(String),
    #[error("schema violation: {0}")]
    Schema(String),
    #[error("{0}")]
    Constraint(String),
    #[error("{0}")]
    Study(String),
    #[error("{0}")]
    Other(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::MissingFile(_) => 2,
            CliError::Schema(_) => 3,
            CliError::Constraint(_) => 4,
            CliError::Study(_) => 5,
            CliError::Other(_) => 1,
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::Constraint(m) => CliError::Constraint(format!("constraint violated: {m}")),
            Error::Configuration(_) | Error::DimensionMismatch { .. } => CliError::Schema(e.to_string()),
            Error::Io(_) => CliError::Other(e.to_string()),
            other => CliError::Study(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Other(e.to_string())
    }
}

#[derive(Debug, Parser)]
#[command(name = "expwp", version, about = "Exponential integrators for semilinear parabolic SPDEs", after_long_help = config::keys_help())]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, clap::Args)]
pub struct Common {
    /// TOML configuration file.
    #[arg(short, long)]
    pub config: Option<PathBuf>,
    /// Override a configuration key, e.g. `--set plan.paths=50`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Output directory (overrides `output_dir`).
    #[arg(short, long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Strong-convergence study: report.csv, orders.csv, convergence.svg, manifest.json.
    #[command(after_long_help = config::keys_help())]
    Study(Common),
    /// One path of one scheme: trajectory.csv and terminal.csv.
    #[command(after_long_help = config::keys_help())]
    Simulate(Common),
    /// Commutativity and derivative probes for the configured coefficients.
    #[command(after_long_help = config::keys_help())]
    VerifyCommutativity(Common),
    /// Empirical moments of the increment pairs against their exact law.
    #[command(after_long_help = config::keys_help())]
    SampleDiagnostics(Common),
}

fn load(common: &Common) -> Result<RunConfig, CliError> {
    let mut cfg = config::load(common.config.as_deref(), &common.overrides)?;
    if let Some(out) = &common.out {
        cfg.output_dir = out.clone();
    }
    Ok(cfg)
}

fn say(cfg: &RunConfig, level: Verbosity, msg: impl AsRef<str>) {
    let show = match level {
        Verbosity::Quiet => true,
        Verbosity::Normal => cfg.verbosity != Verbosity::Quiet,
        Verbosity::Verbose => cfg.verbosity == Verbosity::Verbose,
    };
    if show {
        println!("{}", msg.as_ref());
    }
}

/// Runs a parsed command line and returns the process exit code.
pub fn run(cli: Cli) -> i32 {
    let result = match &cli.command {
        Command::Study(c) => load(c).and_then(|cfg| study(&cfg)),
        Command::Simulate(c) => load(c).and_then(|cfg| simulate(&cfg)),
        Command::VerifyCommutativity(c) => load(c).and_then(|cfg| verify(&cfg)),
        Command::SampleDiagnostics(c) => load(c).and_then(|cfg| diagnostics(&cfg)),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn study(cfg: &RunConfig) -> Result<i32, CliError> {
    let plan = &cfg.plan;
    say(
        cfg,
        Verbosity::Normal,
        format!(
            "study: {} N={} P={} M={:?} reference {:?}",
            plan.coefficients.name(),
            plan.modes,
            plan.paths,
            plan.resolutions,
            plan.reference_kind()
        ),
    );
    let report = run_study(plan)?;
    let mut extra = Vec::new();
    if cfg.moments.enabled {
        let probe = moment_probe(plan, cfg.moments.scheme, &cfg.moments.resolutions, cfg.moments.paths)?;
        say(
            cfg,
            Verbosity::Normal,
            format!(
                "moments: Spearman ρ = {:.3} (p = {:.3}), spread {:.3e} vs allowance {:.3e}: {}",
                probe.spearman_rho,
                probe.trend_p,
                probe.spread,
                probe.allowance,
                if probe.passed() { "bounded" } else { "growth suspected" }
            ),
        );
        extra.push(("moments.csv".to_string(), moments_csv(&probe)));
    }
    let files = write_artifacts(plan, &report, &cfg.output_dir, cfg.svg, &extra)?;
    for row in &report.rows {
        say(
            cfg,
            Verbosity::Verbose,
            format!("  {:<14} M={:<5} rms={:.4e} ± {:.1e} aborted={}", row.scheme.name(), row.m, row.rms, row.stderr, row.aborted),
        );
    }
    for o in &report.orders {
        say(
            cfg,
            Verbosity::Normal,
            format!("  {:<14} order {:.3} [{:.3}, {:.3}]", o.scheme.name(), o.fit.order, o.fit.ci_lo, o.fit.ci_hi),
        );
    }
    if let Some(c) = report.reference_check {
        say(
            cfg,
            Verbosity::Normal,
            format!(
                "  reference self-check: gap {:.3e}, threshold {:.3e}{}",
                c.rms_gap,
                c.threshold,
                if c.passed { "" } else { " (EXCEEDED)" }
            ),
        );
    }
    for f in files {
        say(cfg, Verbosity::Verbose, format!("wrote {}", f.display()));
    }
    Ok(0)
}

fn simulate(cfg: &RunConfig) -> Result<i32, CliError> {
    let plan = &cfg.plan;
    let sim = &cfg.simulate;
    let model = plan.model()?;
    let ctx = StepContext::uniform(&model, plan.horizon, sim.steps, IntegralMode::ClosedForm)?;
    let stream = FineStream::generate(model.noise(), plan.horizon, sim.steps, PathSeed::new(plan.seed, sim.path))?;
    let y0 = plan.initial.build(plan.modes)?;
    let gamma = plan.regularity.gamma;
    let traj = evolve(&ctx, sim.scheme, &y0, &stream.pairs(), Some(gamma))?;

    let mut t = String::from("step,t,norm_h,norm_h_gamma\n");
    let _ = writeln!(t, "0,0,{:e},{:e}", y0.norm(), model.op().norm(gamma, &y0));
    for (m, n) in traj.norms.iter().enumerate() {
        let _ = writeln!(t, "{},{:e},{:e},{:e}", m + 1, ctx.dt() * (m + 1) as f64, n.h, n.h_gamma);
    }
    let mut c = String::from("mode,coefficient\n");
    for (i, v) in traj.terminal.coeffs().iter().enumerate() {
        let _ = writeln!(c, "{},{:e}", i + 1, v);
    }
    let mut g = String::from("x,value\n");
    let grid = GridProfile::dealiased(plan.modes)?;
    for (x, v) in grid.nodes().iter().zip(grid.to_grid(&traj.terminal)?) {
        let _ = writeln!(g, "{x:e},{v:e}");
    }
    fs::create_dir_all(&cfg.output_dir)?;
    fs::write(cfg.output_dir.join("trajectory.csv"), t)?;
    fs::write(cfg.output_dir.join("terminal.csv"), c)?;
    fs::write(cfg.output_dir.join("field.csv"), g)?;
    say(
        cfg,
        Verbosity::Normal,
        format!(
            "simulate: {} M={} path={}  |Y_M|_H = {:.6e}  |Y_M|_H_γ = {:.6e}",
            sim.scheme,
            sim.steps,
            sim.path,
            traj.terminal.norm(),
            model.op().norm(gamma, &traj.terminal)
        ),
    );
    Ok(0)
}

fn verify(cfg: &RunConfig) -> Result<i32, CliError> {
    let plan = &cfg.plan;
    let op = plan.operator()?;
    let noise = plan.noise(&op)?;
    let coeffs = plan.coefficients.build(&noise)?;
    let report = expwp_core::coefficients::verify_commutativity(coeffs.as_ref(), &noise, &cfg.probes);
    let verdict = |p: bool| if p { "pass" } else { "FAIL" };
    say(
        cfg,
        Verbosity::Quiet,
        format!(
            "{} (N={}, J={}, {} probes, tol {:e})",
            plan.coefficients.name(),
            plan.modes,
            noise.dim(),
            cfg.probes.probes,
            cfg.probes.tol
        ),
    );
    say(
        cfg,
        Verbosity::Quiet,
        format!("  first kind:  {} (max residual {:.3e})", verdict(report.first.passed), report.first.max_residual),
    );
    say(
        cfg,
        Verbosity::Quiet,
        format!("  second kind: {} (max residual {:.3e})", verdict(report.second.passed), report.second.max_residual),
    );
    let v = plan.initial.build(plan.modes)?;
    let v = if v.norm() == 0.0 { SpectralVector::unit(plan.modes, 0) } else { v };
    let d = check_derivatives(coeffs.as_ref(), &v, &noise, f64::EPSILON.cbrt(), &cfg.probes);
    say(
        cfg,
        Verbosity::Normal,
        format!(
            "  derivatives vs central differences: F′ {:.1e}, F″ {:.1e}, B′ {:.1e}, B″ {:.1e}; linearity {:.1e}, symmetry {:.1e}",
            d.drift_first, d.drift_second, d.diffusion_first, d.diffusion_second, d.linearity, d.symmetry
        ),
    );
    Ok(if report.passed() { 0 } else { 1 })
}

fn diagnostics(cfg: &RunConfig) -> Result<i32, CliError> {
    let plan = &cfg.plan;
    let op = plan.operator()?;
    let noise = plan.noise(&op)?;
    let d = &cfg.diagnostics;
    let dt = d.dt;
    let mut rng = PathSeed::new(plan.seed, u64::MAX).rng();
    let pairs = (0..d.samples)
        .map(|_| sample_pair(&noise, dt, &mut rng))
        .collect::<expwp_core::Result<Vec<_>>>()?;
    let mut csv = String::from("mode,moment,empirical,exact,z\n");
    let mut worst: f64 = 0.0;
    for (j, &q) in noise.q().iter().enumerate() {
        let moments = [
            ("dW*dW", q * dt, 0usize, 0usize),
            ("dW*dZ", q * dt * dt / 2.0, 0, 1),
            ("dZ*dZ", q * dt.powi(3) / 3.0, 1, 1),
        ];
        for (name, exact, a, b) in moments {
            let pick = |p: &expwp_core::stochastics::IncrementPair, k: usize| if k == 0 { p.dw[j] } else { p.dz[j] };
            let prods: Vec<f64> = pairs.iter().map(|p| pick(p, a) * pick(p, b)).collect();
            let (mean, se) = expwp_core::experiments::mean_stderr(&prods);
            let z = (mean - exact) / se;
            worst = worst.max(z.abs());
            let _ = writeln!(csv, "{},{name},{mean:e},{exact:e},{z:.3}", j + 1);
        }
    }
    fs::create_dir_all(&cfg.output_dir)?;
    fs::write(cfg.output_dir.join("diagnostics.csv"), csv)?;
    if d.trace_steps > 0 {
        let f = fs::File::create(cfg.output_dir.join("increments.csv"))?;
        write_increment_trace(std::io::BufWriter::new(f), &pairs[..d.trace_steps.min(pairs.len())])?;
    }
    say(
        cfg,
        Verbosity::Normal,
        format!(
            "sample-diagnostics: {} modes × {} samples at Δ = {dt}: max |z| = {worst:.3}",
            noise.dim(),
            d.samples
        ),
    );
    Ok(0)
}
