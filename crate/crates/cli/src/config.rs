use std::fs;
use std::path::{Path, PathBuf};

use expwp_core::coefficients::ProbeConfig;
use expwp_core::experiments::StudyPlan;
use expwp_core::schemes::Scheme;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verbosity {
    Quiet,
    #[default]
    Normal,
    Verbose,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MomentConfig {
    pub enabled: bool,
    pub scheme: Scheme,
    pub resolutions: Vec<usize>,
    pub paths: usize,
}

impl Default for MomentConfig {
    fn default() -> Self {
        Self {
            enabled: false,
            scheme: Scheme::WagnerPlaten,
            resolutions: vec![4, 8, 16, 32, 64, 128, 256],
            paths: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateConfig {
    pub scheme: Scheme,
    pub steps: usize,
    pub path: u64,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        Self {
            scheme: Scheme::WagnerPlaten,
            steps: 64,
            path: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiagnosticsConfig {
    pub samples: usize,
    pub dt: f64,
    /// Rows of `increments.csv`; 0 writes none.
    pub trace_steps: usize,
}

impl Default for DiagnosticsConfig {
    fn default() -> Self {
        Self {
            samples: 100_000,
            dt: 1.0 / 64.0,
            trace_steps: 0,
        }
    }
}

/// Everything a run reads from its configuration file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub output_dir: PathBuf,
    pub verbosity: Verbosity,
    pub svg: bool,
    pub plan: StudyPlan,
    pub moments: MomentConfig,
    pub simulate: SimulateConfig,
    pub diagnostics: DiagnosticsConfig,
    pub probes: ProbeConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            output_dir: PathBuf::from("expwp-out"),
            verbosity: Verbosity::Normal,
            svg: true,
            plan: StudyPlan::default(),
            moments: MomentConfig::default(),
            simulate: SimulateConfig::default(),
            diagnostics: DiagnosticsConfig::default(),
            probes: ProbeConfig::default(),
        }
    }
}

/// Every configuration key with its constraint, as printed by `--help`.
pub const CONFIG_KEYS: &[(&str, &str)] = &[
    ("output_dir", "directory for artifacts (created if missing)"),
    ("verbosity", "quiet | normal | verbose"),
    ("svg", "bool; write convergence.svg"),
    (
        "plan.coefficients",
        "{ name = zero | linear_mult | nemytskii_drift | scalar_gbm, sigma, c }; scalar_gbm needs modes = 1",
    ),
    ("plan.modes", "integer N >= 1"),
    ("plan.eigenvalues", "optional list of N positive nondecreasing reals; default π²i²"),
    (
        "plan.covariance",
        "{ kind = inverse_operator | inverse_power (power) | explicit (q, N positive reals) }",
    ),
    ("plan.noise_scale", "real > 0; multiplies every q_j"),
    (
        "plan.initial",
        "{ kind = parabola | mode (index < N, amplitude) | coefficients (values, N reals) }",
    ),
    ("plan.horizon", "T > 0"),
    ("plan.resolutions", "at least 3 strictly increasing powers of two"),
    ("plan.reference_multiplier", "power of two >= 8; M_ref = multiplier · max(M)"),
    ("plan.paths", "integer P >= 2"),
    ("plan.schemes", "non-empty list of euler | milstein | wagner_platen"),
    ("plan.seed", "unsigned 64-bit master seed"),
    ("plan.norm", "h | h_gamma"),
    ("plan.regularity.gamma", "γ ∈ [1, 3/2)"),
    ("plan.regularity.alpha", "α ∈ (γ − 1, γ]"),
    ("plan.regularity.beta", "β ∈ (γ − 1/2, γ]"),
    ("plan.regularity.delta", "δ ∈ (γ − 1, β]"),
    ("plan.reference_check", "bool; compare M_ref with 2·M_ref on up to 32 paths"),
    ("plan.timing", "bool; true fills the seconds column (breaks byte reproducibility)"),
    ("moments.enabled", "bool; study also writes moments.csv"),
    ("moments.scheme", "euler | milstein | wagner_platen"),
    ("moments.resolutions", "at least 3 resolutions"),
    ("moments.paths", "integer >= 2 per resolution"),
    ("simulate.scheme", "euler | milstein | wagner_platen"),
    ("simulate.steps", "integer M >= 1"),
    ("simulate.path", "path index for the noise stream"),
    ("diagnostics.samples", "integer >= 2 samples per mode"),
    ("diagnostics.dt", "step size > 0"),
    ("diagnostics.trace_steps", "integer >= 0 rows written to increments.csv"),
    ("probes.probes", "integer >= 1 random probes per check"),
    ("probes.tol", "residual tolerance > 0"),
    ("probes.seed", "probe seed"),
];

pub fn keys_help() -> String {
    let width = CONFIG_KEYS.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
    let mut s = String::from("Configuration keys (TOML; override any with --set key=value):\n");
    for (k, c) in CONFIG_KEYS {
        s.push_str(&format!("  {k:<width$}  {c}\n"));
    }
    s.push_str(
        "\nEnvironment: EXPWP_THREADS sets the worker thread count.\n\
         Exit codes: 0 ok, 1 other failure, 2 missing file, 3 schema violation,\n\
         4 constraint violation, 5 study error.\n",
    );
    s
}

/// Parses `value` as a TOML value, falling back to a bare string.
fn parse_value(value: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {value}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(value.to_string()))
}

pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<(), CliError> {
    let (key, value) = assignment
        .split_once('=')
        .ok_or_else(|| CliError::Schema(format!("override `{assignment}` is not of the form key=value")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::Schema(format!("malformed key `{key}`")));
    }
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| CliError::Schema(format!("`{p}` in `{key}` is not a table")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), parse_value(value.trim()));
    Ok(())
}

/// Reads the configuration (if any), applies overrides and validates.
pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig, CliError> {
    let mut table = match path {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| CliError::MissingFile(format!("{}: {e}", p.display())))?;
            toml::from_str::<toml::Table>(&text).map_err(|e| CliError::Schema(format!("{}: {e}", p.display())))?
        }
        None => toml::Table::new(),
    };
    for o in overrides {
        apply_override(&mut table, o)?;
    }
    let cfg: RunConfig = toml::Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| CliError::Schema(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), CliError> {
        self.plan.validate().map_err(CliError::from)?;
        let schema = |m: &str| Err(CliError::Schema(m.to_string()));
        if self.moments.resolutions.len() < 3 || self.moments.resolutions.contains(&0) {
            return schema("moments.resolutions needs at least 3 positive entries");
        }
        if self.moments.paths < 2 {
            return schema("moments.paths must be at least 2");
        }
        if self.simulate.steps == 0 {
            return schema("simulate.steps must be at least 1");
        }
        if self.diagnostics.samples < 2 {
            return schema("diagnostics.samples must be at least 2");
        }
        if !(self.diagnostics.dt.is_finite() && self.diagnostics.dt > 0.0) {
            return schema("diagnostics.dt must be positive");
        }
        if self.probes.probes == 0 || !(self.probes.tol > 0.0) {
            return schema("probes.probes must be >= 1 and probes.tol > 0");
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn override_parsing() {
        let mut t = toml::Table::new();
        apply_override(&mut t, "plan.paths=17").unwrap();
        apply_override(&mut t, "plan.norm = h_gamma").unwrap();
        apply_override(&mut t, "plan.resolutions=[2, 4, 8]").unwrap();
        apply_override(&mut t, "plan.coefficients={ name = \"zero\" }").unwrap();
        let cfg: RunConfig = toml::Value::Table(t).try_into().unwrap();
        assert_eq!(cfg.plan.paths, 17);
        assert_eq!(cfg.plan.resolutions, vec![2, 4, 8]);
        assert_eq!(cfg.plan.norm, expwp_core::experiments::ErrorNorm::HGamma);
        assert!(apply_override(&mut toml::Table::new(), "novalue").is_err());
        assert!(apply_override(&mut toml::Table::new(), "a..b=1").is_err());
    }

    fn leaf_keys(prefix: &str, v: &toml::Value, out: &mut Vec<String>) {
        match v.as_table() {
            Some(t) if !t.contains_key("name") && !t.contains_key("kind") => {
                for (k, v) in t {
                    let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                    leaf_keys(&key, v, out);
                }
            }
            _ => out.push(prefix.to_string()),
        }
    }

    #[test]
    fn help_lists_every_key() {
        let v = toml::Value::try_from(RunConfig::default()).unwrap();
        let mut keys = Vec::new();
        leaf_keys("", &v, &mut keys);
        keys.push("plan.eigenvalues".into());
        let listed: Vec<&str> = CONFIG_KEYS.iter().map(|(k, _)| *k).collect();
        for k in &keys {
            assert!(listed.contains(&k.as_str()), "{k} missing from help");
        }
        assert_eq!(keys.len(), listed.len());
    }
}
