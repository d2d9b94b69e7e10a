//! Run configuration: a TOML file plus `--set` overrides, validated as a
//! whole so that every offending field is reported at once.

use std::fmt;
use std::path::PathBuf;

use perc_core::measure::RateFunction;
use perc_core::testfn::TestFunction;
use serde::{Deserialize, Serialize};

pub const REFERENCE: &str = include_str!("../perc.reference.toml");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Experiment {
    Gen,
    Theta,
    Walk,
    Corrector,
    Simulate,
    Fluct,
    Connect,
    Chemdist,
}

impl Experiment {
    pub fn name(self) -> &'static str {
        match self {
            Experiment::Gen => "gen",
            Experiment::Theta => "theta",
            Experiment::Walk => "walk",
            Experiment::Corrector => "corrector",
            Experiment::Simulate => "simulate",
            Experiment::Fluct => "fluct",
            Experiment::Connect => "connect",
            Experiment::Chemdist => "chemdist",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum FluctKind {
    Static,
    Martingale,
    Bg,
    Lagcov,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub experiment: Experiment,
    pub output: PathBuf,
    pub environment: EnvironmentConfig,
    pub dynamics: DynamicsConfig,
    pub walk: WalkConfig,
    pub corrector: CorrectorConfig,
    pub fluct: FluctConfig,
    pub connect: ConnectConfig,
    pub chemdist: ChemdistConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvironmentConfig {
    pub dim: usize,
    pub side: usize,
    pub p: f64,
    pub seed: u64,
    pub theta_replicas: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DynamicsConfig {
    pub rate: RateFunction,
    pub rho: f64,
    pub horizon: f64,
    pub samples: usize,
    pub replicas: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WalkConfig {
    pub walkers: usize,
    pub horizon: f64,
    pub grid: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorrectorConfig {
    pub lambda: f64,
    pub tolerance: f64,
    pub max_iterations: usize,
    pub test_functions: Vec<String>,
    pub energy_tolerance: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub diffusion: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FluctConfig {
    pub experiment: FluctKind,
    pub samples: usize,
    pub z: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConnectConfig {
    pub k: usize,
    pub levels: Vec<usize>,
    pub max_bad_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChemdistConfig {
    pub separations: Vec<usize>,
    pub sources: usize,
    pub environments: usize,
    pub min_pairs: usize,
    pub min_r_squared: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            experiment: Experiment::Theta,
            output: PathBuf::from("perc-run"),
            environment: EnvironmentConfig::default(),
            dynamics: DynamicsConfig::default(),
            walk: WalkConfig::default(),
            corrector: CorrectorConfig::default(),
            fluct: FluctConfig::default(),
            connect: ConnectConfig::default(),
            chemdist: ChemdistConfig::default(),
        }
    }
}

impl Default for EnvironmentConfig {
    fn default() -> Self {
        EnvironmentConfig { dim: 2, side: 64, p: 0.7, seed: 0, theta_replicas: 20 }
    }
}

impl Default for DynamicsConfig {
    fn default() -> Self {
        DynamicsConfig { rate: RateFunction::Indicator, rho: 1.0, horizon: 0.25, samples: 8, replicas: 100, seed: 1 }
    }
}

impl Default for WalkConfig {
    fn default() -> Self {
        WalkConfig { walkers: 2000, horizon: 200.0, grid: 20, seed: 0 }
    }
}

impl Default for CorrectorConfig {
    fn default() -> Self {
        CorrectorConfig {
            lambda: 1.0,
            tolerance: 1e-10,
            max_iterations: 20000,
            test_functions: vec!["gaussian:0.5,0.5:0.0625".into(), "bump:0.5,0.5:0.3".into()],
            energy_tolerance: 0.1,
            diffusion: None,
        }
    }
}

impl Default for FluctConfig {
    fn default() -> Self {
        FluctConfig { experiment: FluctKind::Static, samples: 10000, z: 3.0 }
    }
}

impl Default for ConnectConfig {
    fn default() -> Self {
        ConnectConfig { k: 8, levels: vec![1, 2, 3], max_bad_fraction: 0.05 }
    }
}

impl Default for ChemdistConfig {
    fn default() -> Self {
        ChemdistConfig {
            separations: vec![4, 8, 12, 16],
            sources: 1000,
            environments: 4,
            min_pairs: 200,
            min_r_squared: 0.9,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FieldError {
    pub field: String,
    pub message: String,
}

/// All problems found in a configuration.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValidationError {
    pub fields: Vec<FieldError>,
}

impl fmt::Display for ValidationError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "invalid configuration:")?;
        for e in &self.fields {
            write!(f, " {}: {};", e.field, e.message)?;
        }
        Ok(())
    }
}

impl std::error::Error for ValidationError {}

impl ValidationError {
    fn single(field: &str, message: impl Into<String>) -> Self {
        ValidationError { fields: vec![FieldError { field: field.into(), message: message.into() }] }
    }
}

/// Parses a TOML document and applies `key=value` overrides with dotted keys.
pub fn load(text: &str, overrides: &[String]) -> Result<RunConfig, ValidationError> {
    let mut table: toml::Table =
        text.parse().map_err(|e: toml::de::Error| ValidationError::single("<file>", e.to_string()))?;
    for item in overrides {
        let (key, raw) = item
            .split_once('=')
            .ok_or_else(|| ValidationError::single(item, "override must look like section.key=value"))?;
        let value = parse_value(raw.trim());
        set_path(&mut table, key.trim(), value).map_err(|m| ValidationError::single(key.trim(), m))?;
    }
    RunConfig::deserialize(toml::Value::Table(table)).map_err(|e| ValidationError::single("<config>", e.to_string()))
}

/// A TOML literal if it parses as one, otherwise a bare string.
fn parse_value(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn set_path(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<(), String> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().filter(|s| !s.is_empty()).ok_or("empty key")?;
    let mut cur = table;
    for p in parts {
        cur = cur
            .entry(p)
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| format!("`{p}` is not a table"))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

impl RunConfig {
    pub fn test_functions(&self) -> Result<Vec<TestFunction>, ValidationError> {
        self.corrector
            .test_functions
            .iter()
            .map(|s| {
                s.parse::<TestFunction>()
                    .map_err(|e| ValidationError::single("corrector.test_functions", e.to_string()))
            })
            .collect()
    }

    /// Checks every field and reports all violations together.
    pub fn validate(&self) -> Result<(), ValidationError> {
        let mut errs = Vec::new();
        let mut bad = |field: &str, message: String| errs.push(FieldError { field: field.into(), message });
        let env = &self.environment;
        if !(1..=3).contains(&env.dim) {
            bad("environment.dim", format!("must be 1, 2 or 3, got {}", env.dim));
        }
        if env.side < 2 {
            bad("environment.side", format!("must be at least 2, got {}", env.side));
        }
        if !(0.0..=1.0).contains(&env.p) {
            bad("environment.p", format!("must lie in [0, 1], got {}", env.p));
        }
        if env.theta_replicas == 0 {
            bad("environment.theta_replicas", "must be positive".into());
        }
        let dy = &self.dynamics;
        if let Err(e) = dy.rate.validate() {
            bad("dynamics.rate", e.to_string());
        }
        if !(dy.rho.is_finite() && dy.rho >= 0.0) {
            bad("dynamics.rho", format!("must be a finite non-negative density, got {}", dy.rho));
        }
        if !(dy.horizon.is_finite() && dy.horizon >= 0.0) {
            bad("dynamics.horizon", format!("must be finite and non-negative, got {}", dy.horizon));
        }
        if dy.samples == 0 {
            bad("dynamics.samples", "must be positive".into());
        }
        if dy.replicas < 2 {
            bad("dynamics.replicas", format!("need at least 2, got {}", dy.replicas));
        }
        let w = &self.walk;
        if w.walkers < 2 {
            bad("walk.walkers", format!("need at least 2, got {}", w.walkers));
        }
        if !(w.horizon.is_finite() && w.horizon > 0.0) {
            bad("walk.horizon", format!("must be positive, got {}", w.horizon));
        }
        if w.grid < 2 {
            bad("walk.grid", format!("need at least 2 intervals, got {}", w.grid));
        }
        let c = &self.corrector;
        if !(c.lambda.is_finite() && c.lambda > 0.0) {
            bad("corrector.lambda", format!("must be positive, got {}", c.lambda));
        }
        if !(c.tolerance > 0.0 && c.tolerance < 1.0) {
            bad("corrector.tolerance", format!("must lie in (0, 1), got {}", c.tolerance));
        }
        if c.max_iterations == 0 {
            bad("corrector.max_iterations", "must be positive".into());
        }
        if !(c.energy_tolerance > 0.0) {
            bad("corrector.energy_tolerance", format!("must be positive, got {}", c.energy_tolerance));
        }
        if let Some(d) = c.diffusion {
            if !(d.is_finite() && d > 0.0) {
                bad("corrector.diffusion", format!("must be positive, got {d}"));
            }
        }
        if c.test_functions.is_empty() {
            bad("corrector.test_functions", "need at least one test function".into());
        }
        for (i, s) in c.test_functions.iter().enumerate() {
            match s.parse::<TestFunction>() {
                Ok(tf) => {
                    if let Err(e) = tf.validate(env.dim) {
                        bad(&format!("corrector.test_functions[{i}]"), e.to_string());
                    }
                }
                Err(e) => bad(&format!("corrector.test_functions[{i}]"), e.to_string()),
            }
        }
        // Sections below only matter to their own experiment.
        let f = &self.fluct;
        if self.experiment == Experiment::Fluct && f.samples < 2 {
            bad("fluct.samples", format!("need at least 2, got {}", f.samples));
        }
        if self.experiment == Experiment::Fluct && !(f.z > 0.0) {
            bad("fluct.z", format!("must be positive, got {}", f.z));
        }
        if self.experiment == Experiment::Connect {
            self.validate_connect(&mut bad);
        }
        if self.experiment == Experiment::Chemdist {
            self.validate_chemdist(&mut bad);
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(ValidationError { fields: errs })
        }
    }

    fn validate_connect(&self, bad: &mut impl FnMut(&str, String)) {
        let env = &self.environment;
        let k = &self.connect;
        if k.k == 0 || !env.side.is_multiple_of(k.k.max(1)) {
            bad("connect.k", format!("must be positive and divide side {}, got {}", env.side, k.k));
        }
        if k.levels.is_empty() {
            bad("connect.levels", "need at least one level".into());
        }
        if let Some(&l) = k.levels.iter().max() {
            if (2 * l + 1) * k.k > env.side {
                bad(
                    "connect.levels",
                    format!("enlarged box (2l+1)k = {} exceeds side {}", (2 * l + 1) * k.k, env.side),
                );
            }
        }
        if !(0.0..=1.0).contains(&k.max_bad_fraction) {
            bad("connect.max_bad_fraction", format!("must lie in [0, 1], got {}", k.max_bad_fraction));
        }
    }

    fn validate_chemdist(&self, bad: &mut impl FnMut(&str, String)) {
        let env = &self.environment;
        let ch = &self.chemdist;
        if ch.separations.len() < 2 {
            bad("chemdist.separations", "need at least two separations".into());
        }
        if ch.separations.iter().any(|&s| s == 0 || 2 * s >= env.side) {
            bad("chemdist.separations", format!("each must be positive and below side/2 = {}", env.side / 2));
        }
        if ch.sources == 0 {
            bad("chemdist.sources", "must be positive".into());
        }
        if ch.environments == 0 {
            bad("chemdist.environments", "must be positive".into());
        }
        if !(0.0..=1.0).contains(&ch.min_r_squared) {
            bad("chemdist.min_r_squared", format!("must lie in [0, 1], got {}", ch.min_r_squared));
        }
    }
}
