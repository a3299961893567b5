//! The run configuration file and its command-line overrides.

use std::path::{Path, PathBuf};

use robustgnss::sim::{validate_probability, MAX_FAULT_PROBABILITY};
use robustgnss::{EstimatorOptions, FaultSpec, RobustConfig, ScenarioSpec, Scheme, SolverConfig};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::CliError;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub scenario: ScenarioSpec,
    pub fault: FaultSpec,
    pub solver: SolverConfig,
    pub robust: RobustConfig,
    pub estimator: EstimatorOptions,
    pub sweep: SweepConfig,
    pub io: IoConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub schemes: Vec<Scheme>,
    pub p_grid: Vec<f64>,
    pub trials: usize,
    pub base_seed: u64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            schemes: Scheme::ALL.to_vec(),
            p_grid: vec![0.0, 0.05, 0.1, 0.15, 0.2, 0.25, 0.3, 0.35, 0.4, 0.45],
            trials: 20,
            base_seed: 1,
        }
    }
}

/// Paths are relative to the directory holding the config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IoConfig {
    pub observations: Option<PathBuf>,
    pub truth: Option<PathBuf>,
    pub output_dir: PathBuf,
}

impl Default for IoConfig {
    fn default() -> Self {
        Self {
            observations: None,
            truth: None,
            output_dir: PathBuf::from("out"),
        }
    }
}

impl RunConfig {
    /// Checks every section, naming the offending key on failure.
    pub fn validate(&self) -> Result<(), CliError> {
        let named = |section: &str, e: &dyn std::fmt::Display| CliError::Config(format!("{section}: {e}"));
        self.scenario.validate().map_err(|e| named("scenario", &e))?;
        self.fault.validate().map_err(|e| named("fault", &e))?;
        self.solver.validate().map_err(|e| named("solver", &e))?;
        self.robust.validate().map_err(|e| named("robust", &e))?;
        self.estimator.validate().map_err(|e| named("estimator", &e))?;
        for (i, &p) in self.sweep.p_grid.iter().enumerate() {
            if validate_probability(p).is_err() {
                return Err(CliError::Config(format!(
                    "sweep.p_grid[{i}] = {p}: fault probability must lie in [0, {MAX_FAULT_PROBABILITY}] \
                     (at most {:.0}% of observables may be faulted)",
                    MAX_FAULT_PROBABILITY * 100.0
                )));
            }
        }
        if self.sweep.trials == 0 {
            return Err(CliError::Config("sweep.trials must be at least 1".into()));
        }
        if self.sweep.schemes.is_empty() || self.sweep.p_grid.is_empty() {
            return Err(CliError::Config("sweep.schemes and sweep.p_grid must be non-empty".into()));
        }
        Ok(())
    }
}

/// Applies `key.path=value` to a JSON tree. The value is parsed as JSON
/// when possible and taken as a string otherwise.
pub fn apply_override(root: &mut Value, assignment: &str) -> Result<(), CliError> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("--set expects KEY=VALUE, got {assignment:?}")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_owned()));
    let mut node = root;
    let parts: Vec<&str> = path.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::Config(format!("--set: malformed key {path:?}")));
    }
    for (i, part) in parts.iter().enumerate() {
        let obj = match node {
            Value::Object(map) => map,
            _ => {
                return Err(CliError::Config(format!(
                    "--set {path}: {} is not a section",
                    parts[..i].join(".")
                )))
            }
        };
        if i + 1 == parts.len() {
            obj.insert((*part).to_owned(), value);
            return Ok(());
        }
        node = obj
            .entry((*part).to_owned())
            .or_insert_with(|| Value::Object(Default::default()));
    }
    unreachable!("split yields at least one part")
}

/// Sets every seed in the configuration.
pub fn override_seeds(root: &mut Value, seed: u64) -> Result<(), CliError> {
    for key in ["scenario.seed", "fault.seed", "sweep.base_seed"] {
        apply_override(root, &format!("{key}={seed}"))?;
    }
    Ok(())
}

/// Reads, overrides, parses and validates a configuration file.
pub fn load(path: &Path, overrides: &[String], seed: Option<u64>) -> Result<RunConfig, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Io(format!("cannot read config {}: {e}", path.display())))?;
    let mut tree: Value = serde_json::from_str(&text)
        .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    if !tree.is_object() {
        return Err(CliError::Config(format!("{}: top level must be an object", path.display())));
    }
    for assignment in overrides {
        apply_override(&mut tree, assignment)?;
    }
    if let Some(seed) = seed {
        override_seeds(&mut tree, seed)?;
    }
    let mut config: RunConfig = serde_path_to_error::deserialize(tree).map_err(|e| {
        let key = e.path().to_string();
        CliError::Config(format!("{}: at `{key}`: {}", path.display(), e.inner()))
    })?;
    let base = path.parent().unwrap_or(Path::new(""));
    for p in [&mut config.io.observations, &mut config.io.truth].into_iter().flatten() {
        if p.is_relative() {
            *p = base.join(&*p);
        }
    }
    if config.io.output_dir.is_relative() {
        config.io.output_dir = base.join(&config.io.output_dir);
    }
    config.validate()?;
    Ok(config)
}
