//! Run configuration files.

use std::path::{Path, PathBuf};

use klgame::sim::{Method, ScenarioSpec, SCHEMA_VERSION};
use serde::{Deserialize, Serialize};

use crate::CliError;

/// Which artifacts a run writes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Emit {
    pub trajectories: bool,
    pub stats: bool,
    pub solver_trace: bool,
}

impl Default for Emit {
    fn default() -> Self {
        Emit {
            trajectories: true,
            stats: true,
            solver_trace: true,
        }
    }
}

/// A versioned run configuration: the scenario plus what to run and emit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    pub scenario: ScenarioSpec,
    /// Method of `solve`.
    #[serde(default = "default_method")]
    pub method: Method,
    /// Methods compared by `batch`.
    #[serde(default = "default_batch_methods")]
    pub batch_methods: Vec<Method>,
    #[serde(default = "default_trials")]
    pub n_trials: usize,
    /// Horizon of `solve`; defaults to the scenario's `sim_length`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub solve_horizon: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub emit: Emit,
}

fn default_method() -> Method {
    Method::Klgame
}

fn default_batch_methods() -> Vec<Method> {
    vec![Method::Ilqgames, Method::Maxent, Method::Klgame]
}

fn default_trials() -> usize {
    100
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| CliError::Config(format!("invalid config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Io(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| match e {
            CliError::Config(msg) => CliError::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.version != SCHEMA_VERSION {
            return Err(CliError::Config(format!(
                "unsupported config version {} (expected {SCHEMA_VERSION})",
                self.version
            )));
        }
        self.scenario.validate().map_err(|e| CliError::Config(format!("scenario: {e}")))?;
        if self.batch_methods.is_empty() {
            return Err(CliError::Config("batch_methods must not be empty".into()));
        }
        if self.n_trials == 0 {
            return Err(CliError::Config("n_trials must be >= 1".into()));
        }
        if self.solve_horizon == Some(0) {
            return Err(CliError::Config("solve_horizon must be >= 1".into()));
        }
        Ok(())
    }

    /// The scenario as solved by `solve`: planning horizon set to the solve horizon.
    pub fn solve_scenario(&self) -> ScenarioSpec {
        let mut spec = self.scenario.clone();
        spec.planning_horizon = self.solve_horizon.unwrap_or(spec.sim_length);
        spec.replan_interval = spec.replan_interval.min(spec.planning_horizon);
        spec
    }
}
