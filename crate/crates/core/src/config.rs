//! Layered settings: built-in defaults, then a TOML file, then environment
//! variables.
//!
//! Every section is optional. An environment variable
//! `LATROUTE_<SECTION>_<KEY>` overrides `key` in `[section]`; deeper tables
//! are addressed with a double underscore, e.g.
//! `LATROUTE_SIMULATION_POOL__STEPS=20`. Values are parsed as TOML literals
//! (`3`, `0.5`, `true`, `[1, 2]`), falling back to a plain string.
//!
//! ```toml
//! [calibration]
//! dim = 3
//! epochs = 6000
//!
//! [router]
//! policy = "max-acc"
//! constraints = { max_total_cost = 0.5 }
//!
//! [simulation]
//! experiment = "pool"
//! world = { seed = 0, models = 50, items = 500, D = 3 }
//! pool = { steps = 10, stream = "dominance" }
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::anchors::DEFAULT_EPSILON;
use crate::error::{Error, Result};
use crate::estimators::{DEFAULT_VERBOSITY_BINS, WHITESPACE_TOKENIZER};
use crate::irt::CalibrationConfig;
use crate::predictor::PredictorConfig;
use crate::router::{GlobalConstraints, PolicyWeights, RouteOptions};
use crate::sim::WorldConfig;

pub const ENV_PREFIX: &str = "LATROUTE_";

const SECTIONS: [&str; 7] = [
    "calibration",
    "anchors",
    "estimators",
    "predictor",
    "router",
    "service",
    "simulation",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnchorSettings {
    pub count: usize,
    pub epsilon: f64,
}

impl Default for AnchorSettings {
    fn default() -> Self {
        Self {
            count: 40,
            epsilon: DEFAULT_EPSILON,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EstimatorSettings {
    pub verbosity_bins: usize,
    pub tokenizer: String,
}

impl Default for EstimatorSettings {
    fn default() -> Self {
        Self {
            verbosity_bins: DEFAULT_VERBOSITY_BINS,
            tokenizer: WHITESPACE_TOKENIZER.into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RouterSettings {
    /// Preset name; ignored when `weights` is set.
    pub policy: String,
    pub weights: Option<PolicyWeights>,
    pub constraints: GlobalConstraints,
    pub normalize: bool,
    pub exact_threshold: usize,
    pub node_limit: u64,
    pub lagrangian_iterations: usize,
}

impl Default for RouterSettings {
    fn default() -> Self {
        let o = RouteOptions::default();
        Self {
            policy: "balanced".into(),
            weights: None,
            constraints: GlobalConstraints::default(),
            normalize: o.normalize,
            exact_threshold: o.exact_threshold,
            node_limit: o.node_limit,
            lagrangian_iterations: o.lagrangian_iterations,
        }
    }
}

impl RouterSettings {
    pub fn options(&self) -> RouteOptions {
        RouteOptions {
            normalize: self.normalize,
            exact_threshold: self.exact_threshold,
            node_limit: self.node_limit,
            lagrangian_iterations: self.lagrangian_iterations,
        }
    }

    pub fn resolved_weights(&self) -> Result<PolicyWeights> {
        let w = match self.weights {
            Some(w) => w,
            None => PolicyWeights::preset(&self.policy)
                .ok_or_else(|| Error::invalid(format!("unknown policy `{}`", self.policy)))?,
        };
        w.validate()?;
        Ok(w)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceSettings {
    pub addr: String,
    pub registry_dir: Option<String>,
}

impl Default for ServiceSettings {
    fn default() -> Self {
        Self {
            addr: "127.0.0.1:7878".into(),
            registry_dir: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Experiment {
    Pool,
    Ablation,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StreamKind {
    /// Each newcomer shifts the template's θ up by `delta` on every axis.
    Dominance,
    /// Independent draws from the world's priors.
    Random,
    /// Copies of one template under different ids.
    Clone,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PoolSettings {
    pub pool_size: usize,
    pub steps: usize,
    pub policy: String,
    pub constraints: GlobalConstraints,
    pub eval_items: usize,
    pub anchors: usize,
    pub stream: StreamKind,
    pub delta: f64,
    pub seed: u64,
}

impl Default for PoolSettings {
    fn default() -> Self {
        Self {
            pool_size: 6,
            steps: 10,
            policy: "max-acc".into(),
            constraints: GlobalConstraints::default(),
            eval_items: 100,
            anchors: 40,
            stream: StreamKind::Dominance,
            delta: 0.25,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationSettings {
    pub anchors: usize,
    pub trials: usize,
    pub seed: u64,
}

impl Default for AblationSettings {
    fn default() -> Self {
        Self {
            anchors: 40,
            trials: 20,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulationSettings {
    pub experiment: Experiment,
    pub world: WorldConfig,
    pub pool: PoolSettings,
    pub ablation: AblationSettings,
}

impl Default for SimulationSettings {
    fn default() -> Self {
        Self {
            experiment: Experiment::Pool,
            world: WorldConfig::default(),
            pool: PoolSettings::default(),
            ablation: AblationSettings::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Settings {
    pub calibration: CalibrationConfig,
    pub anchors: AnchorSettings,
    pub estimators: EstimatorSettings,
    pub predictor: PredictorConfig,
    pub router: RouterSettings,
    pub service: ServiceSettings,
    pub simulation: SimulationSettings,
}

impl Default for Settings {
    fn default() -> Self {
        Self {
            calibration: CalibrationConfig::new(3),
            anchors: AnchorSettings::default(),
            estimators: EstimatorSettings::default(),
            predictor: PredictorConfig::default(),
            router: RouterSettings::default(),
            service: ServiceSettings::default(),
            simulation: SimulationSettings::default(),
        }
    }
}

fn parse_literal(raw: &str) -> Value {
    toml::from_str::<Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

fn merge_tables(base: &mut Table, top: Table) {
    for (k, v) in top {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(t)) => merge_tables(b, t),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Applies one `<SECTION>_<KEY>` override (prefix already stripped).
fn apply_override(root: &mut Table, name: &str, raw: &str) -> Result<()> {
    let lower = name.to_ascii_lowercase();
    let section = SECTIONS
        .iter()
        .find(|s| lower.starts_with(&format!("{s}_")))
        .ok_or_else(|| Error::Parse(format!("{ENV_PREFIX}{name}: unknown section")))?;
    let path: Vec<&str> = lower[section.len() + 1..].split("__").collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(Error::Parse(format!("{ENV_PREFIX}{name}: empty key")));
    }
    let mut table = root
        .entry(section.to_string())
        .or_insert_with(|| Value::Table(Table::new()))
        .as_table_mut()
        .ok_or_else(|| Error::Parse(format!("`{section}` is not a table")))?;
    for key in &path[..path.len() - 1] {
        table = table
            .entry(key.to_string())
            .or_insert_with(|| Value::Table(Table::new()))
            .as_table_mut()
            .ok_or_else(|| Error::Parse(format!("{ENV_PREFIX}{name}: `{key}` is not a table")))?;
    }
    table.insert(path[path.len() - 1].to_string(), parse_literal(raw));
    Ok(())
}

impl Settings {
    /// Parses `text` and applies overrides from `env` (full variable names;
    /// anything without the prefix is ignored).
    pub fn from_toml_with_env<I>(text: &str, env: I) -> Result<Self>
    where
        I: IntoIterator<Item = (String, String)>,
    {
        let root: Table = toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        Self::from_table_with_env(root, env)
    }

    fn from_table_with_env<I>(mut root: Table, env: I) -> Result<Self>
    where
        I: IntoIterator<Item = (String, String)>,
    {
        let mut overrides: Vec<(String, String)> = env
            .into_iter()
            .filter_map(|(k, v)| k.strip_prefix(ENV_PREFIX).map(|rest| (rest.to_string(), v)))
            .collect();
        overrides.sort();
        for (name, raw) in &overrides {
            apply_override(&mut root, name, raw)?;
        }
        let settings: Settings = Value::Table(root)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Parse(e.to_string()))?;
        settings.validate()?;
        Ok(settings)
    }

    /// Defaults, then `path` if given, then the process environment.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        Self::load_layers(path.as_slice())
    }

    /// Defaults, then each file in order (later files win key by key, tables
    /// merge recursively), then the process environment.
    pub fn load_layers(paths: &[&Path]) -> Result<Self> {
        let mut root = Table::new();
        for p in paths {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(*p, e))?;
            let layer: Table = toml::from_str(&text).map_err(|e| Error::Parse(format!("{}: {e}", p.display())))?;
            merge_tables(&mut root, layer);
        }
        Self::from_table_with_env(root, std::env::vars())
    }

    /// Calibration settings with the latent dimension forced to `dim`.
    pub fn calibration_for(&self, dim: usize) -> CalibrationConfig {
        let mut c = self.calibration.clone();
        if c.dim != dim {
            c.dim = dim;
            c.prior_mean.clear();
        }
        c
    }

    pub fn validate(&self) -> Result<()> {
        self.calibration.validate()?;
        self.predictor.validate()?;
        self.router.constraints.validate()?;
        self.router.resolved_weights()?;
        self.simulation.pool.constraints.validate()?;
        if PolicyWeights::preset(&self.simulation.pool.policy).is_none() {
            return Err(Error::invalid(format!(
                "unknown simulation policy `{}`",
                self.simulation.pool.policy
            )));
        }
        if !(self.anchors.epsilon > 0.0) {
            return Err(Error::invalid("anchors.epsilon must be > 0"));
        }
        if self.estimators.verbosity_bins == 0 {
            return Err(Error::invalid("estimators.verbosity_bins must be >= 1"));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("settings serialize")
    }
}
