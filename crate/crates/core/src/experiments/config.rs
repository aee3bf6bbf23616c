//! Run configuration: a TOML file with `model`, `grid`, `noise` and
//! `experiment` tables. Every key can be overridden with a dotted
//! `key=value` pair.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::grid::{BoundaryCondition, Grid};
use crate::metrics::MetricParams;
use crate::models::{CustomCoefficient, InitialDatum, ModelKind, ModelSpec};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelChoice {
    Sbm,
    Fvp,
    Additive,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub kind: ModelChoice,
    pub epsilon: f64,
    pub initial: InitialDatum,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            kind: ModelChoice::Fvp,
            epsilon: 0.01,
            initial: InitialDatum::GaussianCdf { m: 0.0, s: 1.0 },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    pub half_width: f64,
    pub dx: f64,
    pub horizon: f64,
    pub dt: f64,
    pub na: usize,
    /// Defaults to pinned ends for Fleming–Viot and zero flux otherwise.
    pub bc: Option<BoundaryCondition>,
    /// Defaults to the model's own window.
    pub a_min: Option<f64>,
    pub a_max: Option<f64>,
    /// Slack added around the datum's range for the SBM window.
    pub window_margin: f64,
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig {
            half_width: 8.0,
            dx: 0.05,
            horizon: 1.0,
            dt: 1e-3,
            na: 64,
            bc: None,
            a_min: None,
            a_max: None,
            window_margin: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseConfig {
    pub root_seed: u64,
    pub realizations: usize,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        NoiseConfig {
            root_seed: 20240611,
            realizations: 200,
        }
    }
}

/// Deviation functional measuring the distance of `u^ε` from `u⁰`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Deviation {
    /// `sup_{t,y} e^{−β|y|} |u^ε − u⁰|`.
    WeightedSup,
    /// `max_t d_{α,β}(u^ε_t, u⁰_t)`.
    MetricD,
    /// `max_t` of the dictionary distance between the associated measures.
    WeakMetric,
    /// Signed shift of the terminal mean `∫ y dμ_T`.
    TerminalMeanShift,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub epsilons: Vec<f64>,
    pub deltas: Vec<f64>,
    pub deviation: Deviation,
    /// Weight exponent of the weighted-sup and weak deviations.
    pub beta: f64,
    pub metric: MetricParams,
    /// Comparison times for particle runs.
    pub times: Vec<f64>,
    /// Particle refinement `K`.
    pub refinement: f64,
    /// Branching-rate multiplier; anything but 1 is deliberately wrong.
    pub rate_factor: f64,
    pub moment_order: u32,
    pub pair_count: usize,
    pub penalty_weights: Vec<f64>,
    pub max_iter: usize,
    pub floor: f64,
    /// Largest admissible `|z|` in particle comparisons.
    pub z_max: f64,
    /// Relative spread tolerated when judging exponent stabilization.
    pub stabilization_tol: f64,
    /// Minimum number of hits for an exponent row.
    pub min_hits: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            epsilons: vec![0.1, 0.03, 0.01, 0.003],
            deltas: vec![0.1],
            deviation: Deviation::WeightedSup,
            beta: 1.0,
            metric: MetricParams::default(),
            times: vec![0.25, 0.5, 1.0],
            refinement: 50.0,
            rate_factor: 1.0,
            moment_order: 4,
            pair_count: 48,
            penalty_weights: vec![1e1, 1e2, 1e3, 1e4, 1e5],
            max_iter: 200,
            floor: crate::rate::DEFAULT_FLOOR,
            z_max: 3.0,
            stabilization_tol: 0.3,
            min_hits: 10,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub grid: GridConfig,
    pub noise: NoiseConfig,
    pub experiment: ExperimentConfig,
}

fn parse_value(raw: &str) -> toml::Value {
    // a bare value is parsed as TOML when possible, as a string otherwise
    match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// Sets `path` (dotted) in `table` to `raw`, creating tables on the way.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{assignment}` is not key=value")))?;
    let keys: Vec<&str> = path.trim().split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(Error::Config(format!("bad key path `{path}`")));
    }
    let mut cur = table;
    for k in &keys[..keys.len() - 1] {
        let entry = cur
            .entry(k.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("`{k}` in `{path}` is not a table")))?;
    }
    cur.insert(keys[keys.len() - 1].to_string(), parse_value(raw.trim()));
    Ok(())
}

impl RunConfig {
    /// Parses TOML text and applies the overrides in order.
    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = text.parse().map_err(|e| Error::Config(format!("{e}")))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e| Error::Config(format!("{e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &std::path::Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text, overrides)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let e = &self.experiment;
        if e.epsilons.iter().any(|x| !(*x >= 0.0 && x.is_finite())) {
            return Err(Error::Config("epsilons must be finite and >= 0".into()));
        }
        if e.deltas.iter().any(|x| !(*x >= 0.0 && x.is_finite())) {
            return Err(Error::Config("deltas must be finite and >= 0".into()));
        }
        if e.moment_order == 0 || e.moment_order % 2 == 1 {
            return Err(Error::Config(format!("moment order must be even, got {}", e.moment_order)));
        }
        if self.noise.realizations == 0 {
            return Err(Error::Config("need at least one realization".into()));
        }
        e.metric.validate()?;
        Ok(())
    }

    pub fn model_spec(&self) -> Result<ModelSpec> {
        let kind = match self.model.kind {
            ModelChoice::Sbm => ModelKind::Sbm,
            ModelChoice::Fvp => ModelKind::Fvp,
            ModelChoice::Additive => ModelKind::Custom(CustomCoefficient::additive()),
        };
        ModelSpec::new(kind, self.model.initial.clone(), self.model.epsilon)
    }

    /// Grid with the model's default boundary condition and noise window.
    pub fn grid(&self) -> Result<Grid> {
        let g = &self.grid;
        let bc = g.bc.unwrap_or(match self.model.kind {
            ModelChoice::Fvp => BoundaryCondition::DirichletPinned,
            _ => BoundaryCondition::Neumann,
        });
        let probe = Grid::with_spacing(g.half_width, g.dx, g.horizon, g.dt, 0.0, 1.0, g.na, bc)?;
        let (lo, hi) = self.model_spec()?.default_noise_window(&probe, g.window_margin);
        probe.with_noise_window(g.a_min.unwrap_or(lo), g.a_max.unwrap_or(hi), g.na)
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex_digest(json.as_bytes())
    }
}

pub fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}
