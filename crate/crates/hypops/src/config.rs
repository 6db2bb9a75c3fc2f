//! Experiment configuration files (TOML). The format is documented in
//! `docs/formats.md`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use hypops_core::model::ActionClass;
use hypops_core::{PdmpOptions, Program};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Toml { path: PathBuf, source: toml::de::Error },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

/// The reference the CTMC ladder is compared against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// CTMC ensembles only.
    Ctmc,
    /// Limit PDMP ensemble.
    Pdmp,
    /// Deterministic fluid limit (one ODE solve).
    Fluid,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Ctmc => "ctmc",
            Mode::Pdmp => "pdmp",
            Mode::Fluid => "fluid",
        }
    }
}

/// Observation grid: a step from 0 or explicit times.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Grid {
    Step(f64),
    Times(Vec<f64>),
}

impl Default for Grid {
    fn default() -> Grid {
        Grid::Times(Vec::new())
    }
}

impl Grid {
    /// Sorted grid times in `[0, horizon]`, always including the horizon.
    pub fn times(&self, horizon: f64) -> Vec<f64> {
        let mut out = match self {
            Grid::Step(h) if *h > 0.0 => {
                let n = (horizon / h + 1e-9).floor() as usize;
                (0..=n).map(|k| k as f64 * h).collect()
            }
            Grid::Step(_) => Vec::new(),
            Grid::Times(ts) => ts.clone(),
        };
        out.push(horizon);
        out.sort_by(f64::total_cmp);
        out.dedup();
        out
    }
}

/// A probe: the distribution of one variable at one time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Probe {
    pub time: f64,
    pub var: String,
}

impl Probe {
    pub fn label(&self) -> String {
        format!("{}@{}", self.var, self.time)
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Tolerances {
    /// Largest KS distance at the top of the ladder for a passing verdict.
    pub ks_max: Option<f64>,
    pub atol: Option<f64>,
    pub rtol: Option<f64>,
    pub event_tol: Option<f64>,
    pub tol_act: Option<f64>,
    pub slide_tol: Option<f64>,
}

pub const DEFAULT_KS_MAX: f64 = 0.1;

impl Tolerances {
    pub fn ks_max(&self) -> f64 {
        self.ks_max.unwrap_or(DEFAULT_KS_MAX)
    }

    pub fn apply(&self, o: &mut PdmpOptions) {
        let set = |dst: &mut f64, v: Option<f64>| {
            if let Some(v) = v {
                *dst = v;
            }
        };
        set(&mut o.atol, self.atol);
        set(&mut o.rtol, self.rtol);
        set(&mut o.event_tol, self.event_tol);
        set(&mut o.tol_act, self.tol_act);
        set(&mut o.slide_tol, self.slide_tol);
    }
}

/// Named overrides of the run shape, e.g. full-length `paper` horizons next
/// to short `desk` ones.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Preset {
    pub horizon: Option<f64>,
    pub grid: Option<Grid>,
    pub probes: Option<Vec<Probe>>,
    pub reps: Option<usize>,
    pub sizes: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Model file, relative to the configuration file.
    pub model: PathBuf,
    pub mode: Mode,
    #[serde(default)]
    pub sizes: Vec<f64>,
    pub horizon: f64,
    #[serde(default)]
    pub grid: Grid,
    #[serde(default)]
    pub probes: Vec<Probe>,
    pub reps: usize,
    #[serde(default)]
    pub seed: u64,
    /// Output directory, relative to the configuration file.
    pub out_dir: PathBuf,
    #[serde(default)]
    pub tolerances: Tolerances,
    #[serde(default)]
    pub assert_converges: bool,
    /// Run even when the scaling check fails.
    #[serde(default)]
    pub force: bool,
    /// Transitions whose firing times are histogrammed.
    #[serde(default)]
    pub track: Vec<String>,
    /// Per-action class overrides (`continuous` or `discrete`).
    #[serde(default)]
    pub classes: BTreeMap<String, ClassName>,
    #[serde(default)]
    pub presets: BTreeMap<String, Preset>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClassName {
    Continuous,
    Discrete,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str, path: &Path) -> Result<ExperimentConfig, ConfigError> {
        let mut cfg: ExperimentConfig =
            toml::from_str(text).map_err(|source| ConfigError::Toml { path: path.into(), source })?;
        let base = path.parent().unwrap_or(Path::new("."));
        if cfg.model.is_relative() {
            cfg.model = base.join(&cfg.model);
        }
        if cfg.out_dir.is_relative() {
            cfg.out_dir = base.join(&cfg.out_dir);
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<ExperimentConfig, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.into(), source })?;
        ExperimentConfig::from_toml(&text, path)
    }

    pub fn apply_preset(&mut self, name: &str) -> Result<(), ConfigError> {
        let p = self
            .presets
            .get(name)
            .cloned()
            .ok_or_else(|| ConfigError::Invalid(format!("no preset named `{name}`")))?;
        if let Some(h) = p.horizon {
            self.horizon = h;
        }
        if let Some(g) = p.grid {
            self.grid = g;
        }
        if let Some(pr) = p.probes {
            self.probes = pr;
        }
        if let Some(r) = p.reps {
            self.reps = r;
        }
        if let Some(s) = p.sizes {
            self.sizes = s;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return bad(format!("horizon must be positive, got {}", self.horizon));
        }
        if self.reps == 0 {
            return bad("reps must be at least 1".into());
        }
        if let Grid::Times(ts) = &self.grid {
            if let Some(t) = ts.iter().find(|t| !(**t >= 0.0 && **t <= self.horizon)) {
                return bad(format!("grid time {t} outside [0, {}]", self.horizon));
            }
        }
        if let Grid::Step(h) = self.grid {
            if !(h > 0.0) {
                return bad(format!("grid step must be positive, got {h}"));
            }
        }
        if let Some(p) = self.probes.iter().find(|p| !(p.time >= 0.0 && p.time <= self.horizon)) {
            return bad(format!("probe {} outside [0, {}]", p.label(), self.horizon));
        }
        if let Some(n) = self.sizes.iter().find(|n| !(**n > 0.0)) {
            return bad(format!("size {n} must be positive"));
        }
        if self.mode != Mode::Ctmc && self.sizes.is_empty() && self.assert_converges {
            return bad("assert_converges needs at least one CTMC size".into());
        }
        Ok(())
    }

    /// Grid times with the probe times merged in.
    pub fn grid_times(&self) -> Vec<f64> {
        let mut g = self.grid.times(self.horizon);
        g.extend(self.probes.iter().map(|p| p.time));
        g.sort_by(f64::total_cmp);
        g.dedup();
        g
    }
}

/// Applies per-action class overrides to `p`.
pub fn override_classes(p: &mut Program, classes: &BTreeMap<String, ClassName>) -> Result<(), ConfigError> {
    for (name, class) in classes {
        let action = p
            .components
            .iter_mut()
            .flat_map(|c| c.actions.iter_mut())
            .find(|a| &a.name == name)
            .ok_or_else(|| ConfigError::Invalid(format!("class override for unknown action `{name}`")))?;
        action.class = match class {
            ClassName::Continuous => ActionClass::Continuous,
            ClassName::Discrete => ActionClass::Discrete,
        };
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    const CFG: &str = r#"
        model = "../models/m.sccp"
        mode = "pdmp"
        sizes = [100, 1000]
        horizon = 50
        grid = 10
        reps = 20
        seed = 7
        out_dir = "out"
        track = ["doom"]

        [[probes]]
        time = 25
        var = "X"

        [tolerances]
        ks_max = 0.2

        [classes]
        up = "discrete"

        [presets.paper]
        horizon = 500
        probes = [{ time = 500, var = "X" }]
    "#;

    #[test]
    fn parses_and_resolves_paths() {
        let c = ExperimentConfig::from_toml(CFG, Path::new("configs/a.toml")).unwrap();
        assert_eq!(c.model, Path::new("configs/../models/m.sccp"));
        assert_eq!(c.out_dir, Path::new("configs/out"));
        assert_eq!(c.mode, Mode::Pdmp);
        assert_eq!(c.tolerances.ks_max(), 0.2);
        assert_eq!(c.classes["up"], ClassName::Discrete);
        c.validate().unwrap();
        assert_eq!(c.grid_times(), vec![0.0, 10.0, 20.0, 25.0, 30.0, 40.0, 50.0]);
    }

    #[test]
    fn presets_override_the_run_shape() {
        let mut c = ExperimentConfig::from_toml(CFG, Path::new("a.toml")).unwrap();
        c.apply_preset("paper").unwrap();
        assert_eq!(c.horizon, 500.0);
        assert_eq!(c.probes[0].time, 500.0);
        assert!(c.apply_preset("desk").is_err());
    }

    #[test]
    fn rejects_bad_values() {
        let mut c = ExperimentConfig::from_toml(CFG, Path::new("a.toml")).unwrap();
        c.reps = 0;
        assert!(c.validate().is_err());
        c.reps = 1;
        c.probes[0].time = 60.0;
        assert!(c.validate().is_err());
        assert!(ExperimentConfig::from_toml("model = 1", Path::new("a.toml")).is_err());
        let unknown = CFG.replace("track", "tracks");
        assert!(ExperimentConfig::from_toml(&unknown, Path::new("a.toml")).is_err());
    }

    #[test]
    fn grid_forms() {
        assert_eq!(Grid::Step(0.5).times(1.2), vec![0.0, 0.5, 1.0, 1.2]);
        assert_eq!(Grid::Times(vec![0.3]).times(1.0), vec![0.3, 1.0]);
    }
}
