//! Experiment configuration: JSON file, then `--set key=value` overrides.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use modeforge::field::{GridSpec, DEFAULT_WAIST};
use modeforge::gates::{standard_gate, GateSpec};
use modeforge::protocols::{Oracle, Setup, SpacingSearchConfig};
use modeforge::stack::{PerturbationSpec, PhaseLayerStack};
use modeforge::trainer::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    pub nx: usize,
    pub pitch_m: f64,
    pub wavelength_m: f64,
    pub waist_m: f64,
    /// Zero-pad propagation to suppress wrap-around.
    pub padded: bool,
}

impl Default for GridConfig {
    fn default() -> Self {
        let g = GridSpec::desk();
        Self {
            nx: g.nx,
            pitch_m: g.pitch,
            wavelength_m: g.wavelength,
            waist_m: DEFAULT_WAIST,
            padded: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TomographyConfig {
    /// Skip the optics and measure the gate matrix itself.
    pub ideal: bool,
    /// Shots per (probe, measurement basis); exact frequencies when null.
    pub shots: Option<u64>,
    pub max_iters: usize,
    pub tol: f64,
}

impl Default for TomographyConfig {
    fn default() -> Self {
        Self {
            ideal: false,
            shots: None,
            max_iters: modeforge::tomography::DEFAULT_MLE_ITERS,
            tol: modeforge::tomography::DEFAULT_MLE_TOL,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub axis: String,
    pub points: Vec<f64>,
    pub zernike_terms: Vec<usize>,
    pub test_offsets: Vec<f64>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            axis: "gray_levels".into(),
            points: vec![4.0, 8.0, 16.0, 32.0, 64.0, 128.0, 256.0, 512.0],
            zernike_terms: vec![4],
            test_offsets: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeutschModeName {
    Ideal,
    Trained,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DeutschConfig {
    pub oracle: Oracle,
    pub mode: DeutschModeName,
}

impl Default for DeutschConfig {
    fn default() -> Self {
        Self {
            oracle: Oracle::Balanced,
            mode: DeutschModeName::Ideal,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct SpacingConfig {
    #[serde(flatten)]
    pub search: SpacingSearchConfig,
    /// Score spacings with a synthetic peak at this value instead of a stack.
    pub synthetic_peak_m: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct IdentifyConfig {
    /// Candidate gate names; the built-in set for the dimension when empty.
    pub candidates: Vec<String>,
    /// Read measured frequencies from this CSV instead of simulating them.
    pub record_csv: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WfmConfig {
    pub iterations: usize,
}

impl Default for WfmConfig {
    fn default() -> Self {
        Self { iterations: 100 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub grid: GridConfig,
    /// Built-in gate name, used unless `gate_file` is set.
    pub gate: String,
    /// JSON matrix file for a custom gate.
    pub gate_file: Option<PathBuf>,
    pub layers: usize,
    /// Every gap, source to first layer and last layer to detector.
    pub spacing_m: f64,
    /// Per-gap spacings (layers + 1 entries); overrides `spacing_m`.
    pub spacings_m: Option<Vec<f64>>,
    pub train: TrainConfig,
    /// Applied to the stack before it is measured.
    pub perturbation: PerturbationSpec,
    /// Stack manifest to load instead of training.
    pub stack: Option<PathBuf>,
    pub output_dir: PathBuf,
    pub tomography: TomographyConfig,
    pub sweep: SweepConfig,
    pub deutsch: DeutschConfig,
    pub spacing: SpacingConfig,
    pub identify: IdentifyConfig,
    pub wfm: WfmConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            grid: GridConfig::default(),
            gate: "X1".into(),
            gate_file: None,
            layers: 4,
            spacing_m: 41e-3,
            spacings_m: None,
            train: TrainConfig::default(),
            perturbation: PerturbationSpec::default(),
            stack: None,
            output_dir: PathBuf::from("modeforge-out"),
            tomography: TomographyConfig::default(),
            sweep: SweepConfig::default(),
            deutsch: DeutschConfig::default(),
            spacing: SpacingConfig::default(),
            identify: IdentifyConfig::default(),
            wfm: WfmConfig::default(),
        }
    }
}

/// Sets `path` (dot separated) in `root`; the key must already exist.
pub fn apply_override(root: &mut Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| anyhow!("override `{assignment}` is not key=value"))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = root;
    for part in key.split('.') {
        node = node
            .as_object_mut()
            .and_then(|m| m.get_mut(part))
            .ok_or_else(|| anyhow!("unknown config key `{key}`"))?;
    }
    *node = value;
    Ok(())
}

fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

impl ExperimentConfig {
    /// Defaults, then the optional file, then overrides in order.
    pub fn resolve(file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut value = serde_json::to_value(Self::default())?;
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
            let patch: Value =
                serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
            if !patch.is_object() {
                bail!("config {} must be a JSON object", path.display());
            }
            merge(&mut value, patch);
        }
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let config: Self = serde_json::from_value(value).context("invalid config")?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        self.grid_spec()?;
        if !(self.grid.waist_m > 0.0) {
            bail!("grid.waist_m must be positive");
        }
        if self.layers == 0 {
            bail!("layers must be at least 1");
        }
        self.spacings()?;
        self.train.validate()?;
        self.spacing.search.validate()?;
        for path in [&self.gate_file, &self.stack, &self.identify.record_csv].into_iter().flatten() {
            if !path.exists() {
                bail!("file not found: {}", path.display());
            }
        }
        Ok(())
    }

    pub fn grid_spec(&self) -> Result<GridSpec> {
        Ok(GridSpec::square(self.grid.nx, self.grid.pitch_m, self.grid.wavelength_m)?)
    }

    pub fn spacings(&self) -> Result<Vec<f64>> {
        let s = match &self.spacings_m {
            Some(s) => s.clone(),
            None => vec![self.spacing_m; self.layers + 1],
        };
        if s.len() != self.layers + 1 {
            bail!("spacings_m needs {} entries, got {}", self.layers + 1, s.len());
        }
        if s.iter().any(|&z| !(z > 0.0 && z.is_finite())) {
            bail!("spacings must be positive");
        }
        Ok(s)
    }

    pub fn gate_spec(&self) -> Result<GateSpec> {
        match &self.gate_file {
            Some(path) => Ok(GateSpec::load(path)?),
            None => Ok(standard_gate(&self.gate)?),
        }
    }

    pub fn setup(&self, gate: GateSpec) -> Result<Setup> {
        Ok(Setup {
            grid: self.grid_spec()?,
            waist: self.grid.waist_m,
            gate,
            layers: self.layers,
            spacing: self.spacing_m,
            train: self.train.clone(),
        })
    }

    /// Untrained stack with the configured geometry.
    pub fn initial_stack(&self) -> Result<PhaseLayerStack> {
        let grid = self.grid_spec()?;
        let layers = (0..self.layers).map(|_| modeforge::stack::PhaseLayer::zeros(grid)).collect();
        Ok(PhaseLayerStack::new(grid, layers, self.spacings()?)?.with_padding(self.grid.padded))
    }

    pub fn echo(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(dir.join("config.json"), text + "\n")?;
        Ok(())
    }
}
