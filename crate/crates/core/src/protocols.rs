//! Experiments assembled from the other modules: the Deutsch algorithm,
//! spacing search, gate identification and parameter sweeps.

use std::io::Write;
use std::path::Path;

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{GridSpec, DEFAULT_WAIST};
use crate::gates::{decode, encode, standard_gate, GateSpec, ModeBasis, StateVector};
use crate::stack::{perturb, scale_pixels, PerturbationSpec, PhaseLayerStack, ScaleMode};
use crate::tomography::{
    chi_from_choi, mle_reconstruct, process_fidelity, OperatorBasis, ProcessMatrix, TomographyRecord,
    DEFAULT_MLE_ITERS, DEFAULT_MLE_TOL,
};
use crate::trainer::{train_d2nn, wfm_train, Metrics, TrainConfig, TrainOutcome, TrainingSet};

/// The function hidden in the Deutsch oracle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Oracle {
    Constant,
    Balanced,
}

impl Oracle {
    /// Oracle followed by the final Hadamards, as one unitary.
    pub fn gate(self) -> GateSpec {
        let name = match self {
            Oracle::Constant => "DEUTSCH_CONST",
            Oracle::Balanced => "DEUTSCH_BAL",
        };
        standard_gate(name).expect("built-in gate")
    }

    /// Index of the outcome the algorithm should return: |0⟩x|1⟩y or |1⟩x|1⟩y.
    pub fn expected_outcome(self) -> usize {
        match self {
            Oracle::Constant => 1,
            Oracle::Balanced => 3,
        }
    }
}

/// `(H⊗H)|0⟩x|1⟩y = ½(1, −1, 1, −1)`.
pub fn deutsch_input() -> StateVector {
    let h = Complex64::new(0.5, 0.0);
    StateVector::new(vec![h, -h, h, -h]).expect("unit vector")
}

#[derive(Debug, Clone, Copy)]
pub enum DeutschMode<'a> {
    Ideal,
    /// A stack trained for [`Oracle::gate`], with its two-qubit mode basis.
    Trained {
        stack: &'a PhaseLayerStack,
        basis: &'a ModeBasis,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeutschResult {
    pub oracle: Oracle,
    /// Raw projections onto |00⟩, |01⟩, |10⟩, |11⟩ (x first); sum ≤ 1.
    pub probabilities: [f64; 4],
    /// The same, renormalized over the four outcomes.
    pub normalized: [f64; 4],
    pub expected_outcome: usize,
}

impl DeutschResult {
    pub fn success_probability(&self) -> f64 {
        self.normalized[self.expected_outcome]
    }

    /// "constant" if the x qubit reads 0, otherwise "balanced".
    pub fn verdict(&self) -> Oracle {
        let px1 = self.normalized[2] + self.normalized[3];
        if px1 > 0.5 {
            Oracle::Balanced
        } else {
            Oracle::Constant
        }
    }
}

pub fn deutsch_run(oracle: Oracle, mode: DeutschMode<'_>) -> Result<DeutschResult> {
    let input = deutsch_input();
    let coeffs: Vec<Complex64> = match mode {
        DeutschMode::Ideal => oracle.gate().apply(&input)?.coeffs().as_slice().to_vec(),
        DeutschMode::Trained { stack, basis } => {
            if basis.dim() != 4 {
                return Err(Error::DimensionMismatch {
                    expected: 4,
                    actual: basis.dim(),
                });
            }
            let out = stack.forward(&encode(&input, basis)?)?;
            decode(&out, basis)?.coefficients
        }
    };
    let mut probabilities = [0.0; 4];
    for (p, c) in probabilities.iter_mut().zip(&coeffs) {
        *p = c.norm_sqr();
    }
    let total: f64 = probabilities.iter().sum();
    if total <= 0.0 {
        return Err(Error::ZeroInput);
    }
    let normalized = probabilities.map(|p| p / total);
    Ok(DeutschResult {
        oracle,
        probabilities,
        normalized,
        expected_outcome: oracle.expected_outcome(),
    })
}

/// Search ranges for [`spacing_search`], in meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SpacingSearchConfig {
    pub estimated_range: [f64; 2],
    pub range_threshold: [f64; 2],
    pub spacing_threshold: f64,
}

impl SpacingSearchConfig {
    pub fn validate(&self) -> Result<()> {
        let [e0, e1] = self.estimated_range;
        let [t0, t1] = self.range_threshold;
        if !(e0 < e1) || !(t0 < t1) || !(self.spacing_threshold > 0.0) {
            return Err(Error::InvalidParameter(
                "spacing search needs ordered ranges and a positive threshold".into(),
            ));
        }
        Ok(())
    }
}

impl Default for SpacingSearchConfig {
    fn default() -> Self {
        Self {
            estimated_range: [30e-3, 60e-3],
            range_threshold: [5e-3, 200e-3],
            spacing_threshold: 0.1e-3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SearchAction {
    ExtendUp,
    ExtendDown,
    Narrow,
    Stop,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchStep {
    pub range: [f64; 2],
    pub samples: [f64; 5],
    pub values: [f64; 5],
    pub action: SearchAction,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SearchExit {
    /// Range shrank below the spacing threshold.
    Converged,
    /// The next range would leave the allowed window.
    RangeThreshold,
    /// Maximum at one end without the minimum at the other.
    NoBranchMatched,
    MaxSteps,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpacingSearchResult {
    pub best: f64,
    pub final_range: [f64; 2],
    pub exit: SearchExit,
    pub trace: Vec<SearchStep>,
}

const MAX_SEARCH_STEPS: usize = 200;

fn argmax(v: &[f64]) -> usize {
    (0..v.len()).fold(0, |best, i| if v[i] > v[best] { i } else { best })
}

fn argmin(v: &[f64]) -> usize {
    (0..v.len()).fold(0, |best, i| if v[i] < v[best] { i } else { best })
}

/// Five-sample bracket search for the spacing that maximizes `evaluate`.
///
/// Each step samples the current range at 5 equally spaced points. A maximum
/// at the top with the minimum at the bottom doubles the range upwards (and
/// mirrored downwards); an interior maximum narrows to its two neighbours.
/// The result is the midpoint of the final range when the search converges,
/// otherwise the best sample seen in the last step.
pub fn spacing_search(
    mut evaluate: impl FnMut(f64) -> Result<f64>,
    cfg: &SpacingSearchConfig,
) -> Result<SpacingSearchResult> {
    cfg.validate()?;
    let [t0, t1] = cfg.range_threshold;
    let mut range = cfg.estimated_range;
    let mut trace: Vec<SearchStep> = Vec::new();
    let exit = loop {
        if range[1] - range[0] < cfg.spacing_threshold {
            break SearchExit::Converged;
        }
        if trace.len() >= MAX_SEARCH_STEPS {
            break SearchExit::MaxSteps;
        }
        let step = (range[1] - range[0]) / 4.0;
        let samples: [f64; 5] = std::array::from_fn(|i| if i == 4 { range[1] } else { range[0] + i as f64 * step });
        let mut values = [0.0; 5];
        for (v, &s) in values.iter_mut().zip(&samples) {
            *v = evaluate(s)?;
        }
        let (hi, lo) = (argmax(&values), argmin(&values));
        let (action, next) = if hi == 4 && lo == 0 {
            (SearchAction::ExtendUp, [samples[0], samples[0] + 2.0 * (samples[4] - samples[0])])
        } else if hi == 0 && lo == 4 {
            (SearchAction::ExtendDown, [samples[4] - 2.0 * (samples[4] - samples[0]), samples[4]])
        } else if (1..=3).contains(&hi) {
            (SearchAction::Narrow, [samples[hi - 1], samples[hi + 1]])
        } else {
            (SearchAction::Stop, range)
        };
        trace.push(SearchStep {
            range,
            samples,
            values,
            action,
        });
        if action == SearchAction::Stop {
            break SearchExit::NoBranchMatched;
        }
        if next[0] < t0 || next[1] > t1 {
            trace.last_mut().expect("just pushed").action = SearchAction::Stop;
            break SearchExit::RangeThreshold;
        }
        range = next;
    };
    let best = match (exit, trace.last()) {
        (SearchExit::Converged, _) | (_, None) => 0.5 * (range[0] + range[1]),
        (_, Some(last)) => last.samples[argmax(&last.values)],
    };
    Ok(SpacingSearchResult {
        best,
        final_range: range,
        exit,
        trace,
    })
}

/// Mean MUB visibility of `stack` with every inner gap set to `spacing`.
pub fn spacing_visibility(stack: &PhaseLayerStack, set: &TrainingSet, spacing: f64) -> Result<f64> {
    let inner = stack.spacings();
    if inner.len() < 3 {
        return Err(Error::InvalidParameter("spacing search needs at least two layers".into()));
    }
    // All inner gaps share the offset so a uniform design maps to `spacing`.
    let dz = spacing - inner[1];
    let moved = perturb(
        stack,
        &PerturbationSpec {
            dz,
            ..PerturbationSpec::default()
        },
    )?;
    Ok(set.evaluate(&moved)?.mean_visibility())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Identification {
    pub best: usize,
    pub best_name: String,
    /// Candidate names with their process fidelities, in candidate order.
    pub fidelities: Vec<(String, f64)>,
    /// Another candidate reached the same fidelity (within 1e-9).
    pub tie: bool,
    pub mle_iterations: usize,
}

/// Gates that are told apart in the identification demo.
pub fn default_candidates(dim: usize) -> Result<Vec<GateSpec>> {
    let names: &[&str] = match dim {
        // H0 is the identity and would duplicate X0.
        3 => &["X0", "X1", "X2", "H1", "H2", "H3"],
        4 => &["I4", "CNOT"],
        d => return Err(Error::Unsupported(format!("no candidate set for dimension {d}"))),
    };
    names.iter().map(|n| standard_gate(n)).collect()
}

/// Reconstructs the process once and scores it against every candidate.
pub fn identify_gate(rec: &TomographyRecord, candidates: &[GateSpec]) -> Result<Identification> {
    if candidates.is_empty() {
        return Err(Error::Empty("no candidate gates".into()));
    }
    for c in candidates {
        if c.dim() != rec.dim {
            return Err(Error::DimensionMismatch {
                expected: rec.dim,
                actual: c.dim(),
            });
        }
    }
    let mle = mle_reconstruct(rec, DEFAULT_MLE_ITERS, DEFAULT_MLE_TOL)?;
    let chi = chi_from_choi(&mle.choi, OperatorBasis::for_dim(rec.dim)?)?;
    let fidelities = candidates
        .iter()
        .map(|c| Ok((c.name.clone(), process_fidelity(&ProcessMatrix::of_unitary(c)?, &chi)?)))
        .collect::<Result<Vec<_>>>()?;
    let best = argmax(&fidelities.iter().map(|f| f.1).collect::<Vec<_>>());
    let tie = fidelities
        .iter()
        .enumerate()
        .any(|(i, f)| i != best && (f.1 - fidelities[best].1).abs() <= 1e-9);
    Ok(Identification {
        best,
        best_name: fidelities[best].0.clone(),
        fidelities,
        tie,
        mle_iterations: mle.iterations,
    })
}

/// Everything needed to train a stack for one gate.
#[derive(Debug, Clone)]
pub struct Setup {
    pub grid: GridSpec,
    pub waist: f64,
    pub gate: GateSpec,
    pub layers: usize,
    /// Every gap, including source and output gaps, meters.
    pub spacing: f64,
    pub train: TrainConfig,
}

impl Setup {
    /// Desk grid, 4 layers 41 mm apart, default training.
    pub fn desk(gate: GateSpec) -> Self {
        Self {
            grid: GridSpec::desk(),
            waist: DEFAULT_WAIST,
            gate,
            layers: 4,
            spacing: 41e-3,
            train: TrainConfig::default(),
        }
    }

    pub fn basis(&self) -> Result<ModeBasis> {
        self.basis_on(&self.grid)
    }

    pub fn basis_on(&self, grid: &GridSpec) -> Result<ModeBasis> {
        ModeBasis::for_dim(self.gate.dim(), grid, self.waist)
    }

    pub fn initial_stack(&self) -> Result<PhaseLayerStack> {
        PhaseLayerStack::uniform(self.grid, self.layers, self.spacing)
    }

    pub fn train(&self) -> Result<TrainOutcome> {
        train_d2nn(&self.gate, &self.basis()?, &self.initial_stack()?, &self.train)
    }

    pub fn training_set(&self) -> Result<TrainingSet> {
        TrainingSet::for_gate(&self.gate, &self.basis()?)
    }
}

/// Paired D²NN and wavefront-matching runs on the same instance.
#[derive(Debug, Clone)]
pub struct WfmComparison {
    pub d2nn: TrainOutcome,
    pub wfm: TrainOutcome,
}

pub fn compare_wfm(setup: &Setup, wfm_iterations: usize) -> Result<WfmComparison> {
    let d2nn = setup.train()?;
    let wfm = wfm_train(&setup.gate, &setup.basis()?, &setup.initial_stack()?, wfm_iterations)?;
    Ok(WfmComparison { d2nn, wfm })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    Epochs,
    Spacing,
    LayersFixedSpacing,
    LayersFixedTotal,
    PixelsFixAperture,
    PixelsFixPitch,
    GrayLevels,
    ZernikeAmp,
    Dx,
    Dz,
    OffsetSigma,
    EnergyWeight,
}

impl SweepAxis {
    pub const ALL: [SweepAxis; 12] = [
        SweepAxis::Epochs,
        SweepAxis::Spacing,
        SweepAxis::LayersFixedSpacing,
        SweepAxis::LayersFixedTotal,
        SweepAxis::PixelsFixAperture,
        SweepAxis::PixelsFixPitch,
        SweepAxis::GrayLevels,
        SweepAxis::ZernikeAmp,
        SweepAxis::Dx,
        SweepAxis::Dz,
        SweepAxis::OffsetSigma,
        SweepAxis::EnergyWeight,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::Epochs => "epochs",
            SweepAxis::Spacing => "spacing",
            SweepAxis::LayersFixedSpacing => "layers_fixed_spacing",
            SweepAxis::LayersFixedTotal => "layers_fixed_total",
            SweepAxis::PixelsFixAperture => "pixels_fix_aperture",
            SweepAxis::PixelsFixPitch => "pixels_fix_pitch",
            SweepAxis::GrayLevels => "gray_levels",
            SweepAxis::ZernikeAmp => "zernike_amp",
            SweepAxis::Dx => "dx",
            SweepAxis::Dz => "dz",
            SweepAxis::OffsetSigma => "offset_sigma",
            SweepAxis::EnergyWeight => "energy_weight",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|a| a.name() == name)
            .ok_or_else(|| Error::InvalidParameter(format!("unknown sweep axis `{name}`")))
    }

    /// Axes that retrain per point; the others perturb one frozen stack.
    pub fn retrains(self) -> bool {
        matches!(
            self,
            SweepAxis::Epochs
                | SweepAxis::Spacing
                | SweepAxis::LayersFixedSpacing
                | SweepAxis::LayersFixedTotal
                | SweepAxis::OffsetSigma
                | SweepAxis::EnergyWeight
        )
    }
}

/// Extra knobs for [`run_sweep`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepOptions {
    /// Noll indices driven by the `zernike_amp` axis.
    pub zernike_terms: Vec<usize>,
    /// If non-empty, every point is also scored under these lateral offsets
    /// (meters) and the per-state figures are pooled.
    pub test_offsets: Vec<f64>,
}

impl Default for SweepOptions {
    fn default() -> Self {
        Self {
            zernike_terms: vec![4],
            test_offsets: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub value: f64,
    pub metrics: Metrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub axis: SweepAxis,
    pub points: Vec<SweepPoint>,
}

pub const SWEEP_HEADER: &str =
    "point_value,mean_visibility,min_visibility,max_visibility,mean_energy_loss,min_energy_loss,max_energy_loss";

impl SweepReport {
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(out, "{SWEEP_HEADER}")?;
        for p in &self.points {
            let (vmin, vmax) = p.metrics.visibility_range();
            let (emin, emax) = p.metrics.energy_loss_range();
            writeln!(
                out,
                "{},{},{},{},{},{},{}",
                p.value,
                p.metrics.mean_visibility(),
                vmin,
                vmax,
                p.metrics.mean_energy_loss(),
                emin,
                emax
            )?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "axis": self.axis.name(),
            "points": self.points.iter().map(|p| {
                let mut m = p.metrics.to_json();
                m["point_value"] = serde_json::json!(p.value);
                m
            }).collect::<Vec<_>>(),
        })
    }
}

fn pooled(set: &TrainingSet, stack: &PhaseLayerStack, offsets: &[f64]) -> Result<Metrics> {
    if offsets.is_empty() {
        return set.evaluate(stack);
    }
    let mut all = Metrics::default();
    for &dx in offsets {
        let shifted = perturb(
            stack,
            &PerturbationSpec {
                dx,
                ..PerturbationSpec::default()
            },
        )?;
        let m = set.evaluate(&shifted)?;
        all.visibility.extend(m.visibility);
        all.energy_loss.extend(m.energy_loss);
        all.mse += m.mse / offsets.len() as f64;
    }
    Ok(all)
}

fn as_count(axis: SweepAxis, v: f64) -> Result<usize> {
    if v >= 1.0 && v.fract() == 0.0 && v.is_finite() {
        Ok(v as usize)
    } else {
        Err(Error::InvalidParameter(format!("{} needs positive whole numbers, got {v}", axis.name())))
    }
}

/// Runs one sweep. Training axes retrain per point with seed
/// `base.train.seed + index`; perturbation axes reuse `frozen` (trained from
/// `base` when `None`).
pub fn run_sweep(
    axis: SweepAxis,
    points: &[f64],
    base: &Setup,
    frozen: Option<&PhaseLayerStack>,
    options: &SweepOptions,
) -> Result<SweepReport> {
    if points.is_empty() {
        return Err(Error::Empty("sweep has no points".into()));
    }
    let mut sorted = points.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let trained;
    let frozen = if axis.retrains() {
        None
    } else {
        match frozen {
            Some(s) => Some(s),
            None => {
                trained = base.train()?.stack;
                Some(&trained)
            }
        }
    };
    let base_set = base.training_set()?;
    let results: Vec<Result<SweepPoint>> = sorted
        .par_iter()
        .enumerate()
        .map(|(i, &value)| {
            let metrics = if let Some(stack) = frozen {
                sweep_perturbed(axis, value, base, stack, &base_set, options)?
            } else {
                let mut setup = base.clone();
                setup.train.seed = base.train.seed.wrapping_add(i as u64);
                match axis {
                    SweepAxis::Epochs => setup.train.epochs = as_count(axis, value)?,
                    SweepAxis::Spacing => setup.spacing = value,
                    SweepAxis::LayersFixedSpacing => setup.layers = as_count(axis, value)?,
                    SweepAxis::LayersFixedTotal => {
                        let total = base.spacing * (base.layers + 1) as f64;
                        setup.layers = as_count(axis, value)?;
                        setup.spacing = total / (setup.layers + 1) as f64;
                    }
                    SweepAxis::OffsetSigma => setup.train.offset_sigma = value,
                    SweepAxis::EnergyWeight => setup.train.energy_weight = value,
                    _ => unreachable!("perturbation axes use the frozen stack"),
                }
                let outcome = setup.train()?;
                pooled(&base_set, &outcome.stack, &options.test_offsets)?
            };
            Ok(SweepPoint { value, metrics })
        })
        .collect();
    Ok(SweepReport {
        axis,
        points: results.into_iter().collect::<Result<Vec<_>>>()?,
    })
}

fn sweep_perturbed(
    axis: SweepAxis,
    value: f64,
    base: &Setup,
    stack: &PhaseLayerStack,
    set: &TrainingSet,
    options: &SweepOptions,
) -> Result<Metrics> {
    let perturbation = match axis {
        SweepAxis::GrayLevels => PerturbationSpec {
            gray_levels: Some(as_count(axis, value)? as u32),
            ..PerturbationSpec::default()
        },
        SweepAxis::ZernikeAmp => PerturbationSpec {
            zernike: options.zernike_terms.iter().map(|&j| (j, value)).collect(),
            ..PerturbationSpec::default()
        },
        SweepAxis::Dx => PerturbationSpec {
            dx: value,
            ..PerturbationSpec::default()
        },
        SweepAxis::Dz => PerturbationSpec {
            dz: value,
            ..PerturbationSpec::default()
        },
        SweepAxis::PixelsFixAperture | SweepAxis::PixelsFixPitch => {
            let mode = if axis == SweepAxis::PixelsFixAperture {
                ScaleMode::FixAperture
            } else {
                ScaleMode::FixPitch
            };
            let scaled = scale_pixels(stack, mode, as_count(axis, value)?)?;
            let scaled_set = TrainingSet::for_gate(&base.gate, &base.basis_on(scaled.grid())?)?;
            return pooled(&scaled_set, &scaled, &options.test_offsets);
        }
        _ => unreachable!("training axes retrain"),
    };
    pooled(set, &perturb(stack, &perturbation)?, &options.test_offsets)
}
