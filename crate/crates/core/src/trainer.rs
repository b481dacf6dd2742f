//! Phase-layer optimization: loss, adjoint gradient, Adam, wavefront matching.
//!
//! The base loss is the pixel MSE between output and target after both are
//! rescaled to unit mean pixel intensity, which equals `‖E/‖E‖ − Ê/‖Ê‖‖²`.
//! It scores the shape of the output only; power is handled by the separate
//! weighted energy term `w·(1 − ‖E‖²/‖Ê‖²)`. Gates are unitary, so the target
//! power equals the input power and serves as the reference.

use std::io::Write;
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{overlap, ComplexField};
use crate::gates::{encode, encode_coeffs, GateSpec, ModeBasis, StateSet};
use crate::propagation::Propagator;
use crate::stack::{gaussian_blur, shift_x, Cascade, PhaseLayerStack};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    #[default]
    Adam,
    /// Plain gradient descent, kept for optimizer comparisons.
    Sgd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub energy_weight: f64,
    /// Standard deviation of the per-epoch random lateral offset, meters.
    pub offset_sigma: f64,
    pub seed: u64,
    /// Train through the fringe blur so the optimizer compensates for it.
    pub blur_correction: bool,
    /// Blur width (pixels) used when `blur_correction` is on.
    pub blur_sigma: f64,
    /// Start from uniform random phases instead of zeros.
    pub random_init: bool,
    pub optimizer: Optimizer,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 500,
            learning_rate: 0.01,
            energy_weight: 0.0,
            offset_sigma: 0.0,
            seed: 0,
            blur_correction: false,
            blur_sigma: 0.0,
            random_init: false,
            optimizer: Optimizer::Adam,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 {
            return Err(Error::InvalidParameter("epochs must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidParameter("learning_rate must be positive".into()));
        }
        if !(self.energy_weight >= 0.0 && self.energy_weight.is_finite()) {
            return Err(Error::InvalidParameter("energy_weight must be non-negative".into()));
        }
        if !(self.offset_sigma >= 0.0 && self.offset_sigma.is_finite()) {
            return Err(Error::InvalidParameter("offset_sigma must be non-negative".into()));
        }
        if !(self.blur_sigma >= 0.0 && self.blur_sigma.is_finite()) {
            return Err(Error::InvalidParameter("blur_sigma must be non-negative".into()));
        }
        Ok(())
    }

    fn model_blur(&self) -> f64 {
        if self.blur_correction {
            self.blur_sigma
        } else {
            0.0
        }
    }
}

/// Adam moments for one parameter vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self {
            first_moment: vec![0.0; len],
            second_moment: vec![0.0; len],
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// One bias-corrected Adam update of `params` in place.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState, lr: f64) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.first_moment.len() {
        return Err(Error::LengthMismatch(format!(
            "adam: {} params, {} grads, {} moments",
            params.len(),
            grads.len(),
            state.first_moment.len()
        )));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - state.beta1.powi(t);
    let c2 = 1.0 - state.beta2.powi(t);
    for (((p, &g), m), v) in params
        .iter_mut()
        .zip(grads)
        .zip(&mut state.first_moment)
        .zip(&mut state.second_moment)
    {
        *m = state.beta1 * *m + (1.0 - state.beta1) * g;
        *v = state.beta2 * *v + (1.0 - state.beta2) * g * g;
        *p -= lr * (*m / c1) / ((*v / c2).sqrt() + state.epsilon);
    }
    Ok(())
}

/// Plain gradient descent step.
pub fn gd_step(params: &mut [f64], grads: &[f64], lr: f64) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::LengthMismatch(format!("{} params, {} grads", params.len(), grads.len())));
    }
    for (p, g) in params.iter_mut().zip(grads) {
        *p -= lr * g;
    }
    Ok(())
}

/// Per-state quality figures for one evaluation.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Metrics {
    pub visibility: Vec<f64>,
    pub energy_loss: Vec<f64>,
    /// Base (unweighted) training loss.
    pub mse: f64,
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

fn min_max(v: &[f64]) -> (f64, f64) {
    v.iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)))
}

impl Metrics {
    pub fn mean_visibility(&self) -> f64 {
        mean(&self.visibility)
    }

    pub fn mean_energy_loss(&self) -> f64 {
        mean(&self.energy_loss)
    }

    pub fn visibility_range(&self) -> (f64, f64) {
        min_max(&self.visibility)
    }

    pub fn energy_loss_range(&self) -> (f64, f64) {
        min_max(&self.energy_loss)
    }

    /// Summary object with means and ranges alongside the raw vectors.
    pub fn to_json(&self) -> serde_json::Value {
        let (vmin, vmax) = self.visibility_range();
        let (emin, emax) = self.energy_loss_range();
        serde_json::json!({
            "mean_visibility": self.mean_visibility(),
            "min_visibility": vmin,
            "max_visibility": vmax,
            "mean_energy_loss": self.mean_energy_loss(),
            "min_energy_loss": emin,
            "max_energy_loss": emax,
            "mse": self.mse,
            "visibility": self.visibility,
            "energy_loss": self.energy_loss,
        })
    }
}

/// `V_i = |⟨t_i|o_i⟩|² / Σ_j |⟨t_j|o_i⟩|²` over the given targets.
pub fn visibility(outputs: &[ComplexField], targets: &[ComplexField]) -> Result<Vec<f64>> {
    if outputs.is_empty() {
        return Err(Error::Empty("no outputs for visibility".into()));
    }
    if outputs.len() != targets.len() {
        return Err(Error::LengthMismatch(format!(
            "{} outputs vs {} targets",
            outputs.len(),
            targets.len()
        )));
    }
    outputs
        .iter()
        .enumerate()
        .map(|(i, o)| {
            let proj = targets.iter().map(|t| Ok(overlap(t, o)?.norm_sqr())).collect::<Result<Vec<f64>>>()?;
            let total: f64 = proj.iter().sum();
            Ok(if total > 0.0 { proj[i] / total } else { 0.0 })
        })
        .collect()
}

/// `(‖in‖² − ‖out‖²)/‖in‖²`.
pub fn energy_loss(input: &ComplexField, output: &ComplexField) -> Result<f64> {
    input.grid().ensure_matches(output.grid())?;
    let p_in = input.norm_sqr();
    if p_in <= 0.0 {
        return Err(Error::ZeroInput);
    }
    Ok((p_in - output.norm_sqr()) / p_in)
}

fn check_pairs(outputs: &[ComplexField], targets: &[ComplexField]) -> Result<()> {
    if outputs.len() != targets.len() {
        return Err(Error::LengthMismatch(format!(
            "{} outputs vs {} targets",
            outputs.len(),
            targets.len()
        )));
    }
    if outputs.is_empty() {
        return Err(Error::Empty("no states".into()));
    }
    for (o, t) in outputs.iter().zip(targets) {
        o.grid().ensure_matches(t.grid())?;
    }
    Ok(())
}

/// Per-state loss terms and the Wirtinger derivative `∂ℓ/∂E* = a·Ê + b·E`.
struct StateTerms {
    base: f64,
    total: f64,
    a: f64,
    b: f64,
}

fn state_terms(out: &[Complex64], target: &[Complex64], area: f64, weight: f64) -> StateTerms {
    let mut p = 0.0;
    let mut q = 0.0;
    let mut s = Complex64::new(0.0, 0.0);
    for (e, t) in out.iter().zip(target) {
        p += t.norm_sqr();
        q += e.norm_sqr();
        s += t.conj() * e;
    }
    let (p, q, s) = (p * area, q * area, s.re * area);
    let energy = 1.0 - q / p;
    if q <= 0.0 {
        return StateTerms {
            base: 1.0,
            total: 1.0 + weight * energy,
            a: 0.0,
            b: 0.0,
        };
    }
    let base = 2.0 - 2.0 * s / (p * q).sqrt();
    StateTerms {
        base,
        total: base + weight * energy,
        a: -area / (p * q).sqrt(),
        b: area * s / (p.sqrt() * q.powf(1.5)) - weight * area / p,
    }
}

/// Mean over states of the base loss plus `energy_weight` times the mean energy loss.
pub fn training_loss(outputs: &[ComplexField], targets: &[ComplexField], energy_weight: f64) -> Result<f64> {
    check_pairs(outputs, targets)?;
    let area = outputs[0].grid().pixel_area();
    let mut total = 0.0;
    for (o, t) in outputs.iter().zip(targets) {
        if t.norm_sqr() <= 0.0 {
            return Err(Error::ZeroInput);
        }
        total += state_terms(o.data(), t.data(), area, energy_weight).total;
    }
    Ok(total / outputs.len() as f64)
}

/// Effective modulations seen by the light for a lateral shift and blur.
fn model_modulations(stack: &PhaseLayerStack, dx: f64, blur_sigma: f64) -> (Vec<Vec<f64>>, Vec<Vec<Complex64>>) {
    let grid = stack.grid();
    let phases: Vec<Vec<f64>> = stack
        .layers()
        .iter()
        .map(|l| {
            if dx != 0.0 {
                shift_x(l.phase(), grid, dx)
            } else {
                l.phase().to_vec()
            }
        })
        .collect();
    let modulations = phases
        .iter()
        .map(|ph| {
            let m: Vec<Complex64> = ph.iter().map(|&p| Complex64::cis(p)).collect();
            if blur_sigma > 0.0 {
                gaussian_blur(&m, grid, blur_sigma)
            } else {
                m
            }
        })
        .collect();
    (phases, modulations)
}

struct StateResult {
    loss: f64,
    base: f64,
    output: Vec<Complex64>,
    grads: Vec<Vec<f64>>,
}

/// Loss and per-layer phase gradients for an explicit lateral shift and blur.
fn loss_and_gradient_model(
    stack: &PhaseLayerStack,
    propagators: &[Arc<Propagator>],
    inputs: &[ComplexField],
    targets: &[ComplexField],
    energy_weight: f64,
    dx: f64,
    blur_sigma: f64,
) -> Result<(f64, f64, Vec<Vec<Complex64>>, Vec<Vec<f64>>)> {
    check_pairs(inputs, targets)?;
    let grid = *stack.grid();
    for f in inputs {
        grid.ensure_matches(f.grid())?;
    }
    let (phases, modulations) = model_modulations(stack, dx, blur_sigma);
    let cascade = Cascade::new(propagators.to_vec(), modulations);
    let area = grid.pixel_area();
    let scale = 1.0 / inputs.len() as f64;
    let results: Vec<StateResult> = inputs
        .par_iter()
        .zip(targets.par_iter())
        .map(|(input, target)| {
            let rec = cascade.forward_recorded(input.data());
            let terms = state_terms(&rec.output, target.data(), area, energy_weight);
            let g: Vec<Complex64> = rec
                .output
                .iter()
                .zip(target.data())
                .map(|(e, t)| (t * terms.a + e * terms.b) * scale)
                .collect();
            let adjoint = cascade.backward(&g);
            let grads = adjoint
                .iter()
                .zip(&rec.incident)
                .zip(&phases)
                .map(|((b, v), ph)| {
                    let mut c: Vec<Complex64> = b.iter().zip(v).map(|(b, v)| b * v.conj()).collect();
                    if blur_sigma > 0.0 {
                        c = gaussian_blur(&c, &grid, blur_sigma);
                    }
                    c.iter().zip(ph).map(|(c, &p)| 2.0 * (c * Complex64::cis(-p)).im).collect()
                })
                .collect();
            StateResult {
                loss: terms.total,
                base: terms.base,
                output: rec.output,
                grads,
            }
        })
        .collect();

    // Fixed summation order keeps results independent of the thread count.
    let n_layers = stack.layers().len();
    let mut grads = vec![vec![0.0; grid.len()]; n_layers];
    let mut loss = 0.0;
    let mut base = 0.0;
    let mut outputs = Vec::with_capacity(results.len());
    for r in results {
        loss += r.loss * scale;
        base += r.base * scale;
        for (acc, g) in grads.iter_mut().zip(&r.grads) {
            for (a, v) in acc.iter_mut().zip(g) {
                *a += v;
            }
        }
        outputs.push(r.output);
    }
    if dx != 0.0 {
        // The real-part spectral shift has the opposite shift as its transpose.
        for g in &mut grads {
            *g = shift_x(g, &grid, -dx);
        }
    }
    Ok((loss, base, outputs, grads))
}

/// Loss through the same forward model [`gradient`] differentiates.
pub fn model_loss(
    stack: &PhaseLayerStack,
    inputs: &[ComplexField],
    targets: &[ComplexField],
    config: &TrainConfig,
) -> Result<f64> {
    check_pairs(inputs, targets)?;
    let (_, modulations) = model_modulations(stack, 0.0, config.model_blur());
    let cascade = Cascade::new(stack.propagators(), modulations);
    let outputs: Vec<ComplexField> = inputs.iter().map(|f| cascade.forward(f)).collect();
    training_loss(&outputs, targets, config.energy_weight)
}

/// Adjoint gradient of the training loss with respect to every layer phase.
///
/// Uses `config.energy_weight` and, when enabled, the blur correction model.
pub fn gradient(
    stack: &PhaseLayerStack,
    inputs: &[ComplexField],
    targets: &[ComplexField],
    config: &TrainConfig,
) -> Result<Vec<Vec<f64>>> {
    let (_, _, _, grads) = loss_and_gradient_model(
        stack,
        &stack.propagators(),
        inputs,
        targets,
        config.energy_weight,
        0.0,
        config.model_blur(),
    )?;
    Ok(grads)
}

/// Encoded probe inputs and gate-mapped targets.
#[derive(Debug, Clone)]
pub struct TrainingSet {
    pub states: StateSet,
    pub inputs: Vec<ComplexField>,
    pub targets: Vec<ComplexField>,
}

impl TrainingSet {
    /// All MUB states for d = 3, the 36-state set for d = 4.
    pub fn for_gate(gate: &GateSpec, basis: &ModeBasis) -> Result<Self> {
        Self::with_states(gate, basis, StateSet::for_dim(gate.dim())?)
    }

    pub fn with_states(gate: &GateSpec, basis: &ModeBasis, states: StateSet) -> Result<Self> {
        if basis.dim() != gate.dim() {
            return Err(Error::DimensionMismatch {
                expected: gate.dim(),
                actual: basis.dim(),
            });
        }
        if states.dim != gate.dim() {
            return Err(Error::DimensionMismatch {
                expected: gate.dim(),
                actual: states.dim,
            });
        }
        let inputs = states.states.iter().map(|s| encode(s, basis)).collect::<Result<Vec<_>>>()?;
        let targets = states
            .states
            .iter()
            .map(|s| {
                let mapped = gate.matrix() * s.coeffs();
                encode_coeffs(mapped.as_slice(), basis)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { states, inputs, targets })
    }

    /// Metrics for the given outputs; visibility is normalized within each
    /// orthonormal block of the probe set.
    pub fn metrics(&self, outputs: &[ComplexField]) -> Result<Metrics> {
        check_pairs(outputs, &self.targets)?;
        let mut vis = vec![0.0; outputs.len()];
        for b in 0..self.states.block_count() {
            let members = self.states.block_members(b);
            let outs: Vec<ComplexField> = members.iter().map(|&i| outputs[i].clone()).collect();
            let tgts: Vec<ComplexField> = members.iter().map(|&i| self.targets[i].clone()).collect();
            for (&i, v) in members.iter().zip(visibility(&outs, &tgts)?) {
                vis[i] = v;
            }
        }
        let energy = self
            .inputs
            .iter()
            .zip(outputs)
            .map(|(i, o)| energy_loss(i, o))
            .collect::<Result<Vec<_>>>()?;
        Ok(Metrics {
            visibility: vis,
            energy_loss: energy,
            mse: training_loss(outputs, &self.targets, 0.0)?,
        })
    }

    /// Runs `stack` on every input and scores the outputs.
    pub fn evaluate(&self, stack: &PhaseLayerStack) -> Result<Metrics> {
        let outputs = self.outputs(stack)?;
        self.metrics(&outputs)
    }

    pub fn outputs(&self, stack: &PhaseLayerStack) -> Result<Vec<ComplexField>> {
        for f in &self.inputs {
            stack.grid().ensure_matches(f.grid())?;
        }
        let cascade = stack.cascade();
        Ok(self.inputs.par_iter().map(|f| cascade.forward(f)).collect())
    }
}

/// Scores `stack` against `gate` on the default probe set.
pub fn evaluate(stack: &PhaseLayerStack, gate: &GateSpec, basis: &ModeBasis) -> Result<Metrics> {
    TrainingSet::for_gate(gate, basis)?.evaluate(stack)
}

/// One row of the per-epoch history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub mean_visibility: f64,
    pub mean_energy_loss: f64,
    /// Milliseconds since training started.
    pub wall_ms: f64,
}

pub const HISTORY_HEADER: &str = "epoch,loss,mean_visibility,mean_energy_loss,wall_ms";

pub fn write_history_csv(path: impl AsRef<Path>, history: &[EpochRecord]) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "{HISTORY_HEADER}")?;
    for r in history {
        writeln!(
            out,
            "{},{},{},{},{:.3}",
            r.epoch, r.loss, r.mean_visibility, r.mean_energy_loss, r.wall_ms
        )?;
    }
    out.flush()?;
    Ok(())
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub stack: PhaseLayerStack,
    pub history: Vec<EpochRecord>,
    /// Metrics of the returned stack, without offsets.
    pub metrics: Metrics,
}

/// Gradient training of `stack0` towards `gate` on all probe states.
///
/// History rows report the stack as it was at the start of each epoch;
/// [`TrainOutcome::metrics`] scores the final stack.
pub fn train_d2nn(
    gate: &GateSpec,
    basis: &ModeBasis,
    stack0: &PhaseLayerStack,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    let set = TrainingSet::for_gate(gate, basis)?;
    train_on(&set, stack0, config)
}

pub fn train_on(set: &TrainingSet, stack0: &PhaseLayerStack, config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    let grid = *stack0.grid();
    for f in &set.inputs {
        grid.ensure_matches(f.grid())?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut stack = stack0.clone();
    if config.random_init {
        for layer in stack.layers_mut() {
            for p in layer.phase_mut() {
                *p = rng.random_range(0.0..std::f64::consts::TAU);
            }
        }
    }
    let offsets = if config.offset_sigma > 0.0 {
        Some(Normal::new(0.0, config.offset_sigma).map_err(|e| Error::InvalidParameter(e.to_string()))?)
    } else {
        None
    };
    let propagators = stack.propagators();
    let mut adam: Vec<AdamState> = stack.layers().iter().map(|_| AdamState::new(grid.len())).collect();
    let mut history = Vec::with_capacity(config.epochs);
    let start = Instant::now();
    for epoch in 0..config.epochs {
        let dx = offsets.as_ref().map_or(0.0, |d| d.sample(&mut rng));
        let (loss, _, outputs, grads) = loss_and_gradient_model(
            &stack,
            &propagators,
            &set.inputs,
            &set.targets,
            config.energy_weight,
            dx,
            config.model_blur(),
        )?;
        let fields = outputs
            .into_iter()
            .map(|d| ComplexField::from_vec(grid, d))
            .collect::<Result<Vec<_>>>()?;
        let m = set.metrics(&fields)?;
        for ((layer, g), state) in stack.layers_mut().iter_mut().zip(&grads).zip(&mut adam) {
            match config.optimizer {
                Optimizer::Adam => adam_step(layer.phase_mut(), g, state, config.learning_rate)?,
                Optimizer::Sgd => gd_step(layer.phase_mut(), g, config.learning_rate)?,
            }
        }
        history.push(EpochRecord {
            epoch,
            loss,
            mean_visibility: m.mean_visibility(),
            mean_energy_loss: m.mean_energy_loss(),
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        });
    }
    let metrics = set.evaluate(&stack)?;
    Ok(TrainOutcome { stack, history, metrics })
}

/// Wavefront matching: each sweep sets every layer, front to back, to the
/// phase that best aligns forward fields with backward-propagated targets.
///
/// History row `k` scores the stack after sweep `k`.
pub fn wfm_train(
    gate: &GateSpec,
    basis: &ModeBasis,
    stack0: &PhaseLayerStack,
    iterations: usize,
) -> Result<TrainOutcome> {
    let set = TrainingSet::for_gate(gate, basis)?;
    wfm_on(&set, stack0, iterations)
}

pub fn wfm_on(set: &TrainingSet, stack0: &PhaseLayerStack, iterations: usize) -> Result<TrainOutcome> {
    if iterations < 1 {
        return Err(Error::InvalidParameter("iterations must be at least 1".into()));
    }
    let grid = *stack0.grid();
    for f in &set.inputs {
        grid.ensure_matches(f.grid())?;
    }
    let mut stack = stack0.clone();
    let mut history = Vec::with_capacity(iterations);
    let start = Instant::now();
    for sweep in 0..iterations {
        let outputs = wfm_sweep(&mut stack, &set.inputs, &set.targets)?;
        let fields = outputs
            .into_iter()
            .map(|d| ComplexField::from_vec(grid, d))
            .collect::<Result<Vec<_>>>()?;
        let m = set.metrics(&fields)?;
        history.push(EpochRecord {
            epoch: sweep,
            loss: training_loss(&fields, &set.targets, 0.0)?,
            mean_visibility: m.mean_visibility(),
            mean_energy_loss: m.mean_energy_loss(),
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        });
    }
    let metrics = set.evaluate(&stack)?;
    Ok(TrainOutcome { stack, history, metrics })
}

/// One front-to-back sweep; returns the outputs of the updated stack.
pub fn wfm_sweep(
    stack: &mut PhaseLayerStack,
    inputs: &[ComplexField],
    targets: &[ComplexField],
) -> Result<Vec<Vec<Complex64>>> {
    check_pairs(inputs, targets)?;
    let cascade = stack.cascade();
    let propagators = stack.propagators();
    let n = stack.layers().len();
    // Backward fields at layer k only depend on layers after k, which a
    // front-to-back sweep has not touched yet.
    let backward: Vec<Vec<Vec<Complex64>>> = targets.par_iter().map(|t| cascade.backward(t.data())).collect();
    let mut forward: Vec<Vec<Complex64>> = inputs.iter().map(|f| f.data().to_vec()).collect();
    for k in 0..n {
        forward.par_iter_mut().for_each(|f| {
            propagators[k].apply_in_place(f, crate::propagation::Direction::Forward);
        });
        let phase = stack.layers_mut()[k].phase_mut();
        for (p, ph) in phase.iter_mut().enumerate() {
            let mut acc = Complex64::new(0.0, 0.0);
            let m = Complex64::cis(*ph);
            for (f, b) in forward.iter().zip(&backward) {
                acc += b[k][p] * (f[p] * m).conj();
            }
            if acc.norm_sqr() > 0.0 {
                *ph += acc.arg();
            }
        }
        let modulation = stack.layers()[k].modulation();
        forward.par_iter_mut().for_each(|f| {
            for (a, t) in f.iter_mut().zip(&modulation) {
                *a *= t;
            }
        });
    }
    forward.par_iter_mut().for_each(|f| {
        propagators[n].apply_in_place(f, crate::propagation::Direction::Forward);
    });
    Ok(forward)
}
