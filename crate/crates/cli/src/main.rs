mod config;

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use config::{DeutschModeName, ExperimentConfig};
use modeforge::gates::{standard_gate, GateSpec, ModeBasis};
use modeforge::protocols::{
    default_candidates, deutsch_run, identify_gate, run_sweep, spacing_search, spacing_visibility, DeutschMode,
    SweepAxis, SweepOptions,
};
use modeforge::stack::{perturb, PhaseLayerStack};
use modeforge::tomography::{
    chi_from_choi, mle_reconstruct, process_fidelity, simulate_tomography, Channel, OperatorBasis, ProcessMatrix,
    TomographyRecord,
};
use modeforge::trainer::{train_d2nn, wfm_train, write_history_csv, TrainOutcome, TrainingSet};

const THREADS_ENV: &str = "MODEFORGE_THREADS";

#[derive(Parser)]
#[command(name = "modeforge", version, about = "Train diffractive phase stacks for spatial-mode gates and characterize them")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON experiment config; defaults are used for missing keys.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Override one config value, e.g. `--set train.epochs=200`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory (overrides `output_dir`).
    #[arg(short, long)]
    out: Option<PathBuf>,
    /// Worker threads, 0 for all cores. MODEFORGE_THREADS takes precedence.
    #[arg(long, default_value_t = 0)]
    threads: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Train a stack for the configured gate.
    Train(Common),
    /// Simulate process tomography and reconstruct the process matrix.
    Tomography(Common),
    /// Sweep one parameter and report visibility and energy loss.
    Sweep(Common),
    /// Run the Deutsch algorithm.
    Deutsch(Common),
    /// Search for the best layer spacing.
    Spacing(Common),
    /// Identify which candidate gate a stack implements.
    Identify(Common),
    /// Train the same instance with gradients and with wavefront matching.
    CompareWfm(Common),
    /// Write the configured gate matrix as JSON.
    ExportGate(Common),
}

fn thread_count(flag: usize) -> Result<usize> {
    match std::env::var(THREADS_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .with_context(|| format!("{THREADS_ENV} must be a non-negative integer, got `{v}`")),
        Err(_) => Ok(flag),
    }
}

fn write_json(path: &Path, value: &Value) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)? + "\n").with_context(|| format!("writing {}", path.display()))
}

struct Ctx {
    config: ExperimentConfig,
    out: PathBuf,
}

impl Ctx {
    fn new(common: &Common) -> Result<Self> {
        let mut overrides = common.overrides.clone();
        if let Some(out) = &common.out {
            overrides.push(format!("output_dir={}", serde_json::to_string(out)?));
        }
        let config = ExperimentConfig::resolve(common.config.as_deref(), &overrides)?;
        let out = config.output_dir.clone();
        config.echo(&out)?;
        Ok(Self { config, out })
    }

    fn basis(&self, dim: usize, stack: &PhaseLayerStack) -> Result<ModeBasis> {
        Ok(ModeBasis::for_dim(dim, stack.grid(), self.config.grid.waist_m)?)
    }

    fn train(&self, gate: &GateSpec, name: &str) -> Result<TrainOutcome> {
        let stack0 = self.config.initial_stack()?;
        let outcome = train_d2nn(gate, &self.basis(gate.dim(), &stack0)?, &stack0, &self.config.train)?;
        let dir = self.out.join(name);
        outcome.stack.save(&dir)?;
        write_history_csv(dir.join("history.csv"), &outcome.history)?;
        Ok(outcome)
    }

    /// Configured stack, or a freshly trained one; perturbation applied.
    fn stack_for(&self, gate: &GateSpec) -> Result<PhaseLayerStack> {
        let stack = match &self.config.stack {
            Some(path) => PhaseLayerStack::load(path)?,
            None => self.train(gate, "stack")?.stack,
        };
        Ok(perturb(&stack, &self.config.perturbation)?)
    }

    fn record_for(&self, gate: &GateSpec) -> Result<TomographyRecord> {
        let (probes, projectors) = TomographyRecord::default_sets(gate.dim())?;
        let t = &self.config.tomography;
        let seed = self.config.train.seed;
        let rec = if t.ideal && self.config.stack.is_none() {
            simulate_tomography(Channel::Ideal(gate), &probes, &projectors, t.shots, seed)?
        } else {
            let stack = self.stack_for(gate)?;
            let basis = self.basis(gate.dim(), &stack)?;
            simulate_tomography(Channel::Optical { stack: &stack, basis: &basis }, &probes, &projectors, t.shots, seed)?
        };
        Ok(rec)
    }
}

fn cmd_train(ctx: &Ctx) -> Result<()> {
    let gate = ctx.config.gate_spec()?;
    let outcome = ctx.train(&gate, "stack")?;
    let mut report = json!({ "gate": gate.name, "metrics": outcome.metrics.to_json() });
    if !ctx.config.perturbation.is_identity() {
        let perturbed = perturb(&outcome.stack, &ctx.config.perturbation)?;
        let set = TrainingSet::for_gate(&gate, &ctx.basis(gate.dim(), &perturbed)?)?;
        report["perturbed_metrics"] = set.evaluate(&perturbed)?.to_json();
    }
    write_json(&ctx.out.join("metrics.json"), &report)?;
    println!(
        "{}: mean visibility {:.6}, mean energy loss {:.6}",
        gate.name,
        outcome.metrics.mean_visibility(),
        outcome.metrics.mean_energy_loss()
    );
    Ok(())
}

fn cmd_tomography(ctx: &Ctx) -> Result<()> {
    let gate = ctx.config.gate_spec()?;
    let rec = ctx.record_for(&gate)?;
    rec.write_csv(ctx.out.join("record.csv"))?;
    let t = &ctx.config.tomography;
    let mle = mle_reconstruct(&rec, t.max_iters, t.tol)?;
    let chi = chi_from_choi(&mle.choi, OperatorBasis::for_dim(gate.dim())?)?;
    write_json(&ctx.out.join("chi.json"), &chi.to_json())?;
    let fidelity = process_fidelity(&ProcessMatrix::of_unitary(&gate)?, &chi)?;
    write_json(
        &ctx.out.join("tomography.json"),
        &json!({
            "gate": gate.name,
            "fidelity": fidelity,
            "iterations": mle.iterations,
            "converged": mle.converged,
            "max_trace_error": mle.max_trace_error,
            "min_eigenvalue": mle.min_eigenvalue,
        }),
    )?;
    println!("{}: process fidelity {fidelity:.6} after {} iterations", gate.name, mle.iterations);
    Ok(())
}

fn cmd_sweep(ctx: &Ctx) -> Result<()> {
    let c = &ctx.config;
    if c.spacings_m.is_some() || !c.grid.padded {
        bail!("sweeps use uniform spacing_m with padded propagation");
    }
    let axis = SweepAxis::parse(&c.sweep.axis)?;
    let setup = c.setup(c.gate_spec()?)?;
    let frozen = c.stack.as_ref().map(PhaseLayerStack::load).transpose()?;
    let options = SweepOptions {
        zernike_terms: c.sweep.zernike_terms.clone(),
        test_offsets: c.sweep.test_offsets.clone(),
    };
    let report = run_sweep(axis, &c.sweep.points, &setup, frozen.as_ref(), &options)?;
    report.write_csv(ctx.out.join(format!("sweep_{}.csv", axis.name())))?;
    let mut summary = report.to_json();
    summary["config"] = serde_json::to_value(c)?;
    write_json(&ctx.out.join(format!("sweep_{}.json", axis.name())), &summary)?;
    for p in &report.points {
        println!(
            "{} = {}: mean visibility {:.6}, mean energy loss {:.6}",
            axis.name(),
            p.value,
            p.metrics.mean_visibility(),
            p.metrics.mean_energy_loss()
        );
    }
    Ok(())
}

const TWO_QUBIT_LABELS: [&str; 4] = ["|0>x|0>y", "|0>x|1>y", "|1>x|0>y", "|1>x|1>y"];

fn cmd_deutsch(ctx: &Ctx) -> Result<()> {
    let d = &ctx.config.deutsch;
    let result = match d.mode {
        DeutschModeName::Ideal => deutsch_run(d.oracle, DeutschMode::Ideal)?,
        DeutschModeName::Trained => {
            let stack = ctx.stack_for(&d.oracle.gate())?;
            let basis = ctx.basis(4, &stack)?;
            deutsch_run(d.oracle, DeutschMode::Trained { stack: &stack, basis: &basis })?
        }
    };
    let mut report = serde_json::to_value(&result)?;
    report["labels"] = json!(TWO_QUBIT_LABELS);
    report["verdict"] = serde_json::to_value(result.verdict())?;
    report["success_probability"] = json!(result.success_probability());
    write_json(&ctx.out.join("deutsch.json"), &report)?;
    for (label, p) in TWO_QUBIT_LABELS.iter().zip(result.normalized) {
        println!("{label}: {p:.6}");
    }
    println!("verdict: {:?}", result.verdict());
    Ok(())
}

/// Width of the synthetic visibility peak, meters.
const SYNTHETIC_WIDTH: f64 = 4e-3;

fn cmd_spacing(ctx: &Ctx) -> Result<()> {
    let s = &ctx.config.spacing;
    let result = match s.synthetic_peak_m {
        Some(peak) => spacing_search(|z| Ok(1.0 / (1.0 + ((z - peak) / SYNTHETIC_WIDTH).powi(2))), &s.search)?,
        None => {
            let gate = ctx.config.gate_spec()?;
            let stack = ctx.stack_for(&gate)?;
            let set = TrainingSet::for_gate(&gate, &ctx.basis(gate.dim(), &stack)?)?;
            spacing_search(|z| spacing_visibility(&stack, &set, z), &s.search)?
        }
    };
    write_json(&ctx.out.join("spacing.json"), &serde_json::to_value(&result)?)?;
    println!(
        "best spacing {:.4} mm, final range [{:.4}, {:.4}] mm, exit {:?}",
        result.best * 1e3,
        result.final_range[0] * 1e3,
        result.final_range[1] * 1e3,
        result.exit
    );
    Ok(())
}

fn cmd_identify(ctx: &Ctx) -> Result<()> {
    let c = &ctx.config;
    let gate = c.gate_spec()?;
    let candidates = if c.identify.candidates.is_empty() {
        default_candidates(gate.dim())?
    } else {
        c.identify.candidates.iter().map(|n| standard_gate(n)).collect::<modeforge::Result<Vec<_>>>()?
    };
    let rec = match &c.identify.record_csv {
        Some(path) => {
            let (probes, projectors) = TomographyRecord::default_sets(gate.dim())?;
            TomographyRecord::read_csv(path, probes, projectors)?
        }
        None => ctx.record_for(&gate)?,
    };
    let id = identify_gate(&rec, &candidates)?;
    write_json(&ctx.out.join("identify.json"), &serde_json::to_value(&id)?)?;
    for (name, f) in &id.fidelities {
        println!("{name}: {f:.6}");
    }
    println!("identified: {}{}", id.best_name, if id.tie { " (tie)" } else { "" });
    Ok(())
}

fn cmd_compare_wfm(ctx: &Ctx) -> Result<()> {
    let gate = ctx.config.gate_spec()?;
    let d2nn = ctx.train(&gate, "d2nn")?;
    let stack0 = ctx.config.initial_stack()?;
    let wfm = wfm_train(&gate, &ctx.basis(gate.dim(), &stack0)?, &stack0, ctx.config.wfm.iterations)?;
    let dir = ctx.out.join("wfm");
    wfm.stack.save(&dir)?;
    write_history_csv(dir.join("history.csv"), &wfm.history)?;
    write_json(
        &ctx.out.join("compare.json"),
        &json!({
            "gate": gate.name,
            "d2nn": d2nn.metrics.to_json(),
            "wfm": wfm.metrics.to_json(),
        }),
    )?;
    for (name, o) in [("d2nn", &d2nn), ("wfm", &wfm)] {
        println!(
            "{name}: mean visibility {:.6}, mean energy loss {:.6}",
            o.metrics.mean_visibility(),
            o.metrics.mean_energy_loss()
        );
    }
    Ok(())
}

fn cmd_export_gate(ctx: &Ctx) -> Result<()> {
    let gate = ctx.config.gate_spec()?;
    let path = ctx.out.join(format!("{}.json", gate.name));
    gate.save(&path)?;
    println!("{}", path.display());
    Ok(())
}

fn main() -> std::process::ExitCode {
    match run_cli() {
        Ok(()) => std::process::ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            std::process::ExitCode::FAILURE
        }
    }
}

fn run_cli() -> Result<()> {
    let cli = Cli::parse();
    let (common, run): (&Common, fn(&Ctx) -> Result<()>) = match &cli.command {
        Command::Train(c) => (c, cmd_train),
        Command::Tomography(c) => (c, cmd_tomography),
        Command::Sweep(c) => (c, cmd_sweep),
        Command::Deutsch(c) => (c, cmd_deutsch),
        Command::Spacing(c) => (c, cmd_spacing),
        Command::Identify(c) => (c, cmd_identify),
        Command::CompareWfm(c) => (c, cmd_compare_wfm),
        Command::ExportGate(c) => (c, cmd_export_gate),
    };
    rayon::ThreadPoolBuilder::new()
        .num_threads(thread_count(common.threads)?)
        .build_global()
        .context("starting thread pool")?;
    run(&Ctx::new(common)?)
}
