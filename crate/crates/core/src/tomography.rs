//! Simulated process tomography and maximum-likelihood Choi reconstruction.
//!
//! Index convention on H⊗K: `(i, k) ↦ i·d_K + k`, input factor first. A
//! channel ε has Choi operator `E = Σ_ij |i⟩⟨j| ⊗ ε(|i⟩⟨j|)`, so outcome
//! probabilities are `Tr(E·ρᵀ⊗Π)`.

use std::io::{BufRead, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gates::{decode, encode, GateSpec, ModeBasis, StateSet, StateVector};
use crate::stack::PhaseLayerStack;

const ZERO: Complex64 = Complex64 { re: 0.0, im: 0.0 };

/// Probe/projector frequencies for one tomography run.
///
/// Frequencies are normalized within each projective basis and then divided
/// by the number of bases, so every probe row sums to 1.
#[derive(Debug, Clone, PartialEq)]
pub struct TomographyRecord {
    pub dim: usize,
    pub probes: StateSet,
    pub projectors: StateSet,
    /// `frequencies[m][n]` for probe `m` and projector `n`.
    pub frequencies: Vec<Vec<f64>>,
}

/// The process being measured.
#[derive(Debug, Clone, Copy)]
pub enum Channel<'a> {
    /// Gate matrix applied directly, no optics.
    Ideal(&'a GateSpec),
    /// Probes encoded into `basis`, sent through `stack`, decoded again.
    Optical {
        stack: &'a PhaseLayerStack,
        basis: &'a ModeBasis,
    },
}

impl Channel<'_> {
    pub fn dim(&self) -> usize {
        match self {
            Channel::Ideal(g) => g.dim(),
            Channel::Optical { basis, .. } => basis.dim(),
        }
    }

    /// Unnormalized output coefficient vectors, one per probe.
    fn outputs(&self, probes: &StateSet) -> Result<Vec<Vec<Complex64>>> {
        match self {
            Channel::Ideal(g) => probes
                .states
                .iter()
                .map(|s| Ok(g.apply(s)?.coeffs().as_slice().to_vec()))
                .collect(),
            Channel::Optical { stack, basis } => {
                let cascade = stack.cascade();
                probes
                    .states
                    .par_iter()
                    .map(|s| {
                        let out = cascade.forward(&encode(s, basis)?);
                        Ok(decode(&out, basis)?.coefficients)
                    })
                    .collect()
            }
        }
    }
}

fn inner(a: &StateVector, coeffs: &[Complex64]) -> Complex64 {
    a.coeffs().iter().zip(coeffs).map(|(x, y)| x.conj() * y).sum()
}

/// Multinomial draw by a chain of binomials.
fn multinomial(rng: &mut ChaCha8Rng, shots: u64, probs: &[f64]) -> Result<Vec<u64>> {
    let mut remaining = shots;
    let mut mass = 1.0;
    let mut out = Vec::with_capacity(probs.len());
    for (i, &p) in probs.iter().enumerate() {
        if i + 1 == probs.len() {
            out.push(remaining);
            break;
        }
        let q = if mass > 0.0 { (p / mass).clamp(0.0, 1.0) } else { 0.0 };
        let k = if remaining == 0 {
            0
        } else {
            Binomial::new(remaining, q)
                .map_err(|e| Error::InvalidParameter(e.to_string()))?
                .sample(rng)
        };
        out.push(k);
        remaining -= k;
        mass -= p;
    }
    Ok(out)
}

/// Simulates the measurement statistics of `channel`.
///
/// With `shots`, each (probe, basis) pair is sampled that many times.
pub fn simulate_tomography(
    channel: Channel<'_>,
    probes: &StateSet,
    projectors: &StateSet,
    shots: Option<u64>,
    seed: u64,
) -> Result<TomographyRecord> {
    let d = channel.dim();
    for dim in [probes.dim, projectors.dim] {
        if dim != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                actual: dim,
            });
        }
    }
    if probes.is_empty() || projectors.is_empty() {
        return Err(Error::Empty("tomography needs probes and projectors".into()));
    }
    let outputs = channel.outputs(probes)?;
    let blocks: Vec<Vec<usize>> = (0..projectors.block_count()).map(|b| projectors.block_members(b)).collect();
    let nb = blocks.len() as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut frequencies = Vec::with_capacity(outputs.len());
    for out in &outputs {
        let raw: Vec<f64> = projectors.states.iter().map(|p| inner(p, out).norm_sqr()).collect();
        let mut row = vec![0.0; raw.len()];
        for members in &blocks {
            let total: f64 = members.iter().map(|&n| raw[n]).sum();
            if total <= 0.0 {
                return Err(Error::ZeroInput);
            }
            let probs: Vec<f64> = members.iter().map(|&n| raw[n] / total).collect();
            let probs = match shots {
                Some(s) if s > 0 => multinomial(&mut rng, s, &probs)?
                    .into_iter()
                    .map(|k| k as f64 / s as f64)
                    .collect(),
                Some(_) => return Err(Error::InvalidParameter("shots must be positive".into())),
                None => probs,
            };
            for (&n, p) in members.iter().zip(probs) {
                row[n] = p / nb;
            }
        }
        frequencies.push(row);
    }
    Ok(TomographyRecord {
        dim: d,
        probes: probes.clone(),
        projectors: projectors.clone(),
        frequencies,
    })
}

pub const RECORD_HEADER: &str = "probe_index,projector_index,frequency";

impl TomographyRecord {
    /// Default probes and projectors for the dimension (MUBs, or the 36-state set).
    pub fn default_sets(dim: usize) -> Result<(StateSet, StateSet)> {
        let s = StateSet::for_dim(dim)?;
        Ok((s.clone(), s))
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(out, "{RECORD_HEADER}")?;
        for (m, row) in self.frequencies.iter().enumerate() {
            for (n, f) in row.iter().enumerate() {
                writeln!(out, "{m},{n},{f:e}")?;
            }
        }
        out.flush()?;
        Ok(())
    }

    /// Reads a record written by [`write_csv`](Self::write_csv) for the given
    /// probe and projector sets.
    pub fn read_csv(path: impl AsRef<Path>, probes: StateSet, projectors: StateSet) -> Result<Self> {
        let reader = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut frequencies = vec![vec![f64::NAN; projectors.len()]; probes.len()];
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            if i == 0 {
                if line.trim() != RECORD_HEADER {
                    return Err(Error::Format(format!("unexpected record header `{line}`")));
                }
                continue;
            }
            if line.trim().is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.split(',').collect();
            let bad = || Error::Format(format!("bad record line {}: `{line}`", i + 1));
            if parts.len() != 3 {
                return Err(bad());
            }
            let m: usize = parts[0].trim().parse().map_err(|_| bad())?;
            let n: usize = parts[1].trim().parse().map_err(|_| bad())?;
            let f: f64 = parts[2].trim().parse().map_err(|_| bad())?;
            *frequencies.get_mut(m).and_then(|r| r.get_mut(n)).ok_or_else(bad)? = f;
        }
        if frequencies.iter().flatten().any(|f| f.is_nan()) {
            return Err(Error::Format("record is missing entries".into()));
        }
        if probes.dim != projectors.dim {
            return Err(Error::DimensionMismatch {
                expected: probes.dim,
                actual: projectors.dim,
            });
        }
        Ok(Self {
            dim: probes.dim,
            probes,
            projectors,
            frequencies,
        })
    }
}

/// Mean squared difference of two records' frequencies.
pub fn tomography_mse(a: &TomographyRecord, b: &TomographyRecord) -> Result<f64> {
    if a.frequencies.len() != b.frequencies.len()
        || a.frequencies.iter().zip(&b.frequencies).any(|(x, y)| x.len() != y.len())
    {
        return Err(Error::LengthMismatch("records have different shapes".into()));
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for (x, y) in a.frequencies.iter().zip(&b.frequencies) {
        for (p, q) in x.iter().zip(y) {
            sum += (p - q).powi(2);
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::Empty("empty records".into()));
    }
    Ok(sum / count as f64)
}

/// Choi operator on H⊗K.
#[derive(Debug, Clone, PartialEq)]
pub struct ChoiOperator {
    pub dim_in: usize,
    pub dim_out: usize,
    pub matrix: DMatrix<Complex64>,
}

impl ChoiOperator {
    /// `Tr_K(E)`.
    pub fn partial_trace_out(&self) -> DMatrix<Complex64> {
        partial_trace_k(&self.matrix, self.dim_in, self.dim_out)
    }

    /// Largest entry of `|Tr_K(E) − I|`.
    pub fn trace_error(&self) -> f64 {
        let t = self.partial_trace_out();
        (t - DMatrix::identity(self.dim_in, self.dim_in))
            .iter()
            .map(|v| v.norm())
            .fold(0.0, f64::max)
    }

    pub fn min_eigenvalue(&self) -> f64 {
        min_eigenvalue(&self.matrix)
    }
}

fn partial_trace_k(m: &DMatrix<Complex64>, dh: usize, dk: usize) -> DMatrix<Complex64> {
    DMatrix::from_fn(dh, dh, |i, j| (0..dk).map(|k| m[(i * dk + k, j * dk + k)]).sum())
}

fn hermitize(m: &DMatrix<Complex64>) -> DMatrix<Complex64> {
    (m + m.adjoint()) * Complex64::new(0.5, 0.0)
}

fn min_eigenvalue(m: &DMatrix<Complex64>) -> f64 {
    hermitize(m)
        .symmetric_eigenvalues()
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}

/// Choi operator of `ρ ↦ UρU†`: the projector onto `Σ_i |i⟩⊗U|i⟩`.
pub fn choi_from_unitary(u: &GateSpec) -> ChoiOperator {
    let d = u.dim();
    let m = u.matrix();
    let omega = DVector::from_fn(d * d, |idx, _| m[(idx % d, idx / d)]);
    ChoiOperator {
        dim_in: d,
        dim_out: d,
        matrix: &omega * omega.adjoint(),
    }
}

/// Outcome of [`mle_reconstruct`].
#[derive(Debug, Clone)]
pub struct MleResult {
    pub choi: ChoiOperator,
    pub iterations: usize,
    pub converged: bool,
    /// Worst `|Tr_K(E_i) − I|` entry over all iterates.
    pub max_trace_error: f64,
    /// Smallest eigenvalue seen over all iterates.
    pub min_eigenvalue: f64,
}

pub const DEFAULT_MLE_TOL: f64 = 1e-10;
pub const DEFAULT_MLE_ITERS: usize = 5000;
const P_FLOOR: f64 = 1e-12;

/// Iterates `E ← Λ⁻¹ R E R Λ⁻¹` from `E₀ = I/d_K`, with
/// `R = Σ (f/p) ρᵀ⊗Π` and `Λ = (Tr_K R E R)^{1/2}`.
///
/// Stops when the largest entry change falls below `tol`; otherwise returns
/// the last iterate with `converged = false`.
pub fn mle_reconstruct(rec: &TomographyRecord, max_iters: usize, tol: f64) -> Result<MleResult> {
    let dh = rec.probes.dim;
    let dk = rec.projectors.dim;
    if rec.frequencies.len() != rec.probes.len() || rec.frequencies.iter().any(|r| r.len() != rec.projectors.len()) {
        return Err(Error::LengthMismatch("frequency table does not match the state sets".into()));
    }
    if rec.frequencies.iter().flatten().any(|f| !(*f >= 0.0 && f.is_finite())) {
        return Err(Error::InvalidParameter("frequencies must be finite and non-negative".into()));
    }
    let n = dh * dk;
    // v = conj(ψ_m) ⊗ π_n, so ⟨v|E|v⟩ = Tr(E·ρᵀ⊗Π).
    let mut vectors = Vec::new();
    let mut weights = Vec::new();
    for (m, probe) in rec.probes.states.iter().enumerate() {
        for (k, proj) in rec.projectors.states.iter().enumerate() {
            let f = rec.frequencies[m][k];
            if f == 0.0 {
                // Zero-frequency outcomes do not contribute to R.
                continue;
            }
            vectors.push(probe.coeffs().map(|c| c.conj()).kronecker(proj.coeffs()));
            weights.push(f);
        }
    }
    if vectors.is_empty() {
        return Err(Error::Empty("record has no counts".into()));
    }
    let mut e = DMatrix::<Complex64>::identity(n, n) / Complex64::new(dk as f64, 0.0);
    let mut max_trace_error: f64 = 0.0;
    let mut min_eig = f64::INFINITY;
    let mut converged = false;
    let mut iterations = 0;
    for it in 0..max_iters {
        let mut r = DMatrix::<Complex64>::zeros(n, n);
        for (v, &f) in vectors.iter().zip(&weights) {
            let p = (v.adjoint() * &e * v)[(0, 0)].re.max(P_FLOOR);
            r.gerc(Complex64::new(f / p, 0.0), v, v, Complex64::new(1.0, 0.0));
        }
        let rer = hermitize(&(&r * &e * &r));
        let lam2 = partial_trace_k(&rer, dh, dk);
        let inv_sqrt = inverse_sqrt(&lam2)?;
        let l = inv_sqrt.kronecker(&DMatrix::<Complex64>::identity(dk, dk));
        let next = hermitize(&(&l * rer * &l));
        let change = (&next - &e).iter().map(|v| v.norm()).fold(0.0, f64::max);
        e = next;
        iterations = it + 1;
        let choi = ChoiOperator {
            dim_in: dh,
            dim_out: dk,
            matrix: e.clone(),
        };
        max_trace_error = max_trace_error.max(choi.trace_error());
        min_eig = min_eig.min(choi.min_eigenvalue());
        if change < tol {
            converged = true;
            break;
        }
    }
    Ok(MleResult {
        choi: ChoiOperator {
            dim_in: dh,
            dim_out: dk,
            matrix: e,
        },
        iterations,
        converged,
        max_trace_error,
        min_eigenvalue: min_eig,
    })
}

fn inverse_sqrt(m: &DMatrix<Complex64>) -> Result<DMatrix<Complex64>> {
    let eig = hermitize(m).symmetric_eigen();
    if eig.eigenvalues.iter().any(|&v| v <= 0.0) {
        return Err(Error::InvalidParameter(
            "singular partial trace during reconstruction; probes are not informationally complete".into(),
        ));
    }
    let d = DMatrix::from_diagonal(&eig.eigenvalues.map(|v| Complex64::new(1.0 / v.sqrt(), 0.0)));
    Ok(&eig.eigenvectors * d * eig.eigenvectors.adjoint())
}

/// Orthonormal (Hilbert–Schmidt) operator bases for χ.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OperatorBasis {
    /// I/√3 followed by λ₁..λ₈/√2.
    GellMann,
    /// σ_a⊗σ_b/2 for a, b in {I, X, Y, Z}, row-major.
    TwoQubitPauli,
    /// σ_a/√2 for a in {I, X, Y, Z}.
    Pauli,
}

impl OperatorBasis {
    pub fn for_dim(d: usize) -> Result<Self> {
        match d {
            2 => Ok(Self::Pauli),
            3 => Ok(Self::GellMann),
            4 => Ok(Self::TwoQubitPauli),
            d => Err(Error::Unsupported(format!("no operator basis for dimension {d}"))),
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            Self::Pauli => 2,
            Self::GellMann => 3,
            Self::TwoQubitPauli => 4,
        }
    }

    pub fn elements(&self) -> Vec<DMatrix<Complex64>> {
        match self {
            Self::Pauli => paulis().into_iter().map(|p| p * Complex64::new(std::f64::consts::FRAC_1_SQRT_2, 0.0)).collect(),
            Self::TwoQubitPauli => {
                let ps = paulis();
                let mut out = Vec::with_capacity(16);
                for a in &ps {
                    for b in &ps {
                        out.push(a.kronecker(b) * Complex64::new(0.5, 0.0));
                    }
                }
                out
            }
            Self::GellMann => gell_mann(),
        }
    }
}

fn paulis() -> Vec<DMatrix<Complex64>> {
    let c = |re: f64, im: f64| Complex64::new(re, im);
    vec![
        DMatrix::identity(2, 2),
        DMatrix::from_row_slice(2, 2, &[ZERO, c(1.0, 0.0), c(1.0, 0.0), ZERO]),
        DMatrix::from_row_slice(2, 2, &[ZERO, c(0.0, -1.0), c(0.0, 1.0), ZERO]),
        DMatrix::from_row_slice(2, 2, &[c(1.0, 0.0), ZERO, ZERO, c(-1.0, 0.0)]),
    ]
}

fn gell_mann() -> Vec<DMatrix<Complex64>> {
    let unit = |entries: &[(usize, usize, Complex64)]| {
        let mut m = DMatrix::<Complex64>::zeros(3, 3);
        for &(r, c, v) in entries {
            m[(r, c)] = v;
        }
        m
    };
    let one = Complex64::new(1.0, 0.0);
    let i = Complex64::new(0.0, 1.0);
    let s = Complex64::new(std::f64::consts::FRAC_1_SQRT_2, 0.0);
    let r3 = 1.0 / 3f64.sqrt();
    let mut out = vec![DMatrix::<Complex64>::identity(3, 3) * Complex64::new(r3, 0.0)];
    let lambdas = [
        unit(&[(0, 1, one), (1, 0, one)]),
        unit(&[(0, 1, -i), (1, 0, i)]),
        unit(&[(0, 0, one), (1, 1, -one)]),
        unit(&[(0, 2, one), (2, 0, one)]),
        unit(&[(0, 2, -i), (2, 0, i)]),
        unit(&[(1, 2, one), (2, 1, one)]),
        unit(&[(1, 2, -i), (2, 1, i)]),
        unit(&[(0, 0, one * r3), (1, 1, one * r3), (2, 2, -2.0 * one * r3)]),
    ];
    out.extend(lambdas.into_iter().map(|l| l * s));
    out
}

/// χ in a fixed orthonormal operator basis, scaled so that `Tr χ = 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProcessMatrix {
    pub dim: usize,
    pub basis: OperatorBasis,
    pub chi: DMatrix<Complex64>,
}

/// `χ_mn = ⟨e_m|E|e_n⟩/d` with `e_m = Σ_i |i⟩⊗E_m|i⟩`.
pub fn chi_from_choi(e: &ChoiOperator, basis: OperatorBasis) -> Result<ProcessMatrix> {
    let d = basis.dim();
    if e.dim_in != d || e.dim_out != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            actual: e.dim_in,
        });
    }
    let vecs: Vec<DVector<Complex64>> = basis
        .elements()
        .iter()
        .map(|em| DVector::from_fn(d * d, |idx, _| em[(idx % d, idx / d)]))
        .collect();
    let scale = Complex64::new(1.0 / d as f64, 0.0);
    let ev: Vec<DVector<Complex64>> = vecs.iter().map(|v| &e.matrix * v).collect();
    let chi = DMatrix::from_fn(d * d, d * d, |m, n| vecs[m].dotc(&ev[n]) * scale);
    Ok(ProcessMatrix { dim: d, basis, chi })
}

/// `Tr(χ_t χ_e)`.
pub fn process_fidelity(chi_t: &ProcessMatrix, chi_e: &ProcessMatrix) -> Result<f64> {
    if chi_t.basis != chi_e.basis {
        return Err(Error::InvalidParameter("process matrices use different operator bases".into()));
    }
    Ok((&chi_t.chi * &chi_e.chi).trace().re)
}

impl ProcessMatrix {
    pub fn of_unitary(u: &GateSpec) -> Result<Self> {
        chi_from_choi(&choi_from_unitary(u), OperatorBasis::for_dim(u.dim())?)
    }

    pub fn eigenvalues(&self) -> Vec<f64> {
        let mut v: Vec<f64> = hermitize(&self.chi).symmetric_eigenvalues().iter().copied().collect();
        v.sort_by(|a, b| b.total_cmp(a));
        v
    }

    pub fn to_json(&self) -> serde_json::Value {
        let n = self.chi.nrows();
        let rows: Vec<Vec<[f64; 2]>> = (0..n)
            .map(|r| (0..n).map(|c| [self.chi[(r, c)].re, self.chi[(r, c)].im]).collect())
            .collect();
        serde_json::json!({ "dim": self.dim, "basis": self.basis, "chi": rows })
    }
}
