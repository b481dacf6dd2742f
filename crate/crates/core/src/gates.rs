//! Target unitaries, probe state sets and their spatial-mode encodings.

use std::f64::consts::{FRAC_1_SQRT_2, PI};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::field::{lg_mode, overlap, ComplexField, GridSpec, ModeSpec};

const UNITARY_TOL: f64 = 1e-12;

fn c(re: f64, im: f64) -> Complex64 {
    Complex64::new(re, im)
}

/// A named d×d unitary.
#[derive(Debug, Clone, PartialEq)]
pub struct GateSpec {
    pub name: String,
    matrix: DMatrix<Complex64>,
}

impl GateSpec {
    pub fn new(name: impl Into<String>, matrix: DMatrix<Complex64>) -> Result<Self> {
        if matrix.nrows() != matrix.ncols() || matrix.nrows() == 0 {
            return Err(Error::DimensionMismatch {
                expected: matrix.nrows(),
                actual: matrix.ncols(),
            });
        }
        let dev = unitarity_deviation(&matrix);
        if dev > UNITARY_TOL {
            return Err(Error::NotUnitary(dev));
        }
        Ok(Self {
            name: name.into(),
            matrix,
        })
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<Complex64> {
        &self.matrix
    }

    pub fn apply(&self, state: &StateVector) -> Result<StateVector> {
        check_dim(self.dim(), state.dim())?;
        Ok(StateVector {
            coeffs: &self.matrix * &state.coeffs,
        })
    }

    pub fn to_json(&self) -> serde_json::Value {
        let rows: Vec<Vec<[f64; 2]>> = (0..self.dim())
            .map(|r| (0..self.dim()).map(|k| [self.matrix[(r, k)].re, self.matrix[(r, k)].im]).collect())
            .collect();
        serde_json::json!({ "name": self.name, "dim": self.dim(), "matrix": rows })
    }

    /// Accepts `{"name", "matrix"}` or a bare nested `[[[re, im], ...], ...]` array.
    pub fn from_json(value: &serde_json::Value, default_name: &str) -> Result<Self> {
        let (name, rows) = match value {
            serde_json::Value::Object(map) => (
                map.get("name").and_then(|n| n.as_str()).unwrap_or(default_name).to_string(),
                map.get("matrix")
                    .cloned()
                    .ok_or_else(|| Error::Format("gate JSON lacks `matrix`".into()))?,
            ),
            other => (default_name.to_string(), other.clone()),
        };
        let rows: Vec<Vec<[f64; 2]>> = serde_json::from_value(rows)?;
        let d = rows.len();
        if rows.iter().any(|r| r.len() != d) {
            return Err(Error::Format("gate matrix must be square".into()));
        }
        let m = DMatrix::from_fn(d, d, |r, k| c(rows[r][k][0], rows[r][k][1]));
        Self::new(name, m)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(&self.to_json())?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let value: serde_json::Value = serde_json::from_slice(&std::fs::read(path)?)?;
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("custom");
        Self::from_json(&value, stem)
    }
}

/// max |U†U − I|.
pub fn unitarity_deviation(m: &DMatrix<Complex64>) -> f64 {
    let prod = m.adjoint() * m;
    let id = DMatrix::<Complex64>::identity(m.nrows(), m.ncols());
    (prod - id).iter().map(|v| v.norm()).fold(0.0, f64::max)
}

fn check_dim(expected: usize, actual: usize) -> Result<()> {
    if expected != actual {
        return Err(Error::DimensionMismatch { expected, actual });
    }
    Ok(())
}

fn omega(k: u32) -> Complex64 {
    Complex64::cis(2.0 * PI * k as f64 / 3.0)
}

fn hadamard3(rows: [[u32; 3]; 3]) -> DMatrix<Complex64> {
    let s = 1.0 / 3f64.sqrt();
    DMatrix::from_fn(3, 3, |r, k| omega(rows[r][k]) * s)
}

fn permutation(rows: &[[u8; 3]; 3]) -> DMatrix<Complex64> {
    DMatrix::from_fn(3, 3, |r, k| c(rows[r][k] as f64, 0.0))
}

/// Names accepted by [`standard_gate`].
pub const STANDARD_GATES: &[&str] = &[
    "X0", "X1", "X2", "H0", "H1", "H2", "H3", "CNOT", "I4", "HQ", "DEUTSCH_CONST", "DEUTSCH_BAL",
];

/// The built-in gate library.
///
/// `X0..X2` are the cyclic shifts and `H0..H3` the Hadamard-type matrices
/// in three dimensions. `CNOT` and `I4` act on the two-qubit OAM code,
/// `HQ` is the qubit Hadamard, and `DEUTSCH_CONST` / `DEUTSCH_BAL` are
/// the compressed oracle-plus-interference unitaries `(H⊗H)·I4` and
/// `(H⊗H)·CNOT`.
pub fn standard_gate(name: &str) -> Result<GateSpec> {
    let upper = name.to_ascii_uppercase();
    let m = match upper.as_str() {
        "X0" | "H0" => DMatrix::identity(3, 3),
        "X1" => permutation(&[[0, 1, 0], [0, 0, 1], [1, 0, 0]]),
        "X2" => permutation(&[[0, 0, 1], [1, 0, 0], [0, 1, 0]]),
        "H1" => hadamard3([[0, 0, 0], [0, 1, 2], [0, 2, 1]]),
        "H2" => hadamard3([[0, 0, 0], [1, 2, 0], [1, 0, 2]]),
        "H3" => hadamard3([[0, 0, 0], [2, 0, 1], [2, 1, 0]]),
        "I4" => DMatrix::identity(4, 4),
        "CNOT" => {
            let mut m = DMatrix::zeros(4, 4);
            for (r, k) in [(0, 0), (1, 1), (2, 3), (3, 2)] {
                m[(r, k)] = c(1.0, 0.0);
            }
            m
        }
        "HQ" => DMatrix::from_row_slice(
            2,
            2,
            &[
                c(FRAC_1_SQRT_2, 0.0),
                c(FRAC_1_SQRT_2, 0.0),
                c(FRAC_1_SQRT_2, 0.0),
                c(-FRAC_1_SQRT_2, 0.0),
            ],
        ),
        "DEUTSCH_CONST" | "DEUTSCH_BAL" => {
            let hh = tensor(&standard_gate("HQ")?, &standard_gate("HQ")?);
            let oracle = if upper == "DEUTSCH_CONST" { "I4" } else { "CNOT" };
            let mut g = compose(&[standard_gate(oracle)?, hh])?;
            g.name = upper.clone();
            return Ok(g);
        }
        _ => return Err(Error::UnknownGate(name.to_string())),
    };
    GateSpec::new(upper, m)
}

/// Product of `gates` in application order: the first entry acts first.
pub fn compose(gates: &[GateSpec]) -> Result<GateSpec> {
    let first = gates.first().ok_or_else(|| Error::Empty("no gates to compose".into()))?;
    let mut m = first.matrix.clone();
    for g in &gates[1..] {
        check_dim(first.dim(), g.dim())?;
        m = &g.matrix * m;
    }
    let name = gates.iter().map(|g| g.name.as_str()).collect::<Vec<_>>().join("*");
    // Accumulated rounding stays far below the unitarity tolerance for short circuits.
    GateSpec::new(name, m)
}

/// Kronecker product `a ⊗ b`.
pub fn tensor(a: &GateSpec, b: &GateSpec) -> GateSpec {
    GateSpec {
        name: format!("{}(x){}", a.name, b.name),
        matrix: a.matrix.kronecker(&b.matrix),
    }
}

/// A pure state in the computational basis.
#[derive(Debug, Clone, PartialEq)]
pub struct StateVector {
    coeffs: DVector<Complex64>,
}

impl StateVector {
    pub fn new(coeffs: Vec<Complex64>) -> Result<Self> {
        let v = DVector::from_vec(coeffs);
        let n = v.norm();
        if (n - 1.0).abs() > UNITARY_TOL {
            return Err(Error::InvalidParameter(format!("state norm is {n}, expected 1")));
        }
        Ok(Self { coeffs: v })
    }

    pub fn normalized(coeffs: Vec<Complex64>) -> Result<Self> {
        let v = DVector::from_vec(coeffs);
        let n = v.norm();
        if n == 0.0 || !n.is_finite() {
            return Err(Error::InvalidParameter("cannot normalize a zero state".into()));
        }
        Ok(Self { coeffs: v / c(n, 0.0) })
    }

    pub fn basis(dim: usize, k: usize) -> Self {
        let mut v = DVector::zeros(dim);
        v[k] = c(1.0, 0.0);
        Self { coeffs: v }
    }

    pub fn dim(&self) -> usize {
        self.coeffs.len()
    }

    pub fn coeffs(&self) -> &DVector<Complex64> {
        &self.coeffs
    }

    /// ⟨self|other⟩.
    pub fn inner(&self, other: &StateVector) -> Complex64 {
        self.coeffs.dotc(&other.coeffs)
    }

    pub fn kron(&self, other: &StateVector) -> StateVector {
        StateVector {
            coeffs: self.coeffs.kronecker(&other.coeffs),
        }
    }
}

/// Probe or analysis states grouped into orthonormal blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct StateSet {
    pub dim: usize,
    pub states: Vec<StateVector>,
    /// Orthonormal-basis id of each state.
    pub block: Vec<usize>,
}

impl StateSet {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn block_count(&self) -> usize {
        self.block.iter().copied().max().map_or(0, |b| b + 1)
    }

    /// Indices of the states in block `b`, in set order.
    pub fn block_members(&self, b: usize) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.block[i] == b).collect()
    }

    /// Computational basis as a single block.
    pub fn computational(dim: usize) -> Self {
        Self {
            dim,
            states: (0..dim).map(|k| StateVector::basis(dim, k)).collect(),
            block: vec![0; dim],
        }
    }

    /// The mutually unbiased bases for `dim` 2 or 3, or the 36-state set for 4.
    pub fn for_dim(dim: usize) -> Result<Self> {
        match dim {
            2 | 3 => {
                let bases = mub_states(dim)?;
                let mut states = Vec::new();
                let mut block = Vec::new();
                for (b, basis) in bases.into_iter().enumerate() {
                    block.extend(std::iter::repeat_n(b, basis.len()));
                    states.extend(basis);
                }
                Ok(Self { dim, states, block })
            }
            4 => Ok(overcomplete_4d_set()),
            d => Err(Error::Unsupported(format!("no probe set for dimension {d}"))),
        }
    }
}

fn qubit_mub_columns() -> Vec<StateVector> {
    let s = FRAC_1_SQRT_2;
    [
        [c(1.0, 0.0), c(0.0, 0.0)],
        [c(0.0, 0.0), c(1.0, 0.0)],
        [c(s, 0.0), c(s, 0.0)],
        [c(s, 0.0), c(-s, 0.0)],
        [c(s, 0.0), c(0.0, s)],
        [c(s, 0.0), c(0.0, -s)],
    ]
    .into_iter()
    .map(|col| StateVector {
        coeffs: DVector::from_vec(col.to_vec()),
    })
    .collect()
}

/// Mutually unbiased bases, grouped by basis.
///
/// d = 3: the columns of H0..H3 (4 bases, 12 states). d = 2: the columns
/// of the qubit MUB matrix (3 bases, 6 states).
pub fn mub_states(d: usize) -> Result<Vec<Vec<StateVector>>> {
    match d {
        3 => ["H0", "H1", "H2", "H3"]
            .iter()
            .map(|n| {
                let g = standard_gate(n)?;
                Ok((0..3)
                    .map(|k| StateVector {
                        coeffs: g.matrix.column(k).into_owned(),
                    })
                    .collect())
            })
            .collect(),
        2 => Ok(qubit_mub_columns().chunks(2).map(|c| c.to_vec()).collect()),
        d => Err(Error::Unsupported(format!("MUBs are provided for d = 2 and 3, not {d}"))),
    }
}

/// The 36 columns of C ⊗ C, in Kronecker order (index `6a + b`).
pub fn overcomplete_4d() -> Vec<StateVector> {
    let cols = qubit_mub_columns();
    let mut out = Vec::with_capacity(36);
    for a in &cols {
        for b in &cols {
            out.push(a.kron(b));
        }
    }
    out
}

/// [`overcomplete_4d`] with product-basis block labels (9 blocks of 4).
pub fn overcomplete_4d_set() -> StateSet {
    let block = (0..36).map(|i| (i / 6 / 2) * 3 + (i % 6) / 2).collect();
    StateSet {
        dim: 4,
        states: overcomplete_4d(),
        block,
    }
}

/// Orthonormal spatial modes carrying the computational basis.
#[derive(Debug, Clone)]
pub struct ModeBasis {
    modes: Vec<ComplexField>,
    labels: Vec<String>,
}

/// Largest |Gram − I| entry tolerated for a mode basis.
pub const GRAM_TOL: f64 = 2e-3;

impl ModeBasis {
    pub fn new(modes: Vec<ComplexField>, labels: Vec<String>) -> Result<Self> {
        if modes.is_empty() {
            return Err(Error::Empty("mode basis has no modes".into()));
        }
        if labels.len() != modes.len() {
            return Err(Error::LengthMismatch("one label per mode required".into()));
        }
        let basis = Self { modes, labels };
        let dev = basis.gram_deviation()?;
        if dev > GRAM_TOL {
            return Err(Error::InvalidParameter(format!("modes are not orthonormal (Gram deviation {dev:.2e})")));
        }
        Ok(basis)
    }

    pub fn from_specs(specs: &[ModeSpec], grid: &GridSpec) -> Result<Self> {
        let modes = specs.iter().map(|s| lg_mode(s, grid)).collect::<Result<Vec<_>>>()?;
        Self::new(modes, specs.iter().map(ModeSpec::label).collect())
    }

    /// LG_0^{-2}, LG_1^0, LG_0^{2} as |0⟩, |1⟩, |2⟩.
    pub fn three_dim(grid: &GridSpec, waist: f64) -> Result<Self> {
        Self::from_specs(
            &[ModeSpec::lg(-2, 0, waist), ModeSpec::lg(0, 1, waist), ModeSpec::lg(2, 0, waist)],
            grid,
        )
    }

    /// OAM ℓ = −1, +1, −3, +3 as |00⟩, |01⟩, |10⟩, |11⟩.
    pub fn two_qubit_oam(grid: &GridSpec, waist: f64) -> Result<Self> {
        Self::from_specs(
            &[
                ModeSpec::lg(-1, 0, waist),
                ModeSpec::lg(1, 0, waist),
                ModeSpec::lg(-3, 0, waist),
                ModeSpec::lg(3, 0, waist),
            ],
            grid,
        )
    }

    /// The default basis for a gate dimension.
    pub fn for_dim(dim: usize, grid: &GridSpec, waist: f64) -> Result<Self> {
        match dim {
            3 => Self::three_dim(grid, waist),
            4 => Self::two_qubit_oam(grid, waist),
            d => Err(Error::Unsupported(format!("no default mode basis for dimension {d}"))),
        }
    }

    pub fn dim(&self) -> usize {
        self.modes.len()
    }

    pub fn grid(&self) -> &GridSpec {
        self.modes[0].grid()
    }

    pub fn modes(&self) -> &[ComplexField] {
        &self.modes
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn gram_deviation(&self) -> Result<f64> {
        let mut dev: f64 = 0.0;
        for (i, a) in self.modes.iter().enumerate() {
            for (j, b) in self.modes.iter().enumerate() {
                let want = if i == j { 1.0 } else { 0.0 };
                dev = dev.max((overlap(a, b)? - c(want, 0.0)).norm());
            }
        }
        Ok(dev)
    }
}

/// Σ_k s_k·mode_k.
pub fn encode(state: &StateVector, basis: &ModeBasis) -> Result<ComplexField> {
    check_dim(basis.dim(), state.dim())?;
    encode_coeffs(state.coeffs.as_slice(), basis)
}

pub(crate) fn encode_coeffs(coeffs: &[Complex64], basis: &ModeBasis) -> Result<ComplexField> {
    let mut field = ComplexField::zeros(*basis.grid());
    for (k, mode) in basis.modes.iter().enumerate() {
        field.add_scaled(coeffs[k], mode)?;
    }
    Ok(field)
}

/// Projection of a field onto a mode basis.
#[derive(Debug, Clone, PartialEq)]
pub struct Projection {
    /// ⟨mode_k|field⟩.
    pub coefficients: Vec<Complex64>,
    /// Field power not captured by the basis.
    pub residual: f64,
}

impl Projection {
    pub fn in_basis_power(&self) -> f64 {
        self.coefficients.iter().map(|a| a.norm_sqr()).sum()
    }

    /// The projected coefficients rescaled to a unit state.
    pub fn state(&self) -> Result<StateVector> {
        StateVector::normalized(self.coefficients.clone())
    }
}

pub fn decode(field: &ComplexField, basis: &ModeBasis) -> Result<Projection> {
    let coefficients = basis.modes.iter().map(|m| overlap(m, field)).collect::<Result<Vec<_>>>()?;
    let in_basis: f64 = coefficients.iter().map(|a| a.norm_sqr()).sum();
    Ok(Projection {
        coefficients,
        residual: (field.norm_sqr() - in_basis).max(0.0),
    })
}
