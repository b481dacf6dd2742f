//! Sampled scalar fields on a square-pixel grid.
//!
//! Amplitudes are stored row-major (`index = row * nx + col`), with the
//! column index running along x. The optical axis passes through pixel
//! `(nx / 2, ny / 2)`. The L2 norm includes the pixel area, so a unit-norm
//! field satisfies `Σ|a|²·pitch² = 1`.

use std::f64::consts::PI;
use std::io::{BufRead, Write};

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Sampling grid shared by fields and phase layers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub nx: usize,
    pub ny: usize,
    /// Pixel pitch in meters.
    pub pitch: f64,
    /// Vacuum wavelength in meters.
    pub wavelength: f64,
}

impl GridSpec {
    pub fn new(nx: usize, ny: usize, pitch: f64, wavelength: f64) -> Result<Self> {
        let grid = Self {
            nx,
            ny,
            pitch,
            wavelength,
        };
        grid.validate()?;
        Ok(grid)
    }

    pub fn square(n: usize, pitch: f64, wavelength: f64) -> Result<Self> {
        Self::new(n, n, pitch, wavelength)
    }

    /// 128×128 pixels at 24 µm, 1550 nm.
    pub fn desk() -> Self {
        Self {
            nx: 128,
            ny: 128,
            pitch: 24e-6,
            wavelength: 1550e-9,
        }
    }

    /// 384×384 pixels at 8 µm, 1550 nm.
    pub fn full_scale() -> Self {
        Self {
            nx: 384,
            ny: 384,
            pitch: 8e-6,
            wavelength: 1550e-9,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.nx < 8 || self.ny < 8 || self.nx % 2 != 0 || self.ny % 2 != 0 {
            return Err(Error::InvalidGrid(format!(
                "pixel counts must be even and at least 8, got {}x{}",
                self.nx, self.ny
            )));
        }
        if !(self.pitch > 0.0 && self.pitch.is_finite()) {
            return Err(Error::InvalidGrid(format!("pitch must be positive, got {}", self.pitch)));
        }
        if !(self.wavelength > 0.0 && self.wavelength.is_finite()) {
            return Err(Error::InvalidGrid(format!(
                "wavelength must be positive, got {}",
                self.wavelength
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.nx * self.ny
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Physical x coordinate of column `col`.
    pub fn x(&self, col: usize) -> f64 {
        (col as f64 - (self.nx / 2) as f64) * self.pitch
    }

    /// Physical y coordinate of row `row`.
    pub fn y(&self, row: usize) -> f64 {
        (row as f64 - (self.ny / 2) as f64) * self.pitch
    }

    pub fn width(&self) -> f64 {
        self.nx as f64 * self.pitch
    }

    pub fn height(&self) -> f64 {
        self.ny as f64 * self.pitch
    }

    pub fn pixel_area(&self) -> f64 {
        self.pitch * self.pitch
    }

    pub fn wavenumber(&self) -> f64 {
        2.0 * PI / self.wavelength
    }

    /// Same sampling, ignoring the wavelength.
    pub fn same_sampling(&self, other: &GridSpec) -> bool {
        self.nx == other.nx && self.ny == other.ny && self.pitch == other.pitch
    }

    pub(crate) fn ensure_matches(&self, other: &GridSpec) -> Result<()> {
        if self != other {
            return Err(Error::GridMismatch(format!(
                "{}x{} @ {:e} m, {:e} m vs {}x{} @ {:e} m, {:e} m",
                self.nx,
                self.ny,
                self.pitch,
                self.wavelength,
                other.nx,
                other.ny,
                other.pitch,
                other.wavelength
            )));
        }
        Ok(())
    }
}

/// A complex amplitude sampled on a [`GridSpec`].
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexField {
    grid: GridSpec,
    data: Vec<Complex64>,
}

impl ComplexField {
    pub fn zeros(grid: GridSpec) -> Self {
        Self {
            grid,
            data: vec![Complex64::new(0.0, 0.0); grid.len()],
        }
    }

    pub fn from_vec(grid: GridSpec, data: Vec<Complex64>) -> Result<Self> {
        if data.len() != grid.len() {
            return Err(Error::LengthMismatch(format!(
                "field data has {} samples, grid needs {}",
                data.len(),
                grid.len()
            )));
        }
        if data.iter().any(|a| !a.re.is_finite() || !a.im.is_finite()) {
            return Err(Error::InvalidParameter("field contains non-finite samples".into()));
        }
        Ok(Self { grid, data })
    }

    /// Builds a field by evaluating `f(x, y)` at every pixel center.
    pub fn from_fn(grid: GridSpec, mut f: impl FnMut(f64, f64) -> Complex64) -> Self {
        let mut data = Vec::with_capacity(grid.len());
        for row in 0..grid.ny {
            let y = grid.y(row);
            for col in 0..grid.nx {
                data.push(f(grid.x(col), y));
            }
        }
        Self { grid, data }
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn data(&self) -> &[Complex64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [Complex64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<Complex64> {
        self.data
    }

    pub fn at(&self, col: usize, row: usize) -> Complex64 {
        self.data[row * self.grid.nx + col]
    }

    /// Σ|a|² over pixels, without the pixel area.
    pub fn pixel_power(&self) -> f64 {
        self.data.iter().map(|a| a.norm_sqr()).sum()
    }

    /// Σ|a|²·pitch².
    pub fn norm_sqr(&self) -> f64 {
        self.pixel_power() * self.grid.pixel_area()
    }

    pub fn norm(&self) -> f64 {
        self.norm_sqr().sqrt()
    }

    pub fn scale(&mut self, factor: Complex64) {
        for a in &mut self.data {
            *a *= factor;
        }
    }

    pub fn scaled(mut self, factor: Complex64) -> Self {
        self.scale(factor);
        self
    }

    /// Rescales to unit norm. Returns the norm before scaling.
    pub fn normalize(&mut self) -> f64 {
        let n = self.norm();
        if n > 0.0 {
            self.scale(Complex64::new(1.0 / n, 0.0));
        }
        n
    }

    /// `self += coeff * other`.
    pub fn add_scaled(&mut self, coeff: Complex64, other: &ComplexField) -> Result<()> {
        self.grid.ensure_matches(&other.grid)?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += coeff * b;
        }
        Ok(())
    }

    /// Σ|a|² inside the disk of the given radius around the axis.
    pub fn power_within(&self, radius: f64) -> f64 {
        let r2 = radius * radius;
        let mut sum = 0.0;
        for row in 0..self.grid.ny {
            let y = self.grid.y(row);
            for col in 0..self.grid.nx {
                let x = self.grid.x(col);
                if x * x + y * y <= r2 {
                    sum += self.data[row * self.grid.nx + col].norm_sqr();
                }
            }
        }
        sum * self.grid.pixel_area()
    }

    /// Intensity-weighted ⟨x² + y²⟩.
    pub fn second_moment(&self) -> f64 {
        let mut num = 0.0;
        let mut den = 0.0;
        for row in 0..self.grid.ny {
            let y = self.grid.y(row);
            for col in 0..self.grid.nx {
                let x = self.grid.x(col);
                let p = self.data[row * self.grid.nx + col].norm_sqr();
                num += p * (x * x + y * y);
                den += p;
            }
        }
        if den > 0.0 {
            num / den
        } else {
            0.0
        }
    }

    /// Writes the JSON header line followed by little-endian `(re, im)` f64 pairs.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        let header = FieldHeader {
            nx: self.grid.nx,
            ny: self.grid.ny,
            pitch_m: self.grid.pitch,
            wavelength_m: self.grid.wavelength,
        };
        serde_json::to_writer(&mut w, &header)?;
        w.write_all(b"\n")?;
        let mut buf = Vec::with_capacity(self.data.len() * 16);
        for a in &self.data {
            buf.extend_from_slice(&a.re.to_le_bytes());
            buf.extend_from_slice(&a.im.to_le_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_from<R: BufRead>(mut r: R) -> Result<Self> {
        let mut line = String::new();
        r.read_line(&mut line)?;
        let header: FieldHeader = serde_json::from_str(line.trim_end())?;
        let grid = GridSpec::new(header.nx, header.ny, header.pitch_m, header.wavelength_m)?;
        let mut buf = vec![0u8; grid.len() * 16];
        r.read_exact(&mut buf)?;
        let data = buf
            .chunks_exact(16)
            .map(|c| {
                let re = f64::from_le_bytes(c[..8].try_into().expect("8 bytes"));
                let im = f64::from_le_bytes(c[8..].try_into().expect("8 bytes"));
                Complex64::new(re, im)
            })
            .collect();
        Self::from_vec(grid, data)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct FieldHeader {
    nx: usize,
    ny: usize,
    pitch_m: f64,
    wavelength_m: f64,
}

/// Discrete inner product ⟨a|b⟩ = Σ conj(a)·b·pitch².
pub fn overlap(a: &ComplexField, b: &ComplexField) -> Result<Complex64> {
    a.grid.ensure_matches(&b.grid)?;
    Ok(overlap_unchecked(&a.data, &b.data) * a.grid.pixel_area())
}

pub(crate) fn overlap_unchecked(a: &[Complex64], b: &[Complex64]) -> Complex64 {
    a.iter()
        .zip(b)
        .fold(Complex64::new(0.0, 0.0), |acc, (x, y)| acc + x.conj() * y)
}

/// Mode family. Only Laguerre-Gaussian beams are modelled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ModeFamily {
    LaguerreGaussian,
}

/// A beam mode at its waist plane.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModeSpec {
    pub family: ModeFamily,
    /// Azimuthal order ℓ.
    pub l: i32,
    /// Radial order p.
    pub p: u32,
    /// 1/e² intensity radius of the fundamental mode, meters.
    pub waist: f64,
}

impl ModeSpec {
    pub fn lg(l: i32, p: u32, waist: f64) -> Self {
        Self {
            family: ModeFamily::LaguerreGaussian,
            l,
            p,
            waist,
        }
    }

    pub fn label(&self) -> String {
        format!("LG_{}^{}", self.p, self.l)
    }
}

/// Default mode waist: the ℓ = ±3 modes keep 99.9% of their power inside the
/// 3.07 mm desk aperture with room to diffract.
pub const DEFAULT_WAIST: f64 = 0.25e-3;

/// Generalized Laguerre polynomial L_p^α(x) by three-term recurrence.
pub fn laguerre(p: u32, alpha: f64, x: f64) -> f64 {
    if p == 0 {
        return 1.0;
    }
    let mut prev = 1.0;
    let mut cur = 1.0 + alpha - x;
    for k in 1..p {
        let k = k as f64;
        let next = ((2.0 * k + 1.0 + alpha - x) * cur - (k + alpha) * prev) / (k + 1.0);
        prev = cur;
        cur = next;
    }
    cur
}

/// Maximum fraction of analytic mode energy allowed outside the grid.
pub const MAX_CLIPPED_ENERGY: f64 = 1e-3;

/// Samples a normalized Laguerre-Gaussian mode at its waist.
///
/// The sampled field is rescaled to exactly unit norm; the discarded
/// fraction of the analytic energy must stay below [`MAX_CLIPPED_ENERGY`].
pub fn lg_mode(spec: &ModeSpec, grid: &GridSpec) -> Result<ComplexField> {
    grid.validate()?;
    if !(spec.waist > 0.0 && spec.waist.is_finite()) {
        return Err(Error::InvalidParameter(format!("waist must be positive, got {}", spec.waist)));
    }
    let w = spec.waist;
    let al = spec.l.unsigned_abs();
    // p! / (p + |ℓ|)!
    let ratio: f64 = (spec.p + 1..=spec.p + al).map(|k| 1.0 / k as f64).product();
    let c = (2.0 * ratio / PI).sqrt() / w;
    let mut field = ComplexField::from_fn(*grid, |x, y| {
        let r2 = x * x + y * y;
        let rho = (2.0 * r2).sqrt() / w;
        let t = 2.0 * r2 / (w * w);
        let radial = c * rho.powi(al as i32) * laguerre(spec.p, al as f64, t) * (-r2 / (w * w)).exp();
        let phi = y.atan2(x);
        Complex64::from_polar(radial, spec.l as f64 * phi)
    });
    let captured = field.norm_sqr();
    let clipped = 1.0 - captured;
    if clipped > MAX_CLIPPED_ENERGY {
        return Err(Error::ApertureTooSmall { clipped });
    }
    field.normalize();
    Ok(field)
}
