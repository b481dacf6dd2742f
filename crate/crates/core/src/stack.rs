//! Phase-layer cascades and the imperfection transforms applied to them.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{ComplexField, GridSpec};
use crate::propagation::{Direction, Propagator};
use crate::zernike::zernike_map;

/// One phase-only modulation plane, radians per pixel.
///
/// Phases are stored unwrapped; the physical modulation is `exp(i·φ)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PhaseLayer {
    grid: GridSpec,
    phase: Vec<f64>,
}

impl PhaseLayer {
    pub fn zeros(grid: GridSpec) -> Self {
        Self {
            grid,
            phase: vec![0.0; grid.len()],
        }
    }

    pub fn new(grid: GridSpec, phase: Vec<f64>) -> Result<Self> {
        if phase.len() != grid.len() {
            return Err(Error::LengthMismatch(format!(
                "layer has {} pixels, grid needs {}",
                phase.len(),
                grid.len()
            )));
        }
        if phase.iter().any(|p| !p.is_finite()) {
            return Err(Error::InvalidParameter("layer phase contains non-finite values".into()));
        }
        Ok(Self { grid, phase })
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn phase(&self) -> &[f64] {
        &self.phase
    }

    pub fn phase_mut(&mut self) -> &mut [f64] {
        &mut self.phase
    }

    pub fn modulation(&self) -> Vec<Complex64> {
        self.phase.iter().map(|&p| Complex64::cis(p)).collect()
    }

    /// Mean magnitude of the wrapped phase difference between neighbouring pixels.
    pub fn mean_phase_gradient(&self) -> f64 {
        let (nx, ny) = (self.grid.nx, self.grid.ny);
        let wrap = |d: f64| {
            let w = d.rem_euclid(std::f64::consts::TAU);
            w.min(std::f64::consts::TAU - w)
        };
        let mut sum = 0.0;
        let mut count = 0usize;
        for r in 0..ny {
            for c in 0..nx {
                let p = self.phase[r * nx + c];
                if c + 1 < nx {
                    sum += wrap(self.phase[r * nx + c + 1] - p);
                    count += 1;
                }
                if r + 1 < ny {
                    sum += wrap(self.phase[(r + 1) * nx + c] - p);
                    count += 1;
                }
            }
        }
        sum / count as f64
    }
}

/// An ordered cascade of phase layers with free-space gaps.
///
/// `spacings` holds the input-to-first-layer gap, the gaps between layers,
/// and the last-layer-to-output gap, so it has one more entry than `layers`.
#[derive(Debug, Clone, PartialEq)]
pub struct PhaseLayerStack {
    grid: GridSpec,
    layers: Vec<PhaseLayer>,
    spacings: Vec<f64>,
    padded: bool,
}

impl PhaseLayerStack {
    pub fn new(grid: GridSpec, layers: Vec<PhaseLayer>, spacings: Vec<f64>) -> Result<Self> {
        grid.validate()?;
        if spacings.len() != layers.len() + 1 {
            return Err(Error::LengthMismatch(format!(
                "{} layers need {} spacings, got {}",
                layers.len(),
                layers.len() + 1,
                spacings.len()
            )));
        }
        if let Some(s) = spacings.iter().find(|s| !(**s > 0.0 && s.is_finite())) {
            return Err(Error::InvalidParameter(format!("spacings must be positive, got {s}")));
        }
        for layer in &layers {
            grid.ensure_matches(&layer.grid)?;
        }
        Ok(Self {
            grid,
            layers,
            spacings,
            padded: true,
        })
    }

    /// `count` zero-phase layers, every gap equal to `spacing`.
    pub fn uniform(grid: GridSpec, count: usize, spacing: f64) -> Result<Self> {
        Self::new(grid, vec![PhaseLayer::zeros(grid); count], vec![spacing; count + 1])
    }

    /// Disables the 2× zero padding used during propagation.
    pub fn with_padding(mut self, padded: bool) -> Self {
        self.padded = padded;
        self
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn layers(&self) -> &[PhaseLayer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [PhaseLayer] {
        &mut self.layers
    }

    pub fn spacings(&self) -> &[f64] {
        &self.spacings
    }

    pub fn padded(&self) -> bool {
        self.padded
    }

    pub fn total_length(&self) -> f64 {
        self.spacings.iter().sum()
    }

    pub fn propagators(&self) -> Vec<Arc<Propagator>> {
        build_propagators(&self.grid, &self.spacings, self.padded)
    }

    pub fn cascade(&self) -> Cascade {
        Cascade::new(
            self.propagators(),
            self.layers.iter().map(PhaseLayer::modulation).collect(),
        )
    }

    /// Runs `input` through every gap and layer.
    pub fn forward(&self, input: &ComplexField) -> Result<ComplexField> {
        self.grid.ensure_matches(input.grid())?;
        Ok(self.cascade().forward(input))
    }

    /// Writes `manifest.json` plus one raw little-endian f64 file per layer.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<PathBuf> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        let mut files = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            let name = format!("layer_{i}.bin");
            let mut bytes = Vec::with_capacity(layer.phase.len() * 8);
            for p in &layer.phase {
                bytes.extend_from_slice(&p.to_le_bytes());
            }
            fs::write(dir.join(&name), bytes)?;
            files.push(name);
        }
        let manifest = StackManifest {
            version: MANIFEST_VERSION,
            grid: ManifestGrid {
                nx: self.grid.nx,
                ny: self.grid.ny,
                pitch_m: self.grid.pitch,
            },
            wavelength_m: self.grid.wavelength,
            spacings_m: self.spacings.clone(),
            padded: self.padded,
            layers: files,
        };
        let path = dir.join("manifest.json");
        fs::write(&path, serde_json::to_string_pretty(&manifest)?)?;
        Ok(path)
    }

    /// Loads a stack from a manifest path or from the directory holding it.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let manifest_path = if path.is_dir() {
            path.join("manifest.json")
        } else {
            path.to_path_buf()
        };
        let dir = manifest_path.parent().unwrap_or(Path::new("."));
        let manifest: StackManifest = serde_json::from_slice(&fs::read(&manifest_path)?)?;
        if manifest.version != MANIFEST_VERSION {
            return Err(Error::Format(format!("unsupported manifest version {}", manifest.version)));
        }
        let grid = GridSpec::new(
            manifest.grid.nx,
            manifest.grid.ny,
            manifest.grid.pitch_m,
            manifest.wavelength_m,
        )?;
        let mut layers = Vec::with_capacity(manifest.layers.len());
        for name in &manifest.layers {
            let bytes = fs::read(dir.join(name))?;
            if bytes.len() != grid.len() * 8 {
                return Err(Error::Format(format!(
                    "{name}: expected {} bytes, found {}",
                    grid.len() * 8,
                    bytes.len()
                )));
            }
            let phase = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            layers.push(PhaseLayer::new(grid, phase)?);
        }
        Ok(Self::new(grid, layers, manifest.spacings_m)?.with_padding(manifest.padded))
    }
}

const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct ManifestGrid {
    nx: usize,
    ny: usize,
    pitch_m: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct StackManifest {
    version: u32,
    grid: ManifestGrid,
    wavelength_m: f64,
    spacings_m: Vec<f64>,
    /// Absent in older manifests, which were always padded.
    #[serde(default = "padded_default")]
    padded: bool,
    layers: Vec<String>,
}

fn padded_default() -> bool {
    true
}

pub(crate) fn build_propagators(grid: &GridSpec, spacings: &[f64], padded: bool) -> Vec<Arc<Propagator>> {
    let mut out: Vec<Arc<Propagator>> = Vec::with_capacity(spacings.len());
    for &s in spacings {
        if let Some(p) = out.iter().find(|p| p.distance() == s) {
            out.push(Arc::clone(p));
        } else {
            out.push(Arc::new(Propagator::new(*grid, s, padded)));
        }
    }
    out
}

/// A ready-to-run cascade: cached propagators plus complex layer modulations.
///
/// Modulations need not be unimodular (the blur model produces attenuated
/// samples), so the cascade is a general linear map.
#[derive(Debug, Clone)]
pub struct Cascade {
    propagators: Vec<Arc<Propagator>>,
    modulations: Vec<Vec<Complex64>>,
}

/// Fields recorded during a forward pass.
#[derive(Debug, Clone)]
pub struct ForwardRecord {
    /// Field arriving at each layer, before modulation.
    pub incident: Vec<Vec<Complex64>>,
    pub output: Vec<Complex64>,
}

impl Cascade {
    pub fn new(propagators: Vec<Arc<Propagator>>, modulations: Vec<Vec<Complex64>>) -> Self {
        assert_eq!(propagators.len(), modulations.len() + 1, "cascade needs one more gap than layers");
        Self {
            propagators,
            modulations,
        }
    }

    pub fn layer_count(&self) -> usize {
        self.modulations.len()
    }

    pub fn grid(&self) -> &GridSpec {
        self.propagators[0].grid()
    }

    pub fn modulations(&self) -> &[Vec<Complex64>] {
        &self.modulations
    }

    pub fn forward(&self, input: &ComplexField) -> ComplexField {
        let mut data = input.data().to_vec();
        for (prop, m) in self.propagators.iter().zip(&self.modulations) {
            prop.apply_in_place(&mut data, Direction::Forward);
            for (a, t) in data.iter_mut().zip(m) {
                *a *= t;
            }
        }
        self.propagators[self.modulations.len()].apply_in_place(&mut data, Direction::Forward);
        ComplexField::from_vec(*input.grid(), data).expect("propagation keeps the grid")
    }

    pub fn forward_recorded(&self, input: &[Complex64]) -> ForwardRecord {
        let mut data = input.to_vec();
        let mut incident = Vec::with_capacity(self.modulations.len());
        for (prop, m) in self.propagators.iter().zip(&self.modulations) {
            prop.apply_in_place(&mut data, Direction::Forward);
            incident.push(data.clone());
            for (a, t) in data.iter_mut().zip(m) {
                *a *= t;
            }
        }
        self.propagators[self.modulations.len()].apply_in_place(&mut data, Direction::Forward);
        ForwardRecord { incident, output: data }
    }

    /// Applies the adjoint cascade to `source` (defined at the output plane).
    ///
    /// Returns, for each layer, the adjoint field just after that layer's
    /// modulation.
    pub fn backward(&self, source: &[Complex64]) -> Vec<Vec<Complex64>> {
        let n = self.modulations.len();
        let mut out = vec![Vec::new(); n];
        let mut data = source.to_vec();
        self.propagators[n].apply_in_place(&mut data, Direction::Backward);
        for k in (0..n).rev() {
            out[k] = data.clone();
            if k > 0 {
                for (a, t) in data.iter_mut().zip(&self.modulations[k]) {
                    *a *= t.conj();
                }
                self.propagators[k].apply_in_place(&mut data, Direction::Backward);
            }
        }
        out
    }
}

/// Physical imperfections applied to a trained stack.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PerturbationSpec {
    /// Rigid lateral shift along x, meters.
    pub dx: f64,
    /// Added to every gap between layers, meters.
    pub dz: f64,
    /// Number of uniform phase levels in [0, 2π).
    pub gray_levels: Option<u32>,
    /// Fringe-effect Gaussian width, pixels.
    pub blur_sigma: f64,
    /// `(Noll index, coefficient in radians)` pairs.
    pub zernike: Vec<(usize, f64)>,
}

impl PerturbationSpec {
    pub fn is_identity(&self) -> bool {
        self.dx == 0.0
            && self.dz == 0.0
            && self.gray_levels.is_none()
            && self.blur_sigma == 0.0
            && self.zernike.iter().all(|&(_, c)| c == 0.0)
    }
}

/// Applies `p` to every layer of `stack`.
///
/// Order: lateral shift, spacing offset, grayscale quantization, fringe
/// blur, then surface distortion.
pub fn perturb(stack: &PhaseLayerStack, p: &PerturbationSpec) -> Result<PhaseLayerStack> {
    let grid = stack.grid;
    if p.dx.abs() >= grid.width() / 4.0 {
        return Err(Error::InvalidParameter(format!(
            "lateral offset {} m exceeds a quarter of the aperture",
            p.dx
        )));
    }
    if let Some(levels) = p.gray_levels {
        if levels < 1 {
            return Err(Error::InvalidParameter("gray_levels must be at least 1".into()));
        }
    }
    if !(p.blur_sigma >= 0.0 && p.blur_sigma.is_finite()) {
        return Err(Error::InvalidParameter("blur_sigma must be non-negative".into()));
    }
    let mut out = stack.clone();
    if p.dz != 0.0 {
        let n = out.spacings.len();
        for s in &mut out.spacings[1..n - 1] {
            *s += p.dz;
            if *s <= 0.0 {
                return Err(Error::InvalidParameter(format!(
                    "axial offset {} m makes a spacing non-positive",
                    p.dz
                )));
            }
        }
    }
    let zernike = if p.zernike.iter().any(|&(_, c)| c != 0.0) {
        Some(zernike_map(&grid, &p.zernike)?)
    } else {
        None
    };
    for layer in &mut out.layers {
        if p.dx != 0.0 {
            layer.phase = shift_x(&layer.phase, &grid, p.dx);
        }
        if let Some(levels) = p.gray_levels {
            quantize(&mut layer.phase, levels);
        }
        if p.blur_sigma > 0.0 {
            let blurred = gaussian_blur(&layer.modulation(), &grid, p.blur_sigma);
            for (ph, m) in layer.phase.iter_mut().zip(blurred) {
                *ph = m.arg();
            }
        }
        if let Some(z) = &zernike {
            for (ph, dz) in layer.phase.iter_mut().zip(z) {
                *ph += dz;
            }
        }
    }
    Ok(out)
}

/// Sub-pixel lateral shift along x by a per-row spectral phase ramp.
///
/// For a whole-pixel `dx` this is a circular roll.
pub fn shift_x(phase: &[f64], grid: &GridSpec, dx: f64) -> Vec<f64> {
    let nx = grid.nx;
    let mut planner = FftPlanner::new();
    let fwd = planner.plan_fft_forward(nx);
    let inv = planner.plan_fft_inverse(nx);
    let mut buf: Vec<Complex64> = phase.iter().map(|&p| Complex64::new(p, 0.0)).collect();
    fwd.process(&mut buf);
    let ramp: Vec<Complex64> = (0..nx)
        .map(|i| {
            let signed = if i < nx / 2 { i as f64 } else { i as f64 - nx as f64 };
            let kx = 2.0 * std::f64::consts::PI * signed / (nx as f64 * grid.pitch);
            Complex64::cis(-kx * dx) / nx as f64
        })
        .collect();
    for row in buf.chunks_exact_mut(nx) {
        for (v, r) in row.iter_mut().zip(&ramp) {
            *v *= r;
        }
    }
    inv.process(&mut buf);
    buf.into_iter().map(|v| v.re).collect()
}

/// Snaps `φ mod 2π` to `floor(φ·L/2π)·2π/L`.
pub fn quantize(phase: &mut [f64], levels: u32) {
    let step = std::f64::consts::TAU / levels as f64;
    for p in phase {
        let x = p.rem_euclid(std::f64::consts::TAU) / step;
        // Values already on a level must stay there despite rounding.
        let level = if (x - x.round()).abs() < 1e-9 { x.round() } else { x.floor() };
        *p = (level as u32 % levels) as f64 * step;
    }
}

/// Separable Gaussian convolution (normalized kernel, zero outside the grid).
///
/// The operator is self-adjoint, which the trainer relies on.
pub fn gaussian_blur(data: &[Complex64], grid: &GridSpec, sigma: f64) -> Vec<Complex64> {
    if sigma <= 0.0 {
        return data.to_vec();
    }
    let radius = (4.0 * sigma).ceil() as isize;
    let mut kernel: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = kernel.iter().sum();
    for k in &mut kernel {
        *k /= total;
    }
    let (nx, ny) = (grid.nx as isize, grid.ny as isize);
    let zero = Complex64::new(0.0, 0.0);
    let mut tmp = vec![zero; data.len()];
    for r in 0..ny {
        for c in 0..nx {
            let mut acc = zero;
            for (ki, k) in kernel.iter().enumerate() {
                let cc = c + ki as isize - radius;
                if (0..nx).contains(&cc) {
                    acc += data[(r * nx + cc) as usize] * k;
                }
            }
            tmp[(r * nx + c) as usize] = acc;
        }
    }
    let mut out = vec![zero; data.len()];
    for r in 0..ny {
        for c in 0..nx {
            let mut acc = zero;
            for (ki, k) in kernel.iter().enumerate() {
                let rr = r + ki as isize - radius;
                if (0..ny).contains(&rr) {
                    acc += tmp[(rr * nx + c) as usize] * k;
                }
            }
            out[(r * nx + c) as usize] = acc;
        }
    }
    out
}

/// How [`scale_pixels`] treats the physical layer size.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScaleMode {
    /// Same aperture, new pitch; nearest-neighbour resampling.
    FixAperture,
    /// Same pitch, new aperture; centered crop or zero-phase padding.
    FixPitch,
}

pub fn scale_pixels(stack: &PhaseLayerStack, mode: ScaleMode, new_n: usize) -> Result<PhaseLayerStack> {
    let grid = stack.grid;
    if new_n < 8 || new_n % 2 != 0 {
        return Err(Error::InvalidParameter(format!("pixel count must be even and ≥ 8, got {new_n}")));
    }
    if grid.nx != grid.ny {
        return Err(Error::Unsupported("pixel scaling requires a square grid".into()));
    }
    let n = grid.nx;
    if new_n == n {
        return Ok(stack.clone());
    }
    let new_grid = match mode {
        ScaleMode::FixAperture => GridSpec::square(new_n, grid.pitch * n as f64 / new_n as f64, grid.wavelength)?,
        ScaleMode::FixPitch => GridSpec::square(new_n, grid.pitch, grid.wavelength)?,
    };
    let map = |i: usize| -> Option<usize> {
        match mode {
            ScaleMode::FixAperture => Some((((i as f64 + 0.5) * n as f64 / new_n as f64).floor() as usize).min(n - 1)),
            ScaleMode::FixPitch => {
                let j = i as isize - (new_n / 2) as isize + (n / 2) as isize;
                (0..n as isize).contains(&j).then_some(j as usize)
            }
        }
    };
    let layers = stack
        .layers
        .iter()
        .map(|layer| {
            let mut phase = vec![0.0; new_grid.len()];
            for r in 0..new_n {
                for c in 0..new_n {
                    if let (Some(rr), Some(cc)) = (map(r), map(c)) {
                        phase[r * new_n + c] = layer.phase[rr * n + cc];
                    }
                }
            }
            PhaseLayer::new(new_grid, phase)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PhaseLayerStack::new(new_grid, layers, stack.spacings.clone())?.with_padding(stack.padded))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::{lg_mode, ModeSpec};
    use crate::propagation::propagate;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small_grid() -> GridSpec {
        GridSpec::square(32, 24e-6, 1550e-9).unwrap()
    }

    fn random_stack(grid: GridSpec, layers: usize, seed: u64) -> PhaseLayerStack {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = PhaseLayerStack::uniform(grid, layers, 10e-3).unwrap();
        for l in s.layers_mut() {
            for p in l.phase_mut() {
                *p = rng.random_range(0.0..std::f64::consts::TAU);
            }
        }
        s
    }

    fn max_diff(a: &[Complex64], b: &[Complex64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y).norm()).fold(0.0, f64::max)
    }

    #[test]
    fn construction_checks() {
        let g = small_grid();
        assert!(PhaseLayerStack::new(g, vec![PhaseLayer::zeros(g)], vec![1e-3]).is_err());
        assert!(PhaseLayerStack::new(g, vec![PhaseLayer::zeros(g)], vec![1e-3, 0.0]).is_err());
        let other = GridSpec::square(16, 24e-6, 1550e-9).unwrap();
        assert!(PhaseLayerStack::new(g, vec![PhaseLayer::zeros(other)], vec![1e-3, 1e-3]).is_err());
    }

    #[test]
    fn zero_phase_stack_is_free_propagation() {
        let g = GridSpec::desk();
        let input = lg_mode(&ModeSpec::lg(1, 0, 0.35e-3), &g).unwrap();
        let stack = PhaseLayerStack::uniform(g, 3, 41e-3).unwrap();
        let out = stack.forward(&input).unwrap();
        // Window losses make padded steps non-compositional, so chain them.
        let free = stack.spacings().iter().fold(input.clone(), |f, &z| propagate(&f, z));
        assert!(max_diff(out.data(), free.data()) < 1e-10 * free.data().iter().map(|a| a.norm()).fold(0.0, f64::max));
        assert!((out.norm() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn constant_phase_layers_add_global_phase() {
        let g = GridSpec::desk();
        let input = lg_mode(&ModeSpec::lg(-2, 0, 0.35e-3), &g).unwrap();
        let zero = PhaseLayerStack::uniform(g, 4, 41e-3).unwrap();
        let mut constant = zero.clone();
        let c = 0.7;
        for l in constant.layers_mut() {
            l.phase_mut().iter_mut().for_each(|p| *p = c);
        }
        let a = zero.forward(&input).unwrap().scaled(Complex64::cis(4.0 * c));
        let b = constant.forward(&input).unwrap();
        let peak = a.data().iter().map(|x| x.norm()).fold(0.0, f64::max);
        assert!(max_diff(a.data(), b.data()) < 1e-10 * peak);
    }

    #[test]
    fn forward_is_linear_and_does_not_gain_energy() {
        let g = small_grid();
        let stack = random_stack(g, 2, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut rand_field = || {
            let data = (0..g.len())
                .map(|_| Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
                .collect();
            ComplexField::from_vec(g, data).unwrap()
        };
        let a = rand_field();
        let b = rand_field();
        let (alpha, beta) = (Complex64::new(0.3, -1.2), Complex64::new(-0.7, 0.4));
        let mut combo = a.clone().scaled(alpha);
        combo.add_scaled(beta, &b).unwrap();
        let lhs = stack.forward(&combo).unwrap();
        let mut rhs = stack.forward(&a).unwrap().scaled(alpha);
        rhs.add_scaled(beta, &stack.forward(&b).unwrap()).unwrap();
        assert!(max_diff(lhs.data(), rhs.data()) < 1e-10);
        assert!(lhs.norm() <= combo.norm() + 1e-9);
    }

    #[test]
    fn identity_perturbation_is_bit_exact() {
        let stack = random_stack(small_grid(), 3, 1);
        let out = perturb(&stack, &PerturbationSpec::default()).unwrap();
        assert_eq!(out, stack);
    }

    #[test]
    fn whole_pixel_shift_is_a_roll() {
        let g = small_grid();
        let stack = random_stack(g, 1, 2);
        let p = PerturbationSpec {
            dx: g.pitch,
            ..Default::default()
        };
        let out = perturb(&stack, &p).unwrap();
        let (a, b) = (stack.layers()[0].phase(), out.layers()[0].phase());
        for r in 0..g.ny {
            for c in 1..g.nx {
                assert!((b[r * g.nx + c] - a[r * g.nx + c - 1]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn shift_round_trip_and_bounds() {
        let g = small_grid();
        let stack = random_stack(g, 1, 3);
        let phase = stack.layers()[0].phase();
        let there = shift_x(phase, &g, 2.0 * g.pitch);
        let back = shift_x(&there, &g, -2.0 * g.pitch);
        for (x, y) in phase.iter().zip(&back) {
            assert!((x - y).abs() < 1e-9);
        }
        let too_far = PerturbationSpec {
            dx: g.width() / 4.0,
            ..Default::default()
        };
        assert!(perturb(&stack, &too_far).is_err());
    }

    #[test]
    fn dz_touches_only_inner_gaps() {
        let g = small_grid();
        let stack = PhaseLayerStack::new(g, vec![PhaseLayer::zeros(g); 3], vec![1e-3, 2e-3, 3e-3, 4e-3]).unwrap();
        let p = PerturbationSpec {
            dz: 0.5e-3,
            ..Default::default()
        };
        let out = perturb(&stack, &p).unwrap();
        assert_eq!(out.spacings(), &[1e-3, 2.5e-3, 3.5e-3, 4e-3]);
        let bad = PerturbationSpec {
            dz: -2e-3,
            ..Default::default()
        };
        assert!(perturb(&stack, &bad).is_err());
    }

    #[test]
    fn sequential_dz_then_gray_equals_combined() {
        let stack = random_stack(small_grid(), 2, 4);
        let dz = PerturbationSpec {
            dz: 1e-3,
            ..Default::default()
        };
        let gray = PerturbationSpec {
            gray_levels: Some(8),
            ..Default::default()
        };
        let both = PerturbationSpec {
            dz: 1e-3,
            gray_levels: Some(8),
            ..Default::default()
        };
        let seq = perturb(&perturb(&stack, &dz).unwrap(), &gray).unwrap();
        assert_eq!(seq, perturb(&stack, &both).unwrap());
    }

    #[test]
    fn quantization_levels() {
        let mut p = vec![0.0, 0.1, 1.0, 3.2, 6.28, -0.1, 7.0];
        quantize(&mut p, 4);
        let step = std::f64::consts::FRAC_PI_2;
        let expected = [0.0, 0.0, 0.0, 2.0 * step, 3.0 * step, 3.0 * step, 0.0];
        for (a, b) in p.iter().zip(expected) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn blur_is_self_adjoint_and_preserves_constants() {
        let g = small_grid();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a: Vec<Complex64> = (0..g.len())
            .map(|_| Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
            .collect();
        let b: Vec<Complex64> = (0..g.len())
            .map(|_| Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
            .collect();
        let ka = gaussian_blur(&a, &g, 0.8);
        let kb = gaussian_blur(&b, &g, 0.8);
        let lhs: Complex64 = ka.iter().zip(&b).map(|(x, y)| x.conj() * y).sum();
        let rhs: Complex64 = a.iter().zip(&kb).map(|(x, y)| x.conj() * y).sum();
        assert!((lhs - rhs).norm() < 1e-10);
        let ones = vec![Complex64::new(1.0, 0.0); g.len()];
        let centre = gaussian_blur(&ones, &g, 0.8)[(g.ny / 2) * g.nx + g.nx / 2];
        assert!((centre.re - 1.0).abs() < 1e-12);
    }

    #[test]
    fn scale_pixels_modes() {
        let g = small_grid();
        let stack = random_stack(g, 2, 6);
        assert_eq!(scale_pixels(&stack, ScaleMode::FixAperture, 32).unwrap(), stack);
        let down = scale_pixels(&stack, ScaleMode::FixAperture, 16).unwrap();
        assert!((down.grid().width() - g.width()).abs() < 1e-15);
        let up = scale_pixels(&down, ScaleMode::FixAperture, 32).unwrap();
        let (orig, round) = (stack.layers()[0].phase(), up.layers()[0].phase());
        for r in 0..32 {
            for c in 0..32 {
                let src = (2 * (r / 2) + 1) * 32 + 2 * (c / 2) + 1;
                assert_eq!(round[r * 32 + c], orig[src]);
            }
        }
        let bigger = scale_pixels(&stack, ScaleMode::FixPitch, 40).unwrap();
        assert_eq!(bigger.grid().pitch, g.pitch);
        assert_eq!(bigger.layers()[1].phase()[0], 0.0);
        assert_eq!(bigger.layers()[1].phase()[4 * 40 + 4], stack.layers()[1].phase()[0]);
        let smaller = scale_pixels(&stack, ScaleMode::FixPitch, 16).unwrap();
        assert_eq!(smaller.layers()[0].phase()[0], stack.layers()[0].phase()[8 * 32 + 8]);
        assert!(scale_pixels(&stack, ScaleMode::FixPitch, 7).is_err());
    }

    #[test]
    fn persistence_round_trip_is_bit_exact() {
        let stack = random_stack(small_grid(), 3, 7);
        let dir = tempfile::tempdir().unwrap();
        let manifest = stack.save(dir.path()).unwrap();
        let back = PhaseLayerStack::load(&manifest).unwrap();
        assert_eq!(back, stack);
        let json: serde_json::Value = serde_json::from_slice(&fs::read(&manifest).unwrap()).unwrap();
        assert_eq!(json["version"], 1);
        assert_eq!(json["layers"].as_array().unwrap().len(), 3);
        assert_eq!(json["grid"]["pitch_m"], 24e-6);
    }
}
