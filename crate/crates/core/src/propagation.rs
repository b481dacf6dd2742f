//! Angular-spectrum free-space propagation.
//!
//! The field is zero-padded to twice its size (by default), transformed,
//! multiplied by `exp(i·z·kz)` with the evanescent band removed, and cropped
//! back. Light that leaves the window during a step is lost; that is the
//! only loss mechanism in the model.

use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::field::{ComplexField, GridSpec};

/// Direction of travel for a cached propagator.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Forward,
    /// Adjoint step, identical to propagating by `-distance`.
    Backward,
}

/// Precomputed transfer function and FFT plans for one `(grid, distance)` pair.
#[derive(Clone)]
pub struct Propagator {
    grid: GridSpec,
    distance: f64,
    padded: bool,
    /// Padded width and height.
    px: usize,
    py: usize,
    /// Offset of the field inside the padded window.
    ox: usize,
    oy: usize,
    /// Transfer function in column-major (kx-major) order, including the 1/N
    /// inverse-FFT scale.
    transfer: Vec<Complex64>,
    row_fwd: Arc<dyn Fft<f64>>,
    row_inv: Arc<dyn Fft<f64>>,
    col_fwd: Arc<dyn Fft<f64>>,
    col_inv: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for Propagator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Propagator")
            .field("grid", &self.grid)
            .field("distance", &self.distance)
            .field("padded", &self.padded)
            .finish()
    }
}

fn frequency(index: usize, len: usize, pitch: f64) -> f64 {
    let signed = if index < len.div_ceil(2) {
        index as f64
    } else {
        index as f64 - len as f64
    };
    2.0 * std::f64::consts::PI * signed / (len as f64 * pitch)
}

impl Propagator {
    pub fn new(grid: GridSpec, distance: f64, padded: bool) -> Self {
        let factor = if padded { 2 } else { 1 };
        let px = grid.nx * factor;
        let py = grid.ny * factor;
        let ox = (px - grid.nx) / 2;
        let oy = (py - grid.ny) / 2;
        let k = grid.wavenumber();
        let k2 = k * k;
        let scale = 1.0 / (px * py) as f64;
        let mut transfer = Vec::with_capacity(px * py);
        for c in 0..px {
            let kx = frequency(c, px, grid.pitch);
            for r in 0..py {
                let ky = frequency(r, py, grid.pitch);
                let kt2 = kx * kx + ky * ky;
                if kt2 < k2 {
                    let kz = (k2 - kt2).sqrt();
                    transfer.push(Complex64::from_polar(scale, distance * kz));
                } else {
                    transfer.push(Complex64::new(0.0, 0.0));
                }
            }
        }
        let mut planner = FftPlanner::new();
        Self {
            grid,
            distance,
            padded,
            px,
            py,
            ox,
            oy,
            transfer,
            row_fwd: planner.plan_fft_forward(px),
            row_inv: planner.plan_fft_inverse(px),
            col_fwd: planner.plan_fft_forward(py),
            col_inv: planner.plan_fft_inverse(py),
        }
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn distance(&self) -> f64 {
        self.distance
    }

    pub fn padded(&self) -> bool {
        self.padded
    }

    /// Propagates `input` (row-major, `nx*ny` samples) in place.
    pub fn apply_in_place(&self, data: &mut [Complex64], direction: Direction) {
        assert_eq!(data.len(), self.grid.len(), "field size does not match propagator grid");
        if self.distance == 0.0 {
            return;
        }
        let (nx, ny) = (self.grid.nx, self.grid.ny);
        let (px, py, ox, oy) = (self.px, self.py, self.ox, self.oy);
        let zero = Complex64::new(0.0, 0.0);

        let scratch_len = [
            self.row_fwd.get_inplace_scratch_len(),
            self.row_inv.get_inplace_scratch_len(),
            self.col_fwd.get_inplace_scratch_len(),
            self.col_inv.get_inplace_scratch_len(),
        ]
        .into_iter()
        .max()
        .unwrap_or(0);
        let mut scratch = vec![zero; scratch_len];

        // Row transforms of the occupied rows.
        let mut rows = vec![zero; ny * px];
        for (j, row) in rows.chunks_exact_mut(px).enumerate() {
            row[ox..ox + nx].copy_from_slice(&data[j * nx..(j + 1) * nx]);
        }
        self.row_fwd.process_with_scratch(&mut rows, &mut scratch);

        // Column transforms; the spectrum is kept kx-major.
        let mut cols = vec![zero; px * py];
        for (j, row) in rows.chunks_exact(px).enumerate() {
            for (c, v) in row.iter().enumerate() {
                cols[c * py + oy + j] = *v;
            }
        }
        self.col_fwd.process_with_scratch(&mut cols, &mut scratch);
        match direction {
            Direction::Forward => {
                for (v, t) in cols.iter_mut().zip(&self.transfer) {
                    *v *= t;
                }
            }
            Direction::Backward => {
                for (v, t) in cols.iter_mut().zip(&self.transfer) {
                    *v *= t.conj();
                }
            }
        }
        self.col_inv.process_with_scratch(&mut cols, &mut scratch);

        // Only the rows inside the window are needed for the final pass.
        for (j, row) in rows.chunks_exact_mut(px).enumerate() {
            for (c, v) in row.iter_mut().enumerate() {
                *v = cols[c * py + oy + j];
            }
        }
        self.row_inv.process_with_scratch(&mut rows, &mut scratch);
        for (j, row) in rows.chunks_exact(px).enumerate() {
            data[j * nx..(j + 1) * nx].copy_from_slice(&row[ox..ox + nx]);
        }
    }

    pub fn apply(&self, field: &ComplexField, direction: Direction) -> ComplexField {
        let mut out = field.clone();
        self.apply_in_place(out.data_mut(), direction);
        out
    }
}

/// Propagates `field` over `distance` meters on a 2× padded window.
///
/// Negative distances propagate backwards; zero is the identity.
pub fn propagate(field: &ComplexField, distance: f64) -> ComplexField {
    propagate_with(field, distance, true)
}

pub fn propagate_with(field: &ComplexField, distance: f64, padded: bool) -> ComplexField {
    if distance == 0.0 {
        return field.clone();
    }
    Propagator::new(*field.grid(), distance, padded).apply(field, Direction::Forward)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::{lg_mode, overlap, ModeSpec};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_field(grid: GridSpec, seed: u64) -> ComplexField {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // Smooth random field: a few Gaussian blobs with random phases.
        let blobs: Vec<(f64, f64, f64, f64)> = (0..5)
            .map(|_| {
                (
                    rng.random_range(-0.3..0.3) * grid.width(),
                    rng.random_range(-0.3..0.3) * grid.height(),
                    rng.random_range(0.0..std::f64::consts::TAU),
                    rng.random_range(0.05..0.1) * grid.width(),
                )
            })
            .collect();
        let mut f = ComplexField::from_fn(grid, |x, y| {
            blobs.iter().fold(Complex64::new(0.0, 0.0), |acc, &(cx, cy, ph, w)| {
                let r2 = (x - cx).powi(2) + (y - cy).powi(2);
                acc + Complex64::from_polar((-r2 / (w * w)).exp(), ph + x / w)
            })
        });
        f.normalize();
        f
    }

    #[test]
    fn zero_distance_is_identity() {
        let g = GridSpec::desk();
        let f = random_field(g, 1);
        assert_eq!(propagate(&f, 0.0), f);
        // A round trip through the FFTs with a tiny distance stays within FFT noise.
        let p = Propagator::new(g, 1e-18, true);
        let out = p.apply(&f, Direction::Forward);
        let max = f
            .data()
            .iter()
            .zip(out.data())
            .map(|(a, b)| (a - b).norm())
            .fold(0.0, f64::max);
        let peak = f.data().iter().map(|a| a.norm()).fold(0.0, f64::max);
        assert!(max / peak < 1e-10, "{max} vs {peak}");
    }

    #[test]
    fn norm_is_conserved() {
        let g = GridSpec::desk();
        let f = lg_mode(&ModeSpec::lg(2, 0, 0.35e-3), &g).unwrap();
        let out = propagate(&f, 41e-3);
        assert!((out.norm() - f.norm()).abs() < 1e-9, "{}", out.norm());
    }

    #[test]
    fn adjoint_and_composition() {
        let g = GridSpec::square(64, 24e-6, 1550e-9).unwrap();
        let a = random_field(g, 2);
        let b = random_field(g, 3);
        let z = 20e-3;
        let lhs = overlap(&propagate(&a, z), &b).unwrap();
        let rhs = overlap(&a, &propagate(&b, -z)).unwrap();
        assert!((lhs - rhs).norm() < 1e-9);
        let p = Propagator::new(g, z, true);
        let back = p.apply(&b, Direction::Backward);
        let direct = propagate(&b, -z);
        for (x, y) in back.data().iter().zip(direct.data()) {
            assert!((x - y).norm() < 1e-9);
        }
        // Composition only holds without window losses, i.e. unpadded.
        let two = propagate_with(&propagate_with(&a, 5e-3, false), 7e-3, false);
        let one = propagate_with(&a, 12e-3, false);
        let diff: f64 = two
            .data()
            .iter()
            .zip(one.data())
            .map(|(x, y)| (x - y).norm_sqr())
            .sum::<f64>()
            * g.pixel_area();
        assert!(diff.sqrt() < 1e-9);
    }
}
