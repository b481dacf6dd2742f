//! Zernike polynomials in Noll ordering (j = 1 is piston, j = 4 defocus).

use crate::error::{Error, Result};
use crate::field::GridSpec;

/// Radial order `n` and signed azimuthal order `m` for Noll index `j`.
pub fn noll_to_nm(j: usize) -> Result<(u32, i32)> {
    if j == 0 {
        return Err(Error::InvalidParameter("Noll indices start at 1".into()));
    }
    let mut n = 0usize;
    let mut j1 = j - 1;
    while j1 > n {
        n += 1;
        j1 -= n;
    }
    let mag = (n % 2) + 2 * ((j1 + (n + 1) % 2) / 2);
    let m = if j % 2 == 0 { mag as i32 } else { -(mag as i32) };
    Ok((n as u32, m))
}

fn factorial(k: u32) -> f64 {
    (1..=k).map(f64::from).product()
}

/// Radial polynomial R_n^|m|(ρ).
pub fn radial(n: u32, m: u32, rho: f64) -> f64 {
    if m > n || (n - m) % 2 != 0 {
        return 0.0;
    }
    let half_sum = (n + m) / 2;
    let half_diff = (n - m) / 2;
    (0..=half_diff)
        .map(|k| {
            let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
            sign * factorial(n - k) / (factorial(k) * factorial(half_sum - k) * factorial(half_diff - k))
                * rho.powi((n - 2 * k) as i32)
        })
        .sum()
}

/// Noll-normalized Z_j at polar coordinates on the unit disk; zero outside.
///
/// Normalized so that the disk average of Z_j² is 1.
pub fn zernike(j: usize, rho: f64, theta: f64) -> Result<f64> {
    let (n, m) = noll_to_nm(j)?;
    if rho > 1.0 {
        return Ok(0.0);
    }
    let r = radial(n, m.unsigned_abs(), rho);
    let norm = ((n + 1) as f64).sqrt();
    Ok(match m {
        0 => norm * r,
        m if m > 0 => norm * std::f64::consts::SQRT_2 * r * (m as f64 * theta).cos(),
        m => norm * std::f64::consts::SQRT_2 * r * ((-m) as f64 * theta).sin(),
    })
}

/// Σ c_k·Z_k sampled on `grid`, with the unit disk inscribed in the aperture.
pub fn zernike_map(grid: &GridSpec, terms: &[(usize, f64)]) -> Result<Vec<f64>> {
    for &(j, _) in terms {
        noll_to_nm(j)?;
    }
    let radius = grid.width().min(grid.height()) / 2.0;
    let mut out = Vec::with_capacity(grid.len());
    for row in 0..grid.ny {
        let y = grid.y(row);
        for col in 0..grid.nx {
            let x = grid.x(col);
            let rho = (x * x + y * y).sqrt() / radius;
            let theta = y.atan2(x);
            let mut v = 0.0;
            for &(j, c) in terms {
                v += c * zernike(j, rho, theta)?;
            }
            out.push(v);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn noll_table() {
        let expected = [
            (1, (0, 0)),
            (2, (1, 1)),
            (3, (1, -1)),
            (4, (2, 0)),
            (5, (2, -2)),
            (6, (2, 2)),
            (7, (3, -1)),
            (8, (3, 1)),
            (11, (4, 0)),
            (12, (4, 2)),
            (13, (4, -2)),
            (14, (4, 4)),
            (15, (4, -4)),
        ];
        for (j, nm) in expected {
            assert_eq!(noll_to_nm(j).unwrap(), nm, "j = {j}");
        }
        assert!(noll_to_nm(0).is_err());
    }

    #[test]
    fn defocus_closed_form() {
        for &rho in &[0.0, 0.3, 0.77, 1.0] {
            let z = zernike(4, rho, 0.4).unwrap();
            assert!((z - 3f64.sqrt() * (2.0 * rho * rho - 1.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn orthonormal_on_disk() {
        // Midpoint quadrature on a 256² grid covering the unit disk.
        let n = 256;
        let h = 2.0 / n as f64;
        let js = [1usize, 2, 3, 4, 5, 6, 7, 11, 12, 15];
        let mut gram = vec![0.0; js.len() * js.len()];
        let mut count = 0usize;
        for r in 0..n {
            let y = -1.0 + (r as f64 + 0.5) * h;
            for c in 0..n {
                let x = -1.0 + (c as f64 + 0.5) * h;
                let rho = (x * x + y * y).sqrt();
                if rho > 1.0 {
                    continue;
                }
                count += 1;
                let th = y.atan2(x);
                let vals: Vec<f64> = js.iter().map(|&j| zernike(j, rho, th).unwrap()).collect();
                for a in 0..js.len() {
                    for b in 0..js.len() {
                        gram[a * js.len() + b] += vals[a] * vals[b];
                    }
                }
            }
        }
        for a in 0..js.len() {
            for b in 0..js.len() {
                let v = gram[a * js.len() + b] / count as f64;
                // The pixelated disk edge biases the norms slightly more than the overlaps.
                let (want, tol) = if a == b { (1.0, 5e-3) } else { (0.0, 1e-3) };
                assert!((v - want).abs() < tol, "Z{} Z{} -> {v}", js[a], js[b]);
            }
        }
    }
}
