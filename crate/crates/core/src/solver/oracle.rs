//! Free-space electrostatic oracles, independent of the grid solver.
//!
//! These evaluate the potential of an isolated charged surface by direct
//! quadrature of sigma/(4 pi eps0) dA / |r - r'|, with no electrodes and no
//! dielectric. They validate the charge-deposition path of the field solver.

use crate::consts::VACUUM_PERMITTIVITY;
use crate::error::{Error, Result};
use crate::geometry::ChargedSurface;

/// Closed-form on-axis potential of a uniformly charged disk:
/// V(z) = sigma / (2 eps0) * (sqrt(R^2 + z^2) - |z|).
///
/// `sigma` in C/m², `radius` and `z` in meters, result in volts.
pub fn disk_on_axis(sigma: f64, radius: f64, z: f64) -> f64 {
    sigma / (2.0 * VACUUM_PERMITTIVITY) * ((radius * radius + z * z).sqrt() - z.abs())
}

/// Potential (volts) of one charged surface descriptor at a point, by
/// adaptive midpoint quadrature refined until the relative change between
/// successive levels drops below 1e-6.
pub fn coulomb_surface_potential(
    surface: &ChargedSurface,
    sigma: f64,
    point: [f64; 3],
) -> Result<f64> {
    if sigma == 0.0 {
        return Ok(0.0);
    }
    const REL_TOL: f64 = 1e-6;
    const MAX_LEVELS: usize = 9;

    let dist = distance_to_surface(surface, point);
    let mut prev = f64::NAN;
    let mut cell = 0.0;
    for level in 0..MAX_LEVELS {
        let n = 8usize << level;
        let (value, max_cell) = quadrature(surface, sigma, point, n);
        cell = max_cell;
        // Accept only once the cells are well clear of the evaluation point;
        // the midpoint rule is unreliable within a cell diameter of the surface.
        if prev.is_finite() && dist > 2.0 * max_cell {
            let denom = value.abs().max(1e-300);
            if ((value - prev) / denom).abs() < REL_TOL {
                return Ok(value);
            }
        }
        prev = value;
    }
    if dist <= 2.0 * cell {
        Err(Error::NearSingularity)
    } else {
        Err(Error::Other(format!(
            "surface quadrature did not converge to {REL_TOL:.0e} (point distance {dist:.3e} m)"
        )))
    }
}

/// Midpoint-rule pass with `n` radial (or axial) subdivisions. Returns the
/// integral and the largest cell diameter used.
fn quadrature(surface: &ChargedSurface, sigma: f64, point: [f64; 3], n: usize) -> (f64, f64) {
    let coeff = sigma / (4.0 * std::f64::consts::PI * VACUUM_PERMITTIVITY);
    match surface {
        ChargedSurface::FacetDisk { center, radius, .. } => {
            let dr = radius / n as f64;
            let mut acc = 0.0;
            let mut max_cell: f64 = 0.0;
            for m in 0..n {
                let r_in = m as f64 * dr;
                let r_out = r_in + dr;
                let r_mid = 0.5 * (r_in + r_out);
                let n_theta = ((2.0 * std::f64::consts::PI * r_mid / dr).ceil() as usize).max(8);
                let dtheta = 2.0 * std::f64::consts::PI / n_theta as f64;
                let cell_area = 0.5 * (r_out * r_out - r_in * r_in) * dtheta;
                max_cell = max_cell.max((dr * dr + (r_mid * dtheta).powi(2)).sqrt());
                for t in 0..n_theta {
                    let theta = (t as f64 + 0.5) * dtheta;
                    // Disk is perpendicular to y, spanned by x and z.
                    let px = center[0] + r_mid * theta.cos();
                    let pz = center[2] + r_mid * theta.sin();
                    let dx = point[0] - px;
                    let dy = point[1] - center[1];
                    let dz = point[2] - pz;
                    let r = (dx * dx + dy * dy + dz * dz).sqrt();
                    acc += cell_area / r;
                }
            }
            (coeff * acc, max_cell)
        }
        ChargedSurface::SideShell { center_xz, radius, y0, y1, .. } => {
            let length = y1 - y0;
            let n_y = ((length / radius).ceil() as usize * n / 4).max(n);
            let dy_step = length / n_y as f64;
            let n_theta = (4 * n).max(16);
            let dtheta = 2.0 * std::f64::consts::PI / n_theta as f64;
            let cell_area = radius * dtheta * dy_step;
            let max_cell = (dy_step * dy_step + (radius * dtheta).powi(2)).sqrt();
            let mut acc = 0.0;
            for t in 0..n_theta {
                let theta = (t as f64 + 0.5) * dtheta;
                let px = center_xz[0] + radius * theta.cos();
                let pz = center_xz[1] + radius * theta.sin();
                let dx = point[0] - px;
                let dz = point[2] - pz;
                let rho2 = dx * dx + dz * dz;
                for m in 0..n_y {
                    let py = y0 + (m as f64 + 0.5) * dy_step;
                    let dy = point[1] - py;
                    acc += cell_area / (rho2 + dy * dy).sqrt();
                }
            }
            (coeff * acc, max_cell)
        }
    }
}

fn distance_to_surface(surface: &ChargedSurface, point: [f64; 3]) -> f64 {
    match surface {
        ChargedSurface::FacetDisk { center, radius, .. } => {
            let dx = point[0] - center[0];
            let dy = point[1] - center[1];
            let dz = point[2] - center[2];
            let rho = (dx * dx + dz * dz).sqrt();
            if rho <= *radius {
                dy.abs()
            } else {
                ((rho - radius).powi(2) + dy * dy).sqrt()
            }
        }
        ChargedSurface::SideShell { center_xz, radius, y0, y1, .. } => {
            let dx = point[0] - center_xz[0];
            let dz = point[2] - center_xz[1];
            let rho = (dx * dx + dz * dz).sqrt();
            let radial = (rho - radius).abs();
            let y = point[1];
            if y >= *y0 && y <= *y1 {
                radial
            } else {
                let dy = if y < *y0 { y0 - y } else { y - y1 };
                (radial * radial + dy * dy).sqrt()
            }
        }
    }
}
