//! 2D potential and energy maps on the z = 0 plane.

use crate::consts::EV;
use crate::error::{Error, Result};
use crate::geometry::Excitation;
use crate::grid::MapGrid;
use serde::{Deserialize, Serialize};

/// Scalar electric potential sampled on a regular 2D grid, tagged with the
/// unit excitation that produced it and the geometry fingerprint it belongs to.
///
/// `valid` marks nodes in free space; nodes inside an electrode cross-section
/// carry the conductor value and are excluded from minimum searches.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PotentialMap {
    pub grid: MapGrid,
    pub values: Vec<f64>,
    pub excitation: Excitation,
    pub geometry_hash: String,
    pub valid: Vec<bool>,
}

impl PotentialMap {
    pub fn new(grid: MapGrid, values: Vec<f64>, excitation: Excitation, geometry_hash: String) -> Self {
        debug_assert_eq!(values.len(), grid.len());
        let valid = vec![true; grid.len()];
        PotentialMap { grid, values, excitation, geometry_hash, valid }
    }

    pub fn with_validity(mut self, valid: Vec<bool>) -> Self {
        debug_assert_eq!(valid.len(), self.grid.len());
        self.valid = valid;
        self
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.values[self.grid.idx(i, j)]
    }

    /// Smooth (bicubic) sample at an arbitrary in-bounds point.
    pub fn sample(&self, p: [f64; 2]) -> Result<f64> {
        sample_bicubic(&self.grid, &self.values, p)
    }
}

/// In-plane gradient (∂U/∂x, ∂U/∂y) of a map at a point, from the derivative
/// of the local cubic interpolant. The point must be at least two spacings
/// inside the map.
pub fn gradient(map: &PotentialMap, p: [f64; 2]) -> Result<[f64; 2]> {
    let g = &map.grid;
    if !g.contains_with_margin(p, 2.0 * g.spacing) {
        return Err(Error::OutOfBounds(p));
    }
    let h = 0.5 * g.spacing;
    let ux = (sample_bicubic(g, &map.values, [p[0] + h, p[1]])?
        - sample_bicubic(g, &map.values, [p[0] - h, p[1]])?)
        / (2.0 * h);
    let uy = (sample_bicubic(g, &map.values, [p[0], p[1] + h])?
        - sample_bicubic(g, &map.values, [p[0], p[1] - h])?)
        / (2.0 * h);
    Ok([ux, uy])
}

/// Potential energy landscape in the z = 0 plane (joules).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EnergyMap {
    pub grid: MapGrid,
    pub values: Vec<f64>,
    pub geometry_hash: String,
    pub valid: Vec<bool>,
}

impl EnergyMap {
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.values[self.grid.idx(i, j)]
    }

    pub fn is_valid(&self, i: usize, j: usize) -> bool {
        self.valid[self.grid.idx(i, j)]
    }

    pub fn value_ev(&self, i: usize, j: usize) -> f64 {
        self.at(i, j) / EV
    }

    pub fn sample(&self, p: [f64; 2]) -> Result<f64> {
        sample_bicubic(&self.grid, &self.values, p)
    }

    /// Minimum over free-space nodes.
    pub fn min_value(&self) -> f64 {
        self.values
            .iter()
            .zip(self.valid.iter())
            .filter(|(_, &v)| v)
            .map(|(x, _)| *x)
            .fold(f64::INFINITY, f64::min)
    }

    /// Maximum over free-space nodes.
    pub fn max_value(&self) -> f64 {
        self.values
            .iter()
            .zip(self.valid.iter())
            .filter(|(_, &v)| v)
            .map(|(x, _)| *x)
            .fold(f64::NEG_INFINITY, f64::max)
    }
}

fn sample_bicubic(grid: &MapGrid, values: &[f64], p: [f64; 2]) -> Result<f64> {
    let [x, y] = p;
    if x < grid.origin[0] - 1e-12 || x > grid.max_x() + 1e-12 || y < grid.origin[1] - 1e-12
        || y > grid.max_y() + 1e-12
    {
        return Err(Error::OutOfBounds(p));
    }
    let fx = ((x - grid.origin[0]) / grid.spacing).clamp(0.0, (grid.nx - 1) as f64);
    let fy = ((y - grid.origin[1]) / grid.spacing).clamp(0.0, (grid.ny - 1) as f64);
    let i0 = (fx.floor() as usize).min(grid.nx - 2).saturating_sub(1).min(grid.nx.saturating_sub(4));
    let j0 = (fy.floor() as usize).min(grid.ny - 2).saturating_sub(1).min(grid.ny.saturating_sub(4));
    let cnt_x = 4.min(grid.nx);
    let cnt_y = 4.min(grid.ny);

    let wx = uniform_lagrange(fx - i0 as f64, cnt_x);
    let wy = uniform_lagrange(fy - j0 as f64, cnt_y);

    let mut acc = 0.0;
    for b in 0..cnt_y {
        let mut row = 0.0;
        for a in 0..cnt_x {
            row += wx[a] * values[grid.idx(i0 + a, j0 + b)];
        }
        acc += wy[b] * row;
    }
    Ok(acc)
}

/// Lagrange weights for nodes at 0, 1, ..., count-1 evaluated at t.
fn uniform_lagrange(t: f64, count: usize) -> [f64; 4] {
    let mut w = [0.0; 4];
    for a in 0..count {
        let mut prod = 1.0;
        for b in 0..count {
            if a != b {
                prod *= (t - b as f64) / (a as f64 - b as f64);
            }
        }
        w[a] = prod;
    }
    w
}

/// Analytic map builders used by self-consistency paths and tests.
pub mod mapgen {
    use super::*;

    /// Samples an arbitrary function of (x, y) onto a map grid.
    pub fn from_fn<F: Fn(f64, f64) -> f64>(
        grid: MapGrid,
        excitation: Excitation,
        geometry_hash: &str,
        f: F,
    ) -> PotentialMap {
        let mut values = vec![0.0; grid.len()];
        for j in 0..grid.ny {
            for i in 0..grid.nx {
                values[grid.idx(i, j)] = f(grid.x(i), grid.y(j));
            }
        }
        PotentialMap::new(grid, values, excitation, geometry_hash.to_string())
    }

    /// Ideal planar rf quadrupole: U = V0 (x² − y²) / (2 r0²).
    pub fn ideal_quadrupole(grid: MapGrid, r0: f64, v0: f64, geometry_hash: &str) -> PotentialMap {
        from_fn(grid, Excitation::RfUnit, geometry_hash, |x, y| {
            v0 * (x * x - y * y) / (2.0 * r0 * r0)
        })
    }

    /// Harmonic endcap basis: U = curvature_scale · (x² − (y²)/2) / x0² per
    /// volt, split evenly between the two endcaps, plus a linear displacement
    /// term for the voltage-difference response.
    pub fn harmonic_endcap(
        grid: MapGrid,
        x0: f64,
        efficiency: f64,
        dipole_per_volt: f64,
        left: bool,
        geometry_hash: &str,
    ) -> PotentialMap {
        let excitation = if left { Excitation::EcLeftUnit } else { Excitation::EcRightUnit };
        let sign = if left { -1.0 } else { 1.0 };
        from_fn(grid, excitation, geometry_hash, move |x, y| {
            0.5 * efficiency * (x * x - 0.5 * y * y) / (x0 * x0) + sign * dipole_per_volt * x
        })
    }
}
