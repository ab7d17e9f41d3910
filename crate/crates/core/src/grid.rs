//! Grids: a non-uniform rectilinear 3D tensor grid for the field solve and a
//! uniform 2D grid for the exported z = 0 potential maps.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Specification of one grid axis: a uniform core around the origin followed
/// by geometric stretching out to the domain boundary. Explicit feature
/// coordinates (electrode faces, fiber facets) are inserted as extra knots so
/// flat boundaries land exactly on grid planes.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AxisSpec {
    pub fine_half_extent: f64,
    pub fine_step: f64,
    pub stretch_ratio: f64,
    pub box_half_extent: f64,
}

impl AxisSpec {
    /// Builds the symmetric knot vector. A knot sits exactly at 0.
    pub fn build(&self, features: &[f64]) -> Result<Vec<f64>> {
        if self.fine_step <= 0.0 || self.stretch_ratio <= 1.0 {
            return Err(Error::Config("axis spec requires fine_step > 0 and stretch_ratio > 1".into()));
        }
        if self.box_half_extent <= self.fine_half_extent {
            return Err(Error::Config("box must extend beyond the fine region".into()));
        }
        let mut positive = Vec::new();
        let mut x = 0.0;
        while x + self.fine_step <= self.fine_half_extent + 1e-12 {
            x += self.fine_step;
            positive.push(x);
        }
        let mut h = self.fine_step;
        while x < self.box_half_extent - 1e-12 {
            h *= self.stretch_ratio;
            x = (x + h).min(self.box_half_extent);
            positive.push(x);
        }
        // Keep the last interval from degenerating after the final clamp.
        if positive.len() >= 2 {
            let n = positive.len();
            if positive[n - 1] - positive[n - 2] < 0.25 * h {
                positive.remove(n - 2);
            }
        }

        let mut knots: Vec<f64> = Vec::with_capacity(positive.len() * 2 + 1);
        for v in positive.iter().rev() {
            knots.push(-v);
        }
        knots.push(0.0);
        knots.extend_from_slice(&positive);

        for &f in features {
            if f.abs() >= self.box_half_extent - 1e-12 {
                continue;
            }
            insert_knot(&mut knots, f);
        }
        Ok(knots)
    }
}

/// Inserts `value` unless an existing knot sits within 1e-3 of the local
/// spacing (rounding-level coincidences snap to the existing knot, so no
/// degenerate cells are created).
fn insert_knot(knots: &mut Vec<f64>, value: f64) {
    let idx = knots.partition_point(|&k| k < value);
    if idx > 0 && idx < knots.len() {
        let spacing = knots[idx] - knots[idx - 1];
        let tol = 1e-3 * spacing;
        if (knots[idx] - value).abs() < tol || (value - knots[idx - 1]).abs() < tol {
            return;
        }
    } else if idx == 0 {
        if (knots[0] - value).abs() < 1e-15 {
            return;
        }
    } else if (value - knots[idx - 1]).abs() < 1e-15 {
        return;
    }
    knots.insert(idx, value);
}

/// Inserts the midpoint of every interval, exactly halving each cell. Used by
/// grid-convergence measurements; existing knots (and therefore electrode
/// faces on them) are preserved.
pub fn bisect(knots: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(knots.len() * 2 - 1);
    for w in knots.windows(2) {
        out.push(w[0]);
        out.push(0.5 * (w[0] + w[1]));
    }
    out.push(*knots.last().expect("non-empty axis"));
    out
}

/// Non-uniform rectilinear tensor-product grid. When `half_z` is set the grid
/// covers only z >= 0 and the solver applies a mirror condition at z = 0,
/// valid because every excitation in the default geometry is even in z.
#[derive(Debug, Clone)]
pub struct Grid3 {
    pub xs: Vec<f64>,
    pub ys: Vec<f64>,
    pub zs: Vec<f64>,
    pub half_z: bool,
}

impl Grid3 {
    pub fn nx(&self) -> usize {
        self.xs.len()
    }
    pub fn ny(&self) -> usize {
        self.ys.len()
    }
    pub fn nz(&self) -> usize {
        self.zs.len()
    }
    pub fn len(&self) -> usize {
        self.nx() * self.ny() * self.nz()
    }
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn idx(&self, i: usize, j: usize, k: usize) -> usize {
        (k * self.ny() + j) * self.nx() + i
    }

    pub fn point(&self, i: usize, j: usize, k: usize) -> [f64; 3] {
        [self.xs[i], self.ys[j], self.zs[k]]
    }

    /// Control-volume width along an axis at an interior node.
    pub fn cv_width(coords: &[f64], i: usize) -> f64 {
        let n = coords.len();
        if i == 0 {
            coords[1] - coords[0]
        } else if i == n - 1 {
            coords[n - 1] - coords[n - 2]
        } else {
            0.5 * (coords[i + 1] - coords[i - 1])
        }
    }

    /// Index of the z = 0 plane.
    pub fn z_zero_index(&self) -> usize {
        let mut best = 0;
        let mut dist = f64::INFINITY;
        for (k, &z) in self.zs.iter().enumerate() {
            if z.abs() < dist {
                dist = z.abs();
                best = k;
            }
        }
        best
    }
}

/// Uniform 2D grid for exported maps: row-major values, x fastest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapGrid {
    /// Coordinates of the first node (m).
    pub origin: [f64; 2],
    /// Node spacing (m).
    pub spacing: f64,
    pub nx: usize,
    pub ny: usize,
}

impl MapGrid {
    pub fn centered(half_x: f64, half_y: f64, spacing: f64) -> Self {
        let nx = (2.0 * half_x / spacing).round() as usize + 1;
        let ny = (2.0 * half_y / spacing).round() as usize + 1;
        MapGrid { origin: [-half_x, -half_y], spacing, nx, ny }
    }

    pub fn len(&self) -> usize {
        self.nx * self.ny
    }
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn idx(&self, i: usize, j: usize) -> usize {
        j * self.nx + i
    }

    pub fn x(&self, i: usize) -> f64 {
        self.origin[0] + i as f64 * self.spacing
    }

    pub fn y(&self, j: usize) -> f64 {
        self.origin[1] + j as f64 * self.spacing
    }

    pub fn max_x(&self) -> f64 {
        self.x(self.nx - 1)
    }

    pub fn max_y(&self) -> f64 {
        self.y(self.ny - 1)
    }

    /// True if the point lies at least `margin` inside the grid hull.
    pub fn contains_with_margin(&self, p: [f64; 2], margin: f64) -> bool {
        p[0] >= self.origin[0] + margin
            && p[0] <= self.max_x() - margin
            && p[1] >= self.origin[1] + margin
            && p[1] <= self.max_y() - margin
    }
}

/// 1D cubic Lagrange interpolation on non-uniform knots: 4-point stencil
/// around the query, falling back to the available points near the ends.
pub fn lagrange_coeffs(coords: &[f64], x: f64) -> (usize, [f64; 4], usize) {
    let n = coords.len();
    debug_assert!(n >= 2);
    let cell = coords.partition_point(|&c| c <= x).clamp(1, n - 1) - 1;
    let start = cell.saturating_sub(1).min(n.saturating_sub(4));
    let count = 4.min(n);
    let mut w = [0.0; 4];
    for a in 0..count {
        let xa = coords[start + a];
        let mut prod = 1.0;
        for b in 0..count {
            if a != b {
                let xb = coords[start + b];
                prod *= (x - xb) / (xa - xb);
            }
        }
        w[a] = prod;
    }
    (start, w, count)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn axis_is_symmetric_with_zero_knot() {
        let spec = AxisSpec {
            fine_half_extent: 100e-6,
            fine_step: 10e-6,
            stretch_ratio: 1.3,
            box_half_extent: 1e-3,
        };
        let axis = spec.build(&[]).unwrap();
        assert!(axis.contains(&0.0));
        let n = axis.len();
        for i in 0..n {
            assert_relative_eq!(axis[i], -axis[n - 1 - i], epsilon = 1e-18);
        }
        assert_relative_eq!(*axis.last().unwrap(), 1e-3, max_relative = 1e-12);
        for w in axis.windows(2) {
            assert!(w[1] > w[0]);
        }
    }

    #[test]
    fn features_are_inserted_once() {
        let spec = AxisSpec {
            fine_half_extent: 100e-6,
            fine_step: 10e-6,
            stretch_ratio: 1.3,
            box_half_extent: 1e-3,
        };
        let axis = spec.build(&[270e-6, 270e-6, -270e-6]).unwrap();
        let hits = axis.iter().filter(|&&x| (x - 270e-6).abs() < 1e-12).count();
        assert_eq!(hits, 1);
        let hits_neg = axis.iter().filter(|&&x| (x + 270e-6).abs() < 1e-12).count();
        assert_eq!(hits_neg, 1);
    }

    #[test]
    fn bisection_preserves_knots() {
        let spec = AxisSpec {
            fine_half_extent: 80e-6,
            fine_step: 20e-6,
            stretch_ratio: 1.4,
            box_half_extent: 500e-6,
        };
        let axis = spec.build(&[250e-6]).unwrap();
        let fine = bisect(&axis);
        assert_eq!(fine.len(), axis.len() * 2 - 1);
        for &k in &axis {
            assert!(fine.iter().any(|&f| (f - k).abs() < 1e-18));
        }
    }

    #[test]
    fn lagrange_reproduces_cubics() {
        let coords = [0.0, 1.0, 2.5, 4.0, 7.0, 11.0];
        let f = |x: f64| 2.0 - x + 3.0 * x * x - 0.5 * x * x * x;
        let values: Vec<f64> = coords.iter().map(|&x| f(x)).collect();
        for &x in &[0.3, 1.7, 3.9, 6.2, 10.5] {
            let (start, w, count) = lagrange_coeffs(&coords, x);
            let mut v = 0.0;
            for a in 0..count {
                v += w[a] * values[start + a];
            }
            assert_relative_eq!(v, f(x), max_relative = 1e-12);
        }
    }

    #[test]
    fn map_grid_indexing() {
        let g = MapGrid::centered(500e-6, 300e-6, 5e-6);
        assert_eq!(g.nx, 201);
        assert_eq!(g.ny, 121);
        assert_relative_eq!(g.x(100), 0.0, epsilon = 1e-18);
        assert_relative_eq!(g.y(60), 0.0, epsilon = 1e-18);
        assert!(g.contains_with_margin([0.0, 0.0], 50e-6));
        assert!(!g.contains_with_margin([480e-6, 0.0], 50e-6));
    }
}
