//! Finite-volume solver for the variable-coefficient Poisson problem
//! div(eps grad U) = -rho on a non-uniform rectilinear 3D grid.
//!
//! Electrodes are Dirichlet regions rasterized from the geometry; the outer
//! domain boundary is a grounded box. Permittivity jumps at fiber surfaces
//! are handled by harmonic averaging at cell faces, and surface charges are
//! deposited by area-weighted (trilinear) assignment of quadrature patches to
//! the surrounding node shell.
//!
//! The iteration is red-black successive over-relaxation with an optional
//! coarse-grid cascade for the initial guess. Sweeps are parallelized over
//! z-planes; every node update reads only frozen opposite-color values, so
//! results are bit-identical for any thread count.
//!
//! Because every default excitation is even in z (the rf pair is excited
//! symmetrically and fibers sit at z = 0), the solve runs on the z >= 0
//! half-domain with a mirror condition at z = 0 unless a fiber carries a
//! nonzero z offset.

pub mod oracle;

use crate::consts::E_PER_UM2;
use crate::error::{Error, Result};
use crate::geometry::{ChargedSurface, Excitation, FiberLabel, GeometrySpec, SurfaceRegion};
use crate::grid::{lagrange_coeffs, AxisSpec, Grid3, MapGrid};
use crate::maps::PotentialMap;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Solver resolution and iteration controls. Lengths in meters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SolverConfig {
    /// Uniform node spacing in the central fine region.
    pub fine_step: f64,
    /// Half extents of the fine region along x, y, z.
    pub fine_half_extent: [f64; 3],
    /// Geometric cell-growth factor outside the fine region.
    pub stretch_ratio: f64,
    /// Relative residual (infinity norm) at which the solve is converged.
    pub tolerance: f64,
    pub max_sweeps: usize,
    /// SOR relaxation factor; estimated from the grid when absent.
    pub omega: Option<f64>,
    /// Exploit z-mirror symmetry when the geometry allows it.
    pub allow_half_z: bool,
    /// Solve a 2x-coarsened grid first and interpolate the initial guess.
    pub cascade: bool,
    /// Sweeps between residual evaluations.
    pub check_interval: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            fine_step: 10e-6,
            fine_half_extent: [630e-6, 450e-6, 330e-6],
            stretch_ratio: 1.3,
            tolerance: 1e-8,
            max_sweeps: 40_000,
            omega: None,
            allow_half_z: true,
            cascade: true,
            check_interval: 25,
        }
    }
}

impl SolverConfig {
    /// Default production resolution (10 µm fine region).
    pub fn production() -> Self {
        Self::default()
    }

    /// Faster tier for pipeline-heavy validation runs (15 µm).
    pub fn test_tier() -> Self {
        SolverConfig { fine_step: 15e-6, ..Self::default() }
    }

    /// Coarse tier for smoke tests and sweeps (30 µm).
    pub fn coarse_tier() -> Self {
        SolverConfig { fine_step: 30e-6, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.fine_step <= 0.0 || self.tolerance <= 0.0 {
            return Err(Error::Config("solver fine_step and tolerance must be positive".into()));
        }
        if self.stretch_ratio <= 1.0 {
            return Err(Error::Config("stretch_ratio must exceed 1".into()));
        }
        Ok(())
    }
}

/// Default exported-map grid: 5 µm spacing covering |x| <= 500 µm,
/// |y| <= 300 µm.
pub fn default_map_grid() -> MapGrid {
    MapGrid::centered(500e-6, 300e-6, 5e-6)
}

/// Arbitrary excitation: voltages on the driven electrode groups plus charge
/// densities (C/m²) on fiber surface regions. Unit basis drives are built via
/// [`Drive::unit`].
#[derive(Debug, Clone, Default)]
pub struct Drive {
    pub rf_volts: f64,
    pub ec_left_volts: f64,
    pub ec_right_volts: f64,
    pub charges: Vec<(FiberLabel, SurfaceRegion, f64)>,
}

impl Drive {
    pub fn unit(excitation: Excitation) -> Self {
        match excitation {
            Excitation::RfUnit => Drive { rf_volts: 1.0, ..Default::default() },
            Excitation::EcLeftUnit => Drive { ec_left_volts: 1.0, ..Default::default() },
            Excitation::EcRightUnit => Drive { ec_right_volts: 1.0, ..Default::default() },
            Excitation::ChargeUnit(label, region) => Drive {
                charges: vec![(label, region, E_PER_UM2)],
                ..Default::default()
            },
        }
    }
}

/// Outcome of one basis solve.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SolveReport {
    pub excitation: String,
    pub iterations: usize,
    pub residual: f64,
    pub converged: bool,
    pub wall_seconds: f64,
    pub nodes: usize,
}

/// 3D solution sampled on the solver grid.
#[derive(Debug, Clone)]
pub struct Field3 {
    pub grid: Grid3,
    pub values: Vec<f64>,
}

impl Field3 {
    /// Tricubic sample; uses |z| when the field lives on the half-domain.
    pub fn sample(&self, p: [f64; 3]) -> f64 {
        let z = if self.grid.half_z { p[2].abs() } else { p[2] };
        let (sx, wx, cx) = lagrange_coeffs(&self.grid.xs, p[0]);
        let (sy, wy, cy) = lagrange_coeffs(&self.grid.ys, p[1]);
        let (sz, wz, cz) = lagrange_coeffs(&self.grid.zs, z);
        let mut acc = 0.0;
        for c in 0..cz {
            let mut plane = 0.0;
            for b in 0..cy {
                let mut row = 0.0;
                for a in 0..cx {
                    row += wx[a] * self.values[self.grid.idx(sx + a, sy + b, sz + c)];
                }
                plane += wy[b] * row;
            }
            acc += wz[c] * plane;
        }
        acc
    }
}

const ROLE_FREE: u8 = 0;
const ROLE_GROUND: u8 = 1;
const ROLE_RF: u8 = 2;
const ROLE_EC_LEFT: u8 = 3;
const ROLE_EC_RIGHT: u8 = 4;

/// Assembled discrete operator for one geometry; all excitations of the
/// geometry share it.
pub struct BasisSolver {
    geometry: GeometrySpec,
    config: SolverConfig,
    map_grid: MapGrid,
    grid: Grid3,
    cfx: Vec<f64>,
    cfy: Vec<f64>,
    cfz: Vec<f64>,
    diag: Vec<f64>,
    roles: Vec<u8>,
    coarse: Option<Box<BasisSolver>>,
}

impl BasisSolver {
    pub fn new(geometry: &GeometrySpec, config: &SolverConfig, map_grid: MapGrid) -> Result<Self> {
        config.validate()?;
        let half = geometry.domain_half_extent();
        let features = geometry.feature_planes();
        let mut axes = Vec::with_capacity(3);
        for axis in 0..3 {
            let spec = AxisSpec {
                fine_half_extent: config.fine_half_extent[axis],
                fine_step: config.fine_step,
                stretch_ratio: config.stretch_ratio,
                box_half_extent: half,
            };
            axes.push(spec.build(&features[axis])?);
        }
        let [xs, ys, zs_full]: [Vec<f64>; 3] = axes.try_into().expect("three axes");

        let symmetric_z = geometry.fibers.iter().all(|(_, p)| p.z_offset == 0.0);
        let half_z = config.allow_half_z && symmetric_z;
        let zs = if half_z {
            let zero = zs_full.iter().position(|&z| z.abs() < 1e-15).expect("z axis has origin");
            zs_full[zero..].to_vec()
        } else {
            zs_full
        };
        let grid = Grid3 { xs, ys, zs, half_z };
        Self::from_grid(geometry.clone(), config.clone(), map_grid, grid, true)
    }

    fn from_grid(
        geometry: GeometrySpec,
        config: SolverConfig,
        map_grid: MapGrid,
        grid: Grid3,
        build_cascade: bool,
    ) -> Result<Self> {
        let (nx, ny, nz) = (grid.nx(), grid.ny(), grid.nz());
        let n = grid.len();
        let mut roles = vec![ROLE_FREE; n];
        let mut eps = vec![0.0; n];

        for k in 0..nz {
            for j in 0..ny {
                for i in 0..nx {
                    let idx = grid.idx(i, j, k);
                    let p = grid.point(i, j, k);
                    let on_outer = i == 0
                        || i == nx - 1
                        || j == 0
                        || j == ny - 1
                        || k == nz - 1
                        || (k == 0 && !grid.half_z);
                    roles[idx] = if on_outer {
                        ROLE_GROUND
                    } else {
                        match electrode_role(&geometry, p) {
                            Some(r) => r,
                            None => ROLE_FREE,
                        }
                    };
                    eps[idx] = geometry.permittivity_at(p);
                }
            }
        }

        let mut cfx = vec![0.0; n];
        let mut cfy = vec![0.0; n];
        let mut cfz = vec![0.0; n];
        for k in 0..nz {
            let wz = Grid3::cv_width(&grid.zs, k);
            for j in 0..ny {
                let wy = Grid3::cv_width(&grid.ys, j);
                for i in 0..nx {
                    let idx = grid.idx(i, j, k);
                    let wx = Grid3::cv_width(&grid.xs, i);
                    if i + 1 < nx {
                        let e = harmonic(eps[idx], eps[grid.idx(i + 1, j, k)]);
                        cfx[idx] = e * wy * wz / (grid.xs[i + 1] - grid.xs[i]);
                    }
                    if j + 1 < ny {
                        let e = harmonic(eps[idx], eps[grid.idx(i, j + 1, k)]);
                        cfy[idx] = e * wx * wz / (grid.ys[j + 1] - grid.ys[j]);
                    }
                    if k + 1 < nz {
                        let e = harmonic(eps[idx], eps[grid.idx(i, j, k + 1)]);
                        cfz[idx] = e * wx * wy / (grid.zs[k + 1] - grid.zs[k]);
                    }
                }
            }
        }

        let mut diag = vec![0.0; n];
        for k in 0..nz {
            for j in 0..ny {
                for i in 0..nx {
                    let idx = grid.idx(i, j, k);
                    let mut d = 0.0;
                    if i + 1 < nx {
                        d += cfx[idx];
                    }
                    if i > 0 {
                        d += cfx[grid.idx(i - 1, j, k)];
                    }
                    if j + 1 < ny {
                        d += cfy[idx];
                    }
                    if j > 0 {
                        d += cfy[grid.idx(i, j - 1, k)];
                    }
                    if k + 1 < nz {
                        d += cfz[idx];
                    }
                    if k > 0 {
                        d += cfz[grid.idx(i, j, k - 1)];
                    } else if grid.half_z && k + 1 < nz {
                        // Mirror plane: the image neighbor duplicates the +z face.
                        d += cfz[idx];
                    }
                    diag[idx] = d;
                }
            }
        }

        let coarse = if build_cascade && config.cascade && grid.nx() > 24 && grid.ny() > 24 {
            let cg = Grid3 {
                xs: coarsen_axis(&grid.xs),
                ys: coarsen_axis(&grid.ys),
                zs: coarsen_axis(&grid.zs),
                half_z: grid.half_z,
            };
            Some(Box::new(Self::from_grid(
                geometry.clone(),
                SolverConfig { tolerance: config.tolerance.max(1e-7), ..config.clone() },
                map_grid.clone(),
                cg,
                false,
            )?))
        } else {
            None
        };

        Ok(BasisSolver { geometry, config, map_grid, grid, cfx, cfy, cfz, diag, roles, coarse })
    }

    pub fn geometry(&self) -> &GeometrySpec {
        &self.geometry
    }

    pub fn grid(&self) -> &Grid3 {
        &self.grid
    }

    pub fn map_grid(&self) -> &MapGrid {
        &self.map_grid
    }

    /// Solves one unit excitation and resamples the z = 0 plane to the map grid.
    pub fn solve_basis(&self, excitation: Excitation) -> Result<(PotentialMap, SolveReport)> {
        if let Excitation::ChargeUnit(label, _) = excitation {
            if self.geometry.placement(label).is_none() {
                return Err(Error::UnknownLabel(label.to_string()));
            }
        }
        let drive = Drive::unit(excitation);
        let (field, mut report) = self.solve_drive_3d(&drive)?;
        report.excitation = excitation.tag();
        let map = self.extract_map(&field, excitation);
        Ok((map, report))
    }

    /// Full-control entry point: solves an arbitrary combination of electrode
    /// voltages and surface charge densities, returning the 3D field.
    pub fn solve_drive_3d(&self, drive: &Drive) -> Result<(Field3, SolveReport)> {
        let start = std::time::Instant::now();
        let n = self.grid.len();

        let mut rhs = vec![0.0; n];
        for (label, region, sigma) in &drive.charges {
            let surface = self
                .geometry
                .surfaces
                .iter()
                .find(|s| s.label() == *label && s.region() == *region)
                .ok_or_else(|| Error::UnknownLabel(label.to_string()))?;
            deposit_surface(&self.grid, &mut rhs, surface, *sigma, self.config.fine_step);
        }

        let mut u = vec![0.0; n];
        for (idx, &role) in self.roles.iter().enumerate() {
            u[idx] = dirichlet_value(role, drive);
        }

        // State-independent residual normalizer: the residual with all free
        // nodes at zero.
        let norm0 = self.residual_inf(&u, &rhs).max(1e-300);

        if let Some(coarse) = &self.coarse {
            let (cfield, _) = coarse.solve_drive_3d(drive)?;
            self.prolong_initial_guess(&cfield, &mut u, drive);
        }

        let omega = self.config.omega.unwrap_or_else(|| {
            let full_nz = if self.grid.half_z { self.grid.nz() * 2 } else { self.grid.nz() };
            let n_eff = self.grid.nx().max(self.grid.ny()).max(full_nz) as f64;
            (2.0 / (1.0 + (std::f64::consts::PI / n_eff).sin())).min(1.99)
        });

        let mut history = Vec::new();
        let mut sweeps = 0;
        let mut rel = f64::INFINITY;
        while sweeps < self.config.max_sweeps {
            for _ in 0..self.config.check_interval {
                self.sweep(&mut u, &rhs, omega, 0);
                self.sweep(&mut u, &rhs, omega, 1);
                sweeps += 1;
            }
            rel = self.residual_inf(&u, &rhs) / norm0;
            history.push(rel);
            if rel <= self.config.tolerance {
                break;
            }
        }

        let report = SolveReport {
            excitation: String::new(),
            iterations: sweeps,
            residual: rel,
            converged: rel <= self.config.tolerance,
            wall_seconds: start.elapsed().as_secs_f64(),
            nodes: n,
        };
        if !report.converged {
            return Err(Error::SolverFailure {
                iterations: sweeps,
                residual: rel,
                history,
            });
        }
        Ok((Field3 { grid: self.grid.clone(), values: u }, report))
    }

    /// One red-black half-sweep over nodes of the given color.
    fn sweep(&self, u: &mut [f64], rhs: &[f64], omega: f64, color: usize) {
        let (nx, ny, nz) = (self.grid.nx(), self.grid.ny(), self.grid.nz());
        let plane = nx * ny;
        let uptr = SendPtr(u.as_mut_ptr());
        let half_z = self.grid.half_z;
        (0..nz.saturating_sub(1)).into_par_iter().for_each(|k| {
            // Each plane worker writes only nodes of one color in its own
            // plane and reads frozen opposite-color neighbors, so the shared
            // mutable access is race-free and deterministic.
            let u = unsafe { std::slice::from_raw_parts_mut(uptr.get(), nx * ny * nz) };
            if k == 0 && !half_z {
                return;
            }
            for j in 1..ny - 1 {
                let row = (k * ny + j) * nx;
                let i0 = 1 + (color + j + k + 1) % 2;
                let mut i = i0;
                while i < nx - 1 {
                    let idx = row + i;
                    if self.roles[idx] == ROLE_FREE {
                        let mut num = rhs[idx];
                        num += self.cfx[idx] * u[idx + 1] + self.cfx[idx - 1] * u[idx - 1];
                        num += self.cfy[idx] * u[idx + nx] + self.cfy[idx - nx] * u[idx - nx];
                        if k == 0 {
                            // half_z mirror: the lower neighbor is the image
                            // of the upper one.
                            num += 2.0 * self.cfz[idx] * u[idx + plane];
                        } else {
                            num += self.cfz[idx] * u[idx + plane]
                                + self.cfz[idx - plane] * u[idx - plane];
                        }
                        let unew = num / self.diag[idx];
                        u[idx] += omega * (unew - u[idx]);
                    }
                    i += 2;
                }
            }
        });
    }

    /// Infinity norm of the residual over free nodes.
    fn residual_inf(&self, u: &[f64], rhs: &[f64]) -> f64 {
        let (nx, ny, nz) = (self.grid.nx(), self.grid.ny(), self.grid.nz());
        let plane = nx * ny;
        let per_plane: Vec<f64> = (0..nz.saturating_sub(1))
            .into_par_iter()
            .map(|k| {
                if k == 0 && !self.grid.half_z {
                    return 0.0;
                }
                let mut worst: f64 = 0.0;
                for j in 1..ny - 1 {
                    let row = (k * ny + j) * nx;
                    for i in 1..nx - 1 {
                        let idx = row + i;
                        if self.roles[idx] != ROLE_FREE {
                            continue;
                        }
                        let mut num = rhs[idx];
                        num += self.cfx[idx] * u[idx + 1] + self.cfx[idx - 1] * u[idx - 1];
                        num += self.cfy[idx] * u[idx + nx] + self.cfy[idx - nx] * u[idx - nx];
                        if k == 0 {
                            num += 2.0 * self.cfz[idx] * u[idx + plane];
                        } else {
                            num += self.cfz[idx] * u[idx + plane]
                                + self.cfz[idx - plane] * u[idx - plane];
                        }
                        worst = worst.max((num - self.diag[idx] * u[idx]).abs());
                    }
                }
                worst
            })
            .collect();
        per_plane.into_iter().fold(0.0, f64::max)
    }

    /// Node-wise residual of an externally supplied field, normalized the same
    /// way as the convergence check. Used by validation suites to verify the
    /// discrete Laplace property independently.
    pub fn normalized_residual_at(&self, field: &Field3, i: usize, j: usize, k: usize) -> f64 {
        let rhs = vec![0.0; self.grid.len()];
        let norm0 = {
            let mut u = vec![0.0; self.grid.len()];
            for (idx, &role) in self.roles.iter().enumerate() {
                u[idx] = dirichlet_value(role, &Drive::unit(Excitation::RfUnit));
            }
            self.residual_inf(&u, &rhs).max(1e-300)
        };
        let (nx, _ny, _nz) = (self.grid.nx(), self.grid.ny(), self.grid.nz());
        let plane = nx * self.grid.ny();
        let idx = self.grid.idx(i, j, k);
        let u = &field.values;
        let mut num = 0.0;
        num += self.cfx[idx] * u[idx + 1] + self.cfx[idx - 1] * u[idx - 1];
        num += self.cfy[idx] * u[idx + nx] + self.cfy[idx - nx] * u[idx - nx];
        if k == 0 && self.grid.half_z {
            num += 2.0 * self.cfz[idx] * u[idx + plane];
        } else {
            num += self.cfz[idx] * u[idx + plane] + self.cfz[idx - plane] * u[idx - plane];
        }
        (num - self.diag[idx] * u[idx]).abs() / norm0
    }

    pub fn is_free_vacuum_node(&self, i: usize, j: usize, k: usize) -> bool {
        let idx = self.grid.idx(i, j, k);
        if self.roles[idx] != ROLE_FREE {
            return false;
        }
        // Vacuum means no dielectric in the whole stencil neighborhood.
        let p = self.grid.point(i, j, k);
        let eps0 = crate::consts::VACUUM_PERMITTIVITY;
        for body in &self.geometry.bodies {
            let clearance = 2.0 * self.config.fine_step;
            let dx = p[0] - body.center_xz[0];
            let dz = p[2] - body.center_xz[1];
            if (dx * dx + dz * dz).sqrt() < body.radius + clearance
                && p[1] > body.y_min - clearance
                && p[1] < body.y_max + clearance
            {
                return false;
            }
        }
        (self.geometry.permittivity_at(p) - eps0).abs() < 1e-18
    }

    fn prolong_initial_guess(&self, coarse: &Field3, u: &mut [f64], _drive: &Drive) {
        let (nx, ny, nz) = (self.grid.nx(), self.grid.ny(), self.grid.nz());
        for k in 0..nz {
            for j in 0..ny {
                for i in 0..nx {
                    let idx = self.grid.idx(i, j, k);
                    if self.roles[idx] == ROLE_FREE {
                        u[idx] = trilinear(coarse, self.grid.point(i, j, k));
                    }
                }
            }
        }
    }

    fn extract_map(&self, field: &Field3, excitation: Excitation) -> PotentialMap {
        let k0 = self.grid.z_zero_index();
        let g = &self.map_grid;
        let mut values = vec![0.0; g.len()];
        let mut valid = vec![true; g.len()];
        for j in 0..g.ny {
            let (sy, wy, cy) = lagrange_coeffs(&self.grid.ys, g.y(j));
            for i in 0..g.nx {
                let (sx, wx, cx) = lagrange_coeffs(&self.grid.xs, g.x(i));
                let mut acc = 0.0;
                for b in 0..cy {
                    let mut row = 0.0;
                    for a in 0..cx {
                        row += wx[a] * field.values[self.grid.idx(sx + a, sy + b, k0)];
                    }
                    acc += wy[b] * row;
                }
                values[g.idx(i, j)] = acc;
                valid[g.idx(i, j)] = self
                    .geometry
                    .electrode_potential_at([g.x(i), g.y(j), 0.0], excitation)
                    .is_none();
            }
        }
        PotentialMap::new(g.clone(), values, excitation, self.geometry.hash()).with_validity(valid)
    }
}

struct SendPtr(*mut f64);
unsafe impl Send for SendPtr {}
unsafe impl Sync for SendPtr {}

impl SendPtr {
    fn get(&self) -> *mut f64 {
        self.0
    }
}

fn harmonic(a: f64, b: f64) -> f64 {
    2.0 * a * b / (a + b)
}

fn electrode_role(geometry: &GeometrySpec, p: [f64; 3]) -> Option<u8> {
    for e in &geometry.electrodes {
        if e.shape.contains(p) {
            return Some(match e.role {
                crate::geometry::ElectrodeRole::RfPair => ROLE_RF,
                crate::geometry::ElectrodeRole::EndcapLeft => ROLE_EC_LEFT,
                crate::geometry::ElectrodeRole::EndcapRight => ROLE_EC_RIGHT,
                crate::geometry::ElectrodeRole::Ground => ROLE_GROUND,
            });
        }
    }
    None
}

fn dirichlet_value(role: u8, drive: &Drive) -> f64 {
    match role {
        ROLE_RF => drive.rf_volts,
        ROLE_EC_LEFT => drive.ec_left_volts,
        ROLE_EC_RIGHT => drive.ec_right_volts,
        _ => 0.0,
    }
}

fn coarsen_axis(axis: &[f64]) -> Vec<f64> {
    let mut v: Vec<f64> = axis.iter().step_by(2).cloned().collect();
    let last = *axis.last().expect("non-empty axis");
    if (v.last().copied().unwrap_or(f64::NAN) - last).abs() > 1e-18 {
        v.push(last);
    }
    v
}

fn trilinear(field: &Field3, p: [f64; 3]) -> f64 {
    let g = &field.grid;
    let z = if g.half_z { p[2].abs() } else { p[2] };
    let (i, tx) = bracket(&g.xs, p[0]);
    let (j, ty) = bracket(&g.ys, p[1]);
    let (k, tz) = bracket(&g.zs, z);
    let mut acc = 0.0;
    for (dk, wkz) in [(0, 1.0 - tz), (1, tz)] {
        for (dj, wjy) in [(0, 1.0 - ty), (1, ty)] {
            for (di, wix) in [(0, 1.0 - tx), (1, tx)] {
                acc += wkz * wjy * wix * field.values[g.idx(i + di, j + dj, k + dk)];
            }
        }
    }
    acc
}

fn bracket(coords: &[f64], x: f64) -> (usize, f64) {
    let n = coords.len();
    let cell = coords.partition_point(|&c| c <= x).clamp(1, n - 1) - 1;
    let t = ((x - coords[cell]) / (coords[cell + 1] - coords[cell])).clamp(0.0, 1.0);
    (cell, t)
}

/// Deposits the charge of one surface descriptor onto grid nodes.
///
/// The surface is tiled into quadrature patches about a third of the fine
/// grid spacing across; each patch's charge (sigma x area) is assigned to the
/// eight surrounding nodes with trilinear weights. Patches outside the domain
/// (a fiber extending past the grounded box) are dropped.
fn deposit_surface(grid: &Grid3, rhs: &mut [f64], surface: &ChargedSurface, sigma: f64, fine_step: f64) {
    if sigma == 0.0 {
        return;
    }
    let s = fine_step / 3.0;
    match surface {
        ChargedSurface::FacetDisk { center, radius, .. } => {
            let n_r = (radius / s).ceil() as usize;
            let dr = radius / n_r as f64;
            for m in 0..n_r {
                let r_in = m as f64 * dr;
                let r_out = r_in + dr;
                let r_mid = 0.5 * (r_in + r_out);
                let n_theta = ((2.0 * std::f64::consts::PI * r_mid / s).ceil() as usize).max(8);
                let dtheta = 2.0 * std::f64::consts::PI / n_theta as f64;
                let q = sigma * 0.5 * (r_out * r_out - r_in * r_in) * dtheta;
                for t in 0..n_theta {
                    let theta = (t as f64 + 0.5) * dtheta;
                    let p = [
                        center[0] + r_mid * theta.cos(),
                        center[1],
                        center[2] + r_mid * theta.sin(),
                    ];
                    cic_deposit(grid, rhs, p, q);
                }
            }
        }
        ChargedSurface::SideShell { center_xz, radius, y0, y1, .. } => {
            let y_lo = y0.max(grid.ys[0]);
            let y_hi = y1.min(*grid.ys.last().expect("y axis"));
            if y_hi <= y_lo {
                return;
            }
            let n_theta = ((2.0 * std::f64::consts::PI * radius / s).ceil() as usize).max(16);
            let dtheta = 2.0 * std::f64::consts::PI / n_theta as f64;
            // March along y in steps tied to the local axis spacing.
            let mut y = y_lo;
            while y < y_hi {
                let cell = grid.ys.partition_point(|&c| c <= y).clamp(1, grid.ys.len() - 1) - 1;
                let local = grid.ys[cell + 1] - grid.ys[cell];
                let dy = (local / 3.0).min(y_hi - y).max(1e-12);
                let y_mid = y + 0.5 * dy;
                let q = sigma * radius * dtheta * dy;
                for t in 0..n_theta {
                    let theta = (t as f64 + 0.5) * dtheta;
                    let p = [
                        center_xz[0] + radius * theta.cos(),
                        y_mid,
                        center_xz[1] + radius * theta.sin(),
                    ];
                    cic_deposit(grid, rhs, p, q);
                }
                y += dy;
            }
        }
    }
}

/// Trilinear (cloud-in-cell) assignment of one point charge to the
/// surrounding nodes. On the half-domain, charge below the mirror plane is
/// folded: only the share landing on the z = 0 plane is credited, matching
/// the full-domain equations restricted to z >= 0.
fn cic_deposit(grid: &Grid3, rhs: &mut [f64], p: [f64; 3], q: f64) {
    let [x, y, z] = p;
    if x < grid.xs[0] || x > *grid.xs.last().expect("x axis") {
        return;
    }
    if y < grid.ys[0] || y > *grid.ys.last().expect("y axis") {
        return;
    }
    let mirrored = grid.half_z && z < 0.0;
    let z_eff = if mirrored { -z } else { z };
    if z_eff > *grid.zs.last().expect("z axis") {
        return;
    }
    if !grid.half_z && z < grid.zs[0] {
        return;
    }
    let (i, tx) = bracket(&grid.xs, x);
    let (j, ty) = bracket(&grid.ys, y);
    let (k, tz) = bracket(&grid.zs, z_eff);
    for (dk, wkz) in [(0usize, 1.0 - tz), (1, tz)] {
        if mirrored && k + dk != 0 {
            continue;
        }
        for (dj, wjy) in [(0usize, 1.0 - ty), (1, ty)] {
            for (di, wix) in [(0usize, 1.0 - tx), (1, tx)] {
                let idx = grid.idx(i + di, j + dj, k + dk);
                rhs[idx] += q * wkz * wjy * wix;
            }
        }
    }
}

/// Solves all seven unit bases of a two-fiber geometry.
pub fn solve_all_bases(
    solver: &BasisSolver,
) -> Result<(crate::composer::BasisSet, Vec<SolveReport>)> {
    let mut reports = Vec::with_capacity(7);
    let mut run = |e: Excitation| -> Result<PotentialMap> {
        let (map, report) = solver.solve_basis(e)?;
        log::info!(
            "basis {} converged in {} sweeps (residual {:.2e}, {:.2}s, {} nodes)",
            report.excitation,
            report.iterations,
            report.residual,
            report.wall_seconds,
            report.nodes
        );
        reports.push(report);
        Ok(map)
    };
    let rf = run(Excitation::RfUnit)?;
    let ec_left = run(Excitation::EcLeftUnit)?;
    let ec_right = run(Excitation::EcRightUnit)?;
    let m_facet = run(Excitation::ChargeUnit(FiberLabel::M, SurfaceRegion::Facet))?;
    let m_side = run(Excitation::ChargeUnit(FiberLabel::M, SurfaceRegion::Side))?;
    let p_facet = run(Excitation::ChargeUnit(FiberLabel::P, SurfaceRegion::Facet))?;
    let p_side = run(Excitation::ChargeUnit(FiberLabel::P, SurfaceRegion::Side))?;
    Ok((
        crate::composer::BasisSet { rf, ec_left, ec_right, m_facet, m_side, p_facet, p_side },
        reports,
    ))
}

/// Geometry for validating charge deposition against the free-space oracle:
/// a single fiber with vacuum permittivity, no electrodes, and a grounded box
/// far enough away that image contributions stay below the comparison
/// tolerance.
pub fn free_space_validation_geometry(d: f64, box_half_extent: f64) -> GeometrySpec {
    use crate::geometry::*;
    let trap = TrapConfig::default();
    let spec = FiberSpec {
        label: FiberLabel::P,
        cladding_diameter: 230e-6,
        length: 1.2e-3,
        relative_permittivity: 1.0,
    };
    let placement = FiberPlacement { d, x_offset: 0.0, z_offset: 0.0, side: FiberSide::Below };
    let radius = spec.radius();
    let facet_y = -d;
    GeometrySpec {
        trap,
        dims: ElectrodeDims { domain_half_extent: box_half_extent, ..Default::default() },
        electrodes: Vec::new(),
        fibers: vec![(spec, placement.clone())],
        bodies: vec![FiberBody {
            label: FiberLabel::P,
            center_xz: [0.0, 0.0],
            radius,
            y_min: -d - 1.2e-3,
            y_max: facet_y,
            relative_permittivity: 1.0,
        }],
        surfaces: vec![
            ChargedSurface::FacetDisk { label: FiberLabel::P, center: [0.0, facet_y, 0.0], radius },
            ChargedSurface::SideShell {
                label: FiberLabel::P,
                center_xz: [0.0, 0.0],
                radius,
                y0: -d - 1.2e-3,
                y1: facet_y,
            },
        ],
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::consts::UM;
    use crate::geometry::{build_geometry, standard_fibers, ElectrodeDims, TrapConfig};

    fn small_solver(half_z: bool) -> BasisSolver {
        let trap = TrapConfig::default();
        let fibers = standard_fibers(500.0 * UM, 1600.0 * UM);
        let geometry = build_geometry(&trap, &fibers, &ElectrodeDims::default()).unwrap();
        let config = SolverConfig { allow_half_z: half_z, ..SolverConfig::coarse_tier() };
        BasisSolver::new(&geometry, &config, MapGrid::centered(400e-6, 250e-6, 10e-6)).unwrap()
    }

    #[test]
    fn rf_basis_has_unit_blades_and_grounded_rest() {
        let solver = small_solver(true);
        let (field, report) = solver.solve_drive_3d(&Drive::unit(Excitation::RfUnit)).unwrap();
        assert!(report.converged);
        let g = &solver.grid;
        let geom = solver.geometry();
        let mut checked_rf = 0;
        let mut checked_gnd = 0;
        for k in 0..g.nz() {
            for j in 0..g.ny() {
                for i in 0..g.nx() {
                    let p = g.point(i, j, k);
                    if let Some(v) = geom.electrode_potential_at(p, Excitation::RfUnit) {
                        let got = field.values[g.idx(i, j, k)];
                        assert_eq!(got, v);
                        if v == 1.0 {
                            checked_rf += 1;
                        } else {
                            checked_gnd += 1;
                        }
                    }
                }
            }
        }
        assert!(checked_rf > 10 && checked_gnd > 10);
        // Interior values stay within the Dirichlet bounds.
        let center = field.sample([0.0, 0.0, 0.0]);
        assert!(center > 0.0 && center < 1.0);
    }

    #[test]
    fn half_and_full_domain_solutions_agree() {
        let half = small_solver(true);
        let full = small_solver(false);
        let drive = Drive::unit(Excitation::ChargeUnit(FiberLabel::P, SurfaceRegion::Facet));
        let (fh, _) = half.solve_drive_3d(&drive).unwrap();
        let (ff, _) = full.solve_drive_3d(&drive).unwrap();
        let scale = ff
            .values
            .iter()
            .cloned()
            .fold(0.0f64, |a, b| a.max(b.abs()))
            .max(1e-12);
        for &(x, y, z) in
            &[(0.0, 0.0, 0.0), (50.0, -100.0, 30.0), (-120.0, 200.0, 0.0), (0.0, -400.0, 60.0)]
        {
            let p = [x * UM, y * UM, z * UM];
            let a = fh.sample(p);
            let b = ff.sample(p);
            assert!(
                (a - b).abs() / scale < 5e-5,
                "half/full mismatch at {p:?}: {a} vs {b}"
            );
        }
    }

    #[test]
    fn superposition_of_drives() {
        let solver = small_solver(true);
        let d1 = Drive { ec_left_volts: 1.0, ..Default::default() };
        let d2 = Drive { ec_right_volts: 1.0, ..Default::default() };
        let both = Drive { ec_left_volts: 1.0, ec_right_volts: 1.0, ..Default::default() };
        let (f1, _) = solver.solve_drive_3d(&d1).unwrap();
        let (f2, _) = solver.solve_drive_3d(&d2).unwrap();
        let (f12, _) = solver.solve_drive_3d(&both).unwrap();
        let scale = f12.values.iter().cloned().fold(0.0f64, |a, b| a.max(b.abs()));
        let mut worst = 0.0f64;
        for idx in 0..f12.values.len() {
            worst = worst.max((f1.values[idx] + f2.values[idx] - f12.values[idx]).abs());
        }
        assert!(worst / scale < 2.0 * solver.config.tolerance * 100.0,
            "superposition violated: {worst:.3e} on scale {scale:.3e}");
    }

    #[test]
    fn linearity_in_drive_voltage() {
        let solver = small_solver(true);
        let single = Drive { ec_left_volts: 1.0, ..Default::default() };
        let double = Drive { ec_left_volts: 2.0, ..Default::default() };
        let (f1, _) = solver.solve_drive_3d(&single).unwrap();
        let (f2, _) = solver.solve_drive_3d(&double).unwrap();
        let scale = f2.values.iter().cloned().fold(0.0f64, |a, b| a.max(b.abs()));
        let mut worst = 0.0f64;
        for idx in 0..f2.values.len() {
            worst = worst.max((2.0 * f1.values[idx] - f2.values[idx]).abs());
        }
        assert!(worst / scale < 1e-5);
    }

    #[test]
    fn deposit_conserves_charge_in_domain() {
        let solver = small_solver(false);
        let g = &solver.grid;
        let mut rhs = vec![0.0; g.len()];
        let surface = &solver.geometry().surfaces[0]; // fiber M facet at +500 um
        deposit_surface(g, &mut rhs, surface, E_PER_UM2, solver.config.fine_step);
        let total: f64 = rhs.iter().sum();
        let expected = E_PER_UM2 * surface.area();
        assert!((total - expected).abs() / expected < 1e-9);
    }

    #[test]
    fn charge_basis_rejects_missing_fiber() {
        let trap = TrapConfig::default();
        let fibers = vec![standard_fibers(500.0 * UM, 1600.0 * UM)[0].clone()];
        let geometry = build_geometry(&trap, &fibers, &ElectrodeDims::default()).unwrap();
        let solver = BasisSolver::new(
            &geometry,
            &SolverConfig::coarse_tier(),
            MapGrid::centered(400e-6, 250e-6, 10e-6),
        )
        .unwrap();
        let err = solver
            .solve_basis(Excitation::ChargeUnit(FiberLabel::P, SurfaceRegion::Facet))
            .unwrap_err();
        assert!(matches!(err, Error::UnknownLabel(_)));
    }
}
