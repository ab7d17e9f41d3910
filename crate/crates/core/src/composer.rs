//! Superposition of basis potentials into total potential-energy landscapes.

use crate::error::{Error, Result};
use crate::geometry::{ChargeState, Excitation, FiberLabel, SurfaceRegion, TrapConfig};
use crate::maps::{EnergyMap, PotentialMap};
use crate::patch::PatchPotential;
use serde::{Deserialize, Serialize};

/// The seven unit-excitation basis maps of one geometry.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BasisSet {
    pub rf: PotentialMap,
    pub ec_left: PotentialMap,
    pub ec_right: PotentialMap,
    pub m_facet: PotentialMap,
    pub m_side: PotentialMap,
    pub p_facet: PotentialMap,
    pub p_side: PotentialMap,
}

impl BasisSet {
    pub fn charge_map(&self, label: FiberLabel, region: SurfaceRegion) -> &PotentialMap {
        match (label, region) {
            (FiberLabel::M, SurfaceRegion::Facet) => &self.m_facet,
            (FiberLabel::M, SurfaceRegion::Side) => &self.m_side,
            (FiberLabel::P, SurfaceRegion::Facet) => &self.p_facet,
            (FiberLabel::P, SurfaceRegion::Side) => &self.p_side,
        }
    }

    pub fn maps(&self) -> [&PotentialMap; 7] {
        [
            &self.rf,
            &self.ec_left,
            &self.ec_right,
            &self.m_facet,
            &self.m_side,
            &self.p_facet,
            &self.p_side,
        ]
    }

    pub fn geometry_hash(&self) -> &str {
        &self.rf.geometry_hash
    }

    /// Checks excitation tags, shared grid, and shared geometry hash.
    pub fn validate(&self) -> Result<()> {
        let expected = [
            Excitation::RfUnit,
            Excitation::EcLeftUnit,
            Excitation::EcRightUnit,
            Excitation::ChargeUnit(FiberLabel::M, SurfaceRegion::Facet),
            Excitation::ChargeUnit(FiberLabel::M, SurfaceRegion::Side),
            Excitation::ChargeUnit(FiberLabel::P, SurfaceRegion::Facet),
            Excitation::ChargeUnit(FiberLabel::P, SurfaceRegion::Side),
        ];
        for (map, want) in self.maps().iter().zip(expected) {
            if map.excitation != want {
                return Err(Error::StaleBasis(format!(
                    "expected excitation {}, found {}",
                    want.tag(),
                    map.excitation.tag()
                )));
            }
        }
        let grid = &self.rf.grid;
        let hash = &self.rf.geometry_hash;
        for map in self.maps() {
            if &map.grid != grid {
                return Err(Error::StaleBasis("basis maps on different grids".into()));
            }
            if &map.geometry_hash != hash {
                return Err(Error::StaleBasis(format!(
                    "geometry hash mismatch: {} vs {}",
                    map.geometry_hash, hash
                )));
            }
        }
        Ok(())
    }
}

/// DC endcap voltages with the derived mean and difference.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct EndcapVoltages {
    pub left: f64,
    pub right: f64,
}

impl EndcapVoltages {
    pub fn symmetric(mean: f64) -> Self {
        EndcapVoltages { left: mean, right: mean }
    }

    pub fn from_mean_difference(mean: f64, difference: f64) -> Self {
        EndcapVoltages { left: mean + difference / 2.0, right: mean - difference / 2.0 }
    }

    pub fn mean(&self) -> f64 {
        0.5 * (self.left + self.right)
    }

    pub fn difference(&self) -> f64 {
        self.left - self.right
    }
}

/// Node-wise rf pseudopotential energy from the unit rf basis:
/// Phi = Q² V_rf² / (4 M Omega² V0²) |grad U_rf|², with the gradient taken in
/// the z = 0 plane (the z derivative vanishes there by symmetry).
pub fn pseudopotential(u_rf: &PotentialMap, trap: &TrapConfig) -> Result<EnergyMap> {
    if u_rf.excitation != Excitation::RfUnit {
        return Err(Error::StaleBasis(format!(
            "pseudopotential requires the rf_unit basis, found {}",
            u_rf.excitation.tag()
        )));
    }
    let q = trap.ion_charge;
    let coeff = q * q * trap.rf_amplitude * trap.rf_amplitude
        / (4.0
            * trap.ion_mass
            * trap.rf_angular_frequency
            * trap.rf_angular_frequency
            * trap.reference_voltage
            * trap.reference_voltage);
    let g = &u_rf.grid;
    let h = g.spacing;
    let mut values = vec![0.0; g.len()];
    for j in 0..g.ny {
        for i in 0..g.nx {
            let ux = d_axis(u_rf, i, j, h, true);
            let uy = d_axis(u_rf, i, j, h, false);
            values[g.idx(i, j)] = coeff * (ux * ux + uy * uy);
        }
    }
    Ok(EnergyMap {
        grid: g.clone(),
        values,
        geometry_hash: u_rf.geometry_hash.clone(),
        valid: u_rf.valid.clone(),
    })
}

/// Second-order finite difference along one axis: central in the interior,
/// one-sided at the map edges.
fn d_axis(map: &PotentialMap, i: usize, j: usize, h: f64, along_x: bool) -> f64 {
    let (n, at) = if along_x {
        (map.grid.nx, i)
    } else {
        (map.grid.ny, j)
    };
    let v = |t: usize| {
        if along_x {
            map.at(t, j)
        } else {
            map.at(i, t)
        }
    };
    if at == 0 {
        (-3.0 * v(0) + 4.0 * v(1) - v(2)) / (2.0 * h)
    } else if at == n - 1 {
        (3.0 * v(n - 1) - 4.0 * v(n - 2) + v(n - 3)) / (2.0 * h)
    } else {
        (v(at + 1) - v(at - 1)) / (2.0 * h)
    }
}

/// Total potential energy: pseudopotential plus endcap, charge, and patch
/// terms. Endcap voltages are multiplied by the calibration scale before
/// scaling the endcap bases; the patch term is constant in y.
pub fn compose_total(
    bases: &BasisSet,
    ec: &EndcapVoltages,
    charges: &ChargeState,
    trap: &TrapConfig,
    patch: Option<&PatchPotential>,
) -> Result<EnergyMap> {
    bases.validate()?;
    charges.validate()?;
    let q = trap.ion_charge;
    let v0 = trap.reference_voltage;
    let scale = trap.endcap_voltage_scale;

    let mut total = pseudopotential(&bases.rf, trap)?;
    axpy(&mut total.values, q * scale * ec.left / v0, &bases.ec_left.values);
    axpy(&mut total.values, q * scale * ec.right / v0, &bases.ec_right.values);

    for label in [FiberLabel::M, FiberLabel::P] {
        for region in [SurfaceRegion::Facet, SurfaceRegion::Side] {
            let sigma = charges.density(label, region);
            if sigma != 0.0 {
                let map = bases.charge_map(label, region);
                axpy(&mut total.values, q * sigma / charges.reference, &map.values);
            }
        }
    }

    if let Some(p) = patch {
        let g = &total.grid;
        let mut extrapolated = 0usize;
        for i in 0..g.nx {
            let (u, outside) = p.evaluate(g.x(i));
            if outside {
                extrapolated += 1;
            }
            let term = q * u;
            for j in 0..g.ny {
                total.values[g.idx(i, j)] += term;
            }
        }
        if extrapolated > 0 {
            log::warn!(
                "patch potential extrapolated (constant) at {extrapolated} of {} map columns",
                g.nx
            );
        }
    }
    Ok(total)
}

fn axpy(acc: &mut [f64], a: f64, x: &[f64]) {
    for (dst, src) in acc.iter_mut().zip(x.iter()) {
        *dst += a * src;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::MapGrid;
    use crate::maps::mapgen;
    use approx::assert_relative_eq;

    fn quad_grid() -> MapGrid {
        MapGrid::centered(300e-6, 200e-6, 5e-6)
    }

    fn unit_bases(hash: &str) -> BasisSet {
        let g = quad_grid();
        let r0 = 270e-6;
        let rf = mapgen::ideal_quadrupole(g.clone(), r0, 1.0, hash);
        let x0 = 2.55e-3;
        let ec_l = mapgen::harmonic_endcap(g.clone(), x0, 1.64e-3, 0.0, true, hash);
        let ec_r = mapgen::harmonic_endcap(g.clone(), x0, 1.64e-3, 0.0, false, hash);
        let charge = |label, region| {
            mapgen::from_fn(g.clone(), Excitation::ChargeUnit(label, region), hash, |_, _| 0.0)
        };
        BasisSet {
            rf,
            ec_left: ec_l,
            ec_right: ec_r,
            m_facet: charge(FiberLabel::M, SurfaceRegion::Facet),
            m_side: charge(FiberLabel::M, SurfaceRegion::Side),
            p_facet: charge(FiberLabel::P, SurfaceRegion::Facet),
            p_side: charge(FiberLabel::P, SurfaceRegion::Side),
        }
    }

    #[test]
    fn constant_rf_map_gives_zero_pseudopotential() {
        let g = quad_grid();
        let rf = mapgen::from_fn(g, Excitation::RfUnit, "h", |_, _| 0.4);
        let phi = pseudopotential(&rf, &TrapConfig::default()).unwrap();
        let max = phi.values.iter().cloned().fold(0.0f64, f64::max);
        assert!(max < 1e-30);
    }

    #[test]
    fn pseudopotential_requires_rf_tag() {
        let g = quad_grid();
        let not_rf = mapgen::from_fn(g, Excitation::EcLeftUnit, "h", |x, _| x);
        assert!(pseudopotential(&not_rf, &TrapConfig::default()).is_err());
    }

    #[test]
    fn quadrupole_pseudopotential_matches_secular_formula() {
        // For U = V0 (x² - y²) / (2 r0²), the pseudopotential is harmonic with
        // omega_r = Q V_rf / (sqrt(2) M Omega r0²).
        let trap = TrapConfig::default();
        let r0 = 270e-6;
        let rf = mapgen::ideal_quadrupole(quad_grid(), r0, 1.0, "h");
        let phi = pseudopotential(&rf, &trap).unwrap();

        let omega_expected = trap.ion_charge * trap.rf_amplitude
            / (std::f64::consts::SQRT_2 * trap.ion_mass * trap.rf_angular_frequency * r0 * r0);

        // Curvature probe along x at the center.
        let g = &phi.grid;
        let (ic, jc) = (g.nx / 2, g.ny / 2);
        let h = g.spacing;
        let curv = (phi.at(ic + 1, jc) - 2.0 * phi.at(ic, jc) + phi.at(ic - 1, jc)) / (h * h);
        let omega_measured = (curv / trap.ion_mass).sqrt();
        assert_relative_eq!(omega_measured, omega_expected, max_relative = 1e-6);
    }

    #[test]
    fn pseudopotential_scales_quadratically_with_rf_voltage() {
        let trap = TrapConfig::default();
        let trap2 = TrapConfig { rf_amplitude: 2.0 * trap.rf_amplitude, ..trap.clone() };
        let rf = mapgen::ideal_quadrupole(quad_grid(), 270e-6, 1.0, "h");
        let p1 = pseudopotential(&rf, &trap).unwrap();
        let p2 = pseudopotential(&rf, &trap2).unwrap();
        for (a, b) in p1.values.iter().zip(p2.values.iter()) {
            assert_relative_eq!(4.0 * a, *b, max_relative = 1e-12);
        }
    }

    #[test]
    fn compose_is_linear_in_charges() {
        let g = quad_grid();
        let mut bases = unit_bases("h");
        bases.p_facet =
            mapgen::from_fn(g.clone(), Excitation::ChargeUnit(FiberLabel::P, SurfaceRegion::Facet), "h", |x, y| {
                0.01 * (x * x - 0.3 * y * y) / 1e-8
            });
        bases.p_side =
            mapgen::from_fn(g, Excitation::ChargeUnit(FiberLabel::P, SurfaceRegion::Side), "h", |x, y| {
                0.02 * (x + y)
            });
        let trap = TrapConfig::default();
        let ec = EndcapVoltages::symmetric(1300.0);

        let zero = ChargeState::neutral();
        let one = ChargeState::neutral().with(FiberLabel::P, 2.0, 3.0);
        let two = ChargeState::neutral().with(FiberLabel::P, 4.0, 6.0);

        let phi0 = compose_total(&bases, &ec, &zero, &trap, None).unwrap();
        let phi1 = compose_total(&bases, &ec, &one, &trap, None).unwrap();
        let phi2 = compose_total(&bases, &ec, &two, &trap, None).unwrap();

        for idx in 0..phi0.values.len() {
            let d1 = phi1.values[idx] - phi0.values[idx];
            let d2 = phi2.values[idx] - phi0.values[idx];
            assert_relative_eq!(d2, 2.0 * d1, max_relative = 1e-9, epsilon = 1e-40);
        }
    }

    #[test]
    fn stale_hash_is_rejected() {
        let mut bases = unit_bases("h1");
        bases.p_side.geometry_hash = "h2".into();
        let err = compose_total(
            &bases,
            &EndcapVoltages::symmetric(1300.0),
            &ChargeState::neutral(),
            &TrapConfig::default(),
            None,
        )
        .unwrap_err();
        assert!(matches!(err, Error::StaleBasis(_)));
    }

    #[test]
    fn endcap_mean_difference_round_trip() {
        let ec = EndcapVoltages::from_mean_difference(1000.0, 40.0);
        assert_relative_eq!(ec.left, 1020.0);
        assert_relative_eq!(ec.right, 980.0);
        assert_relative_eq!(ec.mean(), 1000.0);
        assert_relative_eq!(ec.difference(), 40.0);
    }
}
