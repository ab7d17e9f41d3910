//! Run configuration: a human-readable TOML file with nested sections.
//! Lengths in µm (mm where noted), voltages in V, frequencies in Hz/kHz,
//! densities in e/µm². Parsing converts everything to internal SI and
//! validates invariants.

use crate::composer::EndcapVoltages;
use crate::consts::{khz_to_omega, ATOMIC_MASS_UNIT, CA40_ION_MASS, ELEMENTARY_CHARGE, MM, UM};
use crate::error::{Error, Result};
use crate::geometry::{
    build_geometry, ChargeState, ElectrodeDims, FiberLabel, FiberPlacement, FiberSpec,
    GeometrySpec, TrapConfig,
};
use crate::grid::MapGrid;
use crate::landscape::{ClassifyParams, WellSelection};
use crate::patch::default_position_error_breakpoints;
use crate::solver::SolverConfig;
use crate::synth::{CameraModel, NoiseModel, PositionerModel};
use serde::Deserialize;
use std::path::Path;

#[derive(Debug, Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    trap: Option<RawTrap>,
    electrodes: Option<RawElectrodes>,
    fibers: Option<RawFibers>,
    solver: Option<RawSolver>,
    map: Option<RawMap>,
    scan: Option<RawScan>,
    charges: Option<RawCharges>,
    inference: Option<RawInference>,
    noise: Option<RawNoise>,
    camera: Option<RawCamera>,
    positioner: Option<RawPositioners>,
}

#[derive(Debug, Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct RawTrap {
    ion_electrode_distance_um: Option<f64>,
    endcap_separation_mm: Option<f64>,
    blade_scale: Option<f64>,
    rf_amplitude_v: Option<f64>,
    /// Ordinary drive frequency in Hz; the angular frequency is 2*pi times this.
    rf_frequency_hz: Option<f64>,
    reference_voltage_v: Option<f64>,
    endcap_left_v: Option<f64>,
    endcap_right_v: Option<f64>,
    ion_mass_amu: Option<f64>,
    ion_charge_e: Option<f64>,
    endcap_voltage_scale: Option<f64>,
}

#[derive(Debug, Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct RawElectrodes {
    blade_half_length_um: Option<f64>,
    blade_half_width_um: Option<f64>,
    blade_depth_um: Option<f64>,
    ground_bore_radius_um: Option<f64>,
    ground_blade_standoff_um: Option<f64>,
    endcap_inner_radius_um: Option<f64>,
    endcap_outer_radius_um: Option<f64>,
    endcap_thickness_um: Option<f64>,
    comp_rod_offset_um: Option<f64>,
    comp_rod_radius_um: Option<f64>,
    comp_rod_half_length_um: Option<f64>,
    domain_half_extent_um: Option<f64>,
}

#[derive(Debug, Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct RawFibers {
    #[serde(rename = "M")]
    m: Option<RawFiber>,
    #[serde(rename = "P")]
    p: Option<RawFiber>,
}

#[derive(Debug, Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct RawFiber {
    cladding_diameter_um: Option<f64>,
    length_mm: Option<f64>,
    relative_permittivity: Option<f64>,
    d_um: Option<f64>,
    x_offset_um: Option<f64>,
    z_offset_um: Option<f64>,
}

#[derive(Debug, Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct RawSolver {
    /// "production" (10 µm), "test" (15 µm), or "coarse" (30 µm).
    tier: Option<String>,
    fine_step_um: Option<f64>,
    fine_half_extent_um: Option<[f64; 3]>,
    stretch_ratio: Option<f64>,
    tolerance: Option<f64>,
    max_sweeps: Option<usize>,
    omega: Option<f64>,
    allow_half_z: Option<bool>,
    cascade: Option<bool>,
}

#[derive(Debug, Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct RawMap {
    half_x_um: Option<f64>,
    half_y_um: Option<f64>,
    spacing_um: Option<f64>,
}

#[derive(Debug, Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct RawScan {
    moving: Option<String>,
    d_values_um: Option<Vec<f64>>,
}

#[derive(Debug, Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct RawCharges {
    m_facet: Option<f64>,
    m_side: Option<f64>,
    p_facet: Option<f64>,
    p_side: Option<f64>,
}

#[derive(Debug, Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct RawInference {
    sigma_f_range: Option<[f64; 2]>,
    sigma_s_range: Option<[f64; 2]>,
    grid_step: Option<f64>,
    well_selection: Option<String>,
    x_offsets_um: Option<Vec<f64>>,
    position_sim_err_um: Option<f64>,
    frequency_sim_err_khz: Option<f64>,
    frequency_recon_err_khz: Option<f64>,
    position_recon_breakpoints_um: Option<Vec<[f64; 2]>>,
}

#[derive(Debug, Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct RawNoise {
    position_sigma_um: Option<f64>,
    frequency_sigma_khz: Option<f64>,
    seed: Option<u64>,
}

#[derive(Debug, Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct RawCamera {
    pixel_pitch_um: Option<f64>,
    pitch_err_um: Option<f64>,
    centroid_precision_px: Option<f64>,
    field_of_view_mm: Option<f64>,
}

#[derive(Debug, Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct RawPositioners {
    #[serde(rename = "M")]
    m: Option<RawPositioner>,
    #[serde(rename = "P")]
    p: Option<RawPositioner>,
}

#[derive(Debug, Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct RawPositioner {
    step_out_um: Option<f64>,
    step_in_um: Option<f64>,
    step_err_um: Option<f64>,
    base_uncertainty_um: Option<f64>,
    far_uncertainty_um: Option<f64>,
    far_threshold_mm: Option<f64>,
}

/// Fully resolved run configuration in SI units.
#[derive(Debug, Clone)]
pub struct ProjectConfig {
    pub trap: TrapConfig,
    pub dims: ElectrodeDims,
    pub fiber_m: (FiberSpec, FiberPlacement),
    pub fiber_p: (FiberSpec, FiberPlacement),
    pub solver: SolverConfig,
    pub map: MapGrid,
    pub moving: FiberLabel,
    pub d_values: Vec<f64>,
    pub charges: ChargeState,
    pub inference: InferenceConfig,
    pub noise: NoiseModel,
    pub camera: CameraModel,
    pub positioner_m: PositionerModel,
    pub positioner_p: PositionerModel,
}

#[derive(Debug, Clone)]
pub struct InferenceConfig {
    pub sigma_f_range: (f64, f64),
    pub sigma_s_range: (f64, f64),
    pub grid_step: f64,
    pub selection: WellSelection,
    pub x_offsets: Vec<f64>,
    pub position_sim_err: f64,
    pub frequency_sim_err: f64,
    pub frequency_recon_err: f64,
    pub position_recon_breakpoints: Vec<(f64, f64)>,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        InferenceConfig {
            sigma_f_range: (-15.0, 60.0),
            sigma_s_range: (-15.0, 60.0),
            grid_step: 1.0,
            selection: WellSelection::NegativeX,
            x_offsets: vec![0.0, 5.0 * UM, 10.0 * UM, 15.0 * UM],
            position_sim_err: 0.5 * UM,
            frequency_sim_err: khz_to_omega(2.0),
            frequency_recon_err: khz_to_omega(4.8),
            position_recon_breakpoints: default_position_error_breakpoints(),
        }
    }
}

impl Default for ProjectConfig {
    fn default() -> Self {
        let fibers = crate::geometry::standard_fibers(2000.0 * UM, 1600.0 * UM);
        ProjectConfig {
            trap: TrapConfig::default(),
            dims: ElectrodeDims::default(),
            fiber_m: fibers[0].clone(),
            fiber_p: fibers[1].clone(),
            solver: SolverConfig::default(),
            map: crate::solver::default_map_grid(),
            moving: FiberLabel::P,
            d_values: vec![
                1600.0 * UM,
                1400.0 * UM,
                1200.0 * UM,
                1000.0 * UM,
                850.0 * UM,
                700.0 * UM,
                600.0 * UM,
                500.0 * UM,
                400.0 * UM,
                300.0 * UM,
            ],
            charges: ChargeState::neutral(),
            inference: InferenceConfig::default(),
            noise: NoiseModel::default(),
            camera: CameraModel::default(),
            positioner_m: PositionerModel::fiber_m(),
            positioner_p: PositionerModel::fiber_p(),
        }
    }
}

impl ProjectConfig {
    pub fn from_toml_str(raw: &str) -> Result<Self> {
        let parsed: RawConfig =
            toml::from_str(raw).map_err(|e| Error::Config(format!("config parse: {e}")))?;
        Self::from_raw(parsed)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let raw = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&raw)
    }

    fn from_raw(raw: RawConfig) -> Result<Self> {
        let mut cfg = ProjectConfig::default();

        if let Some(t) = raw.trap {
            let d = &mut cfg.trap;
            if let Some(v) = t.ion_electrode_distance_um {
                d.ion_electrode_distance = v * UM;
            }
            if let Some(v) = t.endcap_separation_mm {
                d.endcap_separation = v * MM;
            }
            if let Some(v) = t.blade_scale {
                d.blade_scale = v;
            }
            if let Some(v) = t.rf_amplitude_v {
                d.rf_amplitude = v;
            }
            if let Some(v) = t.rf_frequency_hz {
                d.rf_angular_frequency = 2.0 * std::f64::consts::PI * v;
            }
            if let Some(v) = t.reference_voltage_v {
                d.reference_voltage = v;
            }
            if let Some(v) = t.endcap_left_v {
                d.endcap_left = v;
            }
            if let Some(v) = t.endcap_right_v {
                d.endcap_right = v;
            }
            if let Some(v) = t.ion_mass_amu {
                d.ion_mass = v * ATOMIC_MASS_UNIT;
            } else {
                d.ion_mass = CA40_ION_MASS;
            }
            if let Some(v) = t.ion_charge_e {
                d.ion_charge = v * ELEMENTARY_CHARGE;
            }
            if let Some(v) = t.endcap_voltage_scale {
                d.endcap_voltage_scale = v;
            }
        }
        cfg.trap.validate()?;

        if let Some(e) = raw.electrodes {
            let d = &mut cfg.dims;
            let um = |v: f64| v * UM;
            if let Some(v) = e.blade_half_length_um {
                d.blade_half_length = um(v);
            }
            if let Some(v) = e.blade_half_width_um {
                d.blade_half_width = um(v);
            }
            if let Some(v) = e.blade_depth_um {
                d.blade_depth = um(v);
            }
            if let Some(v) = e.ground_bore_radius_um {
                d.ground_bore_radius = um(v);
            }
            if let Some(v) = e.ground_blade_standoff_um {
                d.ground_blade_standoff = um(v);
            }
            if let Some(v) = e.endcap_inner_radius_um {
                d.endcap_inner_radius = um(v);
            }
            if let Some(v) = e.endcap_outer_radius_um {
                d.endcap_outer_radius = um(v);
            }
            if let Some(v) = e.endcap_thickness_um {
                d.endcap_thickness = um(v);
            }
            if let Some(v) = e.comp_rod_offset_um {
                d.comp_rod_offset = um(v);
            }
            if let Some(v) = e.comp_rod_radius_um {
                d.comp_rod_radius = um(v);
            }
            if let Some(v) = e.comp_rod_half_length_um {
                d.comp_rod_half_length = um(v);
            }
            if let Some(v) = e.domain_half_extent_um {
                d.domain_half_extent = um(v);
            }
        }

        if let Some(f) = raw.fibers {
            if let Some(m) = f.m {
                apply_fiber(&mut cfg.fiber_m, &m);
            }
            if let Some(p) = f.p {
                apply_fiber(&mut cfg.fiber_p, &p);
            }
        }

        if let Some(s) = raw.solver {
            if let Some(tier) = &s.tier {
                cfg.solver = match tier.as_str() {
                    "production" => SolverConfig::production(),
                    "test" => SolverConfig::test_tier(),
                    "coarse" => SolverConfig::coarse_tier(),
                    other => {
                        return Err(Error::Config(format!(
                            "unknown solver tier {other:?} (production|test|coarse)"
                        )))
                    }
                };
            }
            if let Some(v) = s.fine_step_um {
                cfg.solver.fine_step = v * UM;
            }
            if let Some(v) = s.fine_half_extent_um {
                cfg.solver.fine_half_extent = [v[0] * UM, v[1] * UM, v[2] * UM];
            }
            if let Some(v) = s.stretch_ratio {
                cfg.solver.stretch_ratio = v;
            }
            if let Some(v) = s.tolerance {
                cfg.solver.tolerance = v;
            }
            if let Some(v) = s.max_sweeps {
                cfg.solver.max_sweeps = v;
            }
            if let Some(v) = s.omega {
                cfg.solver.omega = Some(v);
            }
            if let Some(v) = s.allow_half_z {
                cfg.solver.allow_half_z = v;
            }
            if let Some(v) = s.cascade {
                cfg.solver.cascade = v;
            }
        }
        cfg.solver.validate()?;

        if let Some(m) = raw.map {
            let half_x = m.half_x_um.unwrap_or(500.0) * UM;
            let half_y = m.half_y_um.unwrap_or(300.0) * UM;
            let spacing = m.spacing_um.unwrap_or(5.0) * UM;
            if spacing <= 0.0 {
                return Err(Error::Config("map spacing must be positive".into()));
            }
            cfg.map = MapGrid::centered(half_x, half_y, spacing);
        }

        if let Some(s) = raw.scan {
            if let Some(moving) = &s.moving {
                cfg.moving = moving.parse()?;
            }
            if let Some(ds) = s.d_values_um {
                cfg.d_values = ds.into_iter().map(|d| d * UM).collect();
            }
        }

        if let Some(c) = raw.charges {
            cfg.charges = ChargeState {
                m_facet: c.m_facet.unwrap_or(0.0),
                m_side: c.m_side.unwrap_or(0.0),
                p_facet: c.p_facet.unwrap_or(0.0),
                p_side: c.p_side.unwrap_or(0.0),
                reference: 1.0,
            };
            cfg.charges.validate()?;
        }

        if let Some(i) = raw.inference {
            let d = &mut cfg.inference;
            if let Some(v) = i.sigma_f_range {
                d.sigma_f_range = (v[0], v[1]);
            }
            if let Some(v) = i.sigma_s_range {
                d.sigma_s_range = (v[0], v[1]);
            }
            if let Some(v) = i.grid_step {
                d.grid_step = v;
            }
            if let Some(sel) = &i.well_selection {
                d.selection = match sel.as_str() {
                    "negative_x" => WellSelection::NegativeX,
                    "positive_x" => WellSelection::PositiveX,
                    "deepest" => WellSelection::Deepest,
                    other => {
                        return Err(Error::Config(format!(
                            "unknown well selection {other:?} (negative_x|positive_x|deepest)"
                        )))
                    }
                };
            }
            if let Some(v) = i.x_offsets_um {
                d.x_offsets = v.into_iter().map(|x| x * UM).collect();
            }
            if let Some(v) = i.position_sim_err_um {
                d.position_sim_err = v * UM;
            }
            if let Some(v) = i.frequency_sim_err_khz {
                d.frequency_sim_err = khz_to_omega(v);
            }
            if let Some(v) = i.frequency_recon_err_khz {
                d.frequency_recon_err = khz_to_omega(v);
            }
            if let Some(v) = i.position_recon_breakpoints_um {
                d.position_recon_breakpoints =
                    v.into_iter().map(|[x, e]| (x * UM, e * UM)).collect();
            }
        }

        if let Some(n) = raw.noise {
            if let Some(v) = n.position_sigma_um {
                cfg.noise.position_sigma = v * UM;
            }
            if let Some(v) = n.frequency_sigma_khz {
                cfg.noise.frequency_sigma = khz_to_omega(v);
            }
            if let Some(v) = n.seed {
                cfg.noise.seed = v;
            }
        }
        cfg.noise.validate()?;

        if let Some(c) = raw.camera {
            if let Some(v) = c.pixel_pitch_um {
                cfg.camera.pixel_pitch = v * UM;
            }
            if let Some(v) = c.pitch_err_um {
                cfg.camera.pitch_uncertainty = v * UM;
            }
            if let Some(v) = c.centroid_precision_px {
                cfg.camera.centroid_precision_px = v;
            }
            if let Some(v) = c.field_of_view_mm {
                cfg.camera.field_of_view = v * MM;
            }
        }
        cfg.camera.validate()?;

        if let Some(p) = raw.positioner {
            if let Some(m) = p.m {
                apply_positioner(&mut cfg.positioner_m, &m);
            }
            if let Some(pp) = p.p {
                apply_positioner(&mut cfg.positioner_p, &pp);
            }
        }
        cfg.positioner_m.validate()?;
        cfg.positioner_p.validate()?;

        Ok(cfg)
    }

    pub fn positioner(&self, label: FiberLabel) -> &PositionerModel {
        match label {
            FiberLabel::M => &self.positioner_m,
            FiberLabel::P => &self.positioner_p,
        }
    }

    pub fn endcaps(&self) -> EndcapVoltages {
        EndcapVoltages { left: self.trap.endcap_left, right: self.trap.endcap_right }
    }

    pub fn classify_params(&self) -> ClassifyParams {
        ClassifyParams::default()
    }

    /// Geometry with the moving fiber at distance `d` (and optionally a
    /// transverse offset override); the other fiber keeps its configured
    /// placement.
    pub fn geometry_for(
        &self,
        moving: FiberLabel,
        d: f64,
        x_offset: Option<f64>,
    ) -> Result<GeometrySpec> {
        let mut fiber_m = self.fiber_m.clone();
        let mut fiber_p = self.fiber_p.clone();
        match moving {
            FiberLabel::M => {
                fiber_m.1.d = d;
                if let Some(x) = x_offset {
                    fiber_m.1.x_offset = x;
                }
            }
            FiberLabel::P => {
                fiber_p.1.d = d;
                if let Some(x) = x_offset {
                    fiber_p.1.x_offset = x;
                }
            }
        }
        build_geometry(&self.trap, &[fiber_m, fiber_p], &self.dims)
    }

    /// Geometry with both fibers at their configured placements.
    pub fn geometry_configured(&self) -> Result<GeometrySpec> {
        build_geometry(
            &self.trap,
            &[self.fiber_m.clone(), self.fiber_p.clone()],
            &self.dims,
        )
    }
}

/// Solver-backed basis provider for one moving fiber, with optional
/// transverse-offset override (used by the position-offset sweep).
pub struct ConfigBasisProvider<'a> {
    pub config: &'a ProjectConfig,
    pub cache: &'a crate::cache::BasisCache,
    pub moving: FiberLabel,
    pub x_offset: Option<f64>,
}

impl crate::cache::BasisProvider for ConfigBasisProvider<'_> {
    fn bases_for(&self, d: f64) -> Result<std::sync::Arc<crate::composer::BasisSet>> {
        let geometry = self.config.geometry_for(self.moving, d, self.x_offset)?;
        let (set, reports) =
            self.cache.get_or_solve(&geometry, &self.config.solver, &self.config.map)?;
        for r in &reports {
            log::info!(
                "solved {} for d = {:.1} um: {} sweeps, residual {:.2e}, {:.2}s",
                r.excitation,
                d / UM,
                r.iterations,
                r.residual,
                r.wall_seconds
            );
        }
        Ok(set)
    }
}

/// Axial curvature (J/m²) of the neutral-fiber landscape at a reference
/// retraction, used as the baseline for the transition flatness rule.
pub fn neutral_axial_curvature(
    provider: &dyn crate::cache::BasisProvider,
    d_reference: f64,
    endcaps: &EndcapVoltages,
    trap: &TrapConfig,
) -> Result<f64> {
    let bases = provider.bases_for(d_reference)?;
    let phi =
        crate::composer::compose_total(&bases, endcaps, &ChargeState::neutral(), trap, None)?;
    let seed = crate::landscape::find_minimum_seed(&phi)?;
    let fit = crate::landscape::fit_paraboloid(&phi, seed, crate::landscape::DEFAULT_FIT_RADIUS)?;
    Ok(fit.c_minor)
}

fn apply_fiber(target: &mut (FiberSpec, FiberPlacement), raw: &RawFiber) {
    if let Some(v) = raw.cladding_diameter_um {
        target.0.cladding_diameter = v * UM;
    }
    if let Some(v) = raw.length_mm {
        target.0.length = v * MM;
    }
    if let Some(v) = raw.relative_permittivity {
        target.0.relative_permittivity = v;
    }
    if let Some(v) = raw.d_um {
        target.1.d = v * UM;
    }
    if let Some(v) = raw.x_offset_um {
        target.1.x_offset = v * UM;
    }
    if let Some(v) = raw.z_offset_um {
        target.1.z_offset = v * UM;
    }
}

fn apply_positioner(target: &mut PositionerModel, raw: &RawPositioner) {
    if let Some(v) = raw.step_out_um {
        target.step_out = v * UM;
    }
    if let Some(v) = raw.step_in_um {
        target.step_in = v * UM;
    }
    if let Some(v) = raw.step_err_um {
        target.step_uncertainty = v * UM;
    }
    if let Some(v) = raw.base_uncertainty_um {
        target.base_uncertainty = v * UM;
    }
    if let Some(v) = raw.far_uncertainty_um {
        target.far_uncertainty = v * UM;
    }
    if let Some(v) = raw.far_threshold_mm {
        target.far_threshold = v * MM;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn defaults_parse_from_empty_config() {
        let cfg = ProjectConfig::from_toml_str("").unwrap();
        assert_relative_eq!(cfg.trap.ion_electrode_distance, 270e-6);
        assert_eq!(cfg.moving, FiberLabel::P);
        assert_eq!(cfg.map.nx, 201);
    }

    #[test]
    fn full_config_round_trip() {
        let cfg = ProjectConfig::from_toml_str(
            r#"
[trap]
rf_amplitude_v = 111.0
rf_frequency_hz = 30.25e6
endcap_left_v = 1500.0
endcap_right_v = 1500.0

[fibers.P]
d_um = 900.0
x_offset_um = 10.0

[solver]
tier = "coarse"

[scan]
moving = "P"
d_values_um = [1600.0, 800.0, 400.0]

[charges]
p_facet = 4.0
p_side = 8.5

[inference]
well_selection = "negative_x"
sigma_f_range = [0.0, 10.0]

[noise]
seed = 7
"#,
        )
        .unwrap();
        assert_relative_eq!(
            cfg.trap.rf_angular_frequency,
            2.0 * std::f64::consts::PI * 30.25e6
        );
        assert_relative_eq!(cfg.fiber_p.1.d, 900e-6);
        assert_relative_eq!(cfg.fiber_p.1.x_offset, 10e-6);
        assert_eq!(cfg.d_values.len(), 3);
        assert_relative_eq!(cfg.charges.p_side, 8.5);
        assert_eq!(cfg.noise.seed, 7);
        assert_relative_eq!(cfg.solver.fine_step, 30e-6);
        assert_relative_eq!(cfg.inference.sigma_f_range.1, 10.0);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = ProjectConfig::from_toml_str("[trap]\nnot_a_key = 1.0\n").unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn geometry_for_moves_only_the_moving_fiber() {
        let cfg = ProjectConfig::default();
        let g = cfg.geometry_for(FiberLabel::P, 555e-6, Some(10e-6)).unwrap();
        let p = g.placement(FiberLabel::P).unwrap();
        assert_relative_eq!(p.d, 555e-6);
        assert_relative_eq!(p.x_offset, 10e-6);
        let m = g.placement(FiberLabel::M).unwrap();
        assert_relative_eq!(m.d, cfg.fiber_m.1.d);
    }
}
