//! Declarative description of the trap, fibers, and simulation domain.
//!
//! The trap center is at the origin, the trap axis is x, and the fibers run
//! along y (fiber M above, fiber P below). The electrode set is built from
//! simplified primitives: an rf blade pair along ±z, a grounded blade pair
//! along ±y pierced by a bore that admits the fibers, hollow-cylinder endcaps
//! on the x axis, and grounded compensation rods. All dimensions are meters.

use crate::consts::{CA40_ION_MASS, ELEMENTARY_CHARGE, MM, SILICA_RELATIVE_PERMITTIVITY, UM};
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FiberLabel {
    M,
    P,
}

impl std::fmt::Display for FiberLabel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            FiberLabel::M => write!(f, "M"),
            FiberLabel::P => write!(f, "P"),
        }
    }
}

impl std::str::FromStr for FiberLabel {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "M" | "m" => Ok(FiberLabel::M),
            "P" | "p" => Ok(FiberLabel::P),
            other => Err(Error::UnknownLabel(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SurfaceRegion {
    Facet,
    Side,
}

impl std::fmt::Display for SurfaceRegion {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SurfaceRegion::Facet => write!(f, "f"),
            SurfaceRegion::Side => write!(f, "s"),
        }
    }
}

/// Which unit excitation a basis solve applies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Excitation {
    /// 1 V on the rf blade pair, everything else grounded, no charges.
    RfUnit,
    /// 1 V on the left endcap.
    EcLeftUnit,
    /// 1 V on the right endcap.
    EcRightUnit,
    /// Reference density on one fiber surface region, all electrodes grounded.
    ChargeUnit(FiberLabel, SurfaceRegion),
}

impl Excitation {
    pub fn tag(&self) -> String {
        match self {
            Excitation::RfUnit => "rf_unit".into(),
            Excitation::EcLeftUnit => "ec_left_unit".into(),
            Excitation::EcRightUnit => "ec_right_unit".into(),
            Excitation::ChargeUnit(l, r) => format!("charge_{l}{r}_unit"),
        }
    }

    pub const ALL_CHARGES: [Excitation; 4] = [
        Excitation::ChargeUnit(FiberLabel::M, SurfaceRegion::Facet),
        Excitation::ChargeUnit(FiberLabel::M, SurfaceRegion::Side),
        Excitation::ChargeUnit(FiberLabel::P, SurfaceRegion::Facet),
        Excitation::ChargeUnit(FiberLabel::P, SurfaceRegion::Side),
    ];
}

/// Trap drive and ion parameters. Lengths in meters, voltages in volts,
/// angular frequency in rad/s, charge in coulombs, mass in kilograms.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrapConfig {
    pub ion_electrode_distance: f64,
    pub endcap_separation: f64,
    pub blade_scale: f64,
    pub rf_amplitude: f64,
    pub rf_angular_frequency: f64,
    pub reference_voltage: f64,
    pub endcap_left: f64,
    pub endcap_right: f64,
    pub ion_charge: f64,
    pub ion_mass: f64,
    pub endcap_voltage_scale: f64,
}

impl Default for TrapConfig {
    fn default() -> Self {
        TrapConfig {
            ion_electrode_distance: 270.0 * UM,
            endcap_separation: 5.1 * MM,
            blade_scale: 1.0,
            rf_amplitude: 111.0,
            rf_angular_frequency: 2.0 * std::f64::consts::PI * 30.25e6,
            reference_voltage: 1.0,
            endcap_left: 1300.0,
            endcap_right: 1300.0,
            ion_charge: ELEMENTARY_CHARGE,
            ion_mass: CA40_ION_MASS,
            endcap_voltage_scale: 1.0,
        }
    }
}

impl TrapConfig {
    pub fn validate(&self) -> Result<()> {
        if self.ion_electrode_distance <= 0.0 || self.endcap_separation <= 0.0 {
            return Err(Error::Config("trap lengths must be positive".into()));
        }
        if self.rf_angular_frequency <= 0.0 {
            return Err(Error::Config("rf angular frequency must be positive".into()));
        }
        if self.ion_mass <= 0.0 {
            return Err(Error::Config("ion mass must be positive".into()));
        }
        if self.blade_scale <= 0.0 {
            return Err(Error::Config("blade_scale must be positive".into()));
        }
        // Unit-excitation convention: the reference voltage is exactly 1 V.
        if self.reference_voltage != 1.0 {
            return Err(Error::Config(format!(
                "reference voltage must be exactly 1 V, got {}",
                self.reference_voltage
            )));
        }
        Ok(())
    }
}

/// Fiber material and extent. The default length matches the modeled 6 mm of
/// exposed dielectric cladding behind the facet.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FiberSpec {
    pub label: FiberLabel,
    pub cladding_diameter: f64,
    pub length: f64,
    pub relative_permittivity: f64,
}

impl FiberSpec {
    pub fn new(label: FiberLabel, cladding_diameter: f64) -> Self {
        FiberSpec {
            label,
            cladding_diameter,
            length: 6.0 * MM,
            relative_permittivity: SILICA_RELATIVE_PERMITTIVITY,
        }
    }

    pub fn radius(&self) -> f64 {
        self.cladding_diameter / 2.0
    }

    pub fn validate(&self) -> Result<()> {
        if self.cladding_diameter <= 0.0 {
            return Err(Error::Config(format!(
                "fiber {} cladding diameter must be positive",
                self.label
            )));
        }
        if self.relative_permittivity < 1.0 {
            return Err(Error::Config(format!(
                "fiber {} relative permittivity must be >= 1",
                self.label
            )));
        }
        if self.length <= 0.0 {
            return Err(Error::Config(format!("fiber {} length must be positive", self.label)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FiberSide {
    /// Positive y.
    Above,
    /// Negative y.
    Below,
}

impl FiberSide {
    pub fn sign(&self) -> f64 {
        match self {
            FiberSide::Above => 1.0,
            FiberSide::Below => -1.0,
        }
    }
}

/// Placement of one fiber: facet-to-trap-center distance along y plus small
/// transverse offsets within the experimental positioning envelope.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FiberPlacement {
    pub d: f64,
    pub x_offset: f64,
    pub z_offset: f64,
    pub side: FiberSide,
}

/// Maximum |x_offset| and |z_offset| of a fiber placement.
pub const PLACEMENT_ENVELOPE: f64 = 20.0 * UM;

impl FiberPlacement {
    pub fn validate(&self, spec: &FiberSpec) -> Result<()> {
        if self.d <= spec.radius() {
            return Err(Error::Config(format!(
                "fiber {} distance d = {:.1} um must exceed the cladding radius {:.1} um",
                spec.label,
                self.d / UM,
                spec.radius() / UM
            )));
        }
        if self.x_offset.abs() > PLACEMENT_ENVELOPE || self.z_offset.abs() > PLACEMENT_ENVELOPE {
            return Err(Error::Config(format!(
                "fiber {} offsets exceed the {:.0} um positioning envelope",
                spec.label,
                PLACEMENT_ENVELOPE / UM
            )));
        }
        Ok(())
    }
}

/// The four homogeneous surface charge densities plus the reference density,
/// all in e/µm².
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ChargeState {
    pub m_facet: f64,
    pub m_side: f64,
    pub p_facet: f64,
    pub p_side: f64,
    pub reference: f64,
}

impl Default for ChargeState {
    fn default() -> Self {
        ChargeState { m_facet: 0.0, m_side: 0.0, p_facet: 0.0, p_side: 0.0, reference: 1.0 }
    }
}

impl ChargeState {
    pub fn neutral() -> Self {
        Self::default()
    }

    pub fn with(mut self, label: FiberLabel, facet: f64, side: f64) -> Self {
        match label {
            FiberLabel::M => {
                self.m_facet = facet;
                self.m_side = side;
            }
            FiberLabel::P => {
                self.p_facet = facet;
                self.p_side = side;
            }
        }
        self
    }

    pub fn density(&self, label: FiberLabel, region: SurfaceRegion) -> f64 {
        match (label, region) {
            (FiberLabel::M, SurfaceRegion::Facet) => self.m_facet,
            (FiberLabel::M, SurfaceRegion::Side) => self.m_side,
            (FiberLabel::P, SurfaceRegion::Facet) => self.p_facet,
            (FiberLabel::P, SurfaceRegion::Side) => self.p_side,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.reference != 1.0 {
            return Err(Error::Config(format!(
                "reference density must be exactly 1 e/um^2, got {}",
                self.reference
            )));
        }
        for (name, v) in [
            ("m_facet", self.m_facet),
            ("m_side", self.m_side),
            ("p_facet", self.p_facet),
            ("p_side", self.p_side),
        ] {
            if !v.is_finite() || v.abs() > 100.0 {
                return Err(Error::Config(format!(
                    "charge density {name} = {v} outside the supported [-100, 100] e/um^2 range"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ElectrodeRole {
    RfPair,
    EndcapLeft,
    EndcapRight,
    Ground,
}

/// Axis-aligned electrode primitives. Flat faces land on grid planes, which
/// keeps the Dirichlet boundary representation resolution-independent.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum Shape {
    Prism {
        min: [f64; 3],
        max: [f64; 3],
    },
    /// Prism pierced by a cylindrical bore along y through (x, z) = bore_center.
    PrismWithBoreY {
        min: [f64; 3],
        max: [f64; 3],
        bore_center: [f64; 2],
        bore_radius: f64,
    },
    /// Hollow cylinder with axis along x (endcaps).
    HollowCylinderX {
        x_min: f64,
        x_max: f64,
        inner_radius: f64,
        outer_radius: f64,
    },
    /// Rod along x (compensation electrodes).
    RodX {
        center_yz: [f64; 2],
        radius: f64,
        x_min: f64,
        x_max: f64,
    },
}

impl Shape {
    pub fn contains(&self, p: [f64; 3]) -> bool {
        let [x, y, z] = p;
        match self {
            Shape::Prism { min, max } => {
                x >= min[0] && x <= max[0] && y >= min[1] && y <= max[1] && z >= min[2] && z <= max[2]
            }
            Shape::PrismWithBoreY { min, max, bore_center, bore_radius } => {
                let in_box = x >= min[0]
                    && x <= max[0]
                    && y >= min[1]
                    && y <= max[1]
                    && z >= min[2]
                    && z <= max[2];
                if !in_box {
                    return false;
                }
                let dx = x - bore_center[0];
                let dz = z - bore_center[1];
                dx * dx + dz * dz >= bore_radius * bore_radius
            }
            Shape::HollowCylinderX { x_min, x_max, inner_radius, outer_radius } => {
                if x < *x_min || x > *x_max {
                    return false;
                }
                let r2 = y * y + z * z;
                r2 >= inner_radius * inner_radius && r2 <= outer_radius * outer_radius
            }
            Shape::RodX { center_yz, radius, x_min, x_max } => {
                if x < *x_min || x > *x_max {
                    return false;
                }
                let dy = y - center_yz[0];
                let dz = z - center_yz[1];
                dy * dy + dz * dz <= radius * radius
            }
        }
    }

    /// Coordinates of axis-aligned faces, used as grid feature planes.
    pub fn feature_planes(&self) -> [Vec<f64>; 3] {
        match self {
            Shape::Prism { min, max } | Shape::PrismWithBoreY { min, max, .. } => [
                vec![min[0], max[0]],
                vec![min[1], max[1]],
                vec![min[2], max[2]],
            ],
            Shape::HollowCylinderX { x_min, x_max, .. } => [vec![*x_min, *x_max], vec![], vec![]],
            Shape::RodX { x_min, x_max, .. } => [vec![*x_min, *x_max], vec![], vec![]],
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Electrode {
    pub name: String,
    pub role: ElectrodeRole,
    pub shape: Shape,
}

/// Dielectric fiber body: a cylinder along y.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FiberBody {
    pub label: FiberLabel,
    pub center_xz: [f64; 2],
    pub radius: f64,
    pub y_min: f64,
    pub y_max: f64,
    pub relative_permittivity: f64,
}

impl FiberBody {
    pub fn contains(&self, p: [f64; 3]) -> bool {
        let [x, y, z] = p;
        if y < self.y_min || y > self.y_max {
            return false;
        }
        let dx = x - self.center_xz[0];
        let dz = z - self.center_xz[1];
        dx * dx + dz * dz <= self.radius * self.radius
    }
}

/// Charged surface descriptor: the facet disk at the fiber tip or the exposed
/// cylindrical side shell behind it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum ChargedSurface {
    FacetDisk {
        label: FiberLabel,
        center: [f64; 3],
        radius: f64,
    },
    SideShell {
        label: FiberLabel,
        center_xz: [f64; 2],
        radius: f64,
        /// Signed y-range from the facet to the fiber end; y0 may exceed y1
        /// in magnitude ordering but y0 < y1 always holds after construction.
        y0: f64,
        y1: f64,
    },
}

impl ChargedSurface {
    pub fn label(&self) -> FiberLabel {
        match self {
            ChargedSurface::FacetDisk { label, .. } | ChargedSurface::SideShell { label, .. } => {
                *label
            }
        }
    }

    pub fn region(&self) -> SurfaceRegion {
        match self {
            ChargedSurface::FacetDisk { .. } => SurfaceRegion::Facet,
            ChargedSurface::SideShell { .. } => SurfaceRegion::Side,
        }
    }

    /// Nominal area (m²) of the descriptor, using the full fiber length for
    /// the side shell regardless of domain truncation.
    pub fn area(&self) -> f64 {
        match self {
            ChargedSurface::FacetDisk { radius, .. } => std::f64::consts::PI * radius * radius,
            ChargedSurface::SideShell { radius, y0, y1, .. } => {
                2.0 * std::f64::consts::PI * radius * (y1 - y0)
            }
        }
    }
}

/// Simplified electrode dimensions. These defaults were tuned so that the
/// composed landscape reproduces the apparatus scales (axial secular
/// frequency near 200 kHz at 1.3 kV, radial near 1.6 MHz at 111 V) and the
/// single-to-double-well transition distance for a positively charged fiber.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ElectrodeDims {
    pub blade_half_length: f64,
    pub blade_half_width: f64,
    pub blade_depth: f64,
    pub ground_bore_radius: f64,
    /// Extra radial standoff of the bored ground blades beyond the rf blade
    /// tip distance (the fiber corridor is wider than the rf gap).
    pub ground_blade_standoff: f64,
    pub endcap_inner_radius: f64,
    pub endcap_outer_radius: f64,
    pub endcap_thickness: f64,
    pub comp_rod_offset: f64,
    pub comp_rod_radius: f64,
    pub comp_rod_half_length: f64,
    pub domain_half_extent: f64,
}

impl Default for ElectrodeDims {
    fn default() -> Self {
        ElectrodeDims {
            blade_half_length: 1500.0 * UM,
            blade_half_width: 150.0 * UM,
            blade_depth: 2400.0 * UM,
            ground_bore_radius: 150.0 * UM,
            ground_blade_standoff: 90.0 * UM,
            endcap_inner_radius: 300.0 * UM,
            endcap_outer_radius: 1200.0 * UM,
            endcap_thickness: 420.0 * UM,
            comp_rod_offset: 600.0 * UM,
            comp_rod_radius: 90.0 * UM,
            comp_rod_half_length: 2400.0 * UM,
            domain_half_extent: 3000.0 * UM,
        }
    }
}

/// Full realized geometry: electrodes, dielectric bodies, charged surfaces.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GeometrySpec {
    pub trap: TrapConfig,
    pub dims: ElectrodeDims,
    pub electrodes: Vec<Electrode>,
    pub fibers: Vec<(FiberSpec, FiberPlacement)>,
    pub bodies: Vec<FiberBody>,
    pub surfaces: Vec<ChargedSurface>,
}

/// Builds the realized geometry from the trap description and fiber
/// placements, validating invariants and rejecting overlaps.
pub fn build_geometry(
    trap: &TrapConfig,
    fibers: &[(FiberSpec, FiberPlacement)],
    dims: &ElectrodeDims,
) -> Result<GeometrySpec> {
    trap.validate()?;
    for (spec, placement) in fibers {
        spec.validate()?;
        placement.validate(spec)?;
    }
    let mut seen_m = false;
    let mut seen_p = false;
    for (spec, placement) in fibers {
        match spec.label {
            FiberLabel::M => {
                if placement.side != FiberSide::Above {
                    return Err(Error::Config("fiber M must approach from above (+y)".into()));
                }
                if seen_m {
                    return Err(Error::Config("duplicate fiber M".into()));
                }
                seen_m = true;
            }
            FiberLabel::P => {
                if placement.side != FiberSide::Below {
                    return Err(Error::Config("fiber P must approach from below (-y)".into()));
                }
                if seen_p {
                    return Err(Error::Config("duplicate fiber P".into()));
                }
                seen_p = true;
            }
        }
    }

    let r0 = trap.ion_electrode_distance * trap.blade_scale;
    let lb = dims.blade_half_length;
    let w = dims.blade_half_width;
    let depth = dims.blade_depth;
    let xc = trap.endcap_separation / 2.0;

    let electrodes = vec![
        Electrode {
            name: "rf_blade_top".into(),
            role: ElectrodeRole::RfPair,
            shape: Shape::Prism { min: [-lb, -w, r0], max: [lb, w, r0 + depth] },
        },
        Electrode {
            name: "rf_blade_bottom".into(),
            role: ElectrodeRole::RfPair,
            shape: Shape::Prism { min: [-lb, -w, -r0 - depth], max: [lb, w, -r0] },
        },
        Electrode {
            name: "ground_blade_front".into(),
            role: ElectrodeRole::Ground,
            shape: Shape::PrismWithBoreY {
                min: [-lb, r0 + dims.ground_blade_standoff, -w],
                max: [lb, r0 + dims.ground_blade_standoff + depth, w],
                bore_center: [0.0, 0.0],
                bore_radius: dims.ground_bore_radius,
            },
        },
        Electrode {
            name: "ground_blade_back".into(),
            role: ElectrodeRole::Ground,
            shape: Shape::PrismWithBoreY {
                min: [-lb, -r0 - dims.ground_blade_standoff - depth, -w],
                max: [lb, -r0 - dims.ground_blade_standoff, w],
                bore_center: [0.0, 0.0],
                bore_radius: dims.ground_bore_radius,
            },
        },
        Electrode {
            name: "endcap_left".into(),
            role: ElectrodeRole::EndcapLeft,
            shape: Shape::HollowCylinderX {
                x_min: -xc - dims.endcap_thickness,
                x_max: -xc,
                inner_radius: dims.endcap_inner_radius,
                outer_radius: dims.endcap_outer_radius,
            },
        },
        Electrode {
            name: "endcap_right".into(),
            role: ElectrodeRole::EndcapRight,
            shape: Shape::HollowCylinderX {
                x_min: xc,
                x_max: xc + dims.endcap_thickness,
                inner_radius: dims.endcap_inner_radius,
                outer_radius: dims.endcap_outer_radius,
            },
        },
    ];
    let mut electrodes = electrodes;
    for (sy, sz) in [(1.0, 1.0), (1.0, -1.0), (-1.0, 1.0), (-1.0, -1.0)] {
        electrodes.push(Electrode {
            name: format!(
                "comp_rod_{}{}",
                if sy > 0.0 { "p" } else { "m" },
                if sz > 0.0 { "p" } else { "m" }
            ),
            role: ElectrodeRole::Ground,
            shape: Shape::RodX {
                center_yz: [sy * dims.comp_rod_offset, sz * dims.comp_rod_offset],
                radius: dims.comp_rod_radius,
                x_min: -dims.comp_rod_half_length,
                x_max: dims.comp_rod_half_length,
            },
        });
    }

    let mut bodies = Vec::new();
    let mut surfaces = Vec::new();
    for (spec, placement) in fibers {
        let sign = placement.side.sign();
        let facet_y = sign * placement.d;
        let far_y = sign * (placement.d + spec.length);
        let (y_min, y_max) = if sign > 0.0 { (facet_y, far_y) } else { (far_y, facet_y) };
        bodies.push(FiberBody {
            label: spec.label,
            center_xz: [placement.x_offset, placement.z_offset],
            radius: spec.radius(),
            y_min,
            y_max,
            relative_permittivity: spec.relative_permittivity,
        });
        surfaces.push(ChargedSurface::FacetDisk {
            label: spec.label,
            center: [placement.x_offset, facet_y, placement.z_offset],
            radius: spec.radius(),
        });
        surfaces.push(ChargedSurface::SideShell {
            label: spec.label,
            center_xz: [placement.x_offset, placement.z_offset],
            radius: spec.radius(),
            y0: y_min,
            y1: y_max,
        });
    }

    let geometry = GeometrySpec {
        trap: trap.clone(),
        dims: dims.clone(),
        electrodes,
        fibers: fibers.to_vec(),
        bodies,
        surfaces,
    };
    geometry.check_disjoint()?;
    Ok(geometry)
}

/// Returns the facet and side descriptors for one fiber.
pub fn fiber_surfaces(
    spec: &GeometrySpec,
    label: FiberLabel,
) -> Result<(&ChargedSurface, &ChargedSurface)> {
    let facet = spec
        .surfaces
        .iter()
        .find(|s| s.label() == label && s.region() == SurfaceRegion::Facet);
    let side = spec
        .surfaces
        .iter()
        .find(|s| s.label() == label && s.region() == SurfaceRegion::Side);
    match (facet, side) {
        (Some(f), Some(s)) => Ok((f, s)),
        _ => Err(Error::UnknownLabel(label.to_string())),
    }
}

impl GeometrySpec {
    /// Fingerprint binding basis files to the configuration that produced them.
    pub fn hash(&self) -> String {
        let serialized = serde_json::to_string(self).expect("geometry serializes");
        let digest = Sha256::digest(serialized.as_bytes());
        let mut out = String::with_capacity(16);
        for byte in digest.iter().take(8) {
            out.push_str(&format!("{byte:02x}"));
        }
        out
    }

    pub fn domain_half_extent(&self) -> f64 {
        self.dims.domain_half_extent
    }

    /// Absolute permittivity at a point (F/m).
    pub fn permittivity_at(&self, p: [f64; 3]) -> f64 {
        for body in &self.bodies {
            if body.contains(p) {
                return crate::consts::VACUUM_PERMITTIVITY * body.relative_permittivity;
            }
        }
        crate::consts::VACUUM_PERMITTIVITY
    }

    /// Dirichlet value at a point for a given excitation, if the point lies
    /// inside an electrode.
    pub fn electrode_potential_at(&self, p: [f64; 3], excitation: Excitation) -> Option<f64> {
        for e in &self.electrodes {
            if e.shape.contains(p) {
                let v = match (e.role, excitation) {
                    (ElectrodeRole::RfPair, Excitation::RfUnit) => 1.0,
                    (ElectrodeRole::EndcapLeft, Excitation::EcLeftUnit) => 1.0,
                    (ElectrodeRole::EndcapRight, Excitation::EcRightUnit) => 1.0,
                    _ => 0.0,
                };
                return Some(v);
            }
        }
        None
    }

    pub fn placement(&self, label: FiberLabel) -> Option<&FiberPlacement> {
        self.fibers.iter().find(|(s, _)| s.label == label).map(|(_, p)| p)
    }

    /// Axis-aligned plane coordinates worth resolving exactly in the grid.
    pub fn feature_planes(&self) -> [Vec<f64>; 3] {
        let mut planes: [Vec<f64>; 3] = [Vec::new(), Vec::new(), Vec::new()];
        for e in &self.electrodes {
            let fp = e.shape.feature_planes();
            for axis in 0..3 {
                planes[axis].extend_from_slice(&fp[axis]);
            }
        }
        for surf in &self.surfaces {
            if let ChargedSurface::FacetDisk { center, .. } = surf {
                planes[1].push(center[1]);
            }
        }
        planes
    }

    fn check_disjoint(&self) -> Result<()> {
        for body in &self.bodies {
            for e in &self.electrodes {
                if fiber_overlaps_shape(body, &e.shape) {
                    return Err(Error::GeometryConflict(format!(
                        "fiber {} body intersects electrode {}",
                        body.label, e.name
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Overlap test between a fiber cylinder (axis along y) and an electrode
/// primitive. Exact for the blade prisms; the x-axis shapes (endcaps, rods)
/// use a conservative axis-distance test.
fn fiber_overlaps_shape(body: &FiberBody, shape: &Shape) -> bool {
    let [cx, cz] = body.center_xz;
    let r = body.radius;
    match shape {
        Shape::Prism { min, max } => {
            if body.y_max < min[1] || body.y_min > max[1] {
                return false;
            }
            circle_intersects_rect([cx, cz], r, [min[0], min[2]], [max[0], max[2]])
        }
        Shape::PrismWithBoreY { min, max, bore_center, bore_radius } => {
            if body.y_max < min[1] || body.y_min > max[1] {
                return false;
            }
            if !circle_intersects_rect([cx, cz], r, [min[0], min[2]], [max[0], max[2]]) {
                return false;
            }
            // Clear only if the fiber cross-section fits entirely inside the bore.
            let dx = cx - bore_center[0];
            let dz = cz - bore_center[1];
            (dx * dx + dz * dz).sqrt() + r >= *bore_radius
        }
        Shape::HollowCylinderX { x_min, x_max, outer_radius, .. } => {
            // The fiber crosses the endcap x-range only if its cross-section does.
            if cx + r < *x_min || cx - r > *x_max {
                return false;
            }
            let min_sep = (cz.abs() - r).max(0.0);
            min_sep <= *outer_radius
                && body.y_min.abs().min(body.y_max.abs()) <= *outer_radius
        }
        Shape::RodX { center_yz, radius, x_min, x_max } => {
            if cx + r < *x_min || cx - r > *x_max {
                return false;
            }
            if center_yz[0] < body.y_min || center_yz[0] > body.y_max {
                return false;
            }
            (cz - center_yz[1]).abs() < r + radius
        }
    }
}

fn circle_intersects_rect(center: [f64; 2], radius: f64, min: [f64; 2], max: [f64; 2]) -> bool {
    let nearest_x = center[0].clamp(min[0], max[0]);
    let nearest_y = center[1].clamp(min[1], max[1]);
    let dx = center[0] - nearest_x;
    let dy = center[1] - nearest_y;
    dx * dx + dy * dy <= radius * radius
}

/// Standard two-fiber arrangement: M above, P below, zero offsets unless given.
pub fn standard_fibers(d_m: f64, d_p: f64) -> Vec<(FiberSpec, FiberPlacement)> {
    vec![
        (
            FiberSpec::new(FiberLabel::M, 220.0 * UM),
            FiberPlacement { d: d_m, x_offset: 0.0, z_offset: 0.0, side: FiberSide::Above },
        ),
        (
            FiberSpec::new(FiberLabel::P, 230.0 * UM),
            FiberPlacement { d: d_p, x_offset: 0.0, z_offset: 0.0, side: FiberSide::Below },
        ),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn facet_centers_follow_placement() {
        let trap = TrapConfig::default();
        let fibers = standard_fibers(500.0 * UM, 1600.0 * UM);
        let spec = build_geometry(&trap, &fibers, &ElectrodeDims::default()).unwrap();
        let (facet_m, _) = fiber_surfaces(&spec, FiberLabel::M).unwrap();
        let (facet_p, _) = fiber_surfaces(&spec, FiberLabel::P).unwrap();
        match facet_m {
            ChargedSurface::FacetDisk { center, .. } => {
                assert_relative_eq!(center[1], 500.0 * UM, max_relative = 1e-12);
            }
            _ => panic!("expected facet disk"),
        }
        match facet_p {
            ChargedSurface::FacetDisk { center, .. } => {
                assert_relative_eq!(center[1], -1600.0 * UM, max_relative = 1e-12);
            }
            _ => panic!("expected facet disk"),
        }
    }

    #[test]
    fn zero_offsets_center_facets_on_y_axis() {
        let trap = TrapConfig::default();
        let fibers = standard_fibers(500.0 * UM, 1600.0 * UM);
        let spec = build_geometry(&trap, &fibers, &ElectrodeDims::default()).unwrap();
        for surf in &spec.surfaces {
            if let ChargedSurface::FacetDisk { center, .. } = surf {
                assert_eq!(center[0], 0.0);
                assert_eq!(center[2], 0.0);
            }
        }
    }

    #[test]
    fn facet_and_side_areas() {
        let trap = TrapConfig::default();
        let fibers = standard_fibers(500.0 * UM, 1600.0 * UM);
        let spec = build_geometry(&trap, &fibers, &ElectrodeDims::default()).unwrap();
        let (facet, side) = fiber_surfaces(&spec, FiberLabel::M).unwrap();
        // pi * (110 um)^2 and pi * 220 um * 6 mm
        assert_relative_eq!(facet.area(), std::f64::consts::PI * 110e-6 * 110e-6, max_relative = 1e-12);
        assert_relative_eq!(side.area(), std::f64::consts::PI * 220e-6 * 6e-3, max_relative = 1e-12);
        let facet_um2 = facet.area() / (UM * UM);
        assert!((facet_um2 - 3.801e4).abs() / 3.801e4 < 1e-3);
    }

    #[test]
    fn zero_diameter_fiber_rejected() {
        let mut spec = FiberSpec::new(FiberLabel::M, 0.0);
        spec.length = 6.0 * MM;
        assert!(spec.validate().is_err());
    }

    #[test]
    fn narrow_bore_conflicts_with_fiber() {
        // Fiber cladding wider than the blade bore clearance: the fiber body
        // cannot pass through the grounded blade on its way in.
        let trap = TrapConfig::default();
        let fibers = standard_fibers(400.0 * UM, 1600.0 * UM);
        let dims = ElectrodeDims { ground_bore_radius: 100.0 * UM, ..ElectrodeDims::default() };
        let err = build_geometry(&trap, &fibers, &dims).unwrap_err();
        assert!(matches!(err, Error::GeometryConflict(_)));
    }

    #[test]
    fn d_below_cladding_radius_rejected() {
        let trap = TrapConfig::default();
        let fibers = vec![(
            FiberSpec::new(FiberLabel::M, 220.0 * UM),
            FiberPlacement { d: 100.0 * UM, x_offset: 0.0, z_offset: 0.0, side: FiberSide::Above },
        )];
        assert!(build_geometry(&trap, &fibers, &ElectrodeDims::default()).is_err());
    }

    #[test]
    fn mirrored_placements_mirror_surfaces() {
        let trap = TrapConfig::default();
        let mut fibers = standard_fibers(500.0 * UM, 900.0 * UM);
        fibers[0].1.x_offset = 10.0 * UM;
        fibers[1].1.x_offset = -5.0 * UM;
        let spec = build_geometry(&trap, &fibers, &ElectrodeDims::default()).unwrap();

        let mut mirrored = fibers.clone();
        for (_, p) in &mut mirrored {
            p.x_offset = -p.x_offset;
        }
        let spec_m = build_geometry(&trap, &mirrored, &ElectrodeDims::default()).unwrap();

        for (a, b) in spec.surfaces.iter().zip(spec_m.surfaces.iter()) {
            match (a, b) {
                (
                    ChargedSurface::FacetDisk { center: ca, radius: ra, .. },
                    ChargedSurface::FacetDisk { center: cb, radius: rb, .. },
                ) => {
                    assert_eq!(ra, rb);
                    assert_eq!(ca[0], -cb[0]);
                    assert_eq!(ca[1], cb[1]);
                    assert_eq!(ca[2], cb[2]);
                }
                (
                    ChargedSurface::SideShell { center_xz: ca, y0: a0, y1: a1, .. },
                    ChargedSurface::SideShell { center_xz: cb, y0: b0, y1: b1, .. },
                ) => {
                    assert_eq!(ca[0], -cb[0]);
                    assert_eq!(ca[1], cb[1]);
                    assert_eq!((a0, a1), (b0, b1));
                }
                _ => panic!("surface kinds diverged under mirroring"),
            }
        }
    }

    #[test]
    fn total_charge_additive_over_regions() {
        let trap = TrapConfig::default();
        let fibers = standard_fibers(500.0 * UM, 1600.0 * UM);
        let spec = build_geometry(&trap, &fibers, &ElectrodeDims::default()).unwrap();
        let (facet, side) = fiber_surfaces(&spec, FiberLabel::P).unwrap();
        let sigma = 2.5; // e/um^2
        let total_e = sigma * (facet.area() + side.area()) / (UM * UM);
        let expected = sigma * (facet.area() / (UM * UM)) + sigma * (side.area() / (UM * UM));
        assert_relative_eq!(total_e, expected, max_relative = 1e-12);
    }

    #[test]
    fn geometry_hash_is_stable_and_sensitive() {
        let trap = TrapConfig::default();
        let fibers = standard_fibers(500.0 * UM, 1600.0 * UM);
        let spec1 = build_geometry(&trap, &fibers, &ElectrodeDims::default()).unwrap();
        let spec2 = build_geometry(&trap, &fibers, &ElectrodeDims::default()).unwrap();
        assert_eq!(spec1.hash(), spec2.hash());

        let fibers2 = standard_fibers(505.0 * UM, 1600.0 * UM);
        let spec3 = build_geometry(&trap, &fibers2, &ElectrodeDims::default()).unwrap();
        assert_ne!(spec1.hash(), spec3.hash());
    }

    #[test]
    fn unknown_label_errors() {
        let trap = TrapConfig::default();
        let fibers = vec![(
            FiberSpec::new(FiberLabel::M, 220.0 * UM),
            FiberPlacement { d: 500.0 * UM, x_offset: 0.0, z_offset: 0.0, side: FiberSide::Above },
        )];
        let spec = build_geometry(&trap, &fibers, &ElectrodeDims::default()).unwrap();
        assert!(fiber_surfaces(&spec, FiberLabel::P).is_err());
    }
}
