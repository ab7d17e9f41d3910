//! Physical constants and unit conversions.
//!
//! Internal calculations are in SI units. Micrometers, e/µm², kHz and mV
//! appear only at the I/O boundary (config files, CSV columns, CLI output).

/// Elementary charge (C), exact by SI definition.
pub const ELEMENTARY_CHARGE: f64 = 1.602_176_634e-19;

/// Vacuum permittivity (F/m).
pub const VACUUM_PERMITTIVITY: f64 = 8.854_187_812_8e-12;

/// Atomic mass unit (kg).
pub const ATOMIC_MASS_UNIT: f64 = 1.660_539_066_60e-27;

/// Mass of a singly ionized calcium-40 atom (kg).
pub const CA40_ION_MASS: f64 = 39.962_591 * ATOMIC_MASS_UNIT;

/// Relative permittivity of fused silica at radio frequencies.
pub const SILICA_RELATIVE_PERMITTIVITY: f64 = 3.8;

/// Meters per micrometer.
pub const UM: f64 = 1e-6;

/// Meters per millimeter.
pub const MM: f64 = 1e-3;

/// One surface charge density unit, e/µm² expressed in C/m².
pub const E_PER_UM2: f64 = ELEMENTARY_CHARGE / (UM * UM);

/// Joules per electronvolt.
pub const EV: f64 = ELEMENTARY_CHARGE;

/// Converts an angular frequency (rad/s) to an ordinary frequency in kHz.
pub fn omega_to_khz(omega: f64) -> f64 {
    omega / (2.0 * std::f64::consts::PI) / 1e3
}

/// Converts an ordinary frequency in kHz to an angular frequency (rad/s).
pub fn khz_to_omega(khz: f64) -> f64 {
    khz * 1e3 * 2.0 * std::f64::consts::PI
}

/// Converts the axial-law slope from SI ((rad/s)²/V) to kHz²/mV.
pub fn alpha_si_to_khz2_per_mv(alpha_si: f64) -> f64 {
    let four_pi2 = 4.0 * std::f64::consts::PI * std::f64::consts::PI;
    alpha_si / four_pi2 / 1e6 / 1e3
}

/// Converts the axial-law slope from kHz²/mV to SI ((rad/s)²/V).
pub fn alpha_khz2_per_mv_to_si(alpha: f64) -> f64 {
    let four_pi2 = 4.0 * std::f64::consts::PI * std::f64::consts::PI;
    alpha * four_pi2 * 1e6 * 1e3
}
