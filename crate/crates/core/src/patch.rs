//! Reconstruction of the stray patch potential along the trap axis from
//! measured-vs-simulated discrepancies in ion position and axial frequency.
//!
//! Both methods integrate outward from an anchor where measured and simulated
//! positions coincide, so integration errors accumulate with distance from
//! the anchor. The reconstructed potential is defined modulo a constant and
//! stored in volts; composition multiplies by the ion charge.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// One row of an endcap-difference scan at fixed mean endcap voltage.
/// Positions in meters, frequencies in rad/s, voltages in volts.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScanRecord {
    pub v_ecd: f64,
    pub x_exp: f64,
    pub x_err: f64,
    pub omega_exp: f64,
    pub omega_err: f64,
    pub x_sim: f64,
    pub omega_sim: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AxialScan {
    pub mean_endcap_voltage: f64,
    pub records: Vec<ScanRecord>,
}

impl AxialScan {
    /// Sorted by measured position; fails if the position response is not
    /// strictly monotonic in the voltage difference.
    pub fn validated_sorted(&self) -> Result<Vec<ScanRecord>> {
        if self.records.len() < 3 {
            return Err(Error::Dataset("axial scan needs at least 3 records".into()));
        }
        for r in &self.records {
            if r.x_err <= 0.0 || r.omega_err <= 0.0 {
                return Err(Error::Dataset("scan errors must be positive".into()));
            }
        }
        let mut by_v = self.records.clone();
        by_v.sort_by(|a, b| a.v_ecd.partial_cmp(&b.v_ecd).expect("finite voltages"));
        let increasing = by_v.windows(2).all(|w| w[1].x_exp > w[0].x_exp);
        let decreasing = by_v.windows(2).all(|w| w[1].x_exp < w[0].x_exp);
        if !increasing && !decreasing {
            return Err(Error::NonMonotonicScan(
                "x_exp(V_ecD) must be strictly monotonic".into(),
            ));
        }
        let mut sorted = by_v;
        sorted.sort_by(|a, b| a.x_exp.partial_cmp(&b.x_exp).expect("finite positions"));
        Ok(sorted)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PatchProvenance {
    Positions,
    Frequencies,
    Mean,
    Planted,
}

/// 1D stray potential along the trap axis, modulo an additive constant.
/// Values in volts on strictly increasing abscissae (meters).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PatchPotential {
    pub x: Vec<f64>,
    pub values: Vec<f64>,
    pub uncertainty: Vec<f64>,
    pub anchor: f64,
    pub provenance: PatchProvenance,
    /// Monotone-cubic slopes, derived from (x, values) at construction.
    slopes: Vec<f64>,
}

impl PatchPotential {
    pub fn from_samples(
        x: Vec<f64>,
        values: Vec<f64>,
        uncertainty: Vec<f64>,
        anchor: f64,
        provenance: PatchProvenance,
    ) -> Result<Self> {
        if x.len() != values.len() || x.len() != uncertainty.len() || x.len() < 2 {
            return Err(Error::Dataset("patch needs >= 2 consistent samples".into()));
        }
        if x.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Dataset("patch abscissae must be strictly increasing".into()));
        }
        let slopes = pchip_slopes(&x, &values);
        Ok(PatchPotential { x, values, uncertainty, anchor, provenance, slopes })
    }

    pub fn range(&self) -> (f64, f64) {
        (self.x[0], *self.x.last().expect("non-empty"))
    }

    /// Monotone cubic interpolation inside the sampled range, constant
    /// extrapolation outside (flagged by the second return).
    pub fn evaluate(&self, x: f64) -> (f64, bool) {
        let (lo, hi) = self.range();
        if x <= lo {
            return (self.values[0], x < lo);
        }
        if x >= hi {
            return (*self.values.last().expect("non-empty"), x > hi);
        }
        let i = self.x.partition_point(|&c| c <= x) - 1;
        let h = self.x[i + 1] - self.x[i];
        let t = (x - self.x[i]) / h;
        let (y0, y1) = (self.values[i], self.values[i + 1]);
        let (m0, m1) = (self.slopes[i] * h, self.slopes[i + 1] * h);
        let t2 = t * t;
        let t3 = t2 * t;
        let v = (2.0 * t3 - 3.0 * t2 + 1.0) * y0
            + (t3 - 2.0 * t2 + t) * m0
            + (-2.0 * t3 + 3.0 * t2) * y1
            + (t3 - t2) * m1;
        (v, false)
    }

    /// Derivative of the interpolant (V/m); zero outside the sampled range.
    pub fn derivative(&self, x: f64) -> f64 {
        let (lo, hi) = self.range();
        if x <= lo || x >= hi {
            return 0.0;
        }
        let i = self.x.partition_point(|&c| c <= x) - 1;
        let h = self.x[i + 1] - self.x[i];
        let t = (x - self.x[i]) / h;
        let (y0, y1) = (self.values[i], self.values[i + 1]);
        let (m0, m1) = (self.slopes[i], self.slopes[i + 1]);
        let t2 = t * t;
        (6.0 * t2 - 6.0 * t) * y0 / h
            + (3.0 * t2 - 4.0 * t + 1.0) * m0
            + (-6.0 * t2 + 6.0 * t) * y1 / h
            + (3.0 * t2 - 2.0 * t) * m1
    }

    /// Linear interpolation of the per-sample uncertainty.
    pub fn uncertainty_at(&self, x: f64) -> f64 {
        let (lo, hi) = self.range();
        if x <= lo {
            return self.uncertainty[0];
        }
        if x >= hi {
            return *self.uncertainty.last().expect("non-empty");
        }
        let i = self.x.partition_point(|&c| c <= x) - 1;
        let t = (x - self.x[i]) / (self.x[i + 1] - self.x[i]);
        self.uncertainty[i] * (1.0 - t) + self.uncertainty[i + 1] * t
    }
}

/// Fritsch-Carlson monotone cubic slopes.
fn pchip_slopes(x: &[f64], y: &[f64]) -> Vec<f64> {
    let n = x.len();
    let mut d = vec![0.0; n - 1];
    for i in 0..n - 1 {
        d[i] = (y[i + 1] - y[i]) / (x[i + 1] - x[i]);
    }
    let mut m = vec![0.0; n];
    m[0] = d[0];
    m[n - 1] = d[n - 2];
    for i in 1..n - 1 {
        if d[i - 1] * d[i] <= 0.0 {
            m[i] = 0.0;
        } else {
            let w1 = 2.0 * (x[i + 1] - x[i]) + (x[i] - x[i - 1]);
            let w2 = (x[i + 1] - x[i]) + 2.0 * (x[i] - x[i - 1]);
            m[i] = (w1 + w2) / (w1 / d[i - 1] + w2 / d[i]);
        }
    }
    // Clamp the end slopes to preserve monotonicity.
    for (i, di) in [(0usize, d[0]), (n - 1, d[n - 2])] {
        if m[i] * di <= 0.0 {
            m[i] = 0.0;
        } else if m[i].abs() > 3.0 * di.abs() {
            m[i] = 3.0 * di;
        }
    }
    m
}

/// Reconstruction controls: ion constants plus anchor selection. The anchor
/// defaults to the measured/simulated position crossing nearest the trap
/// center; `anchor_override` forces a specific abscissa for synthetic scans
/// without a crossing.
#[derive(Debug, Clone)]
pub struct ReconstructOptions {
    pub ion_mass: f64,
    pub ion_charge: f64,
    pub anchor_preference: f64,
    pub anchor_override: Option<f64>,
}

impl ReconstructOptions {
    pub fn new(ion_mass: f64, ion_charge: f64) -> Self {
        ReconstructOptions { ion_mass, ion_charge, anchor_preference: 0.0, anchor_override: None }
    }
}

/// Finds the anchor: a crossing of x_exp - x_sim nearest the preferred
/// position (interpolated between samples when the sign changes).
fn find_anchor(sorted: &[ScanRecord], opts: &ReconstructOptions) -> Result<f64> {
    if let Some(a) = opts.anchor_override {
        return Ok(a);
    }
    let dx: Vec<f64> = sorted.iter().map(|r| r.x_exp - r.x_sim).collect();
    let mut candidates = Vec::new();
    for (i, r) in sorted.iter().enumerate() {
        if dx[i] == 0.0 {
            candidates.push(r.x_exp);
        }
    }
    for i in 0..sorted.len() - 1 {
        if dx[i] * dx[i + 1] < 0.0 {
            let t = dx[i] / (dx[i] - dx[i + 1]);
            candidates.push(sorted[i].x_exp + t * (sorted[i + 1].x_exp - sorted[i].x_exp));
        }
    }
    candidates
        .into_iter()
        .min_by(|a, b| {
            (a - opts.anchor_preference)
                .abs()
                .partial_cmp(&(b - opts.anchor_preference).abs())
                .expect("finite")
        })
        .ok_or_else(|| {
            Error::Other("no anchor: measured and simulated positions never coincide".into())
        })
}

/// Linear interpolation of tabulated samples at x (clamped at the ends).
fn interp(xs: &[f64], ys: &[f64], x: f64) -> f64 {
    if x <= xs[0] {
        return ys[0];
    }
    if x >= *xs.last().expect("non-empty") {
        return *ys.last().expect("non-empty");
    }
    let i = xs.partition_point(|&c| c <= x) - 1;
    let t = (x - xs[i]) / (xs[i + 1] - xs[i]);
    ys[i] * (1.0 - t) + ys[i + 1] * t
}

/// Trapezoidal accumulation of tabulated integrand values outward from the
/// anchor in both directions, with the anchor inserted as a sample. Returns
/// (abscissae, integral, accumulated uncertainty) where the uncertainty grows
/// in quadrature with per-interval integrand errors.
fn cumulative_from_anchor(
    xs: &[f64],
    f: &[f64],
    f_err: &[f64],
    anchor: f64,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let f_at = |x: f64| interp(xs, f, x);
    let ferr_at = |x: f64| interp(xs, f_err, x);

    let mut grid: Vec<f64> = xs.to_vec();
    let pos = grid.partition_point(|&c| c < anchor);
    let duplicate = grid.iter().any(|&g| (g - anchor).abs() < 1e-15);
    if !duplicate {
        grid.insert(pos, anchor);
    }
    let anchor_idx = grid.iter().position(|&g| (g - anchor).abs() < 1e-15).expect("anchor in grid");

    let n = grid.len();
    let mut integral = vec![0.0; n];
    let mut err = vec![0.0; n];
    for i in anchor_idx + 1..n {
        let (a, b) = (grid[i - 1], grid[i]);
        let seg = 0.5 * (f_at(a) + f_at(b)) * (b - a);
        let seg_err = 0.5 * (ferr_at(a) + ferr_at(b)) * (b - a);
        integral[i] = integral[i - 1] + seg;
        err[i] = (err[i - 1] * err[i - 1] + seg_err * seg_err).sqrt();
    }
    for i in (0..anchor_idx).rev() {
        let (a, b) = (grid[i], grid[i + 1]);
        let seg = 0.5 * (f_at(a) + f_at(b)) * (b - a);
        let seg_err = 0.5 * (ferr_at(a) + ferr_at(b)) * (b - a);
        integral[i] = integral[i + 1] - seg;
        err[i] = (err[i + 1] * err[i + 1] + seg_err * seg_err).sqrt();
    }
    (grid, integral, err)
}

/// Position-discrepancy method: the patch slope at the measured equilibrium
/// is -M omega_sim² (x_exp - x_sim); one integration over the measured
/// positions recovers the patch, zero at the anchor.
pub fn reconstruct_from_positions(
    scan: &AxialScan,
    opts: &ReconstructOptions,
) -> Result<PatchPotential> {
    let sorted = scan.validated_sorted()?;
    let anchor = find_anchor(&sorted, opts)?;

    let xs: Vec<f64> = sorted.iter().map(|r| r.x_exp).collect();
    let slope: Vec<f64> = sorted
        .iter()
        .map(|r| -opts.ion_mass * r.omega_sim * r.omega_sim * (r.x_exp - r.x_sim))
        .collect();
    let slope_err: Vec<f64> = sorted
        .iter()
        .map(|r| opts.ion_mass * r.omega_sim * r.omega_sim * r.x_err)
        .collect();

    let (grid, energy, err) = cumulative_from_anchor(&xs, &slope, &slope_err, anchor);
    let q = opts.ion_charge;
    let volts: Vec<f64> = energy.iter().map(|e| e / q).collect();
    let err_v: Vec<f64> = err.iter().map(|e| e / q).collect();
    PatchPotential::from_samples(grid, volts, err_v, anchor, PatchProvenance::Positions)
}

/// Frequency-discrepancy method: the patch curvature at the measured
/// equilibrium is M (omega_exp² - omega_sim²). The first integration constant
/// makes the patch force vanish at the zero-endcap equilibrium position; the
/// second anchors the value like the position method.
pub fn reconstruct_from_frequencies(
    scan: &AxialScan,
    zero_endcap_equilibrium: f64,
    opts: &ReconstructOptions,
) -> Result<PatchPotential> {
    let sorted = scan.validated_sorted()?;
    let anchor = find_anchor(&sorted, opts)?;

    let xs: Vec<f64> = sorted.iter().map(|r| r.x_exp).collect();
    let curv: Vec<f64> = sorted
        .iter()
        .map(|r| opts.ion_mass * (r.omega_exp * r.omega_exp - r.omega_sim * r.omega_sim))
        .collect();
    let curv_err: Vec<f64> = sorted
        .iter()
        .map(|r| opts.ion_mass * 2.0 * r.omega_exp * r.omega_err)
        .collect();

    let x0 = zero_endcap_equilibrium;
    if x0 < xs[0] || x0 > *xs.last().expect("non-empty") {
        log::warn!(
            "zero-endcap equilibrium {:.1} um lies outside the scanned range; clamping",
            x0 / 1e-6
        );
    }
    let (grid1, force, force_err) = cumulative_from_anchor(&xs, &curv, &curv_err, x0.clamp(xs[0], *xs.last().expect("non-empty")));
    let (grid2, energy, err) = cumulative_from_anchor(&grid1, &force, &force_err, anchor);

    let q = opts.ion_charge;
    let volts: Vec<f64> = energy.iter().map(|e| e / q).collect();
    let err_v: Vec<f64> = err.iter().map(|e| e / q).collect();
    PatchPotential::from_samples(grid2, volts, err_v, anchor, PatchProvenance::Frequencies)
}

/// Point-wise mean of the two reconstructions on the intersection of their
/// ranges. The reported uncertainty combines half the inter-method difference
/// with the propagated input uncertainties in quadrature.
pub fn mean_patch(a: &PatchPotential, b: &PatchPotential) -> Result<PatchPotential> {
    if (a.anchor - b.anchor).abs() > 1e-9 {
        return Err(Error::Other(format!(
            "mean_patch requires a common anchor ({:.3e} vs {:.3e})",
            a.anchor, b.anchor
        )));
    }
    let (alo, ahi) = a.range();
    let (blo, bhi) = b.range();
    let lo = alo.max(blo);
    let hi = ahi.min(bhi);
    if hi <= lo {
        return Err(Error::DisjointRanges);
    }
    let mut grid: Vec<f64> = a
        .x
        .iter()
        .chain(b.x.iter())
        .cloned()
        .filter(|&x| x >= lo && x <= hi)
        .collect();
    grid.sort_by(|p, q| p.partial_cmp(q).expect("finite"));
    grid.dedup_by(|p, q| (*p - *q).abs() < 1e-15);

    let mut values = Vec::with_capacity(grid.len());
    let mut unc = Vec::with_capacity(grid.len());
    for &x in &grid {
        let (va, _) = a.evaluate(x);
        let (vb, _) = b.evaluate(x);
        values.push(0.5 * (va + vb));
        let half_diff = 0.5 * (va - vb).abs();
        let ua = a.uncertainty_at(x);
        let ub = b.uncertainty_at(x);
        unc.push((half_diff * half_diff + 0.25 * (ua * ua + ub * ub)).sqrt());
    }
    PatchPotential::from_samples(grid, values, unc, a.anchor, PatchProvenance::Mean)
}

/// Mean discrepancies between a scan's measurements and the predictions of a
/// reconstructed patch fed back through the harmonic model.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConsistencyReport {
    /// Mean |x_pred - x_exp| (m).
    pub mean_position_discrepancy: f64,
    /// Mean |omega_pred - omega_exp| (rad/s).
    pub mean_frequency_discrepancy: f64,
}

/// Re-predicts each scan point from the patch: the equilibrium shifts to
/// where the harmonic trap force balances the patch force, and the frequency
/// follows from the total curvature there.
pub fn scan_consistency(
    scan: &AxialScan,
    patch: &PatchPotential,
    ion_mass: f64,
    ion_charge: f64,
) -> Result<ConsistencyReport> {
    let sorted = scan.validated_sorted()?;
    let q = ion_charge;
    let mut pos_sum = 0.0;
    let mut freq_sum = 0.0;
    for r in &sorted {
        let k = ion_mass * r.omega_sim * r.omega_sim;
        let force = |x: f64| k * (x - r.x_sim) + q * patch.derivative(x);
        // Bisection on a bracket around the unperturbed equilibrium.
        let mut lo = r.x_sim - 500e-6;
        let mut hi = r.x_sim + 500e-6;
        if force(lo) * force(hi) > 0.0 {
            return Err(Error::Other(
                "patch force overwhelms the trap in the consistency check".into(),
            ));
        }
        for _ in 0..60 {
            let mid = 0.5 * (lo + hi);
            if force(lo) * force(mid) <= 0.0 {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        let x_pred = 0.5 * (lo + hi);
        let h = 2e-6;
        let upp = (patch.derivative(x_pred + h) - patch.derivative(x_pred - h)) / (2.0 * h);
        let curv = k + q * upp;
        let omega_pred = if curv > 0.0 { (curv / ion_mass).sqrt() } else { 0.0 };
        pos_sum += (x_pred - r.x_exp).abs();
        freq_sum += (omega_pred - r.omega_exp).abs();
    }
    let n = sorted.len() as f64;
    Ok(ConsistencyReport {
        mean_position_discrepancy: pos_sum / n,
        mean_frequency_discrepancy: freq_sum / n,
    })
}

/// Position-dependent reconstruction uncertainty: piecewise linear in the
/// distance from the anchor, non-decreasing outward.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PositionErrorProfile {
    pub anchor: f64,
    /// (|x - anchor| in m, error in m), sorted by distance.
    pub breakpoints: Vec<(f64, f64)>,
}

/// Default profile: 1 µm at the anchor rising to 15 µm at 400 µm.
pub fn default_position_error_breakpoints() -> Vec<(f64, f64)> {
    vec![(0.0, 1e-6), (400e-6, 15e-6)]
}

pub fn position_dependent_error(
    patch: &PatchPotential,
    breakpoints: &[(f64, f64)],
) -> Result<PositionErrorProfile> {
    if breakpoints.len() < 2 {
        return Err(Error::Config("position error profile needs >= 2 breakpoints".into()));
    }
    if breakpoints.windows(2).any(|w| w[1].0 <= w[0].0 || w[1].1 < w[0].1) {
        return Err(Error::Config(
            "position error breakpoints must increase in distance and be non-decreasing in error"
                .into(),
        ));
    }
    Ok(PositionErrorProfile { anchor: patch.anchor, breakpoints: breakpoints.to_vec() })
}

impl PositionErrorProfile {
    pub fn error_at(&self, x: f64) -> f64 {
        let d = (x - self.anchor).abs();
        let pts = &self.breakpoints;
        if d <= pts[0].0 {
            return pts[0].1;
        }
        if d >= pts[pts.len() - 1].0 {
            return pts[pts.len() - 1].1;
        }
        let i = pts.partition_point(|p| p.0 <= d) - 1;
        let t = (d - pts[i].0) / (pts[i + 1].0 - pts[i].0);
        pts[i].1 * (1.0 - t) + pts[i + 1].1 * t
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::consts::{CA40_ION_MASS, ELEMENTARY_CHARGE, UM};
    use approx::assert_relative_eq;

    fn opts() -> ReconstructOptions {
        ReconstructOptions::new(CA40_ION_MASS, ELEMENTARY_CHARGE)
    }

    fn zero_discrepancy_scan() -> AxialScan {
        let omega = 2.0 * std::f64::consts::PI * 200e3;
        let records = (0..21)
            .map(|i| {
                let x = (-200.0 + 20.0 * i as f64) * UM;
                ScanRecord {
                    v_ecd: i as f64,
                    x_exp: x,
                    x_err: 0.8 * UM,
                    omega_exp: omega,
                    omega_err: 2e3 * 2.0 * std::f64::consts::PI,
                    x_sim: x,
                    omega_sim: omega,
                }
            })
            .collect();
        AxialScan { mean_endcap_voltage: 1000.0, records }
    }

    #[test]
    fn zero_discrepancy_gives_zero_patch() {
        let scan = zero_discrepancy_scan();
        let patch = reconstruct_from_positions(&scan, &opts()).unwrap();
        for &v in &patch.values {
            assert!(v.abs() < 1e-15);
        }
        let patch_f = reconstruct_from_frequencies(&scan, 0.0, &opts()).unwrap();
        for &v in &patch_f.values {
            assert!(v.abs() < 1e-12);
        }
    }

    #[test]
    fn constant_offset_gives_linear_patch() {
        let omega = 2.0 * std::f64::consts::PI * 150e3;
        let delta = 3.0 * UM;
        let records = (0..11)
            .map(|i| {
                let x_sim = (-100.0 + 20.0 * i as f64) * UM;
                ScanRecord {
                    v_ecd: i as f64,
                    x_exp: x_sim + delta,
                    x_err: 0.8 * UM,
                    omega_exp: omega,
                    omega_err: 1.0,
                    x_sim,
                    omega_sim: omega,
                }
            })
            .collect();
        let scan = AxialScan { mean_endcap_voltage: 1000.0, records };
        let o = ReconstructOptions { anchor_override: Some(0.0), ..opts() };
        let patch = reconstruct_from_positions(&scan, &o).unwrap();
        let expected_slope = -CA40_ION_MASS * omega * omega * delta / ELEMENTARY_CHARGE;
        let (lo, hi) = patch.range();
        let measured = (patch.evaluate(hi).0 - patch.evaluate(lo).0) / (hi - lo);
        assert_relative_eq!(measured, expected_slope, max_relative = 1e-9);
    }

    #[test]
    fn non_monotonic_scan_is_rejected() {
        let mut scan = zero_discrepancy_scan();
        scan.records[5].x_exp = scan.records[7].x_exp;
        // Also break the measured monotonicity in V order.
        scan.records[5].x_exp += 100.0 * UM;
        let err = reconstruct_from_positions(&scan, &opts()).unwrap_err();
        assert!(matches!(err, Error::NonMonotonicScan(_)));
    }

    #[test]
    fn planted_quadratic_recovered_by_frequency_method() {
        // Stray potential (1/2) k x²: constant curvature discrepancy.
        let m = CA40_ION_MASS;
        let q = ELEMENTARY_CHARGE;
        let omega0 = 2.0 * std::f64::consts::PI * 180e3;
        let k_trap = m * omega0 * omega0;
        let k_p = 0.08 * k_trap; // in energy units (J/m²)
        let records: Vec<ScanRecord> = (0..41)
            .map(|i| {
                let x_sim = (-200.0 + 10.0 * i as f64) * UM;
                // Exact minimization of (1/2)k(x-xs)² + (1/2)k_p x².
                let x_exp = k_trap * x_sim / (k_trap + k_p);
                ScanRecord {
                    v_ecd: i as f64,
                    x_exp,
                    x_err: 0.8 * UM,
                    omega_exp: ((k_trap + k_p) / m).sqrt(),
                    omega_err: 1.0,
                    x_sim,
                    omega_sim: omega0,
                }
            })
            .collect();
        let scan = AxialScan { mean_endcap_voltage: 1000.0, records };
        let patch = reconstruct_from_frequencies(&scan, 0.0, &opts()).unwrap();

        // Compare against the plant modulo constant: both vanish at x = 0.
        let plant = |x: f64| 0.5 * k_p * x * x / q;
        let mut rms = 0.0;
        let mut range: f64 = 0.0;
        for &x in &patch.x {
            let (v, _) = patch.evaluate(x);
            rms += (v - plant(x)).powi(2);
            range = range.max(plant(x).abs());
        }
        rms = (rms / patch.x.len() as f64).sqrt();
        assert!(rms < 0.02 * range, "rms {rms:.3e} V vs plant range {range:.3e} V");
    }

    #[test]
    fn mean_patch_of_identical_inputs_is_identity() {
        let x: Vec<f64> = (0..11).map(|i| i as f64 * 10.0 * UM).collect();
        let v: Vec<f64> = x.iter().map(|&x| 1e-3 * (x / UM)).collect();
        let u = vec![1e-4; 11];
        let a = PatchPotential::from_samples(x.clone(), v.clone(), u.clone(), 0.0, PatchProvenance::Positions)
            .unwrap();
        let b = PatchPotential::from_samples(x, v, u, 0.0, PatchProvenance::Frequencies).unwrap();
        let m = mean_patch(&a, &b).unwrap();
        for (i, &x) in m.x.iter().enumerate() {
            assert_relative_eq!(m.values[i], a.evaluate(x).0, max_relative = 1e-12);
        }
    }

    #[test]
    fn mean_of_opposite_patches_is_zero() {
        let x: Vec<f64> = (0..11).map(|i| (i as f64 - 5.0) * 10.0 * UM).collect();
        let v: Vec<f64> = x.iter().map(|&x| (x / UM).sin() * 1e-3).collect();
        let neg: Vec<f64> = v.iter().map(|&y| -y).collect();
        let u = vec![0.0; 11];
        let a = PatchPotential::from_samples(x.clone(), v, u.clone(), 0.0, PatchProvenance::Positions)
            .unwrap();
        let b = PatchPotential::from_samples(x, neg, u, 0.0, PatchProvenance::Frequencies).unwrap();
        let m = mean_patch(&a, &b).unwrap();
        for &v in &m.values {
            assert!(v.abs() < 1e-18);
        }
    }

    #[test]
    fn disjoint_ranges_error() {
        let a = PatchPotential::from_samples(
            vec![0.0, 1e-4],
            vec![0.0, 1.0],
            vec![0.0, 0.0],
            0.0,
            PatchProvenance::Positions,
        )
        .unwrap();
        let b = PatchPotential::from_samples(
            vec![2e-4, 3e-4],
            vec![0.0, 1.0],
            vec![0.0, 0.0],
            0.0,
            PatchProvenance::Frequencies,
        )
        .unwrap();
        assert!(matches!(mean_patch(&a, &b).unwrap_err(), Error::DisjointRanges));
    }

    #[test]
    fn position_error_profile_endpoints_and_monotonicity() {
        let x: Vec<f64> = (0..5).map(|i| (i as f64 - 2.0) * 100.0 * UM).collect();
        let v = vec![0.0; 5];
        let u = vec![0.0; 5];
        let patch =
            PatchPotential::from_samples(x, v, u, 30.0 * UM, PatchProvenance::Mean).unwrap();
        let profile =
            position_dependent_error(&patch, &default_position_error_breakpoints()).unwrap();
        assert_relative_eq!(profile.error_at(30.0 * UM), 1.0 * UM, max_relative = 1e-12);
        assert_relative_eq!(profile.error_at(430.0 * UM), 15.0 * UM, max_relative = 1e-12);
        assert_relative_eq!(profile.error_at(930.0 * UM), 15.0 * UM, max_relative = 1e-12);
        let mut prev = 0.0;
        for i in 0..50 {
            let e = profile.error_at(30.0 * UM + i as f64 * 10.0 * UM);
            assert!(e >= prev);
            prev = e;
        }
    }

    #[test]
    fn uncertainty_grows_outward_from_anchor() {
        let scan = {
            let omega = 2.0 * std::f64::consts::PI * 200e3;
            let records = (0..21)
                .map(|i| {
                    let x_sim = (-200.0 + 20.0 * i as f64) * UM;
                    let x_exp = x_sim + 1.0 * UM * (x_sim / UM / 100.0).sin();
                    ScanRecord {
                        v_ecd: i as f64,
                        x_exp,
                        x_err: 0.8 * UM,
                        omega_exp: omega * 1.001,
                        omega_err: 2e3,
                        x_sim,
                        omega_sim: omega,
                    }
                })
                .collect();
            AxialScan { mean_endcap_voltage: 1000.0, records }
        };
        let patch = reconstruct_from_positions(&scan, &opts()).unwrap();
        let anchor_idx = patch
            .x
            .iter()
            .position(|&x| (x - patch.anchor).abs() < 1e-12)
            .expect("anchor sample present");
        assert_eq!(patch.values[anchor_idx], 0.0);
        for i in anchor_idx + 1..patch.x.len() {
            assert!(patch.uncertainty[i] >= patch.uncertainty[i - 1]);
        }
        for i in (1..=anchor_idx).rev() {
            assert!(patch.uncertainty[i - 1] >= patch.uncertainty[i]);
        }
    }
}
