//! Extraction of equilibrium positions, well classification, and secular
//! frequencies from a composed energy landscape, plus the axial frequency law
//! used to calibrate endcap voltages.

use crate::consts::alpha_si_to_khz2_per_mv;
use crate::error::{Error, Result};
use crate::maps::EnergyMap;
use serde::{Deserialize, Serialize};

/// Fitted 2D paraboloid: Phi ~ offset + (1/2) c_major u² + (1/2) c_minor v²
/// in the rotated frame. Curvatures in J/m², center in meters, theta the
/// major-axis angle in (-pi/2, pi/2].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParaboloidFit {
    pub center: [f64; 2],
    pub c_major: f64,
    pub c_minor: f64,
    pub theta: f64,
    pub offset: f64,
    pub rms_residual: f64,
}

/// Residual fraction of the in-disk potential range above which a
/// configuration is treated as too anharmonic for a harmonic fit.
pub const TRANSITION_RESIDUAL_FRACTION: f64 = 0.05;

/// Fraction of the neutral-fiber axial curvature below which the axial cut is
/// treated as quartic-flat.
pub const TRANSITION_CURVATURE_FRACTION: f64 = 0.10;

/// Default paraboloid fit radius around the seed.
pub const DEFAULT_FIT_RADIUS: f64 = 50e-6;

/// Mean position of all nodes whose potential lies in the lowest first
/// percentile of map values.
pub fn find_minimum_seed(map: &EnergyMap) -> Result<[f64; 2]> {
    let min = map.min_value();
    let max = map.max_value();
    if !(max > min) {
        return Err(Error::DegenerateFit("map is constant; no minimum".into()));
    }
    let mut values: Vec<f64> = map
        .values
        .iter()
        .zip(map.valid.iter())
        .filter(|(_, &ok)| ok)
        .map(|(v, _)| *v)
        .collect();
    let k = ((values.len() as f64 * 0.01).ceil() as usize).clamp(1, values.len());
    values.select_nth_unstable_by(k - 1, |a, b| a.partial_cmp(b).expect("finite"));
    let threshold = values[k - 1];

    let g = &map.grid;
    let mut sx = 0.0;
    let mut sy = 0.0;
    let mut count = 0usize;
    for j in 0..g.ny {
        for i in 0..g.nx {
            if map.is_valid(i, j) && map.at(i, j) <= threshold {
                sx += g.x(i);
                sy += g.y(j);
                count += 1;
            }
        }
    }
    Ok([sx / count as f64, sy / count as f64])
}

/// Least-squares paraboloid over the disk of `radius` around `seed`.
///
/// The general quadratic is solved linearly, then diagonalized; the fit fails
/// with a not-a-well error when the Hessian is not positive definite or the
/// residual exceeds the anharmonicity threshold, directing the caller to the
/// well classifier.
pub fn fit_paraboloid(map: &EnergyMap, seed: [f64; 2], radius: f64) -> Result<ParaboloidFit> {
    let g = &map.grid;
    if !g.contains_with_margin(seed, radius) {
        return Err(Error::OutOfBounds(seed));
    }
    let mut rows: Vec<[f64; 6]> = Vec::new();
    let mut rhs: Vec<f64> = Vec::new();
    let r2 = radius * radius;
    for j in 0..g.ny {
        let dy = g.y(j) - seed[1];
        if dy.abs() > radius {
            continue;
        }
        for i in 0..g.nx {
            let dx = g.x(i) - seed[0];
            if dx * dx + dy * dy > r2 || !map.is_valid(i, j) {
                continue;
            }
            let u = dx / radius;
            let v = dy / radius;
            rows.push([1.0, u, v, u * u, u * v, v * v]);
            rhs.push(map.at(i, j));
        }
    }
    if rows.len() < 6 {
        return Err(Error::DegenerateFit(format!(
            "only {} nodes inside the {:.0} um fit disk",
            rows.len(),
            radius / 1e-6
        )));
    }

    let a = nalgebra::DMatrix::from_fn(rows.len(), 6, |r, c| rows[r][c]);
    let b = nalgebra::DVector::from_column_slice(&rhs);
    let svd = a.clone().svd(true, true);
    let coeffs = svd.solve(&b, 1e-14).map_err(|e| Error::DegenerateFit(e.to_string()))?;

    let fitted = &a * &coeffs;
    let residual = (&b - &fitted).map(|r| r * r).sum() / rows.len() as f64;
    let rms = residual.sqrt();

    // Scaled Hessian and gradient; convert back to physical units.
    let (c1, c2, c3, c4, c5) = (coeffs[1], coeffs[2], coeffs[3], coeffs[4], coeffs[5]);
    let h11 = 2.0 * c3 / r2;
    let h12 = c4 / r2;
    let h22 = 2.0 * c5 / r2;

    let det = h11 * h22 - h12 * h12;
    if det.abs() < 1e-300 {
        return Err(Error::NotAWell("singular Hessian".into()));
    }
    // Stationary point of the fitted quadratic.
    let g1 = c1 / radius;
    let g2 = c2 / radius;
    let u0 = -(h22 * g1 - h12 * g2) / det;
    let v0 = -(h11 * g2 - h12 * g1) / det;
    let center = [seed[0] + u0, seed[1] + v0];

    let mean = 0.5 * (h11 + h22);
    let diff = 0.5 * (h11 - h22);
    let rad = (diff * diff + h12 * h12).sqrt();
    let c_major = mean + rad;
    let c_minor = mean - rad;
    if c_minor <= 0.0 {
        return Err(Error::NotAWell(format!(
            "indefinite Hessian: curvatures ({c_major:.3e}, {c_minor:.3e}) J/m^2"
        )));
    }

    let data_min = rhs.iter().cloned().fold(f64::INFINITY, f64::min);
    let data_max = rhs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let range = data_max - data_min;
    if range > 0.0 && rms > TRANSITION_RESIDUAL_FRACTION * range {
        return Err(Error::NotAWell(format!(
            "anharmonic: fit rms {:.2e} J exceeds {:.0}% of the in-disk range {:.2e} J",
            rms,
            TRANSITION_RESIDUAL_FRACTION * 100.0,
            range
        )));
    }

    let mut theta = 0.5 * (2.0 * h12).atan2(h11 - h22);
    if theta <= -std::f64::consts::FRAC_PI_2 {
        theta += std::f64::consts::PI;
    }
    let offset = coeffs[0] + c1 * u0 / radius + c2 * v0 / radius
        + c3 * (u0 / radius) * (u0 / radius)
        + c4 * (u0 / radius) * (v0 / radius)
        + c5 * (v0 / radius) * (v0 / radius);

    Ok(ParaboloidFit { center, c_major, c_minor, theta, offset, rms_residual: rms })
}

/// Secular frequency from a fitted curvature: omega = sqrt(c / M).
pub fn secular_frequency(curvature: f64, ion_mass: f64) -> Result<f64> {
    if curvature <= 0.0 {
        return Err(Error::NotAWell(format!("non-positive curvature {curvature:.3e}")));
    }
    Ok((curvature / ion_mass).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum WellKind {
    Single,
    Double,
    Transition,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WellClassification {
    pub kind: WellKind,
    /// Refined (x, Phi) of each local minimum, ordered by x.
    pub minima: Vec<(f64, f64)>,
    /// Barrier above the higher minimum (double wells only).
    pub barrier: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct ClassifyParams {
    pub fit_radius: f64,
    pub residual_fraction: f64,
    pub curvature_fraction: f64,
    /// Axial curvature (J/m²) of the same trap with neutral fibers; enables
    /// the quartic-flatness test.
    pub neutral_curvature: Option<f64>,
}

impl Default for ClassifyParams {
    fn default() -> Self {
        ClassifyParams {
            fit_radius: DEFAULT_FIT_RADIUS,
            residual_fraction: TRANSITION_RESIDUAL_FRACTION,
            curvature_fraction: TRANSITION_CURVATURE_FRACTION,
            neutral_curvature: None,
        }
    }
}

/// Valley-floor cut along the soft axis: for every x column the minimum over
/// free-space y nodes. Columns with no free node are skipped.
pub fn axial_valley_cut(map: &EnergyMap) -> Vec<(f64, f64)> {
    let g = &map.grid;
    (0..g.nx)
        .filter_map(|i| {
            let mut best = f64::INFINITY;
            for j in 0..g.ny {
                if map.is_valid(i, j) {
                    best = best.min(map.at(i, j));
                }
            }
            best.is_finite().then_some((g.x(i), best))
        })
        .collect()
}

fn column_argmin_y(map: &EnergyMap, x: f64) -> f64 {
    let g = &map.grid;
    let i = (((x - g.origin[0]) / g.spacing).round() as isize).clamp(0, g.nx as isize - 1) as usize;
    let mut best = f64::INFINITY;
    let mut best_j = 0;
    for j in 0..g.ny {
        if map.is_valid(i, j) && map.at(i, j) < best {
            best = map.at(i, j);
            best_j = j;
        }
    }
    g.y(best_j)
}

/// Classifies the axial potential as single-well, double-well, or transition.
///
/// Strict local minima are counted on the 3-node-smoothed cut; a
/// configuration is flagged as transition when the axial curvature falls
/// below the neutral-fiber reference fraction or when the paraboloid fit
/// around the global minimum violates the residual rule.
pub fn classify_wells(
    map: &EnergyMap,
    axial_cut: &[(f64, f64)],
    params: &ClassifyParams,
) -> Result<WellClassification> {
    if axial_cut.len() < 5 {
        return Err(Error::DegenerateFit("axial cut too short to classify".into()));
    }
    let n = axial_cut.len();
    let xs: Vec<f64> = axial_cut.iter().map(|p| p.0).collect();
    let raw: Vec<f64> = axial_cut.iter().map(|p| p.1).collect();
    // 3-node moving average suppresses grid-scale noise before counting.
    let mut smooth = raw.clone();
    for i in 1..n - 1 {
        smooth[i] = (raw[i - 1] + raw[i] + raw[i + 1]) / 3.0;
    }

    let mut minima: Vec<(f64, f64)> = Vec::new();
    for i in 1..n - 1 {
        if smooth[i] < smooth[i - 1] && smooth[i] < smooth[i + 1] {
            let (x, v) = refine_parabolic(&xs, &smooth, i);
            minima.push((x, v));
        }
    }
    if minima.is_empty() {
        let (gi, gv) = smooth
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.partial_cmp(b.1).expect("finite"))
            .expect("non-empty");
        return Ok(WellClassification {
            kind: WellKind::Transition,
            minima: vec![(xs[gi], *gv)],
            barrier: None,
        });
    }
    // Keep the two deepest, ordered by x.
    minima.sort_by(|a, b| a.1.partial_cmp(&b.1).expect("finite"));
    minima.truncate(2);
    minima.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("finite"));

    let global = minima
        .iter()
        .cloned()
        .min_by(|a, b| a.1.partial_cmp(&b.1).expect("finite"))
        .expect("non-empty");

    // Quartic-flatness rule on the 1D curvature at the global minimum.
    let mut flat = false;
    if let Some(neutral) = params.neutral_curvature {
        let gi = nearest_index(&xs, global.0);
        if gi > 0 && gi < n - 1 {
            let h1 = xs[gi] - xs[gi - 1];
            let h2 = xs[gi + 1] - xs[gi];
            let c = 2.0
                * (smooth[gi - 1] * h2 - smooth[gi] * (h1 + h2) + smooth[gi + 1] * h1)
                / (h1 * h2 * (h1 + h2));
            if c < params.curvature_fraction * neutral {
                flat = true;
            }
        }
    }

    // Residual rule via the paraboloid fit around the global minimum.
    let seed = [global.0, column_argmin_y(map, global.0)];
    let fit_ok = match fit_paraboloid(map, seed, params.fit_radius) {
        Ok(_) => true,
        Err(Error::NotAWell(_)) => false,
        Err(Error::OutOfBounds(_)) => true, // fit disk clipped; leave to the caller
        Err(e) => return Err(e),
    };

    if flat || !fit_ok {
        return Ok(WellClassification { kind: WellKind::Transition, minima, barrier: None });
    }

    if minima.len() == 2 {
        let i0 = nearest_index(&xs, minima[0].0);
        let i1 = nearest_index(&xs, minima[1].0);
        let peak = smooth[i0..=i1].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let barrier = peak - minima[0].1.max(minima[1].1);
        Ok(WellClassification { kind: WellKind::Double, minima, barrier: Some(barrier) })
    } else {
        Ok(WellClassification { kind: WellKind::Single, minima, barrier: None })
    }
}

fn nearest_index(xs: &[f64], x: f64) -> usize {
    let mut best = 0;
    let mut dist = f64::INFINITY;
    for (i, &xi) in xs.iter().enumerate() {
        let d = (xi - x).abs();
        if d < dist {
            dist = d;
            best = i;
        }
    }
    best
}

/// Sub-grid refinement of a discrete minimum by a parabola through the three
/// surrounding samples.
fn refine_parabolic(xs: &[f64], ys: &[f64], i: usize) -> (f64, f64) {
    let (x0, x1, x2) = (xs[i - 1], xs[i], xs[i + 1]);
    let (y0, y1, y2) = (ys[i - 1], ys[i], ys[i + 1]);
    let d1 = (y1 - y0) / (x1 - x0);
    let d2 = (y2 - y1) / (x2 - x1);
    let curv = (d2 - d1) / (0.5 * (x2 - x0));
    if curv <= 0.0 {
        return (x1, y1);
    }
    let slope_mid = 0.5 * (d1 + d2);
    let x_min = 0.5 * (x0 + x2) - slope_mid / curv;
    let x_min = x_min.clamp(x0, x2);
    let t = x_min - x1;
    let y_min = y1 + slope_mid * (x1 - 0.5 * (x0 + x2) + t) + 0.5 * curv * t * t
        - 0.5 * curv * (x1 - 0.5 * (x0 + x2)).powi(2);
    (x_min, y_min.min(y1))
}

/// Which minimum of a double well is analyzed downstream. The apparatus
/// convention is the x < 0 well.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum WellSelection {
    NegativeX,
    PositiveX,
    Deepest,
}

impl Default for WellSelection {
    fn default() -> Self {
        WellSelection::NegativeX
    }
}

/// Extracted per-configuration observables.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Observables {
    pub kind: WellKind,
    /// Axial equilibrium position (m) of the analyzed well.
    pub x: f64,
    /// Axial secular frequency (rad/s); from the 1D cut curvature when the
    /// harmonic fit is invalid.
    pub omega: f64,
    /// Paraboloid fit rms residual (J); zero for 1D fallbacks.
    pub fit_rms: f64,
}

/// Full landscape analysis of one composed map: classify, pick the configured
/// well, fit, and convert curvature to a secular frequency.
///
/// Transition configurations still return position/frequency estimates from
/// the 1D cut (a synthetic "measurement" exists even where the harmonic model
/// does not), flagged by `kind` so that inference can exclude them.
pub fn extract_observables(
    map: &EnergyMap,
    params: &ClassifyParams,
    selection: WellSelection,
    ion_mass: f64,
) -> Result<Observables> {
    let cut = axial_valley_cut(map);
    let wells = classify_wells(map, &cut, params)?;
    let chosen = match wells.kind {
        WellKind::Double => match selection {
            WellSelection::NegativeX => wells.minima[0],
            WellSelection::PositiveX => wells.minima[wells.minima.len() - 1],
            WellSelection::Deepest => wells
                .minima
                .iter()
                .cloned()
                .min_by(|a, b| a.1.partial_cmp(&b.1).expect("finite"))
                .expect("double well has minima"),
        },
        _ => wells
            .minima
            .iter()
            .cloned()
            .min_by(|a, b| a.1.partial_cmp(&b.1).expect("finite"))
            .expect("classification returns at least one minimum"),
    };

    let seed = [chosen.0, column_argmin_y(map, chosen.0)];
    if wells.kind != WellKind::Transition {
        match fit_paraboloid(map, seed, params.fit_radius) {
            Ok(fit) => {
                let omega = secular_frequency(fit.c_minor, ion_mass)?;
                return Ok(Observables {
                    kind: wells.kind,
                    x: fit.center[0],
                    omega,
                    fit_rms: fit.rms_residual,
                });
            }
            Err(Error::NotAWell(_)) => {
                // Fall through to the 1D estimate, flagged as transition.
            }
            Err(e) => return Err(e),
        }
    }
    let (x, omega) = one_dimensional_observables(&cut, chosen.0, ion_mass)?;
    Ok(Observables { kind: WellKind::Transition, x, omega, fit_rms: 0.0 })
}

/// Position and frequency from the 1D cut alone: refined minimum plus the
/// local curvature (clamped to zero frequency when flat).
fn one_dimensional_observables(
    cut: &[(f64, f64)],
    near_x: f64,
    ion_mass: f64,
) -> Result<(f64, f64)> {
    let xs: Vec<f64> = cut.iter().map(|p| p.0).collect();
    let ys: Vec<f64> = cut.iter().map(|p| p.1).collect();
    let i = nearest_index(&xs, near_x).clamp(1, xs.len() - 2);
    let (x_min, _) = refine_parabolic(&xs, &ys, i);
    let h1 = xs[i] - xs[i - 1];
    let h2 = xs[i + 1] - xs[i];
    let curv = 2.0 * (ys[i - 1] * h2 - ys[i] * (h1 + h2) + ys[i + 1] * h1)
        / (h1 * h2 * (h1 + h2));
    let omega = if curv > 0.0 { (curv / ion_mass).sqrt() } else { 0.0 };
    Ok((x_min, omega))
}

/// Fitted axial law omega_ax² = alpha V_ec,M + omega0².
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AxialLawFit {
    /// Slope in SI units, (rad/s)² per volt.
    pub alpha_si: f64,
    /// Intercept, (rad/s)².
    pub omega0_sq: f64,
    /// 2x2 parameter covariance (alpha, omega0_sq), SI units.
    pub covariance: [[f64; 2]; 2],
    pub rms_residual: f64,
}

impl AxialLawFit {
    pub fn alpha_khz2_per_mv(&self) -> f64 {
        alpha_si_to_khz2_per_mv(self.alpha_si)
    }

    /// Residual static confinement, rad/s (zero when the intercept is negative).
    pub fn omega0(&self) -> f64 {
        self.omega0_sq.max(0.0).sqrt()
    }

    pub fn predict_omega(&self, v: f64) -> f64 {
        (self.alpha_si * v + self.omega0_sq).max(0.0).sqrt()
    }
}

/// Linear least squares of omega² on V. Accepts two or more points with
/// distinct voltages; two points interpolate exactly.
pub fn fit_axial_law(points: &[(f64, f64)]) -> Result<AxialLawFit> {
    if points.len() < 2 {
        return Err(Error::DegenerateFit("axial law fit needs >= 2 points".into()));
    }
    let n = points.len() as f64;
    let mean_v = points.iter().map(|p| p.0).sum::<f64>() / n;
    let mean_w2 = points.iter().map(|p| p.1 * p.1).sum::<f64>() / n;
    let sxx: f64 = points.iter().map(|p| (p.0 - mean_v).powi(2)).sum();
    if sxx <= 0.0 {
        return Err(Error::DegenerateFit("axial law fit needs distinct voltages".into()));
    }
    let sxy: f64 = points.iter().map(|p| (p.0 - mean_v) * (p.1 * p.1 - mean_w2)).sum();
    let alpha = sxy / sxx;
    let intercept = mean_w2 - alpha * mean_v;

    let mut ss = 0.0;
    for (v, w) in points {
        let r = w * w - (alpha * v + intercept);
        ss += r * r;
    }
    let dof = (points.len() as f64 - 2.0).max(1.0);
    let var = ss / dof;
    let cov = [
        [var / sxx, -var * mean_v / sxx],
        [-var * mean_v / sxx, var * (1.0 / n + mean_v * mean_v / sxx)],
    ];
    Ok(AxialLawFit {
        alpha_si: alpha,
        omega0_sq: intercept,
        covariance: cov,
        rms_residual: (ss / points.len() as f64).sqrt(),
    })
}

/// Endcap voltage scale compensating the geometric discrepancy between the
/// measured and simulated axial-law slopes.
pub fn calibrate_endcaps(alpha_exp: f64, alpha_sim: f64) -> Result<f64> {
    if alpha_exp <= 0.0 || alpha_sim <= 0.0 {
        return Err(Error::Config("calibration requires positive alpha values".into()));
    }
    Ok(alpha_exp / alpha_sim)
}
