//! Forward models generating synthetic experimental data for round-trip
//! validation: nanopositioner and camera calibration effects, measurement
//! noise, planted patch potentials, and fiber-retraction datasets driven by
//! the composed landscape.

use crate::cache::BasisProvider;
use crate::composer::{compose_total, EndcapVoltages};
use crate::error::{Error, Result};
use crate::geometry::{ChargeState, FiberLabel, TrapConfig};
use crate::inference::{FiberScanDataset, ScanPoint};
use crate::landscape::{extract_observables, ClassifyParams, WellKind, WellSelection};
use crate::patch::{AxialScan, PatchPotential, PatchProvenance, ScanRecord};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Direction-dependent nanopositioner step calibration for one fiber.
/// Steps in meters per step; uncertainties in meters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PositionerModel {
    pub step_out: f64,
    pub step_in: f64,
    pub step_uncertainty: f64,
    /// Accumulated-position uncertainty below the far threshold.
    pub base_uncertainty: f64,
    /// Uncertainty beyond `far_threshold` retraction.
    pub far_uncertainty: f64,
    pub far_threshold: f64,
}

impl PositionerModel {
    /// Calibration of the multimode fiber stage.
    pub fn fiber_m() -> Self {
        PositionerModel {
            step_out: 1.7e-6,
            step_in: 2.2e-6,
            step_uncertainty: 0.1e-6,
            base_uncertainty: 13e-6,
            far_uncertainty: 13e-6,
            far_threshold: f64::INFINITY,
        }
    }

    /// Calibration of the photonic-crystal fiber stage, whose load changes
    /// beyond 0.75 mm retraction.
    pub fn fiber_p() -> Self {
        PositionerModel {
            step_out: 2.0e-6,
            step_in: 1.8e-6,
            step_uncertainty: 0.1e-6,
            base_uncertainty: 13e-6,
            far_uncertainty: 30e-6,
            far_threshold: 0.75e-3,
        }
    }

    pub fn for_label(label: FiberLabel) -> Self {
        match label {
            FiberLabel::M => Self::fiber_m(),
            FiberLabel::P => Self::fiber_p(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.step_out <= 0.0 || self.step_in <= 0.0 {
            return Err(Error::Config("positioner steps must be positive".into()));
        }
        Ok(())
    }

    /// Distance uncertainty at retraction d from the trap center.
    pub fn distance_uncertainty(&self, d: f64) -> f64 {
        if d > self.far_threshold {
            self.far_uncertainty
        } else {
            self.base_uncertainty
        }
    }
}

/// Positions after each commanded batch of signed steps (positive counts
/// retract, negative approach), starting from `d0`. With an RNG, each step
/// picks up independent Gaussian jitter at the calibrated step uncertainty.
pub fn simulate_retraction_sequence(
    model: &PositionerModel,
    d0: f64,
    steps: &[i64],
    mut rng: Option<&mut ChaCha8Rng>,
) -> Result<Vec<f64>> {
    model.validate()?;
    let mut d = d0;
    let mut out = Vec::with_capacity(steps.len());
    for &batch in steps {
        let (count, step) = if batch >= 0 {
            (batch as u64, model.step_out)
        } else {
            ((-batch) as u64, -model.step_in)
        };
        for _ in 0..count {
            let jitter = match rng.as_deref_mut() {
                Some(r) => gaussian(r) * model.step_uncertainty,
                None => 0.0,
            };
            d += step + jitter;
        }
        out.push(d);
    }
    Ok(out)
}

/// CCD model: pixel pitch calibration and centroiding precision.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CameraModel {
    pub pixel_pitch: f64,
    pub pitch_uncertainty: f64,
    pub centroid_precision_px: f64,
    pub field_of_view: f64,
}

impl Default for CameraModel {
    fn default() -> Self {
        CameraModel {
            pixel_pitch: 0.83e-6,
            pitch_uncertainty: 0.04e-6,
            centroid_precision_px: 1.0,
            field_of_view: 0.8e-3,
        }
    }
}

impl CameraModel {
    pub fn validate(&self) -> Result<()> {
        if self.pixel_pitch <= 0.0 {
            return Err(Error::Config("pixel pitch must be positive".into()));
        }
        Ok(())
    }

    /// Snaps a position to the pixel grid.
    pub fn quantize(&self, x: f64) -> f64 {
        (x / self.pixel_pitch).round() * self.pixel_pitch
    }
}

/// Gaussian measurement noise levels and the dataset seed.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NoiseModel {
    /// Position sigma (m).
    pub position_sigma: f64,
    /// Frequency sigma (rad/s).
    pub frequency_sigma: f64,
    pub seed: u64,
}

impl Default for NoiseModel {
    fn default() -> Self {
        NoiseModel {
            position_sigma: 0.8e-6,
            frequency_sigma: crate::consts::khz_to_omega(2.0),
            seed: 42,
        }
    }
}

impl NoiseModel {
    pub fn validate(&self) -> Result<()> {
        if self.position_sigma < 0.0 || self.frequency_sigma < 0.0 {
            return Err(Error::Config("noise sigmas must be >= 0".into()));
        }
        Ok(())
    }
}

/// Box-Muller Gaussian deviate; two uniform draws per call keeps the stream
/// layout independent of caller batching.
fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Polynomial stray potential U(x) = sum c_k x^k (volts, x in meters), with
/// exact derivatives for synthetic-scan generation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PolynomialPatch {
    pub coefficients: Vec<f64>,
}

impl PolynomialPatch {
    pub fn eval(&self, x: f64) -> f64 {
        self.coefficients.iter().rev().fold(0.0, |acc, c| acc * x + c)
    }

    pub fn derivative(&self, x: f64) -> f64 {
        let mut acc = 0.0;
        for (k, c) in self.coefficients.iter().enumerate().skip(1).rev() {
            acc = acc * x + k as f64 * c;
        }
        acc
    }

    pub fn second_derivative(&self, x: f64) -> f64 {
        let mut acc = 0.0;
        for (k, c) in self.coefficients.iter().enumerate().skip(2).rev() {
            acc = acc * x + (k * (k - 1)) as f64 * c;
        }
        acc
    }

    /// Root of U'(x) = 0 nearest `near`, by dense scan plus bisection; this
    /// is the equilibrium of the patch force alone (the zero-endcap
    /// equilibrium of a synthetic trap).
    pub fn stationary_point(&self, range: (f64, f64), near: f64) -> Option<f64> {
        let n = 2000;
        let h = (range.1 - range.0) / n as f64;
        let mut best: Option<f64> = None;
        for i in 0..n {
            let a = range.0 + i as f64 * h;
            let b = a + h;
            let (fa, fb) = (self.derivative(a), self.derivative(b));
            if fa == 0.0 {
                consider(&mut best, a, near);
            }
            if fa * fb < 0.0 {
                let mut lo = a;
                let mut hi = b;
                for _ in 0..60 {
                    let mid = 0.5 * (lo + hi);
                    if self.derivative(lo) * self.derivative(mid) <= 0.0 {
                        hi = mid;
                    } else {
                        lo = mid;
                    }
                }
                consider(&mut best, 0.5 * (lo + hi), near);
            }
        }
        best
    }
}

fn consider(best: &mut Option<f64>, candidate: f64, near: f64) {
    match best {
        Some(b) if (candidate - near).abs() >= (*b - near).abs() => {}
        _ => *best = Some(candidate),
    }
}

/// Planted-patch fixture forms.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum PatchForm {
    Polynomial { coefficients: Vec<f64>, range: (f64, f64), samples: usize },
    Samples { x: Vec<f64>, values: Vec<f64> },
}

/// Samples a patch fixture usable by composition; anchored at 0.
pub fn plant_patch(form: &PatchForm) -> Result<PatchPotential> {
    match form {
        PatchForm::Polynomial { coefficients, range, samples } => {
            if *samples < 2 || !(range.1 > range.0) {
                return Err(Error::Config("polynomial patch needs a range and >= 2 samples".into()));
            }
            let poly = PolynomialPatch { coefficients: coefficients.clone() };
            let h = (range.1 - range.0) / (*samples as f64 - 1.0);
            let x: Vec<f64> = (0..*samples).map(|i| range.0 + i as f64 * h).collect();
            let values: Vec<f64> = x.iter().map(|&xi| poly.eval(xi)).collect();
            let unc = vec![0.0; x.len()];
            PatchPotential::from_samples(x, values, unc, 0.0, PatchProvenance::Planted)
        }
        PatchForm::Samples { x, values } => {
            let unc = vec![0.0; x.len()];
            PatchPotential::from_samples(x.clone(), values.clone(), unc, 0.0, PatchProvenance::Planted)
        }
    }
}

/// Harmonic stand-in for the axial trap response used by patch round trips:
/// curvature from the mean endcap voltage, linear displacement from the
/// voltage difference.
#[derive(Debug, Clone)]
pub struct HarmonicAxialModel {
    pub ion_mass: f64,
    pub ion_charge: f64,
    /// Axial frequency at the scan's mean endcap voltage (rad/s).
    pub omega_sim: f64,
    /// Unperturbed equilibrium displacement per volt of V_ec,D (m/V).
    pub displacement_per_volt: f64,
}

/// Generates an endcap-difference scan by exact minimization of the total
/// potential (harmonic trap plus planted stray polynomial), with optional
/// measurement noise.
pub fn generate_axial_scan(
    model: &HarmonicAxialModel,
    plant: &PolynomialPatch,
    v_ecd: &[f64],
    mean_endcap_voltage: f64,
    noise: Option<&NoiseModel>,
) -> Result<AxialScan> {
    if v_ecd.len() < 3 {
        return Err(Error::Generation("scan needs >= 3 voltage points".into()));
    }
    let k = model.ion_mass * model.omega_sim * model.omega_sim;
    let q = model.ion_charge;
    let mut rng = noise.map(|n| ChaCha8Rng::seed_from_u64(n.seed));

    let mut records = Vec::with_capacity(v_ecd.len());
    for &v in v_ecd {
        let x_sim = model.displacement_per_volt * v;
        // Total force: k (x - x_sim) + q U'(x) = 0, solved by Newton with a
        // bisection fallback.
        let force = |x: f64| k * (x - x_sim) + q * plant.derivative(x);
        let dforce = |x: f64| k + q * plant.second_derivative(x);
        let mut x = x_sim;
        let mut converged = false;
        for _ in 0..100 {
            let f = force(x);
            let df = dforce(x);
            if df <= 0.0 {
                break;
            }
            let step = f / df;
            x -= step;
            if step.abs() < 1e-15 {
                converged = true;
                break;
            }
        }
        if !converged {
            let mut lo = x_sim - 2e-3;
            let mut hi = x_sim + 2e-3;
            if force(lo) * force(hi) > 0.0 {
                return Err(Error::Generation(format!(
                    "trap not confining at V_ecD = {v} (planted slope too steep)"
                )));
            }
            for _ in 0..80 {
                let mid = 0.5 * (lo + hi);
                if force(lo) * force(mid) <= 0.0 {
                    hi = mid;
                } else {
                    lo = mid;
                }
            }
            x = 0.5 * (lo + hi);
        }
        let curvature = k + q * plant.second_derivative(x);
        if curvature <= 0.0 {
            return Err(Error::Generation(format!(
                "non-confining total curvature at V_ecD = {v}"
            )));
        }
        let omega_exp_true = (curvature / model.ion_mass).sqrt();

        let (x_noise, w_noise, x_err, w_err) = match (&mut rng, noise) {
            (Some(r), Some(n)) => (
                gaussian(r) * n.position_sigma,
                gaussian(r) * n.frequency_sigma,
                n.position_sigma.max(1e-9),
                n.frequency_sigma.max(1e-3),
            ),
            _ => (0.0, 0.0, 0.8e-6, crate::consts::khz_to_omega(2.0)),
        };
        records.push(ScanRecord {
            v_ecd: v,
            x_exp: x + x_noise,
            x_err,
            omega_exp: omega_exp_true + w_noise,
            omega_err: w_err,
            x_sim,
            omega_sim: model.omega_sim,
        });
    }
    Ok(AxialScan { mean_endcap_voltage, records })
}

/// Forward-model scenario for dataset generation.
#[derive(Debug, Clone)]
pub struct ForwardScenario {
    pub trap: TrapConfig,
    pub endcaps: EndcapVoltages,
    pub moving: FiberLabel,
    pub d_values: Vec<f64>,
    /// Truth charge state (moving and fixed fibers).
    pub truth: ChargeState,
    pub selection: WellSelection,
    pub classify: ClassifyParams,
}

/// Generates a fiber-retraction dataset from the composed truth landscape:
/// truth observables per distance, camera pixel quantization, then Gaussian
/// measurement noise; errors populated from the instrument models.
pub fn generate_dataset(
    scenario: &ForwardScenario,
    provider: &dyn BasisProvider,
    plant_patch: Option<&PatchPotential>,
    noise: &NoiseModel,
    camera: &CameraModel,
    positioner: &PositionerModel,
) -> Result<FiberScanDataset> {
    noise.validate()?;
    camera.validate()?;
    positioner.validate()?;
    if scenario.d_values.is_empty() {
        return Err(Error::Generation("no fiber distances requested".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(noise.seed);
    let mut points = Vec::with_capacity(scenario.d_values.len());
    for &d in &scenario.d_values {
        let bases = provider.bases_for(d)?;
        let phi =
            compose_total(&bases, &scenario.endcaps, &scenario.truth, &scenario.trap, plant_patch)?;
        let obs = extract_observables(
            &phi,
            &scenario.classify,
            scenario.selection,
            scenario.trap.ion_mass,
        )?;
        if obs.kind != WellKind::Double && obs.omega == 0.0 {
            return Err(Error::Generation(format!(
                "unconfined configuration at d = {:.1} um without a double well",
                d / crate::consts::UM
            )));
        }
        if obs.x.abs() > camera.field_of_view / 2.0 {
            log::warn!(
                "ion at {:.1} um leaves the camera field of view ({:.1} um)",
                obs.x / crate::consts::UM,
                camera.field_of_view / 2.0 / crate::consts::UM
            );
        }
        // Quantize to camera pixels first, then add centroiding noise.
        let x_quantized = camera.quantize(obs.x);
        let x_meas = x_quantized + gaussian(&mut rng) * noise.position_sigma;
        let omega_meas = obs.omega + gaussian(&mut rng) * noise.frequency_sigma;
        points.push(ScanPoint {
            d,
            d_err: positioner.distance_uncertainty(d),
            x: x_meas,
            x_err: noise.position_sigma.max(camera.pixel_pitch * camera.centroid_precision_px),
            omega: omega_meas,
            omega_err: noise.frequency_sigma.max(1e-3),
            y: None,
        });
    }
    let mut fixed_charges = scenario.truth;
    fixed_charges = fixed_charges.with(scenario.moving, 0.0, 0.0);
    Ok(FiberScanDataset {
        moving: scenario.moving,
        points,
        endcaps: scenario.endcaps,
        fixed_charges,
    })
}

/// Truth sidecar written next to synthetic datasets for round-trip scoring.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TruthSidecar {
    pub moving: FiberLabel,
    pub sigma_f: f64,
    pub sigma_s: f64,
    pub seed: u64,
    pub endcap_mean_v: f64,
    pub geometry_hash_hint: Option<String>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::consts::{CA40_ION_MASS, ELEMENTARY_CHARGE, UM};
    use approx::assert_relative_eq;

    #[test]
    fn retraction_without_jitter_is_exact() {
        let model = PositionerModel::fiber_m();
        let out = simulate_retraction_sequence(&model, 500e-6, &[100], None).unwrap();
        assert_relative_eq!(out[0], 500e-6 + 170e-6, max_relative = 1e-12);
        let none = simulate_retraction_sequence(&model, 500e-6, &[0], None).unwrap();
        assert_relative_eq!(none[0], 500e-6, max_relative = 1e-12);
    }

    #[test]
    fn out_and_back_returns_within_the_two_sigma_band() {
        // Retract ~2 mm out and command the calibrated-equivalent return.
        let model = PositionerModel::fiber_m();
        let n_out = (2.0e-3 / model.step_out).round() as i64;
        let n_in = -((n_out as f64 * model.step_out / model.step_in).round() as i64);
        let mut within = 0;
        let trials = 60;
        for seed in 0..trials {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let out =
                simulate_retraction_sequence(&model, 0.0, &[n_out, n_in], Some(&mut rng)).unwrap();
            // Residual from integer rounding is below one step.
            let residual = out[1].abs();
            if residual < 25e-6 {
                within += 1;
            }
        }
        assert!(within as f64 >= 0.9 * trials as f64, "only {within}/{trials} within 25 um");
    }

    #[test]
    fn distance_uncertainty_switches_beyond_threshold() {
        let p = PositionerModel::fiber_p();
        assert_relative_eq!(p.distance_uncertainty(0.5e-3), 13e-6);
        assert_relative_eq!(p.distance_uncertainty(1.0e-3), 30e-6);
        let m = PositionerModel::fiber_m();
        assert_relative_eq!(m.distance_uncertainty(1.9e-3), 13e-6);
    }

    #[test]
    fn camera_quantization_bounded_by_half_pixel() {
        let cam = CameraModel::default();
        for i in 0..100 {
            let x = (i as f64 - 50.0) * 0.377e-6;
            let q = cam.quantize(x);
            assert!((q - x).abs() <= cam.pixel_pitch / 2.0 + 1e-15);
        }
    }

    #[test]
    fn polynomial_patch_derivatives() {
        // U = 1 + 2x + 3x² + 4x³
        let p = PolynomialPatch { coefficients: vec![1.0, 2.0, 3.0, 4.0] };
        assert_relative_eq!(p.eval(0.5), 1.0 + 1.0 + 0.75 + 0.5, max_relative = 1e-12);
        assert_relative_eq!(p.derivative(0.5), 2.0 + 3.0 + 3.0, max_relative = 1e-12);
        assert_relative_eq!(p.second_derivative(0.5), 6.0 + 24.0 * 0.5, max_relative = 1e-12);
    }

    #[test]
    fn planted_polynomial_round_trips_through_interpolation() {
        let coeffs = vec![0.0, 1.0e1, -3.0e4, 2.0e8];
        let form = PatchForm::Polynomial {
            coefficients: coeffs.clone(),
            range: (-400e-6, 400e-6),
            samples: 81,
        };
        let patch = plant_patch(&form).unwrap();
        let poly = PolynomialPatch { coefficients: coeffs };
        let mut worst = 0.0f64;
        let mut scale = 0.0f64;
        for i in 0..200 {
            let x = -390e-6 + i as f64 * 3.9e-6;
            let (v, outside) = patch.evaluate(x);
            assert!(!outside);
            worst = worst.max((v - poly.eval(x)).abs());
            scale = scale.max(poly.eval(x).abs());
        }
        assert!(worst < 1e-4 * scale, "interpolation error {worst:.2e} vs scale {scale:.2e}");
    }

    #[test]
    fn zero_plant_gives_zero_patch() {
        let form = PatchForm::Polynomial {
            coefficients: vec![0.0],
            range: (-100e-6, 100e-6),
            samples: 11,
        };
        let patch = plant_patch(&form).unwrap();
        assert!(patch.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn axial_scan_generation_zero_plant_matches_harmonic() {
        let model = HarmonicAxialModel {
            ion_mass: CA40_ION_MASS,
            ion_charge: ELEMENTARY_CHARGE,
            omega_sim: crate::consts::khz_to_omega(200.0),
            displacement_per_volt: 2.0 * UM,
        };
        let plant = PolynomialPatch { coefficients: vec![0.0] };
        let v: Vec<f64> = (-10..=10).map(|i| i as f64 * 10.0).collect();
        let scan = generate_axial_scan(&model, &plant, &v, 1000.0, None).unwrap();
        for r in &scan.records {
            assert_relative_eq!(r.x_exp, r.x_sim, epsilon = 1e-12);
            assert_relative_eq!(r.omega_exp, r.omega_sim, max_relative = 1e-12);
        }
    }

    #[test]
    fn fixed_seed_reproduces_the_scan() {
        let model = HarmonicAxialModel {
            ion_mass: CA40_ION_MASS,
            ion_charge: ELEMENTARY_CHARGE,
            omega_sim: crate::consts::khz_to_omega(200.0),
            displacement_per_volt: 2.0 * UM,
        };
        let plant = PolynomialPatch { coefficients: vec![0.0, 0.0, 5e4] };
        let v: Vec<f64> = (-10..=10).map(|i| i as f64 * 10.0).collect();
        let noise = NoiseModel { seed: 7, ..NoiseModel::default() };
        let a = generate_axial_scan(&model, &plant, &v, 1000.0, Some(&noise)).unwrap();
        let b = generate_axial_scan(&model, &plant, &v, 1000.0, Some(&noise)).unwrap();
        for (ra, rb) in a.records.iter().zip(b.records.iter()) {
            assert_eq!(ra.x_exp, rb.x_exp);
            assert_eq!(ra.omega_exp, rb.omega_exp);
        }
    }
}
