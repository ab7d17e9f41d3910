//! Estimation of fiber surface charge densities from retraction scans by
//! error-weighted least squares over predicted vs measured ion positions and
//! axial frequencies.

use crate::cache::BasisProvider;
use crate::composer::{compose_total, EndcapVoltages};
use crate::error::{Error, Result};
use crate::geometry::{ChargeState, FiberLabel, SurfaceRegion, TrapConfig};
use crate::landscape::{extract_observables, ClassifyParams, WellKind, WellSelection};
use crate::maps::EnergyMap;
use crate::patch::{PatchPotential, PositionErrorProfile};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// One measured retraction point. Positions in meters, frequencies in rad/s.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScanPoint {
    pub d: f64,
    pub d_err: f64,
    pub x: f64,
    pub x_err: f64,
    pub omega: f64,
    pub omega_err: f64,
    /// Transverse position; carried through datasets but unused by the axial
    /// analysis.
    pub y: Option<f64>,
}

/// A fiber-retraction dataset: the moving fiber, its measured observables per
/// distance, the trap voltages used, and the assumed charge state of the
/// fixed fiber (the moving fiber's entries are ignored during inference).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FiberScanDataset {
    pub moving: FiberLabel,
    pub points: Vec<ScanPoint>,
    pub endcaps: EndcapVoltages,
    pub fixed_charges: ChargeState,
}

impl FiberScanDataset {
    pub fn validate(&self) -> Result<()> {
        if self.points.is_empty() {
            return Err(Error::Dataset("dataset has no points".into()));
        }
        for p in &self.points {
            if p.x_err <= 0.0 || p.omega_err <= 0.0 || p.d_err <= 0.0 {
                return Err(Error::Dataset("dataset errors must be positive".into()));
            }
        }
        let mut ds: Vec<f64> = self.points.iter().map(|p| p.d).collect();
        ds.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
        if ds.windows(2).any(|w| w[1] == w[0]) {
            return Err(Error::Dataset("fiber distances must be distinct".into()));
        }
        Ok(())
    }
}

/// Error budget combining measurement, simulation, and reconstruction
/// contributions. Each weight is the plain sum of the three parts, matching
/// the normalization in which a residual of one means a one-standard-
/// deviation discrepancy.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ErrorBudget {
    /// Simulation position error (m).
    pub position_sim: f64,
    /// Simulation frequency error (rad/s).
    pub frequency_sim: f64,
    /// Patch-reconstruction frequency error (rad/s).
    pub frequency_recon: f64,
    /// Position-dependent patch-reconstruction error; absent when no patch
    /// is in play.
    pub position_recon: Option<PositionErrorProfile>,
}

impl Default for ErrorBudget {
    fn default() -> Self {
        ErrorBudget {
            position_sim: 0.5e-6,
            frequency_sim: crate::consts::khz_to_omega(2.0),
            frequency_recon: crate::consts::khz_to_omega(4.8),
            position_recon: None,
        }
    }
}

impl ErrorBudget {
    pub fn validate(&self) -> Result<()> {
        if self.position_sim < 0.0 || self.frequency_sim < 0.0 || self.frequency_recon < 0.0 {
            return Err(Error::Config("error budget components must be >= 0".into()));
        }
        Ok(())
    }

    pub fn position_weight(&self, point: &ScanPoint) -> f64 {
        let recon = self.position_recon.as_ref().map_or(0.0, |p| p.error_at(point.x));
        point.x_err + self.position_sim + recon
    }

    pub fn frequency_weight(&self, point: &ScanPoint) -> f64 {
        point.omega_err + self.frequency_sim + self.frequency_recon
    }
}

/// Prediction for one fiber position; transition points carry no values.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Prediction {
    pub d: f64,
    pub kind: WellKind,
    pub x: Option<f64>,
    pub omega: Option<f64>,
}

/// Shared prediction context.
#[derive(Debug, Clone)]
pub struct PredictContext {
    pub trap: TrapConfig,
    pub selection: WellSelection,
    pub classify: ClassifyParams,
}

/// Precomposed landscape pieces for one dataset: the sigma-independent part
/// (rf, endcaps, fixed fiber, patch) plus the moving fiber's unit charge
/// energies, so a grid scan costs two axpys per point instead of a full
/// composition.
pub struct PreparedScan {
    pub context: PredictContext,
    points: Vec<PreparedPoint>,
}

struct PreparedPoint {
    d: f64,
    fixed: EnergyMap,
    unit_facet: Vec<f64>,
    unit_side: Vec<f64>,
}

impl PreparedScan {
    pub fn new(
        dataset: &FiberScanDataset,
        provider: &dyn BasisProvider,
        patch: Option<&PatchPotential>,
        context: PredictContext,
    ) -> Result<Self> {
        dataset.validate()?;
        let mut fixed_charges = dataset.fixed_charges;
        // Zero the moving fiber's densities in the sigma-independent part.
        fixed_charges = fixed_charges.with(dataset.moving, 0.0, 0.0);

        let q = context.trap.ion_charge;
        let mut points = Vec::with_capacity(dataset.points.len());
        for p in &dataset.points {
            let bases = provider.bases_for(p.d)?;
            let fixed =
                compose_total(&bases, &dataset.endcaps, &fixed_charges, &context.trap, patch)?;
            let unit_facet: Vec<f64> = bases
                .charge_map(dataset.moving, SurfaceRegion::Facet)
                .values
                .iter()
                .map(|u| q * u)
                .collect();
            let unit_side: Vec<f64> = bases
                .charge_map(dataset.moving, SurfaceRegion::Side)
                .values
                .iter()
                .map(|u| q * u)
                .collect();
            points.push(PreparedPoint { d: p.d, fixed, unit_facet, unit_side });
        }
        Ok(PreparedScan { context, points })
    }

    pub fn compose(&self, index: usize, sigma_f: f64, sigma_s: f64) -> EnergyMap {
        let p = &self.points[index];
        let mut map = p.fixed.clone();
        for ((v, uf), us) in
            map.values.iter_mut().zip(p.unit_facet.iter()).zip(p.unit_side.iter())
        {
            *v += sigma_f * uf + sigma_s * us;
        }
        map
    }

    /// Predicts (kind, x, omega) for every fiber distance at the given
    /// densities; transition-flagged points carry no prediction.
    pub fn predict(&self, sigma_f: f64, sigma_s: f64) -> Result<Vec<Prediction>> {
        self.points
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let map = self.compose(i, sigma_f, sigma_s);
                let obs = extract_observables(
                    &map,
                    &self.context.classify,
                    self.context.selection,
                    self.context.trap.ion_mass,
                )?;
                Ok(match obs.kind {
                    WellKind::Transition => {
                        Prediction { d: p.d, kind: obs.kind, x: None, omega: None }
                    }
                    _ => Prediction { d: p.d, kind: obs.kind, x: Some(obs.x), omega: Some(obs.omega) },
                })
            })
            .collect()
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Per-point normalized residual terms plus the mean over included points.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ResidualReport {
    pub mean: f64,
    /// Indices of points entering the mean.
    pub included: Vec<usize>,
    /// Indices excluded as transition configurations.
    pub excluded: Vec<usize>,
    /// Normalized squared discrepancy per point (None when excluded).
    pub per_point: Vec<Option<f64>>,
}

/// Mean over included points of (dx/w_x)² + (domega/w_omega)². Transition
/// points are excluded from the sum entirely.
pub fn residual(
    predictions: &[Prediction],
    dataset: &FiberScanDataset,
    budget: &ErrorBudget,
) -> Result<ResidualReport> {
    if predictions.len() != dataset.points.len() {
        return Err(Error::Dataset("prediction/dataset length mismatch".into()));
    }
    budget.validate()?;
    let mut included = Vec::new();
    let mut excluded = Vec::new();
    let mut per_point = Vec::with_capacity(predictions.len());
    let mut sum = 0.0;
    for (i, (pred, point)) in predictions.iter().zip(dataset.points.iter()).enumerate() {
        match (pred.kind, pred.x, pred.omega) {
            (WellKind::Transition, _, _) | (_, None, _) | (_, _, None) => {
                excluded.push(i);
                per_point.push(None);
            }
            (_, Some(x), Some(omega)) => {
                let wx = budget.position_weight(point);
                let ww = budget.frequency_weight(point);
                let term = ((x - point.x) / wx).powi(2) + ((omega - point.omega) / ww).powi(2);
                sum += term;
                included.push(i);
                per_point.push(Some(term));
            }
        }
    }
    if included.is_empty() {
        return Err(Error::Dataset("all points excluded as transition".into()));
    }
    Ok(ResidualReport { mean: sum / included.len() as f64, included, excluded, per_point })
}

/// Residual surface over a Cartesian grid of charge densities.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ResidualSurface {
    pub sigma_f: Vec<f64>,
    pub sigma_s: Vec<f64>,
    /// Row-major [i_s][i_f] flattened; NaN where every point was excluded.
    pub values: Vec<f64>,
    pub min_cell: (usize, usize),
    pub min_value: f64,
}

impl ResidualSurface {
    pub fn at(&self, i_f: usize, i_s: usize) -> f64 {
        self.values[i_s * self.sigma_f.len() + i_f]
    }

    pub fn min_densities(&self) -> (f64, f64) {
        (self.sigma_f[self.min_cell.0], self.sigma_s[self.min_cell.1])
    }
}

fn range_values(range: (f64, f64), step: f64) -> Result<Vec<f64>> {
    if step <= 0.0 || !range.0.is_finite() || !range.1.is_finite() || range.1 < range.0 {
        return Err(Error::Config("grid scan needs a finite range and positive step".into()));
    }
    let n = ((range.1 - range.0) / step).round() as usize + 1;
    Ok((0..n).map(|k| range.0 + k as f64 * step).collect())
}

/// Evaluates the mean residual on a density grid. Cells are independent and
/// evaluated in parallel; the scan is deterministic for fixed inputs.
pub fn grid_scan(
    prepared: &PreparedScan,
    dataset: &FiberScanDataset,
    budget: &ErrorBudget,
    sigma_f_range: (f64, f64),
    sigma_s_range: (f64, f64),
    step: f64,
) -> Result<ResidualSurface> {
    let sigma_f = range_values(sigma_f_range, step)?;
    let sigma_s = range_values(sigma_s_range, step)?;
    let nf = sigma_f.len();
    let cells: Vec<f64> = (0..nf * sigma_s.len())
        .into_par_iter()
        .map(|idx| {
            let i_f = idx % nf;
            let i_s = idx / nf;
            match prepared
                .predict(sigma_f[i_f], sigma_s[i_s])
                .and_then(|preds| residual(&preds, dataset, budget))
            {
                Ok(report) => report.mean,
                Err(_) => f64::NAN,
            }
        })
        .collect();
    let mut min_value = f64::INFINITY;
    let mut min_cell = (0, 0);
    for (idx, &v) in cells.iter().enumerate() {
        if v.is_finite() && v < min_value {
            min_value = v;
            min_cell = (idx % nf, idx / nf);
        }
    }
    if !min_value.is_finite() {
        return Err(Error::Dataset("residual surface is empty (all cells excluded)".into()));
    }
    Ok(ResidualSurface { sigma_f, sigma_s, values: cells, min_cell, min_value })
}

/// Outcome of a refinement run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InferenceResult {
    pub sigma_f: f64,
    pub sigma_s: f64,
    pub constrained: bool,
    pub mean_residual: f64,
    /// Fiber distances excluded as transition configurations at the optimum.
    pub excluded_d_um: Vec<f64>,
    pub iterations: usize,
}

const REFINE_MAX_ITER: usize = 250;
const REFINE_SIGMA_TOL: f64 = 1e-3;

/// Local least-squares refinement from an initial density pair by
/// derivative-free simplex descent (or golden-section when constrained to a
/// single density). Deterministic for fixed inputs.
pub fn refine(
    prepared: &PreparedScan,
    dataset: &FiberScanDataset,
    budget: &ErrorBudget,
    initial: (f64, f64),
    constrained: bool,
) -> Result<InferenceResult> {
    let objective = |sf: f64, ss: f64| -> f64 {
        prepared
            .predict(sf, ss)
            .and_then(|preds| residual(&preds, dataset, budget))
            .map(|r| r.mean)
            .unwrap_or(f64::INFINITY)
    };

    let (sigma_f, sigma_s, iterations) = if constrained {
        let start = 0.5 * (initial.0 + initial.1);
        let (s, iters) = golden_section(|s| objective(s, s), start)?;
        (s, s, iters)
    } else {
        let (best, iters) = nelder_mead(|p| objective(p[0], p[1]), [initial.0, initial.1])?;
        (best[0], best[1], iters)
    };

    let preds = prepared.predict(sigma_f, sigma_s)?;
    let report = residual(&preds, dataset, budget)?;
    let excluded_d_um = report
        .excluded
        .iter()
        .map(|&i| dataset.points[i].d / crate::consts::UM)
        .collect();
    Ok(InferenceResult {
        sigma_f,
        sigma_s,
        constrained,
        mean_residual: report.mean,
        excluded_d_um,
        iterations,
    })
}

/// Compact Nelder-Mead in two dimensions with a deterministic start simplex.
fn nelder_mead<F: Fn([f64; 2]) -> f64>(f: F, start: [f64; 2]) -> Result<([f64; 2], usize)> {
    let delta = 0.5;
    let mut simplex = [
        start,
        [start[0] + delta, start[1]],
        [start[0], start[1] + delta],
    ];
    let mut values = simplex.map(|p| f(p));
    if values.iter().all(|v| !v.is_finite()) {
        return Err(Error::NonConvergence(0));
    }

    for iter in 0..REFINE_MAX_ITER {
        // Order best -> worst.
        let mut order = [0usize, 1, 2];
        order.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).unwrap_or(std::cmp::Ordering::Equal));
        simplex = [simplex[order[0]], simplex[order[1]], simplex[order[2]]];
        values = [values[order[0]], values[order[1]], values[order[2]]];

        let spread = ((simplex[0][0] - simplex[2][0]).powi(2)
            + (simplex[0][1] - simplex[2][1]).powi(2))
        .sqrt()
        .max(
            ((simplex[0][0] - simplex[1][0]).powi(2) + (simplex[0][1] - simplex[1][1]).powi(2))
                .sqrt(),
        );
        if spread < REFINE_SIGMA_TOL {
            return Ok((simplex[0].into(), iter));
        }

        let centroid = [
            0.5 * (simplex[0][0] + simplex[1][0]),
            0.5 * (simplex[0][1] + simplex[1][1]),
        ];
        let reflect = [
            centroid[0] + (centroid[0] - simplex[2][0]),
            centroid[1] + (centroid[1] - simplex[2][1]),
        ];
        let fr = f(reflect);
        if fr < values[0] {
            let expand = [
                centroid[0] + 2.0 * (centroid[0] - simplex[2][0]),
                centroid[1] + 2.0 * (centroid[1] - simplex[2][1]),
            ];
            let fe = f(expand);
            if fe < fr {
                simplex[2] = expand;
                values[2] = fe;
            } else {
                simplex[2] = reflect;
                values[2] = fr;
            }
        } else if fr < values[1] {
            simplex[2] = reflect;
            values[2] = fr;
        } else {
            let contract = [
                centroid[0] + 0.5 * (simplex[2][0] - centroid[0]),
                centroid[1] + 0.5 * (simplex[2][1] - centroid[1]),
            ];
            let fc = f(contract);
            if fc < values[2] {
                simplex[2] = contract;
                values[2] = fc;
            } else {
                for i in 1..3 {
                    simplex[i] = [
                        0.5 * (simplex[i][0] + simplex[0][0]),
                        0.5 * (simplex[i][1] + simplex[0][1]),
                    ];
                    values[i] = f(simplex[i]);
                }
            }
        }
    }
    Err(Error::NonConvergence(REFINE_MAX_ITER))
}

/// Golden-section line search with an expanding bracket around the start.
fn golden_section<F: Fn(f64) -> f64>(f: F, start: f64) -> Result<(f64, usize)> {
    let phi = (5.0f64.sqrt() - 1.0) / 2.0;
    let mut lo = start - 2.0;
    let mut hi = start + 2.0;
    let mut iters = 0;
    // Expand until the interior beats both ends.
    for _ in 0..24 {
        let mid = 0.5 * (lo + hi);
        if f(mid) <= f(lo).min(f(hi)) {
            break;
        }
        lo -= 0.5 * (hi - lo);
        hi += 0.5 * (hi - lo);
        iters += 1;
    }
    let mut a = lo;
    let mut b = hi;
    let mut c = b - phi * (b - a);
    let mut d = a + phi * (b - a);
    let mut fc = f(c);
    let mut fd = f(d);
    while (b - a).abs() > REFINE_SIGMA_TOL {
        iters += 1;
        if iters > REFINE_MAX_ITER {
            return Err(Error::NonConvergence(REFINE_MAX_ITER));
        }
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - phi * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + phi * (b - a);
            fd = f(d);
        }
    }
    Ok((0.5 * (a + b), iters))
}

/// Runs a full inference per candidate transverse fiber offset and returns
/// the offset whose refined mean residual is smallest, with the per-offset
/// residuals for reporting.
pub fn position_offset_sweep<F>(offsets: &[f64], mut run: F) -> Result<(f64, Vec<(f64, f64)>)>
where
    F: FnMut(f64) -> Result<f64>,
{
    if offsets.is_empty() {
        return Err(Error::Config("offset sweep needs at least one candidate".into()));
    }
    let mut table = Vec::with_capacity(offsets.len());
    for &off in offsets {
        let res = run(off)?;
        table.push((off, res));
    }
    let best = table
        .iter()
        .cloned()
        .min_by(|a, b| a.1.partial_cmp(&b.1).expect("finite residuals"))
        .expect("non-empty");
    Ok((best.0, table))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cache::BasisProvider;
    use crate::composer::BasisSet;
    use crate::consts::{khz_to_omega, E_PER_UM2, UM, VACUUM_PERMITTIVITY};
    use crate::geometry::Excitation;
    use crate::grid::MapGrid;
    use crate::maps::mapgen;
    use std::sync::Arc;

    /// Analytic stand-in for the solver: ideal quadrupole rf, harmonic
    /// endcaps, and point-charge-like unit potentials for the moving fiber P
    /// at distance d below the axis.
    struct AnalyticProvider;

    fn charge_unit_map(
        grid: MapGrid,
        excitation: Excitation,
        d: f64,
        area: f64,
        hash: &str,
    ) -> crate::maps::PotentialMap {
        // Potential of the region's total charge at distance d below the
        // origin and 25 um off-center in x, mildly screened; per unit
        // density (1 e/um^2).
        let q_total = E_PER_UM2 * area;
        let coeff = q_total / (4.0 * std::f64::consts::PI * VACUUM_PERMITTIVITY);
        mapgen::from_fn(grid, excitation, hash, move |x, y| {
            let dx = x - 25e-6;
            let r = (dx * dx + (y + d) * (y + d)).sqrt().max(30e-6);
            0.15 * coeff / r
        })
    }

    impl BasisProvider for AnalyticProvider {
        fn bases_for(&self, d: f64) -> Result<Arc<BasisSet>> {
            let grid = MapGrid::centered(400e-6, 250e-6, 5e-6);
            let hash = "analytic";
            let r0 = 270e-6;
            let x0 = 2.55e-3;
            let eta = 1.6e-3;
            let facet_area = std::f64::consts::PI * (115e-6f64).powi(2);
            let side_area = 2.0 * std::f64::consts::PI * 115e-6 * 2.0e-3;
            let zero = |e| mapgen::from_fn(grid.clone(), e, hash, |_, _| 0.0);
            Ok(Arc::new(BasisSet {
                rf: mapgen::ideal_quadrupole(grid.clone(), r0, 1.0, hash),
                ec_left: mapgen::harmonic_endcap(grid.clone(), x0, eta, 2e-9, true, hash),
                ec_right: mapgen::harmonic_endcap(grid.clone(), x0, eta, 2e-9, false, hash),
                m_facet: zero(Excitation::ChargeUnit(FiberLabel::M, SurfaceRegion::Facet)),
                m_side: zero(Excitation::ChargeUnit(FiberLabel::M, SurfaceRegion::Side)),
                p_facet: charge_unit_map(
                    grid.clone(),
                    Excitation::ChargeUnit(FiberLabel::P, SurfaceRegion::Facet),
                    d,
                    facet_area,
                    hash,
                ),
                p_side: charge_unit_map(
                    grid,
                    Excitation::ChargeUnit(FiberLabel::P, SurfaceRegion::Side),
                    d * 1.35 + 150e-6,
                    side_area,
                    hash,
                ),
            }))
        }
    }

    fn context() -> PredictContext {
        PredictContext {
            trap: TrapConfig::default(),
            selection: WellSelection::NegativeX,
            classify: ClassifyParams::default(),
        }
    }

    fn synthetic_dataset(sigma_f: f64, sigma_s: f64) -> (FiberScanDataset, PreparedScan) {
        let d_values: Vec<f64> = [1400.0, 1100.0, 900.0, 750.0, 600.0, 500.0]
            .iter()
            .map(|d| d * UM)
            .collect();
        let skeleton = FiberScanDataset {
            moving: FiberLabel::P,
            points: d_values
                .iter()
                .map(|&d| ScanPoint {
                    d,
                    d_err: 13.0 * UM,
                    x: 0.0,
                    x_err: 0.8 * UM,
                    omega: khz_to_omega(200.0),
                    omega_err: khz_to_omega(2.0),
                    y: None,
                })
                .collect(),
            endcaps: EndcapVoltages::symmetric(1300.0),
            fixed_charges: ChargeState::neutral(),
        };
        let prepared =
            PreparedScan::new(&skeleton, &AnalyticProvider, None, context()).unwrap();
        let truth = prepared.predict(sigma_f, sigma_s).unwrap();
        let mut dataset = skeleton;
        for (p, t) in dataset.points.iter_mut().zip(truth.iter()) {
            p.x = t.x.expect("confining truth");
            p.omega = t.omega.expect("confining truth");
        }
        (dataset, prepared)
    }

    #[test]
    fn neutral_charges_give_distance_independent_predictions() {
        let (dataset, prepared) = synthetic_dataset(0.0, 0.0);
        let preds = prepared.predict(0.0, 0.0).unwrap();
        let x0 = preds[0].x.unwrap();
        let w0 = preds[0].omega.unwrap();
        for p in &preds {
            assert!((p.x.unwrap() - x0).abs() < 1e-9);
            assert!((p.omega.unwrap() - w0).abs() / w0 < 1e-9);
        }
        drop(dataset);
    }

    #[test]
    fn residual_zero_when_predictions_match() {
        let (dataset, prepared) = synthetic_dataset(3.0, 5.0);
        let preds = prepared.predict(3.0, 5.0).unwrap();
        let report = residual(&preds, &dataset, &ErrorBudget::default()).unwrap();
        assert!(report.mean < 1e-12, "mean {0}", report.mean);
    }

    #[test]
    fn residual_unit_deviation_convention() {
        let (mut dataset, prepared) = synthetic_dataset(2.0, 2.0);
        let preds = prepared.predict(2.0, 2.0).unwrap();
        let budget = ErrorBudget::default();
        // Shift every measurement by exactly one combined weight in both
        // observables: each point contributes 1 + 1.
        for p in &mut dataset.points {
            p.x += budget.position_weight(p);
            p.omega += budget.frequency_weight(p);
        }
        let report = residual(&preds, &dataset, &budget).unwrap();
        assert!((report.mean - 2.0).abs() < 1e-9);
    }

    #[test]
    fn transition_points_never_contribute() {
        let (dataset, prepared) = synthetic_dataset(1.0, 1.0);
        let mut preds = prepared.predict(1.0, 1.0).unwrap();
        preds[2].kind = WellKind::Transition;
        preds[2].x = None;
        preds[2].omega = None;
        let report = residual(&preds, &dataset, &ErrorBudget::default()).unwrap();
        assert_eq!(report.excluded, vec![2]);
        assert_eq!(report.per_point[2], None);
        assert_eq!(report.included.len(), dataset.points.len() - 1);
        // The mean is unchanged by arbitrarily corrupting the excluded point.
        let mut corrupted = dataset.clone();
        corrupted.points[2].x += 1.0;
        let report2 = residual(&preds, &corrupted, &ErrorBudget::default()).unwrap();
        assert_eq!(report.mean, report2.mean);
    }

    #[test]
    fn small_sigma_response_is_linear() {
        let (_, prepared) = synthetic_dataset(0.0, 0.0);
        let p0 = prepared.predict(0.0, 0.0).unwrap();
        let p1 = prepared.predict(0.1, 0.0).unwrap();
        let p2 = prepared.predict(0.2, 0.0).unwrap();
        for i in 0..p0.len() {
            let d1 = p1[i].x.unwrap() - p0[i].x.unwrap();
            let d2 = p2[i].x.unwrap() - p0[i].x.unwrap();
            if d1.abs() > 1e-12 {
                assert!((d2 / d1 - 2.0).abs() < 0.05, "nonlinear: {}", d2 / d1);
            }
        }
    }

    #[test]
    fn displacement_grows_monotonically_with_facet_charge() {
        let (_, prepared) = synthetic_dataset(0.0, 0.0);
        let x0 = prepared.predict(0.0, 0.0).unwrap()[5].x.unwrap();
        let mut last = 0.0;
        for sigma in [1.0, 2.0, 4.0, 8.0] {
            let preds = prepared.predict(sigma, 0.0).unwrap();
            if preds[5].kind != WellKind::Single {
                break;
            }
            let shift = (preds[5].x.unwrap() - x0).abs();
            assert!(shift > last, "shift {shift} not above {last} at sigma {sigma}");
            last = shift;
        }
        assert!(last > 0.0);
    }

    #[test]
    fn grid_scan_finds_the_plant_cell() {
        let (dataset, prepared) = synthetic_dataset(4.0, 8.5);
        let surface = grid_scan(
            &prepared,
            &dataset,
            &ErrorBudget::default(),
            (0.0, 8.0),
            (4.5, 12.5),
            1.0,
        )
        .unwrap();
        let (sf, ss) = surface.min_densities();
        assert_eq!((sf, ss), (4.0, 8.5), "minimum at ({sf}, {ss})");
    }

    #[test]
    fn zero_width_scan_equals_single_residual() {
        let (dataset, prepared) = synthetic_dataset(2.0, 3.0);
        let budget = ErrorBudget::default();
        let surface =
            grid_scan(&prepared, &dataset, &budget, (2.5, 2.5), (3.5, 3.5), 1.0).unwrap();
        let preds = prepared.predict(2.5, 3.5).unwrap();
        let direct = residual(&preds, &dataset, &budget).unwrap();
        assert_eq!(surface.values.len(), 1);
        assert!((surface.min_value - direct.mean).abs() < 1e-15);
    }

    #[test]
    fn refine_recovers_plants() {
        let (dataset, prepared) = synthetic_dataset(-2.1, 1.3);
        let result = refine(
            &prepared,
            &dataset,
            &ErrorBudget::default(),
            (-1.0, 0.5),
            false,
        )
        .unwrap();
        assert!((result.sigma_f + 2.1).abs() < 0.3, "sigma_f {}", result.sigma_f);
        assert!((result.sigma_s - 1.3).abs() < 0.3, "sigma_s {}", result.sigma_s);
    }

    #[test]
    fn constrained_fit_has_larger_residual_for_split_plant() {
        let (dataset, prepared) = synthetic_dataset(4.0, 8.5);
        let budget = ErrorBudget::default();
        let free = refine(&prepared, &dataset, &budget, (5.0, 7.0), false).unwrap();
        let tied = refine(&prepared, &dataset, &budget, (6.0, 6.0), true).unwrap();
        assert!(tied.mean_residual > free.mean_residual);
        assert!(tied.constrained);
    }

    #[test]
    fn refine_from_truth_converges_immediately() {
        let (dataset, prepared) = synthetic_dataset(3.0, 4.0);
        let result =
            refine(&prepared, &dataset, &ErrorBudget::default(), (3.0, 4.0), false).unwrap();
        assert!((result.sigma_f - 3.0).abs() < 0.05);
        assert!((result.sigma_s - 4.0).abs() < 0.05);
    }

    #[test]
    fn offset_sweep_selects_single_candidate() {
        let (best, table) = position_offset_sweep(&[10.0e-6], |_| Ok(1.23)).unwrap();
        assert_eq!(best, 10.0e-6);
        assert_eq!(table.len(), 1);
    }
}
