//! Subcommand implementations.

use crate::manifest::RunManifest;
use anyhow::{bail, Context as AnyhowContext};
use fibercharge::cache::{BasisCache, BasisProvider};
use fibercharge::composer::{compose_total, EndcapVoltages};
use fibercharge::config::{neutral_axial_curvature, ConfigBasisProvider, ProjectConfig};
use fibercharge::consts::{khz_to_omega, omega_to_khz, UM};
use fibercharge::geometry::ChargeState;
use fibercharge::inference::{
    grid_scan, refine, ErrorBudget, FiberScanDataset, PredictContext, PreparedScan,
};
use fibercharge::landscape::{
    extract_observables, fit_axial_law as fit_law, ClassifyParams, WellKind,
};
use fibercharge::patch::{
    mean_patch, position_dependent_error, reconstruct_from_frequencies,
    reconstruct_from_positions, scan_consistency, PatchPotential, ReconstructOptions,
};
use fibercharge::synth::{generate_dataset, ForwardScenario, TruthSidecar};
use serde::Serialize;
use std::path::{Path, PathBuf};

pub struct Context {
    pub config: ProjectConfig,
    pub cache: BasisCache,
    pub out: PathBuf,
    pub config_path: Option<PathBuf>,
    pub cache_dir: Option<PathBuf>,
}

impl Context {
    fn provider(&self) -> ConfigBasisProvider<'_> {
        ConfigBasisProvider {
            config: &self.config,
            cache: &self.cache,
            moving: self.config.moving,
            x_offset: None,
        }
    }

    fn manifest(&self, command: &str) -> anyhow::Result<RunManifest> {
        let hash = self.config.geometry_configured()?.hash();
        Ok(RunManifest::new(
            command,
            hash,
            &self.config_path,
            &self.cache_dir,
            self.config.noise.seed,
        ))
    }

    /// Classification parameters with the neutral-fiber curvature reference
    /// taken at the most retracted configured distance.
    fn classify_params(&self, provider: &dyn BasisProvider) -> anyhow::Result<ClassifyParams> {
        let d_ref = self
            .config
            .d_values
            .iter()
            .cloned()
            .fold(f64::NEG_INFINITY, f64::max);
        let neutral =
            neutral_axial_curvature(provider, d_ref, &self.config.endcaps(), &self.config.trap)?;
        Ok(ClassifyParams { neutral_curvature: Some(neutral), ..ClassifyParams::default() })
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

pub fn solve_basis(ctx: &Context, export_csv: bool) -> anyhow::Result<()> {
    let mut manifest = ctx.manifest("solve-basis")?;
    let mut solved = 0usize;
    let mut loaded = 0usize;
    for &d in &ctx.config.d_values {
        let geometry = ctx.config.geometry_for(ctx.config.moving, d, None)?;
        let (set, reports) =
            ctx.cache.get_or_solve(&geometry, &ctx.config.solver, &ctx.config.map)?;
        if reports.is_empty() {
            loaded += 7;
        } else {
            solved += reports.len();
            for r in &reports {
                println!(
                    "d = {:>7.1} um  {}  {} sweeps  residual {:.2e}  {:.2}s",
                    d / UM,
                    r.excitation,
                    r.iterations,
                    r.residual,
                    r.wall_seconds
                );
            }
        }
        if export_csv {
            for map in set.maps() {
                let path = ctx
                    .out
                    .join(format!("basis_d{:.0}um_{}.csv", d / UM, map.excitation.tag()));
                fibercharge::io::write_potential_map_csv(&path, map)?;
                manifest.record(&path);
            }
        }
    }
    println!("bases: {solved} solved, {loaded} loaded from cache");
    manifest.write(&ctx.out)?;
    Ok(())
}

#[derive(Serialize)]
struct AnalyzeRecord {
    d_um: f64,
    kind: String,
    x_ion_um: f64,
    f_ax_khz: f64,
    fit_residual_ev: f64,
}

pub fn analyze(
    ctx: &Context,
    patch_path: Option<&Path>,
    export_csv: bool,
    in_ev: bool,
) -> anyhow::Result<()> {
    let mut manifest = ctx.manifest("analyze")?;
    let patch = load_patch(patch_path)?;
    let provider = ctx.provider();
    let classify = ctx.classify_params(&provider)?;

    let mut records = Vec::new();
    for &d in &ctx.config.d_values {
        let bases = provider.bases_for(d)?;
        let phi = compose_total(
            &bases,
            &ctx.config.endcaps(),
            &ctx.config.charges,
            &ctx.config.trap,
            patch.as_ref(),
        )?;
        let obs = extract_observables(
            &phi,
            &classify,
            ctx.config.inference.selection,
            ctx.config.trap.ion_mass,
        )?;
        let kind = match obs.kind {
            WellKind::Single => "single",
            WellKind::Double => "double",
            WellKind::Transition => "transition",
        };
        println!(
            "d = {:>7.1} um  {:<10}  x_ion = {:>8.2} um  f_ax = {:>7.1} kHz",
            d / UM,
            kind,
            obs.x / UM,
            omega_to_khz(obs.omega)
        );
        records.push(AnalyzeRecord {
            d_um: d / UM,
            kind: kind.to_string(),
            x_ion_um: obs.x / UM,
            f_ax_khz: omega_to_khz(obs.omega),
            fit_residual_ev: obs.fit_rms / fibercharge::consts::EV,
        });
        if export_csv {
            let path = ctx.out.join(format!("landscape_d{:.0}um.csv", d / UM));
            fibercharge::io::write_energy_map_csv(&path, &phi, in_ev)?;
            manifest.record(&path);
        }
    }

    let csv_path = ctx.out.join("analyze.csv");
    {
        let mut w = csv::Writer::from_path(&csv_path)?;
        w.write_record(["d_um", "kind", "x_ion_um", "f_ax_kHz", "fit_residual_eV"])?;
        for r in &records {
            w.write_record(&[
                format!("{}", r.d_um),
                r.kind.clone(),
                format!("{}", r.x_ion_um),
                format!("{}", r.f_ax_khz),
                format!("{}", r.fit_residual_ev),
            ])?;
        }
        w.flush()?;
    }
    manifest.record(&csv_path);
    let json_path = ctx.out.join("analyze.json");
    write_json(&json_path, &records)?;
    manifest.record(&json_path);
    manifest.write(&ctx.out)?;
    Ok(())
}

#[derive(Serialize)]
struct AxialLawOutput {
    alpha_khz2_per_mv: f64,
    omega0_khz: f64,
    rms_residual_khz2: f64,
    points: usize,
    simulated: bool,
}

pub fn fit_axial_law(
    ctx: &Context,
    input: Option<&Path>,
    voltages: Option<Vec<f64>>,
) -> anyhow::Result<()> {
    let mut manifest = ctx.manifest("fit-axial-law")?;
    let (points, simulated) = match input {
        Some(path) => (read_axial_points(path)?, false),
        None => {
            let volts = voltages
                .ok_or_else(|| anyhow::anyhow!("--voltages is required without --input"))?;
            let provider = ctx.provider();
            let d_ref = ctx
                .config
                .d_values
                .iter()
                .cloned()
                .fold(f64::NEG_INFINITY, f64::max);
            let bases = provider.bases_for(d_ref)?;
            let classify = ClassifyParams::default();
            let mut pts = Vec::with_capacity(volts.len());
            for v in volts {
                let phi = compose_total(
                    &bases,
                    &EndcapVoltages::symmetric(v),
                    &ctx.config.charges,
                    &ctx.config.trap,
                    None,
                )?;
                let obs = extract_observables(
                    &phi,
                    &classify,
                    ctx.config.inference.selection,
                    ctx.config.trap.ion_mass,
                )?;
                pts.push((v, obs.omega));
            }
            (pts, true)
        }
    };
    let fit = fit_law(&points)?;
    let output = AxialLawOutput {
        alpha_khz2_per_mv: fit.alpha_khz2_per_mv(),
        omega0_khz: omega_to_khz(fit.omega0()),
        rms_residual_khz2: fit.rms_residual / (2.0 * std::f64::consts::PI * 1e3).powi(2),
        points: points.len(),
        simulated,
    };
    println!(
        "alpha = {:.4} kHz^2/mV, omega0/2pi = {:.2} kHz ({} points{})",
        output.alpha_khz2_per_mv,
        output.omega0_khz,
        output.points,
        if simulated { ", simulated" } else { "" }
    );
    let path = ctx.out.join("axial_law.json");
    write_json(&path, &output)?;
    manifest.record(&path);
    manifest.write(&ctx.out)?;
    Ok(())
}

fn read_axial_points(path: &Path) -> anyhow::Result<Vec<(f64, f64)>> {
    let mut reader = csv::Reader::from_path(path)?;
    let headers: Vec<String> =
        reader.headers()?.iter().map(|h| h.trim().to_string()).collect();
    if headers != ["V_ecM_V", "f_ax_kHz"] {
        bail!(fibercharge::Error::Schema {
            path: path.display().to_string(),
            line: 1,
            message: format!("expected columns [V_ecM_V, f_ax_kHz], found {headers:?}"),
        });
    }
    let mut points = Vec::new();
    for (i, row) in reader.records().enumerate() {
        let row = row?;
        let parse = |idx: usize, name: &str| -> anyhow::Result<f64> {
            row.get(idx)
                .and_then(|s| s.trim().parse::<f64>().ok())
                .ok_or_else(|| {
                    anyhow::Error::new(fibercharge::Error::Schema {
                        path: path.display().to_string(),
                        line: i + 2,
                        message: format!("bad {name}"),
                    })
                })
        };
        points.push((parse(0, "V_ecM_V")?, khz_to_omega(parse(1, "f_ax_kHz")?)));
    }
    Ok(points)
}

#[derive(Serialize)]
struct CalibrateOutput {
    alpha_exp_khz2_per_mv: f64,
    alpha_sim_khz2_per_mv: f64,
    endcap_voltage_scale: f64,
}

pub fn calibrate(ctx: &Context, alpha_exp: f64, alpha_sim: f64) -> anyhow::Result<()> {
    let scale = fibercharge::landscape::calibrate_endcaps(alpha_exp, alpha_sim)?;
    let output = CalibrateOutput {
        alpha_exp_khz2_per_mv: alpha_exp,
        alpha_sim_khz2_per_mv: alpha_sim,
        endcap_voltage_scale: scale,
    };
    println!("endcap_voltage_scale = {scale}");
    let path = ctx.out.join("calibrate.json");
    write_json(&path, &output)?;
    Ok(())
}

#[derive(Serialize)]
struct PatchReport {
    anchor_um: f64,
    samples: usize,
    cross_method_rms_v: f64,
    mean_position_discrepancy_um: f64,
    mean_frequency_discrepancy_khz: f64,
    /// Reference figure for the mean-patch frequency consistency.
    reference_frequency_discrepancy_khz: f64,
}

pub fn reconstruct_patch(
    ctx: &Context,
    scan_path: &Path,
    mean_v: f64,
    zero_endcap_x_um: f64,
) -> anyhow::Result<()> {
    let mut manifest = ctx.manifest("reconstruct-patch")?;
    let scan = fibercharge::io::read_axial_scan_csv(scan_path, mean_v)?;
    let opts = ReconstructOptions::new(ctx.config.trap.ion_mass, ctx.config.trap.ion_charge);

    let from_pos = reconstruct_from_positions(&scan, &opts)?;
    let from_freq = reconstruct_from_frequencies(&scan, zero_endcap_x_um * UM, &opts)?;
    let mean = mean_patch(&from_pos, &from_freq)?;

    let mut cross = 0.0;
    for &x in &mean.x {
        let (a, _) = from_pos.evaluate(x);
        let (b, _) = from_freq.evaluate(x);
        cross += (a - b) * (a - b);
    }
    let cross_rms = (cross / mean.x.len() as f64).sqrt();

    let consistency =
        scan_consistency(&scan, &mean, ctx.config.trap.ion_mass, ctx.config.trap.ion_charge)?;

    for (name, patch) in
        [("positions", &from_pos), ("frequencies", &from_freq), ("mean", &mean)]
    {
        let csv = ctx.out.join(format!("patch_{name}.csv"));
        fibercharge::io::write_patch_csv(&csv, patch)?;
        manifest.record(&csv);
        let json = ctx.out.join(format!("patch_{name}.json"));
        fibercharge::io::write_patch_json(&json, patch)?;
        manifest.record(&json);
    }

    let report = PatchReport {
        anchor_um: mean.anchor / UM,
        samples: mean.x.len(),
        cross_method_rms_v: cross_rms,
        mean_position_discrepancy_um: consistency.mean_position_discrepancy / UM,
        mean_frequency_discrepancy_khz: omega_to_khz(consistency.mean_frequency_discrepancy),
        reference_frequency_discrepancy_khz: 4.8,
    };
    println!(
        "patch anchored at {:.1} um; cross-method rms {:.3e} V; mean discrepancies {:.2} um / {:.2} kHz (reference {:.1} kHz)",
        report.anchor_um,
        report.cross_method_rms_v,
        report.mean_position_discrepancy_um,
        report.mean_frequency_discrepancy_khz,
        report.reference_frequency_discrepancy_khz
    );
    let path = ctx.out.join("patch_report.json");
    write_json(&path, &report)?;
    manifest.record(&path);
    manifest.write(&ctx.out)?;
    Ok(())
}

fn load_patch(path: Option<&Path>) -> anyhow::Result<Option<PatchPotential>> {
    match path {
        None => Ok(None),
        Some(p) => {
            let patch = if p.extension().and_then(|e| e.to_str()) == Some("csv") {
                fibercharge::io::read_patch_csv(p, 0.0)?
            } else {
                fibercharge::io::read_patch_json(p)?
            };
            Ok(Some(patch))
        }
    }
}

#[derive(Serialize)]
struct InferOutput {
    moving: String,
    sigma_f_e_um2: f64,
    sigma_s_e_um2: f64,
    constrained: bool,
    mean_residual: f64,
    excluded_d_um: Vec<f64>,
    grid_min_sigma_f: Option<f64>,
    grid_min_sigma_s: Option<f64>,
    iterations: usize,
    geometry_hash: String,
    tool_version: String,
}

pub fn infer_charges(
    ctx: &Context,
    dataset_path: &Path,
    patch_path: Option<&Path>,
    constrained: bool,
    init: Option<&str>,
) -> anyhow::Result<()> {
    let mut manifest = ctx.manifest("infer-charges")?;
    let points = fibercharge::io::read_dataset_points_csv(dataset_path)?;
    let dataset = FiberScanDataset {
        moving: ctx.config.moving,
        points,
        endcaps: ctx.config.endcaps(),
        fixed_charges: ctx.config.charges,
    };
    let patch = load_patch(patch_path)?;

    let provider = ctx.provider();
    let classify = ctx.classify_params(&provider)?;
    let context = PredictContext {
        trap: ctx.config.trap.clone(),
        selection: ctx.config.inference.selection,
        classify,
    };
    let prepared = PreparedScan::new(&dataset, &provider, patch.as_ref(), context)?;

    let budget = budget_from_config(ctx, patch.as_ref())?;

    let (initial, grid_min) = match init {
        Some(raw) => {
            let parts: Vec<f64> = raw
                .split(',')
                .map(|s| s.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .with_context(|| format!("cannot parse --init {raw:?} as sigma_f,sigma_s"))?;
            if parts.len() != 2 {
                bail!("--init needs exactly two comma-separated densities");
            }
            ((parts[0], parts[1]), None)
        }
        None => {
            let surface = grid_scan(
                &prepared,
                &dataset,
                &budget,
                ctx.config.inference.sigma_f_range,
                ctx.config.inference.sigma_s_range,
                ctx.config.inference.grid_step,
            )?;
            let surface_path = ctx.out.join("residual_surface.csv");
            write_surface_csv(&surface_path, &surface)?;
            manifest.record(&surface_path);
            let min = surface.min_densities();
            println!(
                "grid minimum at sigma_f = {:.1}, sigma_s = {:.1} (mean residual {:.3})",
                min.0, min.1, surface.min_value
            );
            (min, Some(min))
        }
    };

    let result = refine(&prepared, &dataset, &budget, initial, constrained)?;
    println!(
        "refined: sigma_f = {:+.2} e/um^2, sigma_s = {:+.2} e/um^2, mean residual {:.3} ({} transition points excluded)",
        result.sigma_f,
        result.sigma_s,
        result.mean_residual,
        result.excluded_d_um.len()
    );
    let output = InferOutput {
        moving: ctx.config.moving.to_string(),
        sigma_f_e_um2: result.sigma_f,
        sigma_s_e_um2: result.sigma_s,
        constrained: result.constrained,
        mean_residual: result.mean_residual,
        excluded_d_um: result.excluded_d_um,
        grid_min_sigma_f: grid_min.map(|m| m.0),
        grid_min_sigma_s: grid_min.map(|m| m.1),
        iterations: result.iterations,
        geometry_hash: manifest.geometry_hash.clone(),
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
    };
    let path = ctx.out.join("inference_result.json");
    write_json(&path, &output)?;
    manifest.record(&path);
    manifest.write(&ctx.out)?;
    Ok(())
}

fn budget_from_config(ctx: &Context, patch: Option<&PatchPotential>) -> anyhow::Result<ErrorBudget> {
    let inf = &ctx.config.inference;
    let position_recon = match patch {
        Some(p) => Some(position_dependent_error(p, &inf.position_recon_breakpoints)?),
        None => None,
    };
    Ok(ErrorBudget {
        position_sim: inf.position_sim_err,
        frequency_sim: inf.frequency_sim_err,
        frequency_recon: if patch.is_some() { inf.frequency_recon_err } else { 0.0 },
        position_recon,
    })
}

fn write_surface_csv(
    path: &Path,
    surface: &fibercharge::inference::ResidualSurface,
) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["sigma_f_e_um2", "sigma_s_e_um2", "mean_residual"])?;
    for (i_s, ss) in surface.sigma_s.iter().enumerate() {
        for (i_f, sf) in surface.sigma_f.iter().enumerate() {
            w.write_record(&[
                format!("{sf}"),
                format!("{ss}"),
                format!("{}", surface.at(i_f, i_s)),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn synth(ctx: &Context, patch_path: Option<&Path>) -> anyhow::Result<FiberScanDataset> {
    let mut manifest = ctx.manifest("synth")?;
    let patch = load_patch(patch_path)?;
    let provider = ctx.provider();
    let classify = ctx.classify_params(&provider)?;
    let scenario = ForwardScenario {
        trap: ctx.config.trap.clone(),
        endcaps: ctx.config.endcaps(),
        moving: ctx.config.moving,
        d_values: ctx.config.d_values.clone(),
        truth: ctx.config.charges,
        selection: ctx.config.inference.selection,
        classify,
    };
    let dataset = generate_dataset(
        &scenario,
        &provider,
        patch.as_ref(),
        &ctx.config.noise,
        &ctx.config.camera,
        ctx.config.positioner(ctx.config.moving),
    )?;

    let csv_path = ctx.out.join("dataset.csv");
    fibercharge::io::write_dataset_csv(&csv_path, &dataset)?;
    manifest.record(&csv_path);

    let truth = TruthSidecar {
        moving: ctx.config.moving,
        sigma_f: ctx
            .config
            .charges
            .density(ctx.config.moving, fibercharge::geometry::SurfaceRegion::Facet),
        sigma_s: ctx
            .config
            .charges
            .density(ctx.config.moving, fibercharge::geometry::SurfaceRegion::Side),
        seed: ctx.config.noise.seed,
        endcap_mean_v: ctx.config.endcaps().mean(),
        geometry_hash_hint: Some(manifest.geometry_hash.clone()),
    };
    let truth_path = ctx.out.join("truth.json");
    write_json(&truth_path, &truth)?;
    manifest.record(&truth_path);
    manifest.write(&ctx.out)?;
    println!("dataset: {} points -> {}", dataset.points.len(), csv_path.display());
    Ok(dataset)
}

#[derive(Serialize)]
struct RoundtripOutput {
    seed: u64,
    plant_sigma_f: f64,
    plant_sigma_s: f64,
    recovered_sigma_f: f64,
    recovered_sigma_s: f64,
    delta_sigma_f: f64,
    delta_sigma_s: f64,
    mean_residual: f64,
    excluded_d_um: Vec<f64>,
    geometry_hash: String,
}

pub fn roundtrip(ctx: &Context, patch_path: Option<&Path>) -> anyhow::Result<()> {
    let mut manifest = ctx.manifest("roundtrip")?;
    let dataset = synth(ctx, patch_path)?;
    let patch = load_patch(patch_path)?;

    // Inference sees the same fixed-fiber assumptions but must recover the
    // moving fiber's densities from the data alone.
    let provider = ctx.provider();
    let classify = ctx.classify_params(&provider)?;
    let context = PredictContext {
        trap: ctx.config.trap.clone(),
        selection: ctx.config.inference.selection,
        classify,
    };
    let prepared = PreparedScan::new(&dataset, &provider, patch.as_ref(), context)?;
    let budget = budget_from_config(ctx, patch.as_ref())?;

    let plant_f = ctx
        .config
        .charges
        .density(ctx.config.moving, fibercharge::geometry::SurfaceRegion::Facet);
    let plant_s = ctx
        .config
        .charges
        .density(ctx.config.moving, fibercharge::geometry::SurfaceRegion::Side);

    // Focused coarse scan bracketing the plant, then local refinement.
    let window = 4.0;
    let surface = grid_scan(
        &prepared,
        &dataset,
        &budget,
        (plant_f - window, plant_f + window),
        (plant_s - window, plant_s + window),
        1.0,
    )?;
    let result = refine(&prepared, &dataset, &budget, surface.min_densities(), false)?;

    let output = RoundtripOutput {
        seed: ctx.config.noise.seed,
        plant_sigma_f: plant_f,
        plant_sigma_s: plant_s,
        recovered_sigma_f: result.sigma_f,
        recovered_sigma_s: result.sigma_s,
        delta_sigma_f: result.sigma_f - plant_f,
        delta_sigma_s: result.sigma_s - plant_s,
        mean_residual: result.mean_residual,
        excluded_d_um: result.excluded_d_um,
        geometry_hash: manifest.geometry_hash.clone(),
    };
    println!(
        "roundtrip: plant ({:+.2}, {:+.2}) -> recovered ({:+.2}, {:+.2}) e/um^2",
        plant_f, plant_s, output.recovered_sigma_f, output.recovered_sigma_s
    );
    let path = ctx.out.join("roundtrip.json");
    write_json(&path, &output)?;
    manifest.record(&path);
    manifest.write(&ctx.out)?;
    Ok(())
}
