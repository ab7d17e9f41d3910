//! Development probe for trap-scale quantities; run with
//! `cargo test -p fibercharge --test tuning -- --ignored --nocapture`.

use fibercharge::composer::{compose_total, BasisSet, EndcapVoltages};
use fibercharge::consts::{omega_to_khz, UM};
use fibercharge::geometry::{
    build_geometry, standard_fibers, ChargeState, ElectrodeDims, Excitation, FiberLabel,
    SurfaceRegion, TrapConfig,
};
use fibercharge::landscape::{find_minimum_seed, fit_paraboloid, DEFAULT_FIT_RADIUS};
use fibercharge::maps::mapgen;
use fibercharge::solver::{default_map_grid, BasisSolver, SolverConfig};

fn dims_from_env() -> ElectrodeDims {
    let get = |k: &str, default: f64| -> f64 {
        std::env::var(k).map(|s| s.parse().unwrap()).unwrap_or(default)
    };
    ElectrodeDims {
        blade_half_length: get("TUNE_LB", 1500.0) * UM,
        blade_depth: get("TUNE_DEPTH", 2400.0) * UM,
        ground_bore_radius: get("TUNE_BORE", 150.0) * UM,
        ground_blade_standoff: get("TUNE_STANDOFF", 90.0) * UM,
        blade_half_width: get("TUNE_W", 150.0) * UM,
        ..ElectrodeDims::default()
    }
}

fn probe(dims: &ElectrodeDims, label: &str) {
    let trap = TrapConfig::default();
    let fibers = standard_fibers(1600.0 * UM, 1600.0 * UM);
    let geometry = build_geometry(&trap, &fibers, dims).unwrap();
    let config = SolverConfig::test_tier();
    let solver = BasisSolver::new(&geometry, &config, default_map_grid()).unwrap();
    let (rf, _) = solver.solve_basis(Excitation::RfUnit).unwrap();
    let (ec_left, _) = solver.solve_basis(Excitation::EcLeftUnit).unwrap();
    let (ec_right, _) = solver.solve_basis(Excitation::EcRightUnit).unwrap();
    let hash = geometry.hash();
    let zeros = |l, r| {
        mapgen::from_fn(default_map_grid(), Excitation::ChargeUnit(l, r), &hash, |_, _| 0.0)
            .with_validity(rf.valid.clone())
    };
    let bases = BasisSet {
        rf: rf.clone(),
        ec_left,
        ec_right,
        m_facet: zeros(FiberLabel::M, SurfaceRegion::Facet),
        m_side: zeros(FiberLabel::M, SurfaceRegion::Side),
        p_facet: zeros(FiberLabel::P, SurfaceRegion::Facet),
        p_side: zeros(FiberLabel::P, SurfaceRegion::Side),
    };
    let phi = compose_total(
        &bases,
        &EndcapVoltages::symmetric(1300.0),
        &ChargeState::neutral(),
        &trap,
        None,
    )
    .unwrap();
    let seed = find_minimum_seed(&phi).unwrap();
    // Decompose the axial curvature at the center: rf pseudopotential vs endcaps.
    let h = 10.0 * UM;
    let curv = |m: &fibercharge::maps::EnergyMap| {
        (m.sample([h, 0.0]).unwrap() - 2.0 * m.sample([0.0, 0.0]).unwrap()
            + m.sample([-h, 0.0]).unwrap())
            / (h * h)
    };
    let rf_only = fibercharge::composer::pseudopotential(&bases.rf, &trap).unwrap();
    let c_rf = curv(&rf_only);
    let c_tot = curv(&phi);
    let to_khz = |c: f64| {
        let s = if c < 0.0 { -1.0 } else { 1.0 };
        s * omega_to_khz((c.abs() / trap.ion_mass).sqrt())
    };
    println!(
        "  axial curvature: rf-only {:.1} kHz-equiv, endcap part {:.1} kHz-equiv",
        to_khz(c_rf),
        to_khz(c_tot - c_rf)
    );
    match fit_paraboloid(&phi, seed, DEFAULT_FIT_RADIUS) {
        Ok(fit) => {
            let f_ax = omega_to_khz((fit.c_minor / trap.ion_mass).sqrt());
            let f_rad = omega_to_khz((fit.c_major / trap.ion_mass).sqrt());
            println!(
                "{label}: axial {f_ax:.1} kHz, radial {f_rad:.1} kHz, center ({:.2}, {:.2}) um",
                fit.center[0] / UM,
                fit.center[1] / UM
            );
        }
        Err(e) => {
            println!("{label}: fit error: {e}");
            let phi0 = phi.sample([0.0, 0.0]).unwrap();
            for x_um in [100.0, 200.0, 400.0] {
                let v = phi.sample([x_um * UM, 0.0]).unwrap();
                print!("  dphi({x_um}) = {:+.2e}", v - phi0);
            }
            println!();
        }
    }
}

#[test]
#[ignore]
fn probe_double_well_transition() {
    use fibercharge::geometry::{FiberPlacement, FiberSide, FiberSpec};
    use fibercharge::landscape::{axial_valley_cut, classify_wells, ClassifyParams};
    use fibercharge::solver::solve_all_bases;

    let trap = TrapConfig::default();
    let charges = ChargeState::neutral().with(FiberLabel::P, 4.0, 8.5);
    let tuned = dims_from_env();
    println!(
        "Lb {:.0} um, blade_depth {:.0} um, bore {:.0} um",
        tuned.blade_half_length / UM,
        tuned.blade_depth / UM,
        tuned.ground_bore_radius / UM
    );
    for d_um in [1000.0, 800.0, 700.0, 600.0, 500.0, 400.0, 300.0] {
        let fibers = vec![
            (
                FiberSpec::new(FiberLabel::M, 220.0 * UM),
                FiberPlacement {
                    d: 2000.0 * UM,
                    x_offset: 0.0,
                    z_offset: 0.0,
                    side: FiberSide::Above,
                },
            ),
            (
                FiberSpec::new(FiberLabel::P, 230.0 * UM),
                FiberPlacement {
                    d: d_um * UM,
                    x_offset: 10.0 * UM,
                    z_offset: 0.0,
                    side: FiberSide::Below,
                },
            ),
        ];
        let geometry = build_geometry(&trap, &fibers, &tuned).unwrap();
        let solver =
            BasisSolver::new(&geometry, &SolverConfig::test_tier(), default_map_grid()).unwrap();
        let (bases, _) = solve_all_bases(&solver).unwrap();
        let phi = compose_total(
            &bases,
            &EndcapVoltages::symmetric(1500.0),
            &charges,
            &trap,
            None,
        )
        .unwrap();
        let cut = axial_valley_cut(&phi);
        let wells = classify_wells(&phi, &cut, &ClassifyParams::default()).unwrap();
        let min_str: Vec<String> = wells
            .minima
            .iter()
            .map(|(x, _)| format!("{:.1}", x / UM))
            .collect();
        let curvature_info = match fit_paraboloid(
            &phi,
            [wells.minima[0].0, 0.0],
            DEFAULT_FIT_RADIUS,
        ) {
            Ok(f) => format!("f_ax {:.1} kHz", omega_to_khz((f.c_minor / trap.ion_mass).sqrt())),
            Err(e) => format!("({e})"),
        };
        println!(
            "d_P = {d_um} um: {:?}, minima x = [{}] um, {}",
            wells.kind,
            min_str.join(", "),
            curvature_info
        );
    }
}

#[test]
#[ignore]
fn probe_trap_frequencies() {
    let base = dims_from_env();
    for (lb_um, standoff_um, w_um) in [
        (1440.0, 90.0, 150.0),
        (1500.0, 90.0, 150.0),
        (1560.0, 90.0, 150.0),
        (1620.0, 90.0, 150.0),
    ] {
        let dims = ElectrodeDims {
            blade_half_length: lb_um * UM,
            ground_blade_standoff: standoff_um * UM,
            blade_half_width: w_um * UM,
            ..base.clone()
        };
        probe(&dims, &format!("Lb={lb_um} standoff={standoff_um} w={w_um}"));
    }
}
