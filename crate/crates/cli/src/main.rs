//! Batch front end for the simulation and inference pipeline:
//! solve bases, compose and analyze landscapes, fit and calibrate the axial
//! law, reconstruct patch potentials, infer charge densities, and generate
//! synthetic datasets for round trips.

mod commands;
mod manifest;

use clap::{Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

/// Exit codes: 0 success, 2 schema/config, 3 solver, 4 convergence,
/// 5 geometry-hash/stale-basis, 6 geometry conflict, 1 other.
pub fn exit_code_for(err: &fibercharge::Error) -> u8 {
    use fibercharge::Error::*;
    match err {
        Config(_) | Schema { .. } | Dataset(_) => 2,
        SolverFailure { .. } => 3,
        NonConvergence(_) | NotAWell(_) | DegenerateFit(_) => 4,
        StaleBasis(_) => 5,
        GeometryConflict(_) => 6,
        _ => 1,
    }
}

#[derive(Parser)]
#[command(name = "fibercharge", version, about = "Trap simulation and fiber surface-charge inference")]
struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Output directory (created if missing).
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,

    /// Basis cache directory.
    #[arg(long, global = true)]
    cache_dir: Option<PathBuf>,

    /// Worker threads (0 = rayon default).
    #[arg(long, global = true, default_value_t = 0)]
    jobs: usize,

    /// Seed override for synthetic data.
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve (or load from cache) the seven unit bases for every configured
    /// fiber distance.
    SolveBasis {
        /// Also export each basis map as CSV.
        #[arg(long)]
        csv: bool,
    },
    /// Compose landscapes for the configured charge state and report
    /// per-distance observables.
    Analyze {
        /// Patch potential JSON to include in the composition.
        #[arg(long)]
        patch: Option<PathBuf>,
        /// Export each composed landscape as CSV.
        #[arg(long)]
        csv: bool,
        /// Export energies in joules instead of eV.
        #[arg(long)]
        joules: bool,
    },
    /// Fit the axial law omega_ax = sqrt(alpha V + omega0^2).
    FitAxialLaw {
        /// CSV with columns V_ecM_V, f_ax_kHz; when absent, the law is
        /// simulated over --voltages.
        #[arg(long)]
        input: Option<PathBuf>,
        /// Mean endcap voltages (V) to simulate, comma separated.
        #[arg(long, value_delimiter = ',')]
        voltages: Option<Vec<f64>>,
    },
    /// Endcap voltage scale from measured and simulated axial-law slopes.
    Calibrate {
        #[arg(long)]
        alpha_exp: f64,
        #[arg(long)]
        alpha_sim: f64,
    },
    /// Reconstruct the stray patch potential from an endcap-difference scan.
    ReconstructPatch {
        /// Scan CSV (V_ecD_V, x_exp_um, x_err_um, f_exp_kHz, f_err_kHz,
        /// x_sim_um, f_sim_kHz).
        #[arg(long)]
        scan: PathBuf,
        /// Mean endcap voltage of the scan (informational).
        #[arg(long, default_value_t = 1000.0)]
        mean_v: f64,
        /// Observed zero-endcap equilibrium position (µm) for the
        /// frequency-method integration constant.
        #[arg(long, default_value_t = 0.0)]
        zero_endcap_x_um: f64,
    },
    /// Infer the moving fiber's facet/side charge densities from a dataset.
    InferCharges {
        /// Dataset CSV (d_um, d_err_um, x_um, x_err_um, f_kHz, f_err_kHz).
        #[arg(long)]
        dataset: PathBuf,
        /// Patch potential JSON to include.
        #[arg(long)]
        patch: Option<PathBuf>,
        /// Constrain the fit to a single density (facet = side).
        #[arg(long)]
        constrained: bool,
        /// Skip the coarse grid scan and refine from this "sigma_f,sigma_s".
        #[arg(long)]
        init: Option<String>,
    },
    /// Generate a synthetic dataset from the configured truth charge state.
    Synth {
        /// Patch potential JSON included in the truth landscape.
        #[arg(long)]
        patch: Option<PathBuf>,
    },
    /// Synth followed by inference; writes a round-trip score.
    Roundtrip {
        #[arg(long)]
        patch: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();

    if cli.jobs > 0 {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(cli.jobs).build_global() {
            eprintln!("failed to set thread pool: {e}");
            return ExitCode::from(1);
        }
    }

    let result = run(&cli);
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            let code = match err.downcast_ref::<fibercharge::Error>() {
                Some(domain) => exit_code_for(domain),
                None => 1,
            };
            ExitCode::from(code)
        }
    }
}

fn run(cli: &Cli) -> anyhow::Result<()> {
    let mut config = match &cli.config {
        Some(path) => fibercharge::config::ProjectConfig::load(path)?,
        None => fibercharge::config::ProjectConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.noise.seed = seed;
    }
    std::fs::create_dir_all(&cli.out)?;
    let cache = fibercharge::cache::BasisCache::new(cli.cache_dir.clone());
    let ctx = commands::Context {
        config,
        cache,
        out: cli.out.clone(),
        config_path: cli.config.clone(),
        cache_dir: cli.cache_dir.clone(),
    };

    match &cli.command {
        Command::SolveBasis { csv } => commands::solve_basis(&ctx, *csv),
        Command::Analyze { patch, csv, joules } => {
            commands::analyze(&ctx, patch.as_deref(), *csv, !*joules)
        }
        Command::FitAxialLaw { input, voltages } => {
            commands::fit_axial_law(&ctx, input.as_deref(), voltages.clone())
        }
        Command::Calibrate { alpha_exp, alpha_sim } => {
            commands::calibrate(&ctx, *alpha_exp, *alpha_sim)
        }
        Command::ReconstructPatch { scan, mean_v, zero_endcap_x_um } => {
            commands::reconstruct_patch(&ctx, scan, *mean_v, *zero_endcap_x_um)
        }
        Command::InferCharges { dataset, patch, constrained, init } => {
            commands::infer_charges(&ctx, dataset, patch.as_deref(), *constrained, init.as_deref())
        }
        Command::Synth { patch } => commands::synth(&ctx, patch.as_deref()).map(|_| ()),
        Command::Roundtrip { patch } => commands::roundtrip(&ctx, patch.as_deref()),
    }
}
