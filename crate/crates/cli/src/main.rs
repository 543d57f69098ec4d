//! Batch driver for the heterogeneous-agent solver: baseline equilibrium,
//! fixed-point training runs, figure-data exports, and measure sampling.
//!
//! Exit codes: 0 success, 2 configuration error, 3 numerical failure,
//! 4 input/output failure.

mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Parser, Subcommand, ValueEnum};

use config::{ConfigError, RunConfig};
use ksmfg::aiyagari::{equilibrium, AiyagariEquilibrium};
use ksmfg::economy::AggState;
use ksmfg::export;
use ksmfg::jsonfmt;
use ksmfg::measures::{equal_mass_grid, Grid};
use ksmfg::solver::{self, SolveInputs};
use ksmfg::transport::push_forward;

#[derive(Parser)]
#[command(name = "ksmfg", version, about = "Heterogeneous-agent growth model solver")]
struct Cli {
    /// Cap the number of worker threads (results do not depend on this).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Compute the no-aggregate-shock stationary equilibrium and the
    /// equal-mass measure grid derived from it.
    Aiyagari {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory for aiyagari.json and grid.json.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Interior cells for the low-productivity level.
        #[arg(long)]
        k1: Option<usize>,
        /// Interior cells for the high-productivity level.
        #[arg(long)]
        k2: Option<usize>,
    },
    /// Full pipeline: equilibrium, grid, samples, fixed-point training.
    /// Resumes from the last checkpoint if the run directory already holds
    /// completed iterations for the same configuration.
    Solve {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Run directory (created if absent).
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Number of adaptive features.
        #[arg(long)]
        d0: Option<usize>,
        #[arg(long)]
        k1: Option<usize>,
        #[arg(long)]
        k2: Option<usize>,
    },
    /// Export figure data from a finished run directory as CSV.
    Export {
        /// Run directory produced by `solve`.
        #[arg(long)]
        run: PathBuf,
        #[arg(long, value_enum)]
        kind: ExportKind,
        #[arg(long)]
        out: PathBuf,
        /// Fixed first-feature value for `contour` (default: per-network
        /// median over the sample set).
        #[arg(long)]
        f1: Option<f64>,
        /// Wealth positions for `feature-surface` (comma separated).
        #[arg(long, value_delimiter = ',', default_values_t = vec![0.5, 1.0, 3.0, 6.0])]
        xs: Vec<f64>,
        /// Lattice resolution per axis.
        #[arg(long, default_value_t = 40)]
        resolution: usize,
    },
    /// Draw measures from the training sampler and write them with their
    /// implied rates.
    SampleMeasures {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Directory holding aiyagari.json and grid.json (from `aiyagari`).
        #[arg(long)]
        baseline: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1000)]
        count: usize,
        #[arg(long)]
        seed: Option<u64>,
    },
}

#[derive(Copy, Clone, ValueEnum)]
enum ExportKind {
    Contour,
    PolicySlice,
    FeatureSurface,
    Scatter,
}

enum CliError {
    Config(String),
    Core(ksmfg::Error),
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Config(e.0)
    }
}

impl From<ksmfg::Error> for CliError {
    fn from(e: ksmfg::Error) -> Self {
        CliError::Core(e)
    }
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Core(ksmfg::Error::Io(_)) | CliError::Core(ksmfg::Error::Json(_)) => 4,
            CliError::Core(ksmfg::Error::InvalidParameter(_)) => 2,
            CliError::Core(_) => 3,
        }
    }

    fn message(&self) -> String {
        match self {
            CliError::Config(m) => format!("configuration error: {m}"),
            CliError::Core(e) => e.to_string(),
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        // Thread count only affects wall time; all reductions are ordered.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("ksmfg: {}", e.message());
            ExitCode::from(e.code())
        }
    }
}

fn load_config(path: &Option<PathBuf>) -> Result<RunConfig, CliError> {
    match path {
        None => Ok(RunConfig::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| CliError::Config(format!("cannot read {}: {e}", p.display())))?;
            Ok(RunConfig::parse(&text)?)
        }
    }
}

fn run(cmd: Command) -> Result<(), CliError> {
    match cmd {
        Command::Aiyagari {
            config,
            out,
            seed,
            k1,
            k2,
        } => {
            let mut cfg = load_config(&config)?;
            apply_overrides(&mut cfg, seed, None, k1, k2);
            cmd_aiyagari(&cfg, &out)
        }
        Command::Solve {
            config,
            out,
            seed,
            d0,
            k1,
            k2,
        } => {
            let mut cfg = load_config(&config)?;
            apply_overrides(&mut cfg, seed, d0, k1, k2);
            cmd_solve(&cfg, &out)
        }
        Command::Export {
            run,
            kind,
            out,
            f1,
            xs,
            resolution,
        } => cmd_export(&run, kind, &out, f1, &xs, resolution),
        Command::SampleMeasures {
            config,
            baseline,
            out,
            count,
            seed,
        } => {
            let mut cfg = load_config(&config)?;
            apply_overrides(&mut cfg, seed, None, None, None);
            cmd_sample_measures(&cfg, &baseline, &out, count)
        }
    }
}

fn apply_overrides(
    cfg: &mut RunConfig,
    seed: Option<u64>,
    d0: Option<usize>,
    k1: Option<usize>,
    k2: Option<usize>,
) {
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(v) = d0 {
        cfg.d0 = v;
    }
    if let Some(v) = k1 {
        cfg.k1 = v;
    }
    if let Some(v) = k2 {
        cfg.k2 = v;
    }
}

/// Equilibrium plus the equal-mass grid derived from its measure.
fn compute_baseline(cfg: &RunConfig) -> Result<(AiyagariEquilibrium, Grid), CliError> {
    let params = cfg.economy_params();
    params.validate()?;
    let eq = equilibrium(&params, &cfg.aiyagari_options())?;
    let fine = eq.measure.resample_uniform(cfg.equal_mass_fine_cells)?;
    let grid = equal_mass_grid(&fine, cfg.k1, cfg.k2)?;
    Ok((eq, grid))
}

fn cmd_aiyagari(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(out).map_err(ksmfg::Error::from)?;
    let (eq, grid) = compute_baseline(cfg)?;
    eq.write_json_file(&out.join("aiyagari.json"))?;
    grid.write_json_file(&out.join("grid.json"))?;
    println!(
        "equilibrium: r* = {:.6}, w* = {:.6}, clearing gap {:.2e} ({} bisections)",
        eq.r_star, eq.w_star, eq.clearing_gap, eq.bisection_iterations
    );
    println!("wrote {}", out.join("aiyagari.json").display());
    println!("wrote {}", out.join("grid.json").display());
    Ok(())
}

fn cmd_solve(cfg: &RunConfig, run_dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(run_dir).map_err(ksmfg::Error::from)?;
    let snapshot_path = run_dir.join("config.snapshot");
    if snapshot_path.exists() {
        let existing = RunConfig::parse(
            &std::fs::read_to_string(&snapshot_path).map_err(ksmfg::Error::from)?,
        )?;
        if existing.resume_key() != cfg.resume_key() {
            return Err(CliError::Config(format!(
                "{} holds a run with a different configuration; refusing to resume",
                run_dir.display()
            )));
        }
    }
    std::fs::write(&snapshot_path, cfg.snapshot()).map_err(ksmfg::Error::from)?;

    let params = cfg.economy_params();
    params.validate()?;

    // Baseline and grid: reuse what a previous (interrupted) run left behind.
    let aiyagari_path = run_dir.join("aiyagari.json");
    let grid_path = run_dir.join("grid.json");
    let (eq, grid) = if aiyagari_path.exists() && grid_path.exists() {
        (
            AiyagariEquilibrium::read_json_file(&aiyagari_path)?,
            Grid::read_json_file(&grid_path)?,
        )
    } else {
        let (eq, grid) = compute_baseline(cfg)?;
        eq.write_json_file(&aiyagari_path)?;
        grid.write_json_file(&grid_path)?;
        (eq, grid)
    };
    let grid = Arc::new(grid);
    let base_measure = eq.measure.project_onto(&grid)?;
    let inputs = SolveInputs {
        params: &params,
        grid: grid.clone(),
        base_measure,
        baseline: &eq.solution,
        net_spec: cfg.net_spec(grid.coeff_len()),
        sampler: cfg.sampler_config(),
        fixed_point: cfg.fixed_point_config(),
    };
    let (_, reports) = solver::solve(&inputs, Some(run_dir), cfg.config_hash())?;
    for r in &reports {
        println!(
            "iter {:3}: holdout msr {:.3e} {:.3e} {:.3e} {:.3e}  policy change {:.3e}  ({:.1}s)",
            r.iteration,
            r.holdout_msr[0][0],
            r.holdout_msr[0][1],
            r.holdout_msr[1][0],
            r.holdout_msr[1][1],
            r.policy_change_sup,
            r.wall_seconds,
        );
    }
    println!("run directory: {}", run_dir.display());
    Ok(())
}

fn cmd_export(
    run: &Path,
    kind: ExportKind,
    out: &Path,
    f1: Option<f64>,
    xs: &[f64],
    resolution: usize,
) -> Result<(), CliError> {
    let ctx = export::load_run(run)?;
    match kind {
        ExportKind::Contour => export::export_contour(&ctx, f1, resolution, resolution, out)?,
        ExportKind::PolicySlice => export::export_policy_slice(&ctx, resolution.max(2), out)?,
        ExportKind::FeatureSurface => {
            export::export_feature_surface(&ctx, xs, resolution, resolution, out)?
        }
        ExportKind::Scatter => export::export_scatter(&ctx, out)?,
    }
    println!("wrote {}", out.display());
    Ok(())
}

fn cmd_sample_measures(
    cfg: &RunConfig,
    baseline_dir: &Path,
    out: &Path,
    count: usize,
) -> Result<(), CliError> {
    let params = cfg.economy_params();
    params.validate()?;
    let eq = AiyagariEquilibrium::read_json_file(&baseline_dir.join("aiyagari.json"))?;
    let grid = Arc::new(Grid::read_json_file(&baseline_dir.join("grid.json"))?);
    let base = eq.measure.project_onto(&grid)?;
    let mut sampler = cfg.sampler_config();
    sampler.n_samples = count;
    let tcfg = cfg.transport_config();
    // On-dynamics draws move under the baseline policy; no trained networks
    // exist at sampling time.
    let set = ksmfg::samples::generate_samples(
        &sampler,
        &grid,
        &base,
        |m, _i: AggState| push_forward(m, |x, j| eq.solution.savings_at(x, j), &params, &tcfg),
        &params,
        cfg.seed,
    )?;
    #[derive(serde::Serialize)]
    struct SampleMeasuresJson {
        rates_slow: Vec<f64>,
        rates_fast: Vec<f64>,
        measures: Vec<ksmfg::measures::MeasureJson>,
    }
    let doc = SampleMeasuresJson {
        rates_slow: set.samples.iter().map(|s| s.prices[0].r).collect(),
        rates_fast: set.samples.iter().map(|s| s.prices[1].r).collect(),
        measures: set.samples.iter().map(|s| s.measure.to_json()).collect(),
    };
    jsonfmt::write_json_file(out, &doc)?;
    println!("wrote {} measures to {}", count, out.display());
    Ok(())
}
