//! `wpmac`: run rate-region experiments from a JSON configuration.
//!
//! Exit codes: 0 success, 2 configuration error, 3 numerical failure
//! (including non-convergence), 4 I/O error.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use wpmac::dual::{calibrate, CalibrationReport};
use wpmac::experiment::{region_rows, write_json, write_region_csv, ExperimentConfig, RunMetadata};
use wpmac::fading::FadingStream;
use wpmac::oracle::{
    baseline_mac_region, exhaustive_region_tiny, grid_lagrangian_max, pilot_grid_max,
    slot_lagrangian, GridSpec,
};
use wpmac::simulator::{run_ensemble, run_trajectory_traced};
use wpmac::sweep::run_sweep;
use wpmac::{ehu_powers, Error, FadingConfig, Policy, SystemParams, Weights};

/// Largest relative Lagrangian gap accepted by `oracle grid-check`.
const GRID_TOLERANCE: f64 = 1e-6;

#[derive(Parser)]
#[command(
    name = "wpmac",
    version,
    about = "Wireless-powered MAC rate-region experiments"
)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Experiment configuration (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory; overrides `output.dir`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads; defaults to the available parallelism.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Replaces the fading seed of the configuration.
    #[arg(long, global = true)]
    seed_override: Option<u64>,
    /// Writes a per-slot trace for simulations.
    #[arg(long, global = true)]
    trace: bool,
    /// Suppresses progress messages.
    #[arg(long, global = true)]
    quiet: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Sweeps the priority grid and writes the region CSV and metadata.
    Region,
    /// Calibrates the multipliers of `simulation.mu` in `system.mode`.
    Calibrate,
    /// Calibrates, then simulates `simulation.m_slots` slots.
    Simulate,
    /// Reference computations.
    #[command(subcommand)]
    Oracle(OracleCommand),
}

#[derive(Subcommand)]
enum OracleCommand {
    /// Compares the closed-form slot decisions with a grid search.
    GridCheck,
    /// Region of the conventional MAC with the nominal harvested budget.
    Baseline,
    /// Exact frontier of the two-point instance in `oracle.tiny`.
    Tiny,
}

/// A failure with its exit code.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Config(_)
            | Error::InvalidParameter(_)
            | Error::Dimension { .. }
            | Error::UserIndex { .. } => 2,
            Error::Numerical(_) | Error::DegenerateMultiplier { .. } => 3,
            Error::Io(_) | Error::Json(_) | Error::Csv(_) => 4,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

fn io_failure(e: std::io::Error) -> Failure {
    Failure::from(Error::Io(e))
}

struct Context {
    config: ExperimentConfig,
    out: PathBuf,
    trace: bool,
    quiet: bool,
}

impl Context {
    fn load(global: &Global) -> Result<Self, Failure> {
        let path = global.config.as_ref().ok_or_else(|| Failure {
            code: 2,
            message: "--config is required".into(),
        })?;
        let mut config = ExperimentConfig::load(path).map_err(|e| match e {
            Error::Io(io) => Failure {
                code: 2,
                message: format!("cannot read {}: {io}", path.display()),
            },
            other => Failure::from(other),
        })?;
        if let Some(seed) = global.seed_override {
            config = config.with_seed(seed);
        }
        let out = global
            .out
            .clone()
            .unwrap_or_else(|| config.output.dir.clone());
        fs::create_dir_all(&out).map_err(io_failure)?;
        Ok(Context {
            trace: global.trace || config.output.trace,
            quiet: global.quiet,
            config,
            out,
        })
    }

    fn progress(&self, msg: &str) {
        if !self.quiet {
            eprintln!("{msg}");
        }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn single_point(&self) -> Result<(SystemParams, FadingConfig, Weights), Failure> {
        let sim = self.config.simulation.as_ref().ok_or_else(|| Failure {
            code: 2,
            message: "config has no simulation section".into(),
        })?;
        Ok((
            self.config.system.clone(),
            self.config.fading_config(),
            sim.mu.clone(),
        ))
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(jobs) = cli.global.jobs {
        if jobs == 0 {
            eprintln!("error: --jobs must be positive");
            return ExitCode::from(2);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
        {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }
    let result = Context::load(&cli.global).and_then(|ctx| match cli.command {
        Command::Region => cmd_region(&ctx),
        Command::Calibrate => cmd_calibrate(&ctx).map(|_| ()),
        Command::Simulate => cmd_simulate(&ctx),
        Command::Oracle(OracleCommand::GridCheck) => cmd_grid_check(&ctx),
        Command::Oracle(OracleCommand::Baseline) => cmd_baseline(&ctx),
        Command::Oracle(OracleCommand::Tiny) => cmd_tiny(&ctx),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn cmd_region(ctx: &Context) -> Result<(), Failure> {
    let spec = ctx.config.sweep_spec()?;
    ctx.progress(&format!(
        "sweeping {} priority points over {:?} in {:?}",
        spec.mu_points.len(),
        spec.m_slots_list,
        spec.modes
    ));
    let region = run_sweep(&spec, &ctx.config.system, &ctx.config.fading_config())?;
    let rows = region_rows(&region);
    let file = fs::File::create(ctx.path("region.csv")).map_err(io_failure)?;
    write_region_csv(&rows, ctx.config.system.n_users, BufWriter::new(file))?;
    write_json(
        &ctx.path("metadata.json"),
        &RunMetadata::new(&ctx.config, &region),
    )?;
    ctx.progress(&format!("wrote {}", ctx.path("region.csv").display()));
    if region.all_converged() {
        Ok(())
    } else {
        Err(Failure {
            code: 3,
            message: "some priority points failed to calibrate; see metadata.json".into(),
        })
    }
}

fn calibrated(
    ctx: &Context,
) -> Result<(SystemParams, FadingConfig, Weights, CalibrationReport), Failure> {
    let (params, cfg, w) = ctx.single_point()?;
    ctx.progress(&format!("calibrating mu = {:?} in {}", w.mu(), params.mode));
    let report = calibrate(&w, &params, &cfg, &ctx.config.calibration)?;
    Ok((params, cfg, w, report))
}

fn not_converged(report: &CalibrationReport) -> Failure {
    Failure {
        code: 3,
        message: format!(
            "calibration did not converge after {} iterations (max residual {:.3e})",
            report.n_iterations,
            report.max_abs_residual()
        ),
    }
}

fn cmd_calibrate(ctx: &Context) -> Result<CalibrationReport, Failure> {
    let (_, _, _, report) = calibrated(ctx)?;
    write_json(&ctx.path("calibration.json"), &report)?;
    if report.converged {
        Ok(report)
    } else {
        Err(not_converged(&report))
    }
}

fn cmd_simulate(ctx: &Context) -> Result<(), Failure> {
    let sim = ctx.config.simulation.clone().ok_or_else(|| Failure {
        code: 2,
        message: "config has no simulation section".into(),
    })?;
    let (params, cfg, w, report) = calibrated(ctx)?;
    if !report.converged {
        write_json(&ctx.path("calibration.json"), &report)?;
        return Err(not_converged(&report));
    }
    ctx.progress(&format!(
        "simulating {} slots x {} runs",
        sim.m_slots, sim.n_runs
    ));
    if ctx.trace {
        let file = fs::File::create(ctx.path("trace.csv")).map_err(io_failure)?;
        let mut out = BufWriter::new(file);
        run_trajectory_traced(
            &w,
            &report.multipliers,
            &params,
            &cfg,
            sim.m_slots,
            &mut out,
        )?;
        out.flush().map_err(io_failure)?;
    }
    let ensemble = run_ensemble(
        &w,
        &report.multipliers,
        &params,
        &cfg,
        sim.m_slots,
        sim.n_runs,
    )?;
    write_json(
        &ctx.path("simulation.json"),
        &json!({ "calibration": report, "ensemble": ensemble }),
    )?;
    Ok(())
}

fn cmd_grid_check(ctx: &Context) -> Result<(), Failure> {
    let (params, cfg, w, report) = calibrated(ctx)?;
    if !report.converged {
        return Err(not_converged(&report));
    }
    let mult = &report.multipliers;
    let policy = Policy::new(&params, &w, mult)?;
    let p_grid = pilot_grid_max(&cfg, &params, ctx.config.oracle.pilot_slots, |s| {
        Ok(ehu_powers(s, &w, mult)?.powers)
    })?;
    let spec = GridSpec::new(p_grid);
    // slots after the pilot window
    let start = ctx.config.oracle.pilot_slots as u64;
    let mut worst = 0.0f64;
    for s in FadingStream::new(&cfg, params.mode, start).take(ctx.config.oracle.grid_slots) {
        let closed = policy.decide(&s, &w)?;
        let v_closed = slot_lagrangian(&s, &closed, &w, mult, &params)?;
        let (_, v_grid) = grid_lagrangian_max(&s, &w, mult, &params, &spec)?;
        worst = worst.max(relative_gap(v_closed, v_grid));
    }
    write_json(
        &ctx.path("grid_check.json"),
        &json!({ "slots": ctx.config.oracle.grid_slots, "p_grid_max": p_grid, "max_relative_gap": worst }),
    )?;
    println!("max relative Lagrangian gap: {worst:.3e}");
    if worst > GRID_TOLERANCE {
        return Err(Failure {
            code: 3,
            message: format!("grid gap {worst:.3e} exceeds {GRID_TOLERANCE:e}"),
        });
    }
    Ok(())
}

fn relative_gap(closed: f64, grid: f64) -> f64 {
    (closed - grid).abs() / closed.abs().max(grid.abs()).max(1e-12)
}

fn cmd_baseline(ctx: &Context) -> Result<(), Failure> {
    let spec = ctx.config.sweep_spec()?;
    let params = &ctx.config.system;
    let cfg = ctx.config.fading_config();
    let budget: Vec<f64> = cfg
        .mean_y()
        .iter()
        .map(|g| params.eta_prime() * params.p_avg * g)
        .collect();
    ctx.progress(&format!("baseline budgets {budget:?}"));
    let region = baseline_mac_region(
        &spec.mu_points,
        &budget,
        &cfg,
        params,
        ctx.config.oracle.baseline_slots,
    )?;
    write_json(&ctx.path("baseline.json"), &region)?;
    if region.points.iter().all(|p| p.converged) {
        Ok(())
    } else {
        Err(Failure {
            code: 3,
            message: "baseline calibration failed for some points".into(),
        })
    }
}

fn cmd_tiny(ctx: &Context) -> Result<(), Failure> {
    let tiny = ctx.config.oracle.tiny.as_ref().ok_or_else(|| Failure {
        code: 2,
        message: "config has no oracle.tiny section".into(),
    })?;
    let region = exhaustive_region_tiny(&tiny.system, &tiny.fading, &tiny.mu_points)?;
    write_json(&ctx.path("tiny.json"), &region)?;
    Ok(())
}
