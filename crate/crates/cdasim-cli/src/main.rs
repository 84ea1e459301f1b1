//! Command-line front end: load one scenario file, run one experiment, drop
//! CSVs into the output directory, print a short summary.
//!
//! Exit codes: 0 success, 1 config problem (parse/validation diagnostics, no
//! outputs written), 2 the experiment itself failed (divergence, lost
//! pulses, i/o).

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use cdasim::beamform::{
    array_power_pattern, broadside_gain_trials, calibrate_farfield, calibration_duration,
    evaluate_gain, gain_epoch_duration, steer_sweep, GainRecord, HardwareSkew,
};
use cdasim::config::ScenarioConfig;
use cdasim::montecarlo::{crossing_sigma, probability_curve};
use cdasim::pipeline::{run_fine_loop, run_full_with_cursor, SyncCursor, SyncReport};
use cdasim::report;
use cdasim::world::World;
use cdasim::{SimError, C64};

#[derive(Parser)]
#[command(
    name = "cdasim",
    version,
    about = "Deterministic simulator for wirelessly synchronized distributed antenna arrays"
)]
struct Cli {
    /// Scenario TOML; omitted runs the built-in six-node reference scenario.
    #[arg(long, value_name = "PATH", global = true)]
    config: Option<PathBuf>,

    /// Output directory for CSV files (overrides the scenario's out_dir).
    #[arg(long, value_name = "DIR", global = true)]
    out: Option<PathBuf>,

    /// Override the scenario seed (the Monte Carlo study's too).
    #[arg(long, value_name = "N", global = true)]
    seed: Option<u64>,

    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Clock sync from cold start: packet alignment, the refinement ladder,
    /// then the steady-state loop.
    Sync {
        /// Steady-state epochs after acquisition (0: acquisition only).
        #[arg(long, value_name = "N")]
        epochs: Option<usize>,
    },
    /// Broadside coherent gain over repeated trials with per-node timing
    /// errors.
    Beamform {
        /// Number of gain measurements.
        #[arg(long, value_name = "N")]
        trials: Option<usize>,
        /// Run clock sync first and measure on the resulting clocks instead
        /// of injecting Gaussian timing errors.
        #[arg(long)]
        resync: bool,
    },
    /// Measured gain versus steering angle next to the predicted curves.
    Steer {
        /// Run clock sync first instead of starting with aligned clocks.
        #[arg(long)]
        resync: bool,
    },
    /// Exceedance-probability curves of coherent gain under timing error.
    Montecarlo {
        /// Trials per curve point.
        #[arg(long, value_name = "N")]
        trials: Option<usize>,
    },
    /// Far-field power pattern of the configured array.
    Pattern,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    let cfg = match load_config(&cli) {
        Ok(cfg) => cfg,
        Err(msg) => {
            eprintln!("config error: {msg}");
            return ExitCode::from(1);
        }
    };
    match run(&cli.cmd, &cfg) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

/// Scenario from file or defaults, with CLI overrides folded in, validated
/// as a whole so bad overrides are config errors too.
fn load_config(cli: &Cli) -> Result<ScenarioConfig, String> {
    let mut cfg = match &cli.config {
        Some(path) => {
            let text =
                fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
            ScenarioConfig::from_toml_str(&text).map_err(|e| e.to_string())?
        }
        None => ScenarioConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
        cfg.montecarlo.seed = seed;
    }
    if let Some(dir) = &cli.out {
        cfg.out_dir = dir.to_string_lossy().into_owned();
    }
    match &cli.cmd {
        Cmd::Sync { epochs: Some(n) } => cfg.fine_epochs = *n,
        Cmd::Beamform {
            trials: Some(n), ..
        } => cfg.gain_trials = *n,
        Cmd::Montecarlo { trials: Some(n) } => cfg.montecarlo.trials = *n,
        _ => {}
    }
    cfg.validate().map_err(|e| e.to_string())?;
    Ok(cfg)
}

fn run(cmd: &Cmd, cfg: &ScenarioConfig) -> Result<(), SimError> {
    // Fingerprint the effective config (overrides included), so the comment
    // line in each CSV pins down exactly what produced it.
    let fp = report::config_fingerprint(&cfg.fingerprint_source());
    let out = PathBuf::from(&cfg.out_dir);
    fs::create_dir_all(&out).map_err(|e| SimError::Io(format!("{}: {e}", out.display())))?;
    match cmd {
        Cmd::Sync { .. } => cmd_sync(cfg, fp, &out),
        Cmd::Beamform { resync, .. } => cmd_beamform(cfg, *resync, fp, &out),
        Cmd::Steer { resync } => cmd_steer(cfg, *resync, fp, &out),
        Cmd::Montecarlo { .. } => cmd_montecarlo(cfg, fp, &out),
        Cmd::Pattern => cmd_pattern(cfg, fp, &out),
    }
}

fn write_report(path: &Path, contents: &str) -> Result<(), SimError> {
    fs::write(path, contents).map_err(|e| SimError::Io(format!("{}: {e}", path.display())))?;
    println!("wrote {}", path.display());
    Ok(())
}

fn build_world(cfg: &ScenarioConfig) -> World {
    World::new(
        &cfg.geometry.nodes,
        &cfg.clock_noise,
        cfg.link,
        ChaCha8Rng::seed_from_u64(cfg.seed),
    )
}

fn run_sync(cfg: &ScenarioConfig) -> Result<(World, SyncReport, SyncCursor), SimError> {
    let mut world = build_world(cfg);
    let g = cfg.graph.build(world.n_nodes());
    let (rep, cursor) = run_full_with_cursor(
        &mut world,
        &g,
        &cfg.network,
        &cfg.schedule,
        cfg.fine_epochs,
        cfg.sync_carrier_hz,
    )?;
    Ok((world, rep, cursor))
}

fn cmd_sync(cfg: &ScenarioConfig, fp: u64, out: &Path) -> Result<(), SimError> {
    let (_, rep, _) = run_sync(cfg)?;
    write_report(
        &out.join("sync_report.csv"),
        &report::sync_report_csv(&rep, fp, cfg.seed),
    )?;
    let acquisition = cfg.schedule.steps.len();
    println!(
        "sync: {} nodes, {} acquisition epochs, {} fine epochs",
        rep.n_nodes(),
        acquisition,
        cfg.fine_epochs
    );
    let fine = SyncReport {
        rows: rep
            .rows
            .iter()
            .filter(|r| r.epoch >= acquisition)
            .cloned()
            .collect(),
    };
    if fine.rows.is_empty() {
        println!("sync: no steady-state epochs requested, nothing to summarize");
        return Ok(());
    }
    let cells: Vec<String> = fine
        .per_node_mean_abs_error()
        .iter()
        .map(|m| format!("{:.2}", m * 1e12))
        .collect();
    println!("sync: per-node mean |error|: {} ps", cells.join(" "));
    println!("sync: max |error|: {:.2} ps", fine.max_abs_error() * 1e12);
    Ok(())
}

/// Gain measurements on clocks that earned their errors: sync, calibrate,
/// then alternate one steady-state sync epoch with one gain train, the way
/// the array actually operates. Calibration absorbs the sync error of the
/// instant it ran; every later epoch redraws it, and that difference is what
/// the gain sees.
fn resynced_gain_records(cfg: &ScenarioConfig) -> Result<Vec<GainRecord>, SimError> {
    let (mut world, _, mut cursor) = run_sync(cfg)?;
    let n = world.n_nodes();
    let g = cfg.graph.build(n);
    let skew = HardwareSkew::none(n);
    let fc = cfg.beamform_carrier_hz;
    let cal = calibrate_farfield(
        &mut world,
        &cfg.geometry,
        &cfg.scope,
        &skew,
        fc,
        cursor.base_local,
    )?;
    cursor.base_local += calibration_duration(n);
    let ranges = cfg.biased_ranges_m();
    let mut records = Vec::with_capacity(cfg.gain_trials);
    for trial in 0..cfg.gain_trials {
        run_fine_loop(&mut world, &g, 1, cfg.sync_carrier_hz, &mut cursor)?;
        records.push(evaluate_gain(
            &mut world,
            &cfg.geometry,
            &cfg.scope,
            &skew,
            &cal,
            &ranges,
            fc,
            0.0,
            cursor.base_local,
            trial,
        )?);
        cursor.base_local += gain_epoch_duration(n);
    }
    Ok(records)
}

fn cmd_beamform(cfg: &ScenarioConfig, resync: bool, fp: u64, out: &Path) -> Result<(), SimError> {
    let records = if resync {
        resynced_gain_records(cfg)?
    } else {
        broadside_gain_trials(
            &cfg.geometry,
            &cfg.scope,
            cfg.beamform_carrier_hz,
            cfg.timing_sigma_s,
            cfg.gain_trials,
            cfg.seed,
        )?
    };
    write_report(
        &out.join("gain_report.csv"),
        &report::gain_records_csv(&records, fp, cfg.seed),
    )?;
    let gains: Vec<f64> = records.iter().map(|r| r.g_c).collect();
    let mean = gains.iter().sum::<f64>() / gains.len() as f64;
    let min = gains.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = gains.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let source = if resync {
        "residual sync errors".to_string()
    } else {
        format!("{:.0} ps injected errors", cfg.timing_sigma_s * 1e12)
    };
    println!(
        "beamform: {} trials with {source}: gain mean {mean:.4}, min {min:.4}, max {max:.4}",
        gains.len()
    );
    Ok(())
}

fn cmd_steer(cfg: &ScenarioConfig, resync: bool, fp: u64, out: &Path) -> Result<(), SimError> {
    let (mut world, base) = if resync {
        let (world, _, cursor) = run_sync(cfg)?;
        (world, cursor.base_local)
    } else {
        (
            World::noiseless(&cfg.geometry.nodes, ChaCha8Rng::seed_from_u64(cfg.seed)),
            0.0,
        )
    };
    let n = world.n_nodes();
    let skew = HardwareSkew::none(n);
    let fc = cfg.beamform_carrier_hz;
    let cal = calibrate_farfield(&mut world, &cfg.geometry, &cfg.scope, &skew, fc, base)?;
    let points = steer_sweep(
        &mut world,
        &cfg.geometry,
        &cfg.scope,
        &skew,
        &cal,
        &cfg.biased_ranges_m(),
        fc,
        &cfg.steer_angles_deg,
        cfg.steer_repeats,
        base + calibration_duration(n),
    )?;
    write_report(
        &out.join("steer_report.csv"),
        &report::steer_csv(&points, fp, cfg.seed),
    )?;
    let mut worst_angle = 0.0;
    let mut worst_dev = 0.0f64;
    for p in &points {
        for r in &p.records {
            let dev = (r.g_c - p.ideal_applied).abs();
            if dev > worst_dev {
                worst_dev = dev;
                worst_angle = p.theta_deg;
            }
        }
    }
    println!(
        "steer: {} angles x {} repeats, worst |measured - predicted| {worst_dev:.4} at {worst_angle:.1} deg",
        points.len(),
        cfg.steer_repeats
    );
    Ok(())
}

fn cmd_montecarlo(cfg: &ScenarioConfig, fp: u64, out: &Path) -> Result<(), SimError> {
    let points = probability_curve(&cfg.montecarlo)?;
    write_report(
        &out.join("montecarlo.csv"),
        &report::montecarlo_csv(&points, fp, cfg.seed),
    )?;
    let threshold = cfg.montecarlo.threshold;
    for &n in &cfg.montecarlo.array_sizes {
        let per_n: Vec<_> = points.iter().filter(|p| p.n == n).copied().collect();
        match crossing_sigma(&per_n, 0.9) {
            Some(s) => println!(
                "montecarlo: n={n}: P(G >= {threshold}) drops below 0.90 at sigma/T = {:.1}%",
                s * 100.0
            ),
            None => println!(
                "montecarlo: n={n}: P(G >= {threshold}) stays above 0.90 on this grid"
            ),
        }
    }
    Ok(())
}

fn cmd_pattern(cfg: &ScenarioConfig, fp: u64, out: &Path) -> Result<(), SimError> {
    let n = cfg.geometry.nodes.len();
    let weights = vec![C64::new(1.0, 0.0); n];
    let power = array_power_pattern(
        &cfg.geometry,
        &weights,
        cfg.beamform_carrier_hz,
        &cfg.pattern_angles_deg,
    )?;
    write_report(
        &out.join("pattern.csv"),
        &report::pattern_csv(&cfg.pattern_angles_deg, &power, fp, cfg.seed),
    )?;
    let peak = cfg
        .pattern_angles_deg
        .iter()
        .zip(&power)
        .max_by(|a, b| a.1.total_cmp(b.1))
        .map(|(a, _)| *a)
        .unwrap_or(0.0);
    println!("pattern: {n} elements over {} angles, peak at {peak:.2} deg", power.len());
    Ok(())
}
