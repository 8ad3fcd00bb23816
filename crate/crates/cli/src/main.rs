use anyhow::{Context, Result};
use bemshell::dynamics::{measure_frequency, CouplingMode, RunOutput};
use bemshell_cli::config::FluidConfig;
use bemshell_cli::{presets, Scenario, ScenarioConfig};
use clap::{Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

/// Thin elastic shells in Stokes flow: isogeometric shell + boundary elements.
#[derive(Parser)]
#[command(name = "bemshell", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Clone, Default)]
struct Overrides {
    /// Coupling mode: fully_implicit, semi_implicit, segregated or dry.
    #[arg(long)]
    mode: Option<CouplingMode>,
    /// Fluid viscosity (Pa s).
    #[arg(long)]
    eta: Option<f64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Run the scenario described by a TOML config.
    Run {
        config: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Built-in benchmarks.
    Bench {
        #[command(subcommand)]
        which: Bench,
    },
    /// Run a config once per time step size and report the tip frequency.
    Sweep {
        config: PathBuf,
        /// Comma-separated time step sizes.
        #[arg(long, value_delimiter = ',', required = true)]
        dt: Vec<f64>,
        #[command(flatten)]
        overrides: Overrides,
    },
}

#[derive(Subcommand)]
enum Bench {
    /// Release of a pre-deflected steel strip; reports the tip frequency.
    Cantilever {
        #[arg(long, default_value_t = 0.01)]
        dt: f64,
        #[arg(long, default_value_t = 10.0)]
        t_end: f64,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Broadside drag of a translating disk against the analytic value.
    Disk {
        /// Finest refinement level (every level from 0 is reported).
        #[arg(long, default_value_t = 3)]
        levels: usize,
        #[arg(long, default_value_t = 1.0)]
        eta: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn apply(cfg: &mut ScenarioConfig, o: &Overrides) {
    if let Some(mode) = o.mode {
        cfg.time.mode = mode;
    }
    if let Some(eta) = o.eta {
        match &mut cfg.fluid {
            Some(f) => f.eta = eta,
            None => {
                cfg.fluid = Some(FluidConfig {
                    eta,
                    quadrature: Default::default(),
                })
            }
        }
    }
    if let Some(out) = &o.out {
        cfg.output.dir = Some(out.clone());
    }
}

/// Run or solve `cfg`, print a summary, and report whether every step succeeded.
fn execute(cfg: ScenarioConfig) -> Result<bool> {
    let sc = Scenario::build(cfg)?;
    if sc.config.rigid_velocity.is_some() {
        let sol = sc.rigid_solve()?;
        println!(
            "{}: force on fluid ({:.6e}, {:.6e}, {:.6e}) N, rcond {:.3e}",
            sc.config.name, sol.drag.x, sol.drag.y, sol.drag.z, sol.rcond
        );
        return Ok(true);
    }
    let started = std::time::Instant::now();
    let out = sc.run()?;
    summarize(&sc, &out, started.elapsed());
    Ok(out.failure.is_none())
}

fn summarize(sc: &Scenario, out: &RunOutput, elapsed: std::time::Duration) {
    let r = out.records.last().expect("initial record");
    println!(
        "{}: {} steps to t = {} in {:.1?}, tip ({:.6e}, {:.6e}, {:.6e})",
        sc.config.name,
        out.last.step,
        r.time,
        elapsed,
        r.tip[0],
        r.tip[1],
        r.tip[2]
    );
    if let Some(f) = frequency(out) {
        println!("tip frequency {f:.5} Hz");
    }
    if let Some(e) = &out.failure {
        eprintln!("step {} failed: {e}", out.last.step + 1);
    }
}

fn frequency(out: &RunOutput) -> Option<f64> {
    let t: Vec<f64> = out.records.iter().map(|r| r.time).collect();
    let z: Vec<f64> = out.records.iter().map(|r| r.tip[2]).collect();
    measure_frequency(&t, &z)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Ok(n) = std::env::var("BEMSHELL_THREADS") {
        match n.parse() {
            Ok(n) => {
                if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
                    log::warn!("cannot size thread pool: {e}");
                }
            }
            Err(_) => log::warn!("ignoring BEMSHELL_THREADS={n:?}"),
        }
    }
    match dispatch(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn dispatch(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Run { config, overrides } => {
            let mut cfg = ScenarioConfig::load(&config)?;
            apply(&mut cfg, &overrides);
            cfg.validate()?;
            execute(cfg)
        }
        Command::Bench { which } => match which {
            Bench::Cantilever { dt, t_end, overrides } => {
                let mut cfg = presets::cantilever(CouplingMode::Dry, None, dt, t_end);
                apply(&mut cfg, &overrides);
                let f_ref = presets::beam_frequency(&cfg.material, 1.0);
                let sc = Scenario::build(cfg)?;
                let started = std::time::Instant::now();
                let out = sc.run()?;
                summarize(&sc, &out, started.elapsed());
                println!("beam reference {f_ref:.5} Hz");
                Ok(out.failure.is_none())
            }
            Bench::Disk { levels, eta, out } => {
                let reference = presets::disk_drag_reference(eta, 1.0, 1.0);
                for level in 0..=levels {
                    let mut cfg = presets::disk(1.0, level, eta);
                    cfg.name = format!("disk_l{level}");
                    cfg.output.dir = out.clone();
                    let sol = Scenario::build(cfg)?.rigid_solve()?;
                    println!(
                        "level {level}: drag {:.6e} N, 16 eta R U = {reference:.6e} N, error {:+.3}%",
                        sol.drag.z,
                        100.0 * (sol.drag.z / reference - 1.0)
                    );
                }
                Ok(true)
            }
        },
        Command::Sweep { config, dt, overrides } => {
            let mut base = ScenarioConfig::load(&config)?;
            apply(&mut base, &overrides);
            let mut ok = true;
            println!("dt,steps,frequency_hz,failed");
            for dt in dt {
                let mut cfg = base.clone();
                cfg.time.dt = dt;
                cfg.name = format!("{}_dt{dt}", base.name);
                let sc = Scenario::build(cfg).with_context(|| format!("building dt = {dt}"))?;
                let out = sc.run()?;
                let f = frequency(&out).map_or("".into(), |f| format!("{f:.6}"));
                println!("{dt},{},{f},{}", out.last.step, out.failure.is_some());
                ok &= out.failure.is_none();
            }
            Ok(ok)
        }
    }
}
