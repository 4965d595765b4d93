use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use hamflow_cli::commands::{self, Emitter};
use hamflow_cli::{CliError, ExperimentConfig, RunOptions};

#[derive(Debug, Parser)]
#[command(name = "hamflow", version, about = "Stable manifolds and turnpike experiments for control-affine systems")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory, overriding the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Run even if the hypothesis checks fail.
    #[arg(long, global = true)]
    force: bool,
    /// Seed directions and extended orbits per chart.
    #[arg(long, global = true)]
    seed_count: Option<usize>,
    /// Integrator tolerance.
    #[arg(long, global = true)]
    tol: Option<f64>,
    #[arg(long, global = true)]
    quiet: bool,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Linearization, Riccati data and growth checks.
    Inspect,
    /// Stable/unstable charts and coverage of the query grid.
    Manifold,
    /// Finite-horizon problems and residence measures.
    Turnpike,
    /// Closed-loop simulation with cost accumulation.
    Simulate,
}

fn init_threads() -> Result<(), CliError> {
    if let Ok(v) = std::env::var("HAMFLOW_THREADS") {
        let n: usize = v.parse().map_err(|_| CliError::Config(format!("HAMFLOW_THREADS must be a positive integer, got {v:?}")))?;
        if n == 0 {
            return Err(CliError::Config("HAMFLOW_THREADS must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Failed(e.to_string()))?;
    }
    Ok(())
}

fn say(quiet: bool, msg: impl AsRef<str>) {
    if !quiet {
        println!("{}", msg.as_ref());
    }
}

fn run(cli: &Cli) -> Result<bool, CliError> {
    init_threads()?;
    let path = cli.config.as_ref().ok_or_else(|| CliError::Config("--config PATH is required".into()))?;
    let mut cfg = ExperimentConfig::load(path)?;
    let opts = RunOptions {
        out: cli.out.clone(),
        force: cli.force,
        seed_count: cli.seed_count,
        tol: cli.tol,
        quiet: cli.quiet,
    };
    opts.apply(&mut cfg)?;
    let q = opts.quiet;
    let mut ok = true;
    let emitter: Emitter = match cli.command {
        Command::Inspect => {
            let r = commands::run_inspect(&cfg)?;
            say(q, format!("system {} (n = {}, m = {})", r.system, r.n, r.m));
            say(q, format!("stabilizable {}  detectable {}  penalty rank {}  path {:?}", r.stabilizable, r.detectable, r.penalty_rank, r.path));
            say(q, format!("growth: f exponent {:.3}, g exponent {:.3}, theta {:.3}, coercive {}", r.growth.f_exponent, r.growth.g_exponent, r.growth.growth_theta, r.growth.h_coercive));
            if let Some(ric) = &r.riccati {
                say(q, format!("CARE residual {:.3e}, symplectic residual {:.3e}", ric.care_residual, ric.symplectic_residual));
            }
            for w in &r.warnings {
                eprintln!("warning: {w}");
            }
            commands::emit_inspect(&cfg, &r)?
        }
        Command::Manifold => {
            let out = commands::run_manifold(&cfg, &opts)?;
            for s in &out.summary {
                say(q, format!(
                    "{:?}: {} points, max |H| {:.2e}, covered {}/{} (boundary {}, uncovered {})",
                    s.kind, s.points, s.max_abs_hamiltonian, s.covered, s.queries, s.boundary, s.uncovered
                ));
            }
            commands::emit_manifold(&cfg, &out)?
        }
        Command::Turnpike => {
            let out = commands::run_turnpike(&cfg, &opts)?;
            for e in &out.summary.report.entries {
                say(q, format!("T = {:>6}: converged {}, residence {:.4}, J_T {:.6}", e.horizon, e.bvp_converged, e.residence_measure, e.cost));
            }
            say(q, format!("uniformity {:.4} (bound {})", out.summary.report.uniformity, out.summary.uniformity_bound));
            for w in &out.summary.warnings {
                eprintln!("warning: {w}");
            }
            ok = !out.hard_failure();
            commands::emit_turnpike(&cfg, &out)?
        }
        Command::Simulate => {
            let out = commands::run_simulate(&cfg, &opts)?;
            say(q, format!("cost {:.9} at t = {}", out.summary.cost, out.summary.t_final));
            if let Some(v) = out.summary.riccati_value {
                say(q, format!("riccati value {v:.9}"));
            }
            commands::emit_simulate(&cfg, &out)?
        }
    };
    let written = emitter.flush(&cfg.output.dir)?;
    for p in written {
        say(q, format!("wrote {}", p.display()));
    }
    Ok(ok)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("error: at least one boundary value problem failed");
            ExitCode::from(3)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
