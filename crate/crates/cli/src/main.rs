use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::Serialize;

use ouswitch::io::{self, IoError};
use ouswitch::model::Regime;
use ouswitch::piecewise::SolutionStore;
use ouswitch::plot;
use ouswitch::simulate::{dt_calibration, mc_value, DtCalibration, McEstimate, SimConfig};
use ouswitch::solver::solve_all;
use ouswitch::verify::{fd_oracle, oracle_gap, verify_store, GridSpec, Tolerances};

/// Optimal switching for a mean-reverting spread.
#[derive(Debug, Parser)]
#[command(name = "ouswitch", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Solve all levels up to `n_max` and save the store.
    Solve {
        #[arg(long)]
        config: PathBuf,
        /// Store path; defaults to `output.store` of the config.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run every check on a store and write the JSON report.
    Verify {
        #[arg(long)]
        store: PathBuf,
        #[arg(long)]
        report: PathBuf,
        /// Grid spec (JSON); defaults to 24001 nodes on [-6, 6].
        #[arg(long)]
        grid: Option<PathBuf>,
        /// Tolerances (JSON); defaults to the built-in values.
        #[arg(long)]
        tolerances: Option<PathBuf>,
    },
    /// Compare level `n` against the finite-difference obstacle solver.
    Oracle {
        #[arg(long)]
        store: PathBuf,
        #[arg(long)]
        n: usize,
        #[arg(long)]
        nodes: usize,
        #[arg(long, default_value_t = 8.0)]
        z_max: f64,
        #[arg(long, default_value_t = 1e-3)]
        tol: f64,
    },
    /// Monte Carlo estimate of v(z0, xi, n) under the solved policy.
    Simulate {
        #[arg(long)]
        store: PathBuf,
        #[arg(long, allow_hyphen_values = true)]
        z0: f64,
        #[arg(long, allow_hyphen_values = true)]
        xi: i8,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 100_000)]
        paths: usize,
        #[arg(long, default_value_t = 1e-3)]
        dt: f64,
        #[arg(long, default_value_t = 80.0)]
        horizon: f64,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        /// Also run the coupled dt-halving calibration and check the bound.
        #[arg(long)]
        calibrate: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write fig1.svg, fig2.svg and fig3.svg.
    Plot {
        #[arg(long)]
        store: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Write values and regions on a grid as CSV.
    Grid {
        #[arg(long)]
        store: PathBuf,
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Failure classes mapped to exit codes.
enum Failure {
    /// A numerical check did not pass.
    Check(String),
    /// Bad input: usage, configuration or unreadable files.
    Input(String),
}

impl From<IoError> for Failure {
    fn from(e: IoError) -> Self {
        match e {
            IoError::Eval(e) => Failure::Check(e.to_string()),
            e => Failure::Input(e.to_string()),
        }
    }
}

fn check<E: std::fmt::Display>(e: E) -> Failure {
    Failure::Check(e.to_string())
}

fn print_json<T: Serialize>(value: &T) {
    println!(
        "{}",
        serde_json::to_string_pretty(value).expect("serializable")
    );
}

fn solve(config: &Path, out: Option<PathBuf>) -> Result<(), Failure> {
    let cfg = io::load_config(config)?;
    let out = out
        .or(cfg.output.store.clone())
        .ok_or_else(|| Failure::Input("no store path: pass --out or set output.store".into()))?;
    let store = solve_all(cfg.params, cfg.n_max, &cfg.solver).map_err(check)?;
    io::save_store(&store, &out)?;
    for n in 1..=store.n_max() {
        for xi in Regime::ALL {
            let f = store.function(xi, n);
            let b: Vec<String> = f.boundaries().iter().map(|b| format!("{b:.10}")).collect();
            println!(
                "xi={:>2} n={n} pieces={} boundaries=[{}]",
                xi.xi(),
                f.pieces.len(),
                b.join(", ")
            );
        }
    }
    Ok(())
}

fn verify(
    store: &Path,
    report: &Path,
    grid: Option<PathBuf>,
    tol: Option<PathBuf>,
) -> Result<(), Failure> {
    let store = io::load_store(store)?;
    let grid: GridSpec = grid
        .map(|p| io::load_json(&p))
        .transpose()?
        .unwrap_or_default();
    grid.validate().map_err(Failure::Input)?;
    let tol: Tolerances = tol
        .map(|p| io::load_json(&p))
        .transpose()?
        .unwrap_or_default();
    let r = verify_store(&store, &grid, &tol).map_err(check)?;
    io::write_json(&r, report)?;
    for f in &r.failures {
        eprintln!("FAIL {f}");
    }
    println!(
        "verify: {} ({} failures, n_max={}, {} nodes)",
        if r.passed { "passed" } else { "failed" },
        r.failures.len(),
        r.n_max,
        r.grid_nodes
    );
    if r.passed {
        Ok(())
    } else {
        Err(Failure::Check(format!(
            "{} checks failed",
            r.failures.len()
        )))
    }
}

#[derive(Serialize)]
struct OracleSummary {
    n: usize,
    nodes: usize,
    z_max: f64,
    gap: f64,
    sup_value: f64,
    limit: f64,
    iterations: [usize; 3],
    passed: bool,
}

fn oracle(store: &Path, n: usize, nodes: usize, z_max: f64, tol: f64) -> Result<(), Failure> {
    let store = io::load_store(store)?;
    if n > store.n_max() {
        return Err(Failure::Input(format!(
            "store holds levels up to {}, asked for {n}",
            store.n_max()
        )));
    }
    let fd = fd_oracle(store.params(), n, nodes, z_max).map_err(check)?;
    let (gap, sup) = oracle_gap(&store, &fd, n).map_err(check)?;
    let limit = tol * (1.0 + sup);
    let s = OracleSummary {
        n,
        nodes,
        z_max,
        gap,
        sup_value: sup,
        limit,
        iterations: fd.iterations[n],
        passed: gap <= limit,
    };
    print_json(&s);
    if s.passed {
        Ok(())
    } else {
        Err(Failure::Check(format!(
            "oracle gap {gap:.3e} exceeds {limit:.3e}"
        )))
    }
}

#[derive(Serialize)]
struct SimulationSummary {
    config: SimConfig,
    analytic: f64,
    estimate: McEstimate,
    #[serde(skip_serializing_if = "Option::is_none")]
    calibration: Option<DtCalibration>,
    #[serde(skip_serializing_if = "Option::is_none")]
    bound: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    passed: Option<bool>,
}

fn simulate(
    store: &Path,
    cfg: SimConfig,
    calibrate: bool,
    out: Option<PathBuf>,
) -> Result<(), Failure> {
    cfg.validate().map_err(Failure::Input)?;
    let store: SolutionStore = io::load_store(store)?;
    if cfg.n > store.n_max() {
        return Err(Failure::Input(format!(
            "store holds levels up to {}, asked for {}",
            store.n_max(),
            cfg.n
        )));
    }
    let analytic = store.evaluate(cfg.z0, cfg.xi0, cfg.n).map_err(check)?;
    let estimate = mc_value(&store, &cfg).map_err(check)?;
    let calibration = calibrate
        .then(|| dt_calibration(&store, &cfg))
        .transpose()
        .map_err(check)?;
    let bound =
        calibration.map(|c| 3.0 * estimate.stderr + estimate.truncation_bound + c.allowance);
    let passed = bound.map(|b| (estimate.mean - analytic).abs() <= b);
    let s = SimulationSummary {
        config: cfg,
        analytic,
        estimate,
        calibration,
        bound,
        passed,
    };
    print_json(&s);
    if let Some(out) = out {
        io::write_json(&s, &out)?;
    }
    match passed {
        Some(false) => Err(Failure::Check(
            "Monte Carlo estimate outside its bound".into(),
        )),
        _ => Ok(()),
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Solve { config, out } => solve(&config, out),
        Command::Verify {
            store,
            report,
            grid,
            tolerances,
        } => verify(&store, &report, grid, tolerances),
        Command::Oracle {
            store,
            n,
            nodes,
            z_max,
            tol,
        } => oracle(&store, n, nodes, z_max, tol),
        Command::Simulate {
            store,
            z0,
            xi,
            n,
            paths,
            dt,
            horizon,
            seed,
            calibrate,
            out,
        } => {
            let xi0 = Regime::from_xi(xi.into())
                .ok_or_else(|| Failure::Input(format!("xi must be -1, 0 or 1, got {xi}")))?;
            let cfg = SimConfig {
                z0,
                xi0,
                n,
                dt,
                horizon,
                paths,
                seed,
            };
            simulate(&store, cfg, calibrate, out)
        }
        Command::Plot { store, out_dir } => {
            let store = io::load_store(&store)?;
            plot::emit_plots(&store, &out_dir)?;
            Ok(())
        }
        Command::Grid { store, spec, out } => {
            let store = io::load_store(&store)?;
            let spec: GridSpec = io::load_json(&spec)?;
            spec.validate().map_err(Failure::Input)?;
            io::emit_grid(&store, &spec, &out)?;
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Check(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Input(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
