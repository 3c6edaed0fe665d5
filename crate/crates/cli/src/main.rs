//! `whittaker`: reproducible experiments on the Whittaker SDE covariances.
//!
//! Exit codes: 0 success, 1 check failure, 2 configuration error,
//! 3 numerical non-convergence.

mod checks;
mod commands;
mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use commands::{Failure, Format, EXIT_CONFIG};
use config::ExperimentConfig;

#[derive(Parser, Debug)]
#[command(name = "whittaker", version, about = "Covariance, limit and simulation experiments for the Whittaker SDEs")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Global {
    /// TOML configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (default: $WHITTAKER_OUT_DIR, else ./whittaker-out).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads; 0 uses the available parallelism.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    abs_tol: Option<f64>,
    #[arg(long, global = true)]
    rel_tol: Option<f64>,
    /// Scaling parameter η of the cutoffs.
    #[arg(long, global = true)]
    eta: Option<f64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run the exact-identity suites and print a JSON summary.
    Identities {
        /// Only checks whose name contains this string.
        #[arg(long)]
        filter: Option<String>,
        #[arg(long)]
        instances: Option<usize>,
        /// Test hook: negate one side of the named check.
        #[arg(long, hide = true)]
        inject_fault: Option<String>,
    },
    /// N-sweep of re-centered covariances against their limits.
    Converge {
        /// Pair test functions instead of evaluating at points.
        #[arg(long)]
        weak: bool,
        #[arg(long, value_delimiter = ',')]
        ns: Option<Vec<u64>>,
        #[arg(long, value_delimiter = ',')]
        x: Option<Vec<f64>>,
        #[arg(long, value_delimiter = ',')]
        y: Option<Vec<f64>>,
        #[arg(long)]
        s: Option<f64>,
        #[arg(long)]
        t: Option<f64>,
    },
    /// The re-centering constant 𝔠_1 with its quadrature audit trail.
    C1 {
        #[command(flatten)]
        format: FormatArgs,
        #[arg(long)]
        r_max: Option<f64>,
    },
    /// The stationary-kernel constant κ_0 with its quadrature audit trail.
    Kappa0 {
        #[command(flatten)]
        format: FormatArgs,
    },
    /// Exact-step simulation of the Whittaker SDE; one CSV per path.
    Simulate {
        #[arg(long)]
        lattice: Option<u64>,
        #[arg(long)]
        paths: Option<usize>,
        #[arg(long, value_delimiter = ',')]
        times: Option<Vec<f64>>,
        /// Also write the binary trajectory format.
        #[arg(long)]
        binary: bool,
    },
    /// Gillespie run of the q-Whittaker particle system with height statistics.
    Qgrowth {
        #[arg(long)]
        lattice: Option<u64>,
        #[arg(long)]
        q: Option<f64>,
        #[arg(long)]
        horizon: Option<f64>,
        #[arg(long)]
        max_events: Option<u64>,
        #[arg(long)]
        samples: Option<usize>,
    },
    /// Increment decomposition over a grid of time gaps and N.
    Holder {
        #[arg(long, value_delimiter = ',')]
        ns: Option<Vec<u64>>,
        #[arg(long, value_delimiter = ',')]
        deltas: Option<Vec<f64>>,
        #[arg(long)]
        t: Option<f64>,
        #[arg(long)]
        factor: Option<f64>,
    },
}

#[derive(Args, Debug)]
#[group(multiple = false)]
struct FormatArgs {
    #[arg(long)]
    json: bool,
    #[arg(long)]
    csv: bool,
}

impl FormatArgs {
    fn format(&self) -> Format {
        if self.csv {
            Format::Csv
        } else {
            Format::Json
        }
    }
}

fn set<T>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

fn pair(name: &str, v: &Option<Vec<f64>>) -> Result<Option<[f64; 2]>, Failure> {
    match v.as_deref() {
        None => Ok(None),
        Some([a, b]) => Ok(Some([*a, *b])),
        Some(_) => Err(Failure::new(EXIT_CONFIG, format!("--{name} takes two comma-separated coordinates"))),
    }
}

/// Config file, then global flags, then command flags.
fn effective_config(cli: &Cli) -> Result<ExperimentConfig, Failure> {
    let g = &cli.global;
    let mut cfg = ExperimentConfig::load(g.config.as_deref())?;
    if g.out.is_some() {
        cfg.out_dir = g.out.clone();
    }
    set(&mut cfg.threads, g.threads);
    set(&mut cfg.seed, g.seed);
    set(&mut cfg.quadrature.abs_tol, g.abs_tol);
    set(&mut cfg.quadrature.rel_tol, g.rel_tol);
    set(&mut cfg.scheme.eta, g.eta);
    match &cli.command {
        Command::Identities { instances, .. } => set(&mut cfg.identities.instances, *instances),
        Command::Converge { weak, ns, x, y, s, t } => {
            let c = &mut cfg.converge;
            c.weak |= *weak;
            set(&mut c.x, pair("x", x)?);
            set(&mut c.y, pair("y", y)?);
            set(&mut c.s, *s);
            set(&mut c.t, *t);
            set(&mut cfg.scheme.ns, ns.clone());
        }
        Command::C1 { r_max, .. } => set(&mut cfg.constants.c1_r_max, *r_max),
        Command::Kappa0 { .. } => {}
        Command::Simulate { lattice, paths, times, binary } => {
            let c = &mut cfg.simulate;
            set(&mut c.lattice, *lattice);
            set(&mut c.paths, *paths);
            set(&mut c.times, times.clone());
            c.binary |= *binary;
        }
        Command::Qgrowth { lattice, q, horizon, max_events, samples } => {
            let c = &mut cfg.qgrowth;
            set(&mut c.lattice, *lattice);
            set(&mut c.q, *q);
            set(&mut c.horizon, *horizon);
            set(&mut c.max_events, *max_events);
            set(&mut c.samples, *samples);
        }
        Command::Holder { ns, deltas, t, factor } => {
            let c = &mut cfg.holder;
            set(&mut c.ns, ns.clone());
            set(&mut c.deltas, deltas.clone());
            set(&mut c.t, *t);
            set(&mut c.factor, *factor);
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), Failure> {
    let cfg = effective_config(&cli)?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.threads)
        .build_global()
        .map_err(|e| Failure::new(EXIT_CONFIG, format!("thread pool: {e}")))?;
    match &cli.command {
        Command::Identities { filter, inject_fault, .. } => {
            commands::identities(&cfg, filter.as_deref(), inject_fault.as_deref())
        }
        Command::Converge { .. } => commands::converge(&cfg),
        Command::C1 { format, .. } => commands::c1(&cfg, format.format()),
        Command::Kappa0 { format } => commands::kappa0(&cfg, format.format()),
        Command::Simulate { .. } => commands::simulate(&cfg),
        Command::Qgrowth { .. } => commands::qgrowth(&cfg),
        Command::Holder { .. } => commands::holder(&cfg),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
