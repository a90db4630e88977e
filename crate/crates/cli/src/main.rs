mod commands;
mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand, ValueEnum};
use delaylb::mine::ThresholdMode;
use delaylb::Execution;

use commands::Ctx;
use config::{Config, ConfigError};
use output::Out;

const EXIT_FAILURE: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_NOT_CONVERGED: u8 = 3;

#[derive(Parser)]
#[command(name = "delaylb", version, about = "Network-delay-aware load balancing experiments")]
struct Cli {
    /// TOML config with [scenario] or [instance], [solver], [mine], [nash] and grid sections.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed; also replaces the seed of a [scenario].
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Directory for the CSV / JSON output.
    #[arg(long, global = true, default_value = ".")]
    out: PathBuf,
    /// Worker threads; 1 runs everything sequentially, 0 uses all cores.
    #[arg(long, global = true, default_value_t = 0)]
    parallel: usize,
    /// Stopping rule: gap relative to the reference cost, or gap per unit of average load.
    #[arg(long, global = true, value_enum)]
    threshold_mode: Option<Mode>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Relative,
    AvgLoad,
}

impl From<Mode> for ThresholdMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Relative => ThresholdMode::Relative,
            Mode::AvgLoad => ThresholdMode::AvgLoad,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Optimal relay fractions from the centralized solver.
    Solve {
        /// Cap every fraction at 1/r.
        #[arg(long)]
        cap: Option<usize>,
    },
    /// Run MinE on one instance; to its fixpoint unless a threshold is given.
    Mine {
        #[arg(long)]
        threshold: Option<f64>,
    },
    /// Iterations-to-threshold grid.
    Converge,
    /// Paired runs with and without negative-cycle removal.
    CyclesAb,
    /// Best-response dynamics to an approximate equilibrium.
    Nash,
    /// Price-of-anarchy grid.
    Poa,
    /// Distance to the optimum against the error bound, per iteration.
    BoundTrace {
        #[arg(long)]
        iterations: Option<usize>,
        /// Skip the negative-cycle cleaning before each measurement.
        #[arg(long)]
        no_clean: bool,
    },
    /// Map optimal fractions onto indivisible tasks.
    Round {
        /// Task file: one line of sizes per organization.
        #[arg(long)]
        tasks: Option<PathBuf>,
    },
    /// Capped optimum plus sampled replica placements.
    Replicate {
        #[arg(long)]
        r: Option<usize>,
        /// Tasks sampled per organization.
        #[arg(long)]
        tasks: Option<usize>,
    },
    /// Generate the [scenario] instance and write it out as an [instance].
    Gen,
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<ConfigError>() {
            return EXIT_CONFIG;
        }
        if let Some(e) = cause.downcast_ref::<delaylb::Error>() {
            return match e {
                e if e.is_convergence_failure() => EXIT_NOT_CONVERGED,
                delaylb::Error::Io(_) => EXIT_FAILURE,
                _ => EXIT_CONFIG,
            };
        }
    }
    EXIT_FAILURE
}

fn run(cli: Cli) -> Result<()> {
    let mut config = match &cli.config {
        Some(path) => Config::load(path)?,
        None => Config::default(),
    };
    if let Some(mode) = cli.threshold_mode {
        let mode = ThresholdMode::from(mode);
        config.mine.threshold_mode = mode;
        config.converge.threshold_mode = mode;
        config.cycles.grid.threshold_mode = mode;
    }
    let exec = if cli.parallel == 1 {
        Execution::Sequential
    } else {
        Execution::Parallel
    };
    let cx = Ctx {
        seed: cli.seed.or(config.seed).unwrap_or(1),
        seed_flag: cli.seed,
        config,
        exec,
        out: Out::new(&cli.out)?,
    };
    let command = cli.command;
    let go = move || match command {
        Command::Solve { cap } => commands::solve(&cx, cap),
        Command::Mine { threshold } => commands::mine(&cx, threshold),
        Command::Converge => commands::converge(&cx),
        Command::CyclesAb => commands::cycles_ab(&cx),
        Command::Nash => commands::nash(&cx),
        Command::Poa => commands::poa(&cx),
        Command::BoundTrace { iterations, no_clean } => commands::bound_trace(&cx, iterations, no_clean),
        Command::Round { tasks } => commands::round(&cx, tasks.as_deref()),
        Command::Replicate { r, tasks } => commands::replicate(&cx, r, tasks),
        Command::Gen => commands::gen(&cx),
    };
    if cli.parallel > 1 {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(cli.parallel).build()?;
        pool.install(go)
    } else {
        go()
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
