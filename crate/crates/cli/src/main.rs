mod commands;
mod record;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use ehpc_core::policies::PolicyKind;

/// Power control for energy harvesting transmitters over block-fading
/// channels: bounds, simulation, value iteration and self-checks.
#[derive(Parser, Debug)]
#[command(name = "ehpc", version)]
struct Cli {
    /// Worker threads for replications and sweep points.
    #[arg(long, env = "EHPC_THREADS", global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Critical energy, policy parameters and closed-form bounds.
    Solve {
        #[arg(required = true)]
        scenarios: Vec<PathBuf>,
        #[arg(long, value_enum, default_value_t = Format::Text)]
        format: Format,
    },
    /// Monte Carlo throughput of one policy, as a CSV row.
    Simulate {
        scenario: PathBuf,
        #[arg(long, default_value = "p1", value_parser = parse_policy)]
        policy: PolicyKind,
        #[command(flatten)]
        mc: McArgs,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Relative value iteration for the optimal gain.
    Oracle {
        scenario: PathBuf,
        #[command(flatten)]
        grid: GridArgs,
        /// Also solve on a grid with halved steps and report the change.
        #[arg(long)]
        slack: bool,
        #[arg(long, value_enum, default_value_t = Format::Text)]
        format: Format,
    },
    /// Runs the certificate, dominance, uniformization, epoch and sandwich
    /// checks; exits 1 if any fails.
    Verify {
        #[arg(required = true)]
        scenarios: Vec<PathBuf>,
        #[command(flatten)]
        mc: McArgs,
        /// Fault injection: evaluate the sandwich against a bound computed
        /// with `q − DELTA` in place of `q`.
        #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
        perturb_q: f64,
        /// Grid points for the finite-horizon dominance check.
        #[arg(long, default_value_t = 513)]
        dominance_grid: usize,
        /// Random blocks for the uniformization check.
        #[arg(long, default_value_t = 1000)]
        uniform_blocks: usize,
    },
    /// θ̄ and Monte Carlo throughput over a list of capacities or block
    /// lengths, as CSV.
    Sweep {
        scenario: PathBuf,
        #[arg(long, value_enum)]
        param: SweepParam,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', num_args = 1.., required = true)]
        values: Vec<String>,
        #[arg(long, default_value = "p1", value_parser = parse_policy)]
        policy: PolicyKind,
        #[command(flatten)]
        mc: McArgs,
        /// Fill the theta_vi column (slow).
        #[arg(long)]
        oracle: bool,
        #[command(flatten)]
        grid: GridArgs,
        #[command(flatten)]
        out: OutArgs,
    },
}

#[derive(Args, Debug, Clone)]
struct McArgs {
    #[arg(long, default_value_t = 100_000)]
    blocks: u64,
    #[arg(long, default_value_t = 16)]
    reps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1_000)]
    burn_in: u64,
}

#[derive(Args, Debug, Clone)]
struct GridArgs {
    /// Battery grid points.
    #[arg(long, default_value_t = 512)]
    grid: usize,
    /// Action grid points.
    #[arg(long, default_value_t = 128)]
    actions: usize,
    /// Span tolerance of relative value iteration.
    #[arg(long, default_value_t = 1e-6)]
    tol: f64,
    #[arg(long, default_value_t = 100_000)]
    max_iter: usize,
}

#[derive(Args, Debug, Clone)]
struct OutArgs {
    /// Append rows to this file instead of printing them.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Fill the wall_time_s column. Off by default so reruns are
    /// byte-identical.
    #[arg(long)]
    timing: bool,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum Format {
    Text,
    Json,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum SweepParam {
    #[value(name = "B")]
    B,
    #[value(name = "T")]
    T,
}

fn parse_policy(s: &str) -> Result<PolicyKind, String> {
    s.parse().map_err(|e| format!("{e}"))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            log::warn!("could not size the thread pool: {e}");
        }
    }
    match commands::run(cli.command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.is::<commands::InputError>() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
