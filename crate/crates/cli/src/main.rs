//! `acdkit` command-line front end.
//!
//! Exit codes: 0 success, 1 configuration or input error (bad config,
//! malformed file, dimension mismatch), 2 I/O failure, 3 numerical failure.

mod commands;
mod config;
mod manifest;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(
    name = "acdkit",
    version,
    about = "Hyperspectral anomaly change detection"
)]
struct Cli {
    /// Train one model at a time; results are bit-reproducible.
    #[arg(long, global = true)]
    sequential: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic two-date scene from a JSON spec.
    Synth {
        spec: PathBuf,
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Run a detector on a cube pair and write its intensity map.
    Detect {
        #[arg(value_enum)]
        method: Method,
        #[arg(long)]
        x: PathBuf,
        #[arg(long)]
        y: PathBuf,
        /// JSON object of detector settings.
        #[arg(short, long)]
        config: Option<PathBuf>,
        /// Override one setting, e.g. `--set epochs=20`.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        sets: Vec<String>,
        #[arg(short, long)]
        out: PathBuf,
        /// Also write per-direction (and for acda per-run) maps.
        #[arg(long)]
        directional: bool,
    },
    /// ROC/AUC of an intensity map against a ground-truth mask.
    Eval {
        #[arg(long)]
        map: PathBuf,
        #[arg(long)]
        mask: PathBuf,
        #[arg(short, long)]
        out: PathBuf,
    },
    /// AUC table over hidden-layer widths.
    Sweep {
        #[arg(long)]
        x: PathBuf,
        #[arg(long)]
        y: PathBuf,
        #[arg(long)]
        mask: PathBuf,
        /// JSON object with `h1` and `h2` lists plus shared detector settings.
        #[arg(long)]
        grid: PathBuf,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        sets: Vec<String>,
        #[arg(short, long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Method {
    Acda,
    Diffrx,
    Cc,
    Ce,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Acda => "acda",
            Method::Diffrx => "diffrx",
            Method::Cc => "cc",
            Method::Ce => "ce",
        }
    }
}

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Core(acdkit::Error),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        use acdkit::Error as E;
        match self {
            CliError::Config(_) => 1,
            CliError::Core(E::Io { .. }) => 2,
            CliError::Core(E::Numerical(_)) => 3,
            CliError::Core(_) => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(msg) => write!(f, "config error: {msg}"),
            CliError::Core(e) => e.fmt(f),
        }
    }
}

impl From<acdkit::Error> for CliError {
    fn from(e: acdkit::Error) -> Self {
        CliError::Core(e)
    }
}

fn init_threads() -> Result<(), CliError> {
    let Ok(raw) = std::env::var("ACDKIT_THREADS") else {
        return Ok(());
    };
    let n: usize = raw.trim().parse().ok().filter(|&n| n > 0).ok_or_else(|| {
        CliError::Config(format!(
            "ACDKIT_THREADS must be a positive integer, got `{raw}`"
        ))
    })?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Config(format!("thread pool: {e}")))
}

fn run(cli: Cli) -> Result<(), CliError> {
    init_threads()?;
    let seq = cli.sequential;
    match cli.command {
        Command::Synth { spec, out } => commands::synth(&spec, &out),
        Command::Detect {
            method,
            x,
            y,
            config,
            sets,
            out,
            directional,
        } => commands::detect(
            method,
            &x,
            &y,
            config.as_deref(),
            &sets,
            &out,
            directional,
            seq,
        ),
        Command::Eval { map, mask, out } => commands::eval(&map, &mask, &out),
        Command::Sweep {
            x,
            y,
            mask,
            grid,
            sets,
            out,
        } => commands::sweep(&x, &y, &mask, &grid, &sets, &out, seq),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("acdkit: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
