//! Command-line front end: reads a TOML experiment file, runs one command and
//! writes CSV tables with JSON sidecars into an output directory.
//!
//! Exit codes: 0 success, 1 other failure, 2 configuration error, 3 CFL
//! violation, 4 inadmissible step sizes or initial data, 5 a `--strict` check
//! failed.

use std::ffi::OsString;
use std::fmt;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::Serialize;
use serde_json::{json, Value};

pub mod commands;
pub mod config;
pub mod output;

pub use config::Config;

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_CFL: i32 = 3;
pub const EXIT_INADMISSIBLE: i32 = 4;
pub const EXIT_STRICT: i32 = 5;

#[derive(Debug)]
pub enum CliError {
    Config { path: String, message: String },
    Core(gridkam::Error),
    Strict(String),
    Io { path: PathBuf, source: std::io::Error },
}

impl CliError {
    pub fn config(path: &str, message: impl Into<String>) -> CliError {
        CliError::Config { path: path.to_string(), message: message.into() }
    }

    pub fn io(path: &Path, source: std::io::Error) -> CliError {
        CliError::Io { path: path.to_path_buf(), source }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config { .. } => EXIT_CONFIG,
            CliError::Core(gridkam::Error::CflViolation { .. }) => EXIT_CFL,
            CliError::Core(gridkam::Error::InadmissibleStepSizes(_) | gridkam::Error::SlopeBoundExceeded { .. }) => {
                EXIT_INADMISSIBLE
            }
            CliError::Strict(_) => EXIT_STRICT,
            CliError::Core(_) | CliError::Io { .. } => EXIT_FAILURE,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config { path, message } if path.is_empty() => write!(f, "config error: {message}"),
            CliError::Config { path, message } => write!(f, "config error at {path}: {message}"),
            CliError::Core(e) => write!(f, "{e}"),
            CliError::Strict(m) => write!(f, "strict check failed: {m}"),
            CliError::Io { path, source } => write!(f, "{}: {source}", path.display()),
        }
    }
}

impl std::error::Error for CliError {}

impl From<gridkam::Error> for CliError {
    fn from(e: gridkam::Error) -> Self {
        CliError::Core(e)
    }
}

#[derive(Debug, Parser)]
#[command(name = "gridkam", version, about = "Discrete weak KAM experiments on a staggered grid")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Experiment file (TOML).
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, value_name = "DIR", default_value = "out")]
    pub out: PathBuf,
    /// Seed for random initial data; overrides `seed` in the config.
    #[arg(long, global = true, value_name = "U64")]
    pub seed: Option<u64>,
    /// Worker threads. Results do not depend on this value.
    #[arg(long, global = true, value_name = "N")]
    pub threads: Option<usize>,
    /// Exit nonzero when any per-c computation fails or a check does not pass.
    #[arg(long, global = true)]
    pub strict: bool,
    /// Run the initial value problem even when step sizes are inadmissible.
    #[arg(long, global = true)]
    pub force: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Initial value problem: all levels plus monitors.
    Solve,
    /// Effective Hamiltonian over a grid of c, with a convexity report.
    Effective,
    /// Periodic solutions per c and the averaged-Hamiltonian identity.
    Verify,
    /// Mather measure, Aubry set and rotation vector per c.
    Mather,
    /// Effective Hamiltonian on a sequence of grids.
    Convergence,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Solve => "solve",
            Command::Effective => "effective",
            Command::Verify => "verify",
            Command::Mather => "mather",
            Command::Convergence => "convergence",
        }
    }
}

/// Everything a command needs besides the output directory.
pub struct Context {
    pub config: Config,
    pub config_dir: PathBuf,
    pub config_sha256: String,
    pub seed: Option<u64>,
    pub strict: bool,
    pub force: bool,
    pub grid: gridkam::GridSpec,
    pub model: gridkam::HamiltonianModel,
}

impl Context {
    pub fn new(config: Config, text: &str, config_dir: PathBuf, cli: &Cli) -> Result<Context, CliError> {
        let grid = config.grid()?;
        let model = config.model()?;
        Ok(Context {
            seed: cli.seed.or(config.seed),
            config_sha256: output::sha256_hex(text.as_bytes()),
            config,
            config_dir,
            strict: cli.strict,
            force: cli.force,
            grid,
            model,
        })
    }

    pub fn metadata(&self, command: Command, extra: Value) -> Value {
        let g = &self.grid;
        let mut meta = json!({
            "command": command.name(),
            "config_sha256": self.config_sha256,
            "seed": self.seed,
            "grid": { "d": g.dim(), "n": g.n(), "k": g.k(), "h": g.h(), "tau": g.tau(), "lambda": g.lambda() },
            "model": self.model,
            "tolerances": self.config.tolerances,
        });
        if let (Value::Object(m), Value::Object(e)) = (&mut meta, extra) {
            m.extend(e);
        }
        meta
    }
}

/// What a command reports on stdout.
#[derive(Clone, Debug, Default, Serialize)]
pub struct Summary {
    pub lines: Vec<String>,
    pub files: Vec<PathBuf>,
}

/// Run one parsed command.
pub fn execute(cli: &Cli) -> Result<Summary, CliError> {
    if cli.threads == Some(0) {
        return Err(CliError::config("--threads", "must be at least 1"));
    }
    let path = cli.config.as_ref().ok_or_else(|| CliError::config("--config", "no experiment file given"))?;
    let (config, text) = Config::load(path)?;
    let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let ctx = Context::new(config, &text, dir, cli)?;
    match cli.command {
        Command::Solve => commands::solve(&ctx, &cli.out),
        Command::Effective => commands::effective(&ctx, &cli.out),
        Command::Verify => commands::verify(&ctx, &cli.out),
        Command::Mather => commands::mather(&ctx, &cli.out),
        Command::Convergence => commands::convergence(&ctx, &cli.out),
    }
}

/// Parse arguments, run, print, and return the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    match execute(&cli) {
        Ok(summary) => {
            for line in &summary.lines {
                println!("{line}");
            }
            EXIT_OK
        }
        Err(e) => {
            eprintln!("gridkam: {e}");
            e.exit_code()
        }
    }
}
