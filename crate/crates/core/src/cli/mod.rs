//! Command-line front end. Flags override config keys; config keys override
//! built-in defaults.

mod commands;
mod config;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Parser, Subcommand};
use log::error;

pub use commands::{read_design, read_fit, FitFile};
pub use config::{
    AdjustSection, CvSection, DataSection, FitSection, PredictSection, RankReportSection, RunConfig, SimulateSection,
};

use crate::error::GrfError;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;
pub const EXIT_IO: i32 = 4;

#[derive(Debug, Parser)]
#[command(name = "grf", version, about = "Genomic prediction with a spatial Gaussian random field")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// TOML run configuration.
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,
    /// Overrides `seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides `threads`.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Overrides `output_dir`.
    #[arg(long, global = true)]
    output_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, Subcommand)]
enum Command {
    /// Fit the model and write fit.json.
    Fit,
    /// Predict phenotypes or genetic values at new points.
    Predict,
    /// Spatially adjust phenotypes (RC or MVNG).
    Adjust,
    /// Cross-validate a list of methods.
    Cv,
    /// Run the conditional-simulation ranking study.
    Simulate,
    /// Compare genetic-value rankings of model variants.
    RankReport,
}

/// Exit code for an error: 2 for configuration and input validation, 3 for
/// numerical failures, 4 for I/O.
pub fn exit_code(e: &GrfError) -> i32 {
    if e.is_io() || matches!(e, GrfError::Csv(c) if c.is_io_error()) {
        EXIT_IO
    } else if e.is_numerical() {
        EXIT_NUMERICAL
    } else {
        EXIT_CONFIG
    }
}

fn kind(code: i32) -> &'static str {
    match code {
        EXIT_IO => "io",
        EXIT_NUMERICAL => "numerical",
        _ => "config",
    }
}

/// Error record on standard error, one JSON object per line.
fn report(code: i32, message: &str) {
    let record = serde_json::json!({ "error": kind(code), "exit_code": code, "message": message });
    eprintln!("{record}");
}

fn execute(cli: &Cli) -> Result<(), GrfError> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| GrfError::invalid("--config is required"))?;
    let mut cfg = RunConfig::load(path)?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(t) = cli.threads {
        cfg.threads = t;
    }
    if let Some(o) = &cli.output_dir {
        cfg.output_dir = o.clone();
    }
    cfg.validate()?;
    if cfg.threads > 0 {
        // The pool can only be set once per process.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(cfg.threads).build_global();
    }
    let ctx = commands::Context::new(cfg)?;
    match cli.command {
        Command::Fit => commands::cmd_fit(&ctx),
        Command::Predict => commands::cmd_predict(&ctx),
        Command::Adjust => commands::cmd_adjust(&ctx),
        Command::Cv => commands::cmd_cv(&ctx),
        Command::Simulate => commands::cmd_simulate(&ctx),
        Command::RankReport => commands::cmd_rank_report(&ctx),
    }
}

/// Parses `args` (program name first), runs the subcommand and returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let code = exit_code(&e);
            error!("{e}");
            report(code, &e.to_string());
            code
        }
    }
}
