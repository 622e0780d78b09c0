//! Reproducible experiment runs behind the `ntklab` command line.
//!
//! Every command reads a TOML config (or the `manifest.json` of an earlier run),
//! creates a fresh output directory, writes versioned CSVs plus a manifest
//! with SHA-256 hashes of everything it wrote, and maps the outcome to an exit
//! code:
//!
//! | code | meaning |
//! |------|---------|
//! | 0 | success |
//! | 1 | a check failed |
//! | 2 | bad configuration or input |
//! | 3 | training diverged |
//! | 4 | the output directory already exists |

pub mod commands;
pub mod config;
pub mod manifest;
pub mod table;

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

pub use commands::Outcome;
pub use config::ExperimentConfig;
pub use manifest::{RunManifest, MANIFEST_FILE};

use crate::error::{Error, Result};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CHECK_FAILED: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DIVERGED: i32 = 3;
pub const EXIT_COLLISION: i32 = 4;

/// Environment variable capping the worker threads.
pub const THREADS_VAR: &str = "NTKLAB_THREADS";

#[derive(Debug, Parser)]
#[command(name = "ntklab", version, about = "NTK training-dynamics and scaling-law laboratory")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct RunArgs {
    /// TOML config, or the manifest.json of a previous run.
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory; must not exist yet.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Master seed, overriding the config.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Subcommand)]
pub enum Command {
    /// Compare analytic gradients with central differences.
    GradCheck(RunArgs),
    /// Train a model and log loss, radii and kernel audits.
    Train(RunArgs),
    /// Train over a grid of widths, dataset sizes and horizons.
    ScalingSweep(RunArgs),
    /// Evaluate the two-stage risk bounds on a compute grid.
    Predict(RunArgs),
    /// Fit the two-stage law to a (compute, risk) CSV.
    Fit(RunArgs),
    /// Spectra of the tangent kernels at initialization.
    KernelAudit(RunArgs),
    /// Infinite-width kernel regression, optionally against a trained student.
    NtkRegress(RunArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::GradCheck(_) => "grad-check",
            Command::Train(_) => "train",
            Command::ScalingSweep(_) => "scaling-sweep",
            Command::Predict(_) => "predict",
            Command::Fit(_) => "fit",
            Command::KernelAudit(_) => "kernel-audit",
            Command::NtkRegress(_) => "ntk-regress",
        }
    }

    pub fn args(&self) -> &RunArgs {
        match self {
            Command::GradCheck(a)
            | Command::Train(a)
            | Command::ScalingSweep(a)
            | Command::Predict(a)
            | Command::Fit(a)
            | Command::KernelAudit(a)
            | Command::NtkRegress(a) => a,
        }
    }
}

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::DivergenceDetected { .. } => EXIT_DIVERGED,
        Error::OutputCollision(_) => EXIT_COLLISION,
        Error::Config(_) | Error::Format(_) | Error::DimMismatch(_) | Error::DomainError(_) => EXIT_CONFIG,
        _ => EXIT_CHECK_FAILED,
    }
}

/// Loads the config and applies the command-line overrides. A relative
/// `fit.input` is taken relative to the config file.
pub fn resolve_config(cmd: &Command) -> Result<(ExperimentConfig, PathBuf)> {
    let args = cmd.args();
    let mut cfg = ExperimentConfig::load(&args.config)?;
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    let base = args.config.parent().unwrap_or(Path::new("."));
    if let Some(f) = &mut cfg.fit {
        if f.input.is_relative() {
            f.input = base.join(&f.input);
        }
        f.input = std::fs::canonicalize(&f.input)
            .map_err(|e| Error::Config(format!("cannot open fit input {}: {e}", f.input.display())))?;
    }
    let dir = match (&args.out, &cfg.out_dir) {
        (Some(o), _) => o.clone(),
        (None, Some(o)) => o.clone(),
        (None, None) => PathBuf::from(format!("ntklab-{}-{}", cmd.name(), cfg.seed)),
    };
    cfg.out_dir = Some(dir.clone());
    Ok((cfg, dir))
}

pub fn execute(cmd: &Command) -> Result<Outcome> {
    let (cfg, dir) = resolve_config(cmd)?;
    match cmd {
        Command::GradCheck(_) => commands::grad_check(&cfg, &dir),
        Command::Train(_) => commands::train(&cfg, &dir).map(|(o, _)| o),
        Command::ScalingSweep(_) => commands::scaling_sweep(&cfg, &dir),
        Command::Predict(_) => commands::predict_cmd(&cfg, &dir),
        Command::Fit(_) => commands::fit_cmd(&cfg, &dir),
        Command::KernelAudit(_) => commands::kernel_audit(&cfg, &dir),
        Command::NtkRegress(_) => commands::ntk_regress(&cfg, &dir),
    }
}

fn configure_threads() -> Result<()> {
    let Ok(raw) = std::env::var(THREADS_VAR) else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Config(format!("{THREADS_VAR} must be a positive integer, got `{raw}`")))?;
    // A pool that is already up (a second call in one process) keeps its size.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

/// Parses `args`, runs the command, prints a one-line summary and returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    if let Err(e) = configure_threads() {
        eprintln!("ntklab: {e}");
        return exit_code(&e);
    }
    match execute(&cli.command) {
        Ok(outcome) => {
            println!("{}", outcome.summary);
            println!("output: {}", outcome.dir.display());
            if outcome.passed {
                EXIT_OK
            } else {
                EXIT_CHECK_FAILED
            }
        }
        Err(e) => {
            eprintln!("ntklab {}: {e}", cli.command.name());
            exit_code(&e)
        }
    }
}
