//! The `wsdiff` command-line front end.
//!
//! Every command reads a flat `section.key = value` config (see
//! [`config::RunConfig`]), writes its artifacts into one output directory
//! together with the resolved config and a SHA-256 manifest, and maps
//! failures onto fixed exit codes.

mod check;
mod commands;
pub mod config;
pub mod image;

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
pub use config::RunConfig;

pub const EXIT_SUCCESS: u8 = 0;
pub const EXIT_FAILURE: u8 = 1;
pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_DIVERGENCE: u8 = 3;
pub const EXIT_INVARIANT: u8 = 4;

pub const RESOLVED_CONFIG: &str = "config.resolved";
pub const MANIFEST: &str = "manifest.sha256";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Score and whitened-score fields of 2D Gaussian testbeds (CSV + PPM quiver).
    VectorField,
    /// Unconditional sampling with the exact oracle or a trained checkpoint.
    Sample,
    /// Train the toy MLP; resumable from a previous run directory.
    TrainToy,
    /// Posterior sampling for a linear inverse problem with a lambda sweep.
    Invert,
    /// Run the invariant suite and report pass/fail per invariant.
    Check,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::VectorField => "vector-field",
            Command::Sample => "sample",
            Command::TrainToy => "train-toy",
            Command::Invert => "invert",
            Command::Check => "check",
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "wsdiff", version, about = "Whitened-score diffusion with structured noise")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Config file of `section.key = value` lines.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides `run.seed`.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Overrides `output.directory`.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
}

pub fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config(_)
        | Error::InvalidParameter { .. }
        | Error::ShapeMismatch { .. }
        | Error::EmptyGrid
        | Error::TimeOutOfRange(_)
        | Error::Singular { .. }
        | Error::NonDeltaKernel { .. } => EXIT_CONFIG,
        Error::NonFinite { .. } | Error::Divergence { .. } => EXIT_DIVERGENCE,
        Error::Invariant { .. } => EXIT_INVARIANT,
        Error::Container(_) | Error::Io(_) => EXIT_FAILURE,
    }
}

/// Config file, then `--seed` and `--out`.
pub fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path, cli.command)?,
        None => RunConfig::defaults(cli.command),
    };
    if let Some(seed) = cli.seed {
        cfg.set("run.seed", &seed.to_string())?;
    }
    if let Some(out) = &cli.out {
        let s = out
            .to_str()
            .ok_or_else(|| Error::Config("output directory is not valid UTF-8".into()))?;
        cfg.set("output.directory", s)?;
    }
    Ok(cfg)
}

/// Output directory plus the list of artifacts written so far.
pub struct Run {
    pub cfg: RunConfig,
    dir: PathBuf,
    artifacts: Vec<String>,
}

impl Run {
    pub fn new(cfg: RunConfig) -> Result<Self> {
        let dir = PathBuf::from(cfg.raw("output.directory"));
        std::fs::create_dir_all(&dir)?;
        Ok(Self {
            cfg,
            dir,
            artifacts: Vec::new(),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    /// Path of artifact `name`, recorded for the manifest.
    pub fn artifact(&mut self, name: &str) -> PathBuf {
        if !self.artifacts.iter().any(|a| a == name) {
            self.artifacts.push(name.to_string());
        }
        self.dir.join(name)
    }

    /// Writes the resolved config and the manifest.
    pub fn finish(mut self) -> Result<()> {
        let cfg_path = self.artifact(RESOLVED_CONFIG);
        std::fs::write(cfg_path, self.cfg.render())?;
        let mut names = self.artifacts.clone();
        names.sort();
        let mut f = std::io::BufWriter::new(std::fs::File::create(self.dir.join(MANIFEST))?);
        for name in names {
            let path = self.dir.join(&name);
            if !path.exists() {
                continue;
            }
            let digest = Sha256::digest(std::fs::read(&path)?);
            writeln!(f, "{}  {name}", hex::encode(digest))?;
        }
        f.flush()?;
        Ok(())
    }
}

/// Runs one parsed invocation. The resolved config and manifest are written
/// even when the command fails part-way.
pub fn execute(cli: &Cli) -> Result<()> {
    let cfg = resolve_config(cli)?;
    let mut run = Run::new(cfg)?;
    let outcome = match cli.command {
        Command::VectorField => commands::vector_field(&mut run),
        Command::Sample => commands::sample(&mut run),
        Command::TrainToy => commands::train_toy(&mut run),
        Command::Invert => commands::invert(&mut run),
        Command::Check => check::run_checks(&mut run),
    };
    let finished = run.finish();
    outcome.and(finished)
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn main_with_args<I, T>(args: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_SUCCESS };
        }
    };
    match execute(&cli) {
        Ok(()) => EXIT_SUCCESS,
        Err(e) => {
            eprintln!("wsdiff {}: {e}", cli.command.name());
            exit_code(&e)
        }
    }
}

/// Reads back a manifest as `(name, hex digest)` pairs.
pub fn read_manifest(dir: &Path) -> Result<Vec<(String, String)>> {
    let text = std::fs::read_to_string(dir.join(MANIFEST))?;
    text.lines()
        .map(|l| {
            let (h, n) = l
                .split_once("  ")
                .ok_or_else(|| Error::Container(format!("bad manifest line `{l}`")))?;
            Ok((n.to_string(), h.to_string()))
        })
        .collect()
}
