//! Command-line driver: regenerates the experiment curves and reports as
//! CSV/JSON.
//!
//! Exit codes: 0 when every built-in check holds, 1 when a check fails,
//! 2 for configuration errors.

pub mod commands;
pub mod config;

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub use commands::Outcome;
pub use config::{EtaSpec, ExperimentConfig};

use crate::error::{Error, Result};
use crate::kernels::{Kernel, Variant};
use crate::seqgen::Instance;

pub const EXIT_OK: i32 = 0;
pub const EXIT_ASSERTION: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "ckd", version, about = "Causal kernel descent experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Squared prediction error of the fixed point along sequences (CSV).
    Figure2(Overrides),
    /// Transformer forward pass versus descent iterates (JSON).
    Equivalence(Overrides),
    /// Spectral radius statistics of the linear instance (JSON).
    Spectral(Overrides),
    /// Successive projections of a random vector (CSV).
    ProjectorDemo(Overrides),
    /// Distance to the fixed point per depth for the softmax descent (CSV).
    DepthGap(Overrides),
    /// Emit a generated sequence (JSON).
    Gen(Overrides),
}

/// Flags overriding the config file, which in turn overrides the defaults.
#[derive(Debug, Clone, Default, Args)]
pub struct Overrides {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// 1..4 or linear | exp | periodic | phase.
    #[arg(long)]
    pub instance: Option<Instance>,
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub length: Option<usize>,
    #[arg(long)]
    pub period: Option<usize>,
    #[arg(long)]
    pub repeats: Option<usize>,
    #[arg(long)]
    pub kernel: Option<Kernel>,
    #[arg(long)]
    pub variant: Option<Variant>,
    /// auto | nilpotent | a positive number.
    #[arg(long)]
    pub eta: Option<EtaSpec>,
    #[arg(long)]
    pub depth: Option<usize>,
    #[arg(long)]
    pub seeds: Option<usize>,
    #[arg(long)]
    pub draws: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub q: Option<f64>,
    #[arg(long)]
    pub ablate_bos: bool,
    #[arg(long)]
    pub force_identity: bool,
}

impl Overrides {
    pub fn resolve(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::from_file(path)?,
            None => ExperimentConfig::default(),
        };
        macro_rules! set {
            ($($field:ident),*) => {$(
                if let Some(v) = self.$field.clone() {
                    cfg.$field = v.into();
                }
            )*};
        }
        set!(instance, repeats, variant, eta, depth, seeds, draws, seed, q);
        if self.dim.is_some() {
            cfg.dim = self.dim;
        }
        if self.length.is_some() {
            cfg.length = self.length;
        }
        if self.period.is_some() {
            cfg.period = self.period;
        }
        if self.kernel.is_some() {
            cfg.kernel = self.kernel;
        }
        cfg.ablate_bos |= self.ablate_bos;
        cfg.force_identity |= self.force_identity;
        Ok(cfg)
    }
}

impl Command {
    fn overrides(&self) -> &Overrides {
        match self {
            Command::Figure2(o)
            | Command::Equivalence(o)
            | Command::Spectral(o)
            | Command::ProjectorDemo(o)
            | Command::DepthGap(o)
            | Command::Gen(o) => o,
        }
    }

    pub fn execute(&self, cfg: &ExperimentConfig) -> Result<Outcome> {
        match self {
            Command::Figure2(_) => commands::figure2(cfg),
            Command::Equivalence(_) => commands::equivalence(cfg),
            Command::Spectral(_) => commands::spectral(cfg),
            Command::ProjectorDemo(_) => commands::projector_demo(cfg),
            Command::DepthGap(_) => commands::depth_gap(cfg),
            Command::Gen(_) => commands::gen(cfg),
        }
    }
}

fn write_output(out: Option<&PathBuf>, text: &str) -> std::io::Result<()> {
    match out {
        Some(path) => std::fs::write(path, text),
        None => std::io::stdout().lock().write_all(text.as_bytes()),
    }
}

/// Parses `args`, runs the command and returns the process exit code.
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
    let overrides = cli.command.overrides();
    let result = overrides
        .resolve()
        .and_then(|cfg| cli.command.execute(&cfg));
    match result {
        Ok(outcome) => {
            if let Err(e) = write_output(overrides.out.as_ref(), &outcome.text) {
                eprintln!("error: cannot write output: {e}");
                return EXIT_CONFIG;
            }
            if outcome.passed {
                EXIT_OK
            } else {
                eprintln!("check failed; see the report for details");
                EXIT_ASSERTION
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::InvalidParameter(_) | Error::Unsupported(_) | Error::DimensionMismatch(_) => EXIT_CONFIG,
                _ => EXIT_ASSERTION,
            }
        }
    }
}
