//! Batch pipeline for the morphflow face model.
//!
//! Every subcommand runs one stage. A stage reads its upstream artifacts
//! from `<stage-dir>/<upstream>/`, writes `<stage-dir>/<stage>/` in a single
//! rename, and records a `manifest.json` with the effective config, the
//! seeds and sha256 hashes of every input and output.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Parser, Subcommand};

pub mod config;
pub mod interp;
pub mod manifest;
pub mod report;
pub mod stages;

pub use config::PipelineConfig;
pub use stages::{Pipeline, Stage};

/// A bad command line or config file; exits with status 1.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

#[derive(Debug, Parser)]
#[command(name = "morphflow", version, about = "Identity/expression face model pipeline")]
pub struct Cli {
    /// TOML config file; unset keys take their defaults.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Root seed, overriding the config.
    #[arg(long, global = true, value_name = "N")]
    pub seed: Option<u64>,
    /// Directory holding one subdirectory per stage, overriding the config.
    #[arg(long, global = true, value_name = "PATH")]
    pub stage_dir: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, Subcommand)]
pub enum Command {
    /// Generate the synthetic face family.
    Synth,
    /// Barycentric map from the bank topology to the template topology.
    BuildMap,
    /// Train spectral AU classifiers and detect AUs on the exemplar scans.
    DetectAus,
    /// Transfer every detected expression onto every neutral scan.
    Transfer,
    /// Stack transferred faces into an aligned, symmetry-augmented tensor.
    Assemble,
    /// Truncated HOSVD of the tensor into a bilinear model.
    Hosvd,
    /// Train one normalizing flow per latent space.
    TrainFlows,
    /// Draw random identities and expressions, with and without flows.
    Sample,
    /// Project the samples onto the confidence hyperellipsoid.
    Project,
    /// Interpolate from the neutral expression to every other expression.
    Interpolate,
    /// Fit the model to every target scan.
    Fit,
    /// Summarize fit errors and collect exported meshes.
    Report,
}

impl Command {
    pub fn stage(self) -> Stage {
        match self {
            Command::Synth => Stage::Synth,
            Command::BuildMap => Stage::BuildMap,
            Command::DetectAus => Stage::DetectAus,
            Command::Transfer => Stage::Transfer,
            Command::Assemble => Stage::Assemble,
            Command::Hosvd => Stage::Hosvd,
            Command::TrainFlows => Stage::TrainFlows,
            Command::Sample => Stage::Sample,
            Command::Project => Stage::Project,
            Command::Interpolate => Stage::Interpolate,
            Command::Fit => Stage::Fit,
            Command::Report => Stage::Report,
        }
    }
}

impl Cli {
    /// The config file with command-line overrides applied.
    pub fn effective_config(&self) -> anyhow::Result<PipelineConfig> {
        let mut config = match &self.config {
            Some(p) => PipelineConfig::load(p)?,
            None => PipelineConfig::default(),
        };
        if let Some(s) = self.seed {
            config.seed = s;
        }
        if let Some(d) = &self.stage_dir {
            config.paths.stage_dir = d.clone();
        }
        Ok(config)
    }
}

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_FAILURE: i32 = 2;

/// Parses `args`, runs the stage and returns the process exit status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let stage = cli.command.stage();
    let result = cli.effective_config().and_then(Pipeline::new).and_then(|p| p.run(stage).map(|m| (p, m)));
    match result {
        Ok((p, m)) => {
            println!(
                "{stage}: {} outputs in {}",
                m.outputs.len(),
                p.stage_dir().join(stage.name()).display()
            );
            EXIT_OK
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                EXIT_USAGE
            } else {
                EXIT_FAILURE
            }
        }
    }
}
