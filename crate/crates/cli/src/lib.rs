//! The `dfr` pipeline: synthetic inputs, preprocessing, PCA fitting,
//! dataset generation, training, rectification and evaluation.

pub mod commands;
pub mod error;
pub mod provenance;

use clap::{Parser, Subcommand};

pub use error::{CliError, Result};

#[derive(Debug, Parser)]
#[command(name = "dfr", version, about = "Fingerprint distortion rectification pipeline")]
pub struct Cli {
    /// Run single-threaded.
    #[arg(long, global = true)]
    pub sequential: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render procedural normal impressions, `<finger>_<index>.png`.
    SynthNormals(commands::synth::NormalsArgs),
    /// Simulate distortion fields for model fitting.
    SynthFields(commands::synth::FieldsArgs),
    /// Enhance, segment, center and binarize or thin a directory of images.
    Preprocess(commands::preprocess::Args),
    /// Fit the PCA distortion model.
    FitModel(commands::fit::Args),
    /// Synthesize a distorted training set from normal impressions.
    MakeDataset(commands::dataset::Args),
    /// Train a rectification network.
    Train(commands::train::Args),
    /// Estimate the distortion field of one image and rectify it.
    Rectify(commands::rectify::Args),
    /// Compute rectification or matching metrics.
    Evaluate(commands::evaluate::Args),
}

pub fn run(cli: Cli) -> Result<()> {
    if cli.sequential {
        dfr_core::par::set_enabled(false);
    }
    match cli.command {
        Command::SynthNormals(a) => commands::synth::normals(&a),
        Command::SynthFields(a) => commands::synth::fields(&a),
        Command::Preprocess(a) => commands::preprocess::run(&a),
        Command::FitModel(a) => commands::fit::run(&a),
        Command::MakeDataset(a) => commands::dataset::run(&a),
        Command::Train(a) => commands::train::run(&a),
        Command::Rectify(a) => commands::rectify::run(&a),
        Command::Evaluate(a) => commands::evaluate::run(&a),
    }
}
