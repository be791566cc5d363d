//! `functa` command-line interface.
//!
//! Every subcommand takes an optional `--config <file>` of `key=value`
//! lines (`#` comments allowed) plus repeatable `--set key=value`
//! overrides, and writes a run manifest (`<output>.manifest`) recording
//! the resolved configuration and SHA-256 digests of all inputs and
//! outputs. `report` re-verifies a manifest.
//!
//! Exit codes: 0 success, 2 configuration/usage error, 3 I/O or file
//! format error (including digest and version mismatches), 4 numerical
//! failure.

mod commands;
mod config;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use functa_core::FunctaError;

use config::Config;

#[derive(Parser)]
#[command(name = "functa", version, about = "Fit, generate, and analyze neural-field representations")]
struct Cli {
    /// Worker threads for per-item fitting (results are reduced in item
    /// order, so outputs are identical for any worker count).
    #[arg(long, global = true, default_value_t = 1)]
    workers: usize,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct WithConfig {
    /// Configuration file of key=value lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a configuration key (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Meta-learn a shared base network over a synthetic dataset.
    MetaTrain(WithConfig),
    /// Fit per-item modulations with a frozen base network.
    FitFunctaset(WithConfig),
    /// Train a neural spline flow on a functaset.
    FlowTrain(WithConfig),
    /// Sample the flow and decode samples to images/voxels.
    FlowSample(WithConfig),
    /// Train a denoising diffusion model on a functaset.
    DdpmTrain(WithConfig),
    /// Sample the diffusion model and decode samples.
    DdpmSample(WithConfig),
    /// Complete a partially observed image by MAP inference.
    Impute(WithConfig),
    /// Render a scene from a new pose after fitting observed views.
    NovelView(WithConfig),
    /// Train a classifier on modulations.
    ClassifyTrain(WithConfig),
    /// Evaluate a classifier on a functaset.
    ClassifyEval(WithConfig),
    /// Decode one functaset entry to an image or voxel file.
    Render(WithConfig),
    /// Per-dimension reconstruction sensitivity of a fitted modulation.
    PerturbAnalyze(WithConfig),
    /// Verify a run manifest, or tabulate per-inner-step PSNR for one or
    /// more checkpoints over a dataset.
    Report {
        /// Manifest file to verify.
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[command(flatten)]
        with: WithConfig,
    },
}

fn dispatch(cli: Cli) -> functa_core::Result<()> {
    if cli.workers == 0 {
        return Err(FunctaError::Config("--workers must be >= 1".into()));
    }
    let run = |wc: &WithConfig,
               f: fn(&mut Config, usize) -> functa_core::Result<()>|
     -> functa_core::Result<()> {
        let mut cfg = Config::load(wc.config.as_deref(), &wc.set)?;
        f(&mut cfg, cli.workers)
    };
    match &cli.cmd {
        Cmd::MetaTrain(wc) => run(wc, commands::meta_train),
        Cmd::FitFunctaset(wc) => run(wc, commands::fit_functaset),
        Cmd::FlowTrain(wc) => run(wc, commands::flow_train),
        Cmd::FlowSample(wc) => run(wc, commands::flow_sample),
        Cmd::DdpmTrain(wc) => run(wc, commands::ddpm_train),
        Cmd::DdpmSample(wc) => run(wc, commands::ddpm_sample),
        Cmd::Impute(wc) => run(wc, commands::impute),
        Cmd::NovelView(wc) => run(wc, commands::novel_view),
        Cmd::ClassifyTrain(wc) => run(wc, commands::classify_train),
        Cmd::ClassifyEval(wc) => run(wc, commands::classify_eval),
        Cmd::Render(wc) => run(wc, commands::render),
        Cmd::PerturbAnalyze(wc) => run(wc, commands::perturb_analyze),
        Cmd::Report { manifest, with } => {
            let mut cfg = Config::load(with.config.as_deref(), &with.set)?;
            commands::report(manifest.as_deref(), &mut cfg, cli.workers)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let code = match e {
                FunctaError::Config(_) | FunctaError::Contract(_) | FunctaError::Shape(_) => 2,
                FunctaError::Io(_)
                | FunctaError::Format(_)
                | FunctaError::Version { .. }
                | FunctaError::Digest { .. } => 3,
                FunctaError::Numerical(_) => 4,
            };
            ExitCode::from(code)
        }
    }
}
