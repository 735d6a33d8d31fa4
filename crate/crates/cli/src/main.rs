mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "pocgm", version, about = "Sparse-view fan-beam CT simulation and conditional generation")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Global {
    /// Master seed; overrides the config's seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Run configuration (JSON); defaults to the built-in desk configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Directory for outputs and `manifest.json`.
    #[arg(long, global = true, default_value = ".")]
    pub out_dir: PathBuf,
    /// Exit non-zero unless the run meets its improvement criterion.
    #[arg(long, global = true)]
    pub check: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Rasterize an ellipse phantom.
    Phantom(commands::PhantomArgs),
    /// Forward-project an image into a fan-beam sinogram.
    Project(commands::ProjectArgs),
    /// Keep a uniform subset of views.
    Subsample(commands::SubsampleArgs),
    /// Filtered backprojection.
    Fbp(commands::FbpArgs),
    /// Synthesize a paired training corpus.
    MakeDataset(commands::MakeDatasetArgs),
    /// Train the conditional network.
    Train(commands::TrainArgs),
    /// Reconstruct from a sparse sinogram.
    Sample(commands::SampleArgs),
    /// PSNR/SSIM of predictions against ground truth.
    Eval(commands::EvalArgs),
    /// Dataset, training, sampling and evaluation in one run.
    EndToEnd(commands::EndToEndArgs),
    /// Export the loss trace recorded by `train`.
    LossTrace(commands::LossTraceArgs),
    /// Print the effective configuration.
    ShowConfig,
}

fn init_threads() -> anyhow::Result<()> {
    if let Ok(v) = std::env::var("POCGM_THREADS") {
        let n: usize = v
            .parse()
            .map_err(|_| anyhow::anyhow!("POCGM_THREADS must be a positive integer, got {v:?}"))?;
        rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global()?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let run = || -> anyhow::Result<bool> {
        init_threads()?;
        let g = &cli.global;
        match &cli.command {
            Command::Phantom(a) => commands::phantom(g, a),
            Command::Project(a) => commands::project(g, a),
            Command::Subsample(a) => commands::subsample(g, a),
            Command::Fbp(a) => commands::fbp(g, a),
            Command::MakeDataset(a) => commands::make_dataset(g, a),
            Command::Train(a) => commands::train(g, a),
            Command::Sample(a) => commands::sample(g, a),
            Command::Eval(a) => commands::eval(g, a),
            Command::EndToEnd(a) => commands::end_to_end(g, a),
            Command::LossTrace(a) => commands::loss_trace(g, a),
            Command::ShowConfig => commands::show_config(g),
        }
    };
    match run() {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
