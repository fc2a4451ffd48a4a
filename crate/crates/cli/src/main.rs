//! `mixlsq`: Monte Carlo experiments and cost surface scans for Gaussian
//! mixture least-squares losses.

mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mixlsq::LossKind;

use commands::{Output, PlainOptions, ScanOptions};
use config::{Overrides, Scale};

#[derive(Parser)]
#[command(name = "mixlsq", version = commands::VERSION, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Direct mode finding on sampled unimodal mixtures.
    Plain {
        #[command(flatten)]
        run: RunArgs,
        /// Also write the accepted mixtures as `<experiment>_corpus.json`.
        #[arg(long)]
        dump_corpus: bool,
        /// Reuse a corpus written by `--dump-corpus` instead of sampling one.
        #[arg(long, value_name = "FILE")]
        corpus: Option<PathBuf>,
    },
    /// Point set registration between clustered landmark sets.
    Psr {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Cost and pseudo-Hessian of one loss over a grid.
    Scan {
        /// Mixture JSON: `{"components": [{"weight", "mean", "sqrt_info"}]}`.
        #[arg(long, value_name = "FILE")]
        mixture: PathBuf,
        #[arg(long, value_parser = parse_loss, default_value = "msm")]
        loss: LossKind,
        /// Scan interval `lo:hi` applied on every axis.
        #[arg(long, value_parser = commands::parse_range, default_value = "-4:4", allow_hyphen_values = true)]
        range: (f64, f64),
        /// Grid spacing.
        #[arg(long, default_value_t = 0.01)]
        resolution: f64,
        /// Additive damping of the MSM normalization.
        #[arg(long, default_value_t = 10.0)]
        damping: f64,
        /// DCS kernel width.
        #[arg(long, default_value_t = 1.0)]
        phi: f64,
        #[command(flatten)]
        output: OutputArgs,
    },
}

#[derive(Args)]
struct OutputArgs {
    /// Output directory, created when missing.
    #[arg(long, default_value = "results")]
    out: PathBuf,
    /// Write `time_us` as 0 and omit the generation timestamp, for byte-identical reruns.
    #[arg(long)]
    no_timing: bool,
}

impl OutputArgs {
    fn output(&self) -> Output {
        Output { dir: self.out.clone(), timing: !self.no_timing }
    }
}

#[derive(Args)]
struct RunArgs {
    /// JSON run configuration, or a manifest written by an earlier run.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Comma separated subset of mm,sm,msm,dcs.
    #[arg(long, value_parser = parse_losses)]
    losses: Option<LossList>,
    /// Trial counts preset, overridden by counts in the configuration.
    #[arg(long, value_enum)]
    scale: Option<Scale>,
    /// Only run experiments of these dimensions.
    #[arg(long, value_delimiter = ',')]
    dims: Option<Vec<usize>>,
    /// Worker threads (default: all cores).
    #[arg(long)]
    threads: Option<usize>,
    #[command(flatten)]
    output: OutputArgs,
}

impl RunArgs {
    fn overrides(&self) -> Overrides {
        Overrides {
            seed: self.seed,
            scale: self.scale,
            losses: self.losses.clone().map(|l| l.0),
            dims: self.dims.clone(),
        }
    }
}

#[derive(Debug, Clone)]
struct LossList(Vec<LossKind>);

fn parse_losses(s: &str) -> Result<LossList, String> {
    LossKind::parse_list(s).map(LossList).map_err(|e| e.to_string())
}

fn parse_loss(s: &str) -> Result<LossKind, String> {
    s.parse().map_err(|e: mixlsq::Error| e.to_string())
}

fn set_threads(threads: Option<usize>) {
    if let Some(n) = threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            log::warn!("cannot configure {n} worker threads: {e}");
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Plain { run, dump_corpus, corpus } => {
            set_threads(run.threads);
            let opts = PlainOptions { dump_corpus: *dump_corpus, corpus: corpus.clone() };
            commands::plain(run.config.as_deref(), &run.overrides(), &run.output.output(), &opts)
        }
        Command::Psr { run } => {
            set_threads(run.threads);
            commands::psr(run.config.as_deref(), &run.overrides(), &run.output.output())
        }
        Command::Scan { mixture, loss, range, resolution, damping, phi, output } => {
            let opts = ScanOptions {
                mixture: mixture.clone(),
                loss: *loss,
                range: *range,
                resolution: *resolution,
                damping: *damping,
                phi: *phi,
            };
            commands::scan(&opts, &output.output())
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
