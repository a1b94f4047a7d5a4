//! `latsurr`: build latency surrogates for block-wise architecture spaces.
//!
//! Exit status: 0 on success or pass, 2 when the accuracy target was not
//! reached, 1 on any error.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};

use latsurr::encoding::EncodingScheme;
use latsurr::pipeline::SamplingStrategy;

use commands::{Ctx, Outcome};
use config::{load_spec_arg, BackendKind, Config};

#[derive(Parser)]
#[command(name = "latsurr", version, about = "Latency surrogate construction for supernet architecture spaces")]
struct Cli {
    /// TOML run configuration; flags override its keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Root seed for every random stream.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, value_enum)]
    backend: Option<BackendKind>,
    /// Shell command of the external measurement backend.
    #[arg(long, global = true, env = "LATSURR_BACKEND_CMD")]
    backend_cmd: Option<String>,
    /// fcc, fc, statistical, feature or onehot.
    #[arg(long, global = true)]
    scheme: Option<EncodingScheme>,
    /// random or balanced.
    #[arg(long, global = true)]
    strategy: Option<SamplingStrategy>,
    /// Spec preset name or spec file, replacing the config's [spec].
    #[arg(long, global = true)]
    spec: Option<String>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print space size, depth range, bins and encoding lengths.
    Space {
        /// Preset name or spec file; defaults to the configured spec.
        spec: Option<String>,
        #[arg(long)]
        bins: Option<usize>,
    },
    /// Sample architectures into archs.json.
    Sample {
        #[arg(short, long)]
        n: usize,
    },
    /// Measure archs.json (or --archs) into dataset.jsonl.
    Measure {
        #[arg(long)]
        archs: Option<PathBuf>,
    },
    /// Re-encode a dataset under --scheme.
    Encode {
        #[arg(long)]
        dataset: PathBuf,
    },
    /// Split a dataset, train a predictor and report held-out accuracy.
    Train {
        #[arg(long)]
        dataset: PathBuf,
    },
    /// Score a model on a dataset.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
    },
    /// Run the train, evaluate, extend loop.
    Esm {
        #[arg(long)]
        acc_th: Option<f64>,
        #[arg(long)]
        max_iterations: Option<usize>,
    },
    /// Write (actual, predicted, bin) rows for a model on a dataset.
    ExportScatter {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Profile the lookup-table baseline and fit its bias correction.
    Lut {
        /// Dataset to score the raw and corrected table on.
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
}

fn resolve(cli: &Cli) -> Result<Config> {
    let mut cfg = match &cli.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(b) = cli.backend {
        cfg.backend.kind = b;
    }
    if let Some(c) = &cli.backend_cmd {
        cfg.backend.command = Some(c.clone());
    }
    if let Some(s) = cli.scheme {
        cfg.esm.scheme = s;
    }
    if let Some(s) = cli.strategy {
        cfg.esm.strategy = s;
    }
    if let Command::Esm { acc_th, max_iterations } = &cli.command {
        if let Some(a) = acc_th {
            cfg.esm.acc_th = *a;
        }
        if let Some(m) = max_iterations {
            cfg.esm.max_iterations = *m;
        }
    }
    if let Some(arg) = &cli.spec {
        let spec = load_spec_arg(arg)?;
        cfg.spec = config::SpecSource { inline: Some(spec), ..Default::default() };
    }
    cfg.propagate_seed();
    Ok(cfg)
}

fn run(cli: Cli) -> Result<Outcome> {
    let cfg = resolve(&cli)?;
    let spec = cfg.spec.resolve()?;
    let name = match &cli.command {
        Command::Space { .. } => "space",
        Command::Sample { .. } => "sample",
        Command::Measure { .. } => "measure",
        Command::Encode { .. } => "encode",
        Command::Train { .. } => "train",
        Command::Eval { .. } => "eval",
        Command::Esm { .. } => "esm",
        Command::ExportScatter { .. } => "export-scatter",
        Command::Lut { .. } => "lut",
    };
    let n_bins = cfg.esm.n_bins;
    let mut ctx = Ctx::new(cfg, spec, cli.out.clone(), name);
    let outcome = match &cli.command {
        Command::Space { spec, bins } => return commands::cmd_space(spec.as_deref(), &ctx, bins.unwrap_or(n_bins)),
        Command::Sample { n } => commands::cmd_sample(&mut ctx, *n),
        Command::Measure { archs } => commands::cmd_measure(&mut ctx, archs.clone()),
        Command::Encode { dataset } => commands::cmd_encode(&mut ctx, dataset),
        Command::Train { dataset } => commands::cmd_train(&mut ctx, dataset, cli.scheme.is_some()),
        Command::Eval { model, dataset } => commands::cmd_eval(&mut ctx, model, dataset),
        Command::Esm { .. } => commands::cmd_esm(&mut ctx),
        Command::ExportScatter { model, dataset, output } => {
            commands::cmd_export_scatter(&mut ctx, model, dataset, output.clone())
        }
        Command::Lut { dataset } => commands::cmd_lut(&mut ctx, dataset.as_deref()),
    };
    // The manifest is written even when the loop did not converge.
    let finished = ctx.finish();
    let outcome = outcome?;
    finished?;
    Ok(outcome)
}

/// Prefix naming the failing stage for library errors.
fn stage(err: &anyhow::Error) -> &'static str {
    use latsurr::Error as E;
    match err.chain().find_map(|e| e.downcast_ref::<E>()) {
        Some(E::QcFailed { .. }) => "quality control failed",
        Some(E::Backend(_)) => "measurement backend failed",
        Some(E::Persist(_)) => "file error",
        Some(E::Mismatch(_)) => "incompatible inputs",
        Some(E::InvalidSpec(_)) => "spec error",
        Some(_) => "error",
        None => "error",
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(Outcome::Pass) => ExitCode::SUCCESS,
        Ok(Outcome::NotPassed) => ExitCode::from(2),
        Err(e) => {
            eprintln!("{}: {e:#}", stage(&e));
            ExitCode::from(1)
        }
    }
}
