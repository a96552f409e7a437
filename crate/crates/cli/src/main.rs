//! `motion-ood`: train, benchmark, classify, inspect latents and check gradients.
//!
//! Settings come from built-in defaults, then `--config <file>`, then flags
//! (named flags first, then each `--set section.key=value` in order). The
//! resolved configuration is written to `<out>/config.ini`; passing that file
//! back as `--config` reproduces the run.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use config::RunConfig;

#[derive(Parser)]
#[command(name = "motion-ood", version, about = "Motion prediction with a VAE regulariser and an OoD benchmark")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model; writes best.ckpt and loss_log.csv.
    Train(Common),
    /// Train and evaluate both variants over several seeds; writes result tables.
    Benchmark(Common),
    /// Train the action classifier; writes confusion.csv and scores.csv.
    Classify(Common),
    /// Export latent means of a checkpoint and their 2-D projection.
    Latents(Common),
    /// Finite-difference check of the full training loss gradient.
    GradCheck(Common),
}

#[derive(Args, Debug)]
struct Common {
    /// Configuration file (`[section]` + `key = value`).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed for every stochastic step; benchmark seeds are seed, seed+1, ...
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, short)]
    out: Option<PathBuf>,
    /// Dataset root (`<root>/<subject>/<action>_<trial>.txt`).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Split preset: synthetic, h36m-walking or cmu-basketball.
    #[arg(long)]
    preset: Option<String>,
    #[arg(long, allow_negative_numbers = true)]
    lambda: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    p_drop: Option<f64>,
    /// Latent width per joint.
    #[arg(long)]
    latent: Option<usize>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    blocks: Option<usize>,
    /// Retained DCT coefficients.
    #[arg(long)]
    dct: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Number of benchmark seeds.
    #[arg(long)]
    seeds: Option<usize>,
    /// Build the model without the VAE branch.
    #[arg(long)]
    no_vae: bool,
    /// Checkpoint to read (latents).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Any configuration key, e.g. `--set train.learning_rate=1e-3`.
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    set: Vec<String>,
}

impl Common {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        if let Some(path) = &self.config {
            cfg.load_file(path)?;
        }
        let path = |p: &PathBuf| p.display().to_string();
        let named = [
            ("run.seed", self.seed.map(|v| v.to_string())),
            ("run.output", self.out.as_ref().map(path)),
            ("data.root", self.data.as_ref().map(path)),
            ("data.preset", self.preset.clone()),
            ("train.lambda", self.lambda.map(|v| format!("{v:?}"))),
            ("model.p_drop", self.p_drop.map(|v| format!("{v:?}"))),
            ("model.latent", self.latent.map(|v| v.to_string())),
            ("model.hidden", self.hidden.map(|v| v.to_string())),
            ("model.blocks", self.blocks.map(|v| v.to_string())),
            ("model.dct", self.dct.map(|v| v.to_string())),
            ("train.epochs", self.epochs.map(|v| v.to_string())),
            ("benchmark.seeds", self.seeds.map(|v| v.to_string())),
            ("model.vae", self.no_vae.then(|| "false".to_string())),
            ("latents.checkpoint", self.checkpoint.as_ref().map(path)),
        ];
        for (key, value) in named {
            if let Some(v) = value {
                cfg.set_assignment(&format!("{key}={v}"))?;
            }
        }
        for s in &self.set {
            cfg.set_assignment(s).with_context(|| format!("--set {s}"))?;
        }
        Ok(cfg)
    }
}

enum Failure {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
}

fn run(command: Command) -> std::result::Result<(), Failure> {
    let (common, action): (&Common, fn(&RunConfig) -> Result<()>) = match &command {
        Command::Train(c) => (c, commands::train_cmd),
        Command::Benchmark(c) => (c, commands::benchmark_cmd),
        Command::Classify(c) => (c, commands::classify_cmd),
        Command::Latents(c) => (c, commands::latents_cmd),
        Command::GradCheck(c) => (c, commands::grad_check_cmd),
    };
    let cfg = common
        .resolve()
        .and_then(|cfg| {
            cfg.validate()?;
            if let Command::Latents(_) = command {
                match &cfg.latents.checkpoint {
                    None => bail!("latents needs a checkpoint (--checkpoint)"),
                    Some(p) if !p.is_file() => bail!("checkpoint {} does not exist", p.display()),
                    Some(_) => {}
                }
            }
            Ok(cfg)
        })
        .map_err(Failure::Usage)?;
    let prepare = || -> Result<()> {
        std::fs::create_dir_all(&cfg.output)
            .with_context(|| format!("cannot create output directory {}", cfg.output.display()))?;
        cfg.write(&cfg.output)?;
        Ok(())
    };
    prepare().map_err(Failure::Runtime)?;
    println!("{}", cfg.summary());
    action(&cfg).map_err(Failure::Runtime)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
