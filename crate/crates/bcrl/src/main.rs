use std::path::PathBuf;
use std::process::ExitCode;

use bcrl::certify::certify_checkpoint;
use bcrl::experiment::{run_experiment, run_sweep, Stage, SweepAxis};
use bcrl::plotdata::emit_plotdata;
use bcrl::{ExperimentConfig, HarnessError, Result};
use clap::{Args, Parser, Subcommand};

/// Offline policy evaluation with Bellman-complete representations on
/// finite MDPs.
#[derive(Parser)]
#[command(name = "bcrl", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// Experiment configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Output root; defaults to the configuration's `output_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the configured seeds.
    #[arg(long, value_delimiter = ',')]
    seed_list: Option<Vec<u64>>,
    /// Seeds processed in parallel.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Generate MDPs, datasets and splits.
    Gen(RunArgs),
    /// Also train and checkpoint feature networks.
    Train(RunArgs),
    /// Full pipeline with reports.
    Eval(RunArgs),
    /// Full pipeline once per value of one configuration field.
    Sweep {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_enum)]
        axis: SweepAxis,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
    },
    /// Long-format plotting tables from every run under a root.
    Plotdata {
        #[arg(long)]
        out: PathBuf,
    },
    /// Exact completeness check of a saved checkpoint.
    Certify {
        #[arg(long)]
        config: PathBuf,
        /// Run directory holding `seed-<k>/`.
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        seed: u64,
        #[arg(long, default_value = "bcrl")]
        method: String,
    },
}

fn load(args: &RunArgs) -> Result<(ExperimentConfig, PathBuf)> {
    let mut cfg = ExperimentConfig::load(&args.config)?;
    if let Some(seeds) = &args.seed_list {
        cfg.seeds = seeds.clone();
    }
    let out = args.out.clone().unwrap_or_else(|| cfg.output_dir.clone());
    Ok((cfg, out))
}

fn run(cli: Cli) -> Result<()> {
    let stage_run = |args: &RunArgs, stage: Stage| -> Result<()> {
        let (cfg, out) = load(args)?;
        let done = run_experiment(&cfg, &out, stage, args.jobs)?;
        println!("{}", done.dir.display());
        Ok(())
    };
    match cli.command {
        Command::Gen(a) => stage_run(&a, Stage::Generate),
        Command::Train(a) => stage_run(&a, Stage::Train),
        Command::Eval(a) => stage_run(&a, Stage::Evaluate),
        Command::Sweep { run, axis, values } => {
            let (cfg, out) = load(&run)?;
            for p in run_sweep(&cfg, axis, &values, &out, run.jobs)? {
                println!("{}={}\t{}", axis.as_str(), p.value, p.run.dir.display());
            }
            Ok(())
        }
        Command::Plotdata { out } => {
            println!("{}", emit_plotdata(&out)?.display());
            Ok(())
        }
        Command::Certify { config, run, seed, method } => {
            let cfg = ExperimentConfig::load(&config)?;
            let cert = certify_checkpoint(&cfg, &run, seed, &method)?;
            println!("{}", serde_json::to_string_pretty(&cert).expect("certificate serializes"));
            if cert.check.passed {
                Ok(())
            } else {
                Err(HarnessError::Numeric(format!("{method} on seed {seed} is not certified")))
            }
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
