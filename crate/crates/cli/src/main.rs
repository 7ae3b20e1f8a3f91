//! `tightpack`: prune, compress, simulate and render sparse weight matrices.
//!
//! Exit codes: 0 success, 1 internal error, 2 invalid input or arguments,
//! 3 simulated outputs differ from the dense reference.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use tightpack::simarray::CycleConfig;

use commands::{CompressOptions, Failure, PruneRate, SimulateOptions};
use config::RunConfig;

#[derive(Parser, Debug)]
#[command(name = "tightpack", version, about = "Tight column packing of sparse weight matrices for systolic arrays")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Magnitude-prune a matrix to a target rate
    Prune {
        input: PathBuf,
        output: PathBuf,
        /// Fraction of weights to zero
        #[arg(long, conflicts_with = "schedule", required_unless_present = "schedule")]
        rate: Option<f64>,
        /// Gradual cubic schedule over EPOCHS reaching RATE
        #[arg(long, num_args = 2, value_names = ["EPOCHS", "RATE"])]
        schedule: Option<Vec<String>>,
    },
    /// Quantize a real-valued CSV matrix to 8 bits
    Quantize { input: PathBuf, output: PathBuf },
    /// Permute and pack matrices; writes packed JSON and a report per input
    Compress(CompressArgs),
    /// Run packed matrices through the array model
    Simulate(SimulateArgs),
    /// Write a density bitmap (PGM) of a matrix or packed JSON
    Render { input: PathBuf, output: PathBuf },
}

#[derive(Args, Debug)]
struct CompressArgs {
    #[arg(required = true)]
    inputs: Vec<PathBuf>,
    #[arg(long, short, default_value = ".")]
    out_dir: PathBuf,
    /// key = value file; flags override it
    #[arg(long)]
    config: Option<PathBuf>,
    /// weight | subword
    #[arg(long)]
    mode: Option<String>,
    /// auto | 3,5 | 4,4 | 5,3
    #[arg(long)]
    format: Option<String>,
    #[arg(long)]
    delta_max: Option<f64>,
    /// Section height H
    #[arg(long)]
    rows: Option<usize>,
    /// Tile width W
    #[arg(long)]
    cols: Option<usize>,
    /// Max columns per group G
    #[arg(long)]
    group: Option<usize>,
    #[arg(long)]
    subarray: Option<usize>,
    #[arg(long)]
    t_init: Option<f64>,
    #[arg(long)]
    t_end: Option<f64>,
    /// Cooling factor f: temp *= 1 - f
    #[arg(long)]
    cooling: Option<f64>,
    /// Proposals per temperature
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Greedy packing only, no permutation search
    #[arg(long)]
    no_anneal: bool,
    /// Write the annealing trace as JSON lines
    #[arg(long)]
    trace: bool,
    /// Matrices compressed in parallel
    #[arg(long, short)]
    jobs: Option<usize>,
}

impl CompressArgs {
    fn run_config(&self) -> tightpack::Result<RunConfig> {
        let mut cfg = RunConfig::default();
        if let Some(path) = &self.config {
            cfg.apply_file(path)?;
        }
        let flags: [(&str, Option<String>); 13] = [
            ("mode", self.mode.clone()),
            ("format", self.format.clone()),
            ("delta_max", self.delta_max.map(|v| v.to_string())),
            ("rows", self.rows.map(|v| v.to_string())),
            ("cols", self.cols.map(|v| v.to_string())),
            ("group", self.group.map(|v| v.to_string())),
            ("subarray", self.subarray.map(|v| v.to_string())),
            ("t_init", self.t_init.map(|v| v.to_string())),
            ("t_end", self.t_end.map(|v| v.to_string())),
            ("cooling", self.cooling.map(|v| v.to_string())),
            ("iters", self.iters.map(|v| v.to_string())),
            ("seed", self.seed.map(|v| v.to_string())),
            ("anneal", self.no_anneal.then(|| "false".to_string())),
        ];
        for (key, value) in flags {
            if let Some(value) = value {
                cfg.set(key, &value)?;
            }
        }
        Ok(cfg)
    }
}

#[derive(Args, Debug)]
struct SimulateArgs {
    /// Packed JSON files, one per layer
    #[arg(long, required = true)]
    packed: Vec<PathBuf>,
    /// Activation matrices (columns x batch), paired with --packed
    #[arg(long, required = true)]
    inputs: Vec<PathBuf>,
    #[arg(long, short, default_value = ".")]
    out_dir: PathBuf,
    /// Compare against the dense product; exit 3 on any difference
    #[arg(long)]
    check: bool,
    /// Weight matrices for --check, paired with --packed (default: the
    /// unpacked weights)
    #[arg(long, requires = "check")]
    reference: Vec<PathBuf>,
    /// Give every section its own tiles
    #[arg(long)]
    no_fold: bool,
    /// Weight words loaded per cycle
    #[arg(long, default_value_t = CycleConfig::default().weight_bus_words)]
    bus_words: usize,
    /// Extra cycles per folded tile
    #[arg(long, default_value_t = 0)]
    fold_cycles: u64,
}

fn parse_schedule(v: &[String]) -> tightpack::Result<PruneRate> {
    let bad = |what: &str, s: &str| tightpack::Error::Invalid(format!("bad schedule {what} {s:?}"));
    Ok(PruneRate::Schedule {
        epochs: v[0].parse().map_err(|_| bad("epochs", &v[0]))?,
        rate: v[1].parse().map_err(|_| bad("rate", &v[1]))?,
    })
}

fn run(cli: Cli) -> Result<Vec<String>, Failure> {
    Ok(match cli.command {
        Command::Prune {
            input,
            output,
            rate,
            schedule,
        } => {
            let rate = match (rate, schedule) {
                (Some(r), _) => PruneRate::Fixed(r),
                (None, Some(s)) => parse_schedule(&s)?,
                (None, None) => unreachable!("clap requires one of --rate/--schedule"),
            };
            vec![commands::prune(&input, &output, rate)?]
        }
        Command::Quantize { input, output } => vec![commands::quantize(&input, &output)?],
        Command::Compress(args) => {
            let config = args.run_config()?;
            let opts = CompressOptions {
                config: &config,
                out_dir: &args.out_dir,
                trace: args.trace,
                jobs: args.jobs,
            };
            commands::compress(&args.inputs, &opts)?
        }
        Command::Simulate(args) => {
            let opts = SimulateOptions {
                out_dir: &args.out_dir,
                check: args.check,
                reference: &args.reference,
                fold: !args.no_fold,
                cycles: CycleConfig {
                    weight_bus_words: args.bus_words,
                    fold_reconfig_cycles: args.fold_cycles,
                },
            };
            commands::simulate(&args.packed, &args.inputs, &opts)?
        }
        Command::Render { input, output } => vec![commands::render(&input, &output)?],
    })
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(lines) => {
            for line in lines {
                println!("{line}");
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("tightpack: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
