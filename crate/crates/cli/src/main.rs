mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use ultragcn::dataset::InputFormat;
use ultragcn::Split;

use crate::commands::{Failure, Kind};
use crate::config::RunConfig;

#[derive(Parser)]
#[command(name = "ultragcn", version, about = "Train and evaluate graph-constrained embedding recommenders")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Load and split the data, print statistics and cache the neighbor index.
    Prepare(RunArgs),
    /// Train a model and write its checkpoint and line-JSON log.
    Train(RunArgs),
    /// Score a checkpoint on the test (or validation) split.
    Evaluate {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_enum, default_value_t = SplitArg::Test)]
        split: SplitArg,
    },
    /// Check message-passing identities on built-in and user-supplied graphs.
    OracleCheck(commands::OracleArgs),
    /// Train and evaluate over a λ × γ × K grid, writing CSV.
    Sweep {
        #[command(flatten)]
        run: RunArgs,
        /// Comma-separated λ values.
        #[arg(long, value_delimiter = ',')]
        lambdas: Option<Vec<f64>>,
        /// Comma-separated γ values.
        #[arg(long, value_delimiter = ',')]
        gammas: Option<Vec<f64>>,
        /// Comma-separated neighbor counts.
        #[arg(long = "Ks", value_delimiter = ',')]
        ks: Option<Vec<usize>>,
    },
    /// Write a seeded synthetic dataset as train/test pair lists.
    Synth(commands::SynthArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Valid,
    Test,
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Adjacency,
    Pairs,
}

/// Options shared by every data-driven command. Flags override the file.
#[derive(Args, Default)]
struct RunArgs {
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data_train: Option<PathBuf>,
    #[arg(long)]
    data_test: Option<PathBuf>,
    #[arg(long)]
    data_valid: Option<PathBuf>,
    #[arg(long, value_enum)]
    format: Option<FormatArg>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long, allow_hyphen_values = true)]
    lambda: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    gamma: Option<f64>,
    /// Neighbors per item.
    #[arg(long = "K")]
    k: Option<usize>,
    /// Negatives per positive.
    #[arg(long = "R")]
    r: Option<usize>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long, allow_hyphen_values = true)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long, allow_hyphen_values = true)]
    reg: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    eval_interval: Option<usize>,
    #[arg(long, allow_hyphen_values = true)]
    init_std: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    cutoffs: Option<Vec<usize>>,
}

impl RunArgs {
    fn resolve(&self) -> Result<RunConfig, Failure> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::from_file(path).map_err(|e| Failure::new(Kind::Config, e))?,
            None => RunConfig::default(),
        };
        let t = &mut cfg.train;
        macro_rules! set {
            ($($flag:ident => $field:expr),* $(,)?) => {
                $(if let Some(v) = self.$flag.clone() { $field = v; })*
            };
        }
        set! {
            lambda => t.lambda,
            gamma => t.gamma,
            k => t.neighbors,
            r => t.negatives,
            dim => t.dim,
            lr => t.lr,
            batch_size => t.batch_size,
            reg => t.reg,
            epochs => t.max_epochs,
            patience => t.patience,
            eval_interval => t.eval_interval,
            init_std => t.init_std,
            seed => t.seed,
            out_dir => cfg.out_dir,
            cutoffs => cfg.cutoffs,
        }
        if self.data_train.is_some() {
            cfg.data.train = self.data_train.clone();
        }
        if self.data_test.is_some() {
            cfg.data.test = self.data_test.clone();
        }
        if self.data_valid.is_some() {
            cfg.data.valid = self.data_valid.clone();
        }
        if self.checkpoint.is_some() {
            cfg.checkpoint = self.checkpoint.clone();
        }
        if self.threads.is_some() {
            cfg.threads = self.threads;
        }
        if let Some(f) = self.format {
            cfg.data.format = match f {
                FormatArg::Adjacency => InputFormat::AdjacencyList,
                FormatArg::Pairs => InputFormat::PairList,
            };
        }
        cfg.validate().map_err(|e| Failure::new(Kind::Config, e))?;
        commands::init_threads(cfg.threads)?;
        Ok(cfg)
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Prepare(args) => commands::prepare(&args.resolve()?),
        Command::Train(args) => commands::train(&args.resolve()?),
        Command::Evaluate { run, split } => {
            let split = match split {
                SplitArg::Valid => Split::Valid,
                SplitArg::Test => Split::Test,
            };
            commands::evaluate(&run.resolve()?, split)
        }
        Command::OracleCheck(args) => commands::oracle_check(&args),
        Command::Sweep {
            run,
            lambdas,
            gammas,
            ks,
        } => {
            let mut cfg = run.resolve()?;
            if let Some(v) = lambdas {
                cfg.sweep.lambda = v;
            }
            if let Some(v) = gammas {
                cfg.sweep.gamma = v;
            }
            if let Some(v) = ks {
                cfg.sweep.neighbors = v;
            }
            commands::sweep(&cfg)
        }
        Command::Synth(args) => commands::synth(&args),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.kind as u8)
        }
    }
}
