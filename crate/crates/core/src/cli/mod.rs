//! Command-line front end.

mod commands;

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::config::RunConfig;
use crate::Error;

#[derive(Debug, Parser)]
#[command(name = "ser-lstm", version, about = "Speech emotion recognition with a from-scratch LSTM")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Option<Command>,
}

#[derive(Debug, Clone, Args)]
pub struct GlobalArgs {
    /// Worker threads for featurization, batch gradients and evaluation [default: CPU count]
    #[arg(long, global = true, value_name = "N")]
    pub jobs: Option<usize>,
    /// Decimal places for numbers printed to the terminal (files always keep full precision)
    #[arg(long, global = true, value_name = "D")]
    pub digits: Option<usize>,
    /// Run configuration file (`key = value` lines under `[section]` headers)
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Override one configuration value, e.g. `--set train.epochs=10`; repeatable
    #[arg(long = "set", global = true, value_name = "SECTION.KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Run seed (train.seed)
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Print the effective configuration and exit
    #[arg(long, global = true)]
    pub print_config: bool,
    /// Also scan the song recordings
    #[arg(long, global = true)]
    pub include_song: bool,
    /// Keep every actor entirely on one side of the train/test split
    #[arg(long, global = true)]
    pub speaker_disjoint: bool,
    /// Dataset root directory (data.root)
    #[arg(long, global = true, env = "SER_LSTM_DATA", value_name = "DIR")]
    pub data: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Index the dataset and print per-emotion counts
    Scan {
        /// Write the index as JSON lines
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Extract MFCC features for every indexed clip
    Featurize {
        /// Feature archive to write; a `.index.tsv` listing is written next to it
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model on a feature archive
    Train {
        #[arg(long)]
        features: PathBuf,
        /// Output directory for checkpoints and logs
        #[arg(long)]
        out: PathBuf,
        /// Continue from a checkpoint that holds optimizer state
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Number of LSTM layers (model.layers)
        #[arg(long)]
        layers: Option<usize>,
        /// Number of epochs (train.epochs)
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Evaluate one or more checkpoints on their test split
    Eval {
        #[arg(long)]
        features: PathBuf,
        #[arg(long = "checkpoint", required = true)]
        checkpoints: Vec<PathBuf>,
        /// Output directory for metrics JSON, confusion CSV and heatmap SVG
        #[arg(long)]
        out: PathBuf,
        /// Evaluate on every archive record instead of the test split
        #[arg(long)]
        all: bool,
    },
    /// Train and evaluate the 1-layer and 2-layer variants under one seed
    Compare {
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Classify one WAV file
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        wav: PathBuf,
    },
    /// Compare analytic gradients with central finite differences on a small model
    Gradcheck {
        /// Largest acceptable relative error
        #[arg(long, default_value_t = 1e-6)]
        threshold: f64,
    },
}

impl GlobalArgs {
    pub fn jobs(&self) -> usize {
        self.jobs
            .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
            .max(1)
    }

    /// Defaults, then the config file, then `--set` overrides, then dedicated flags.
    pub fn run_config(&self) -> Result<RunConfig, Error> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::from_file(path)?,
            None => RunConfig::default(),
        };
        for o in &self.overrides {
            cfg.apply_override(o)?;
        }
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if self.include_song {
            cfg.include_song = true;
        }
        if self.speaker_disjoint {
            cfg.speaker_disjoint = true;
        }
        if let Some(data) = &self.data {
            cfg.data_root = Some(data.clone());
        }
        Ok(cfg)
    }
}

/// Parses `args` and runs the command, writing results to `out`.
pub fn run(cli: Cli, out: &mut dyn Write) -> Result<(), Error> {
    let mut cfg = cli.global.run_config()?;
    if let Some(Command::Train { layers, epochs, .. }) = &cli.command {
        if let Some(l) = layers {
            cfg.num_lstm_layers = *l;
        }
        if let Some(e) = epochs {
            cfg.epochs = *e;
        }
    }
    if let Some(Command::Compare { epochs: Some(e), .. }) = &cli.command {
        cfg.epochs = *e;
    }
    if cli.global.print_config {
        return commands::emit(out, &cfg.to_text());
    }
    let ctx = commands::Context {
        cfg,
        jobs: cli.global.jobs(),
        digits: cli.global.digits,
    };
    match cli.command {
        None => Err(Error::Usage("no subcommand given (try --help)".into())),
        Some(Command::Scan { out: index }) => commands::scan(&ctx, index.as_deref(), out),
        Some(Command::Featurize { out: archive }) => commands::featurize(&ctx, &archive, out),
        Some(Command::Train { features, out: dir, resume, .. }) => commands::train(&ctx, &features, &dir, resume.as_deref(), out),
        Some(Command::Eval { features, checkpoints, out: dir, all }) => commands::eval(&ctx, &features, &checkpoints, &dir, all, out),
        Some(Command::Compare { features, out: dir, .. }) => commands::compare(&ctx, &features, &dir, out),
        Some(Command::Infer { checkpoint, wav }) => commands::infer(&ctx, &checkpoint, &wav, out),
        Some(Command::Gradcheck { threshold }) => commands::gradcheck(&ctx, threshold, out),
    }
}

/// Runs the tool with `args` (program name first) and returns the exit status.
pub fn run_with_args<I, T>(args: I, out: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { crate::EXIT_USAGE } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli, out) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let stdout = std::io::stdout();
    let mut lock = stdout.lock();
    run_with_args(args, &mut lock)
}
