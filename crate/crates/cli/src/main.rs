//! `mlzsl`: synthesise datasets, train, evaluate, predict and gradient-check
//! the multi-label zero-shot head.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "mlzsl", version, about = "Multi-label zero-shot learning toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Configuration sources shared by every command. Later sources win:
/// config file, then `--set`, then dedicated flags.
#[derive(Args, Debug, Default)]
pub struct ConfigArgs {
    /// Flat `key = value` config file.
    #[arg(long, short)]
    pub config: Option<PathBuf>,
    /// Override one config key (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[arg(long)]
    pub features: Option<PathBuf>,
    #[arg(long)]
    pub vectors: Option<PathBuf>,
    #[arg(long)]
    pub split: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// `1` for single-threaded, `0` for all cores.
    #[arg(long)]
    pub threads: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset: features.mzft, vectors.txt, split.txt.
    Synth {
        /// Synthesis spec (`key = value`); defaults apply when omitted.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long, short)]
        out: PathBuf,
        /// Override one spec key (repeatable).
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Train on records without unseen labels and write a checkpoint.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        no_pyramid: bool,
        #[arg(long)]
        no_pfa: bool,
        #[arg(long)]
        no_sa: bool,
        /// Also write the per-epoch loss log here.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on records with unseen labels.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// zsl or gzsl.
        #[arg(long)]
        task: Option<String>,
        /// Write the machine-readable report (JSON) here.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Print the top-K labels of every record.
    Predict {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        task: Option<String>,
        #[arg(long, default_value_t = 3)]
        top: usize,
        /// Write predictions here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference check of every parameter group on a toy problem.
    Gradcheck {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Samples in the toy batch.
        #[arg(long, default_value_t = 2)]
        samples: usize,
        /// Coordinates checked per tensor; 0 checks all.
        #[arg(long, default_value_t = 64)]
        coords: usize,
        /// Added to the analytic gradient; exercises failure reporting.
        #[arg(long, hide = true, default_value_t = 0.0)]
        perturb: f64,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { commands::EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Synth { spec, out, set } => commands::synth(spec.as_deref(), &out, &set),
        Command::Train {
            cfg,
            checkpoint,
            epochs,
            no_pyramid,
            no_pfa,
            no_sa,
            log,
        } => commands::train(&cfg, checkpoint, epochs, [no_pyramid, no_pfa, no_sa], log.as_deref()),
        Command::Eval {
            cfg,
            checkpoint,
            task,
            report,
        } => commands::eval(&cfg, &checkpoint, task.as_deref(), report.as_deref()),
        Command::Predict {
            cfg,
            checkpoint,
            task,
            top,
            out,
        } => commands::predict(&cfg, &checkpoint, task.as_deref(), top, out.as_deref()),
        Command::Gradcheck {
            cfg,
            samples,
            coords,
            perturb,
        } => commands::gradcheck(&cfg, samples, coords, perturb),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}
