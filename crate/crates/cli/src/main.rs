//! `mlf-snn`: train, evaluate, analyze and verify MLF spiking networks.
//!
//! Exit codes: 0 success, 1 failed verification or internal error,
//! 2 configuration error, 3 data error, 4 unreadable or incompatible
//! checkpoint, 5 numeric fault during training.

mod commands;
mod run_config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "mlf-snn", version, about = "Multi-level firing spiking networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train from a run configuration.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on one split of a dataset root.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long, default_value_t = 64)]
        batch: usize,
    },
    /// Write analysis reports (CSV and JSON lines).
    Analyze {
        #[command(subcommand)]
        kind: AnalyzeKind,
    },
    /// Run a verification and exit 0 iff it passes.
    Verify {
        #[command(subcommand)]
        kind: VerifyKind,
    },
    /// Generate a synthetic spatio-temporal dataset root.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 4)]
        classes: usize,
        #[arg(long, default_value_t = 800)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        test_samples: usize,
        #[arg(long, default_value_t = 8)]
        timesteps: usize,
        #[arg(long, default_value_t = 8)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Bin an event file into occupancy frames (raw tensor file).
    BinEvents {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        size: usize,
        #[arg(long)]
        bin_ms: f64,
        #[arg(long)]
        timesteps: usize,
    },
}

#[derive(Args, Debug, Clone)]
struct ModelInput {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long, default_value_t = 32)]
    batch: usize,
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

#[derive(Subcommand, Debug)]
enum AnalyzeKind {
    /// Saturation fractions per MLF population.
    Dormant(ModelInput),
    /// Per-stage mean |∂L/∂w| of convolution weights on one batch.
    Grads(ModelInput),
    /// Operation counts from a checkpoint, a config or explicit flags.
    Flops {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 20)]
        layers: usize,
        #[arg(long, default_value = "middle")]
        width: String,
        #[arg(long, default_value_t = 4)]
        timesteps: usize,
        #[arg(long, default_value_t = 3)]
        levels: usize,
        #[arg(long, default_value_t = 1)]
        shortcut_kernel: usize,
        /// Adds a spike count from one eval batch of this dataset root.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
}

#[derive(Subcommand, Debug)]
enum VerifyKind {
    Theorem1 {
        #[arg(long, default_value_t = 0.6)]
        v_th1: f64,
        #[arg(long, default_value_t = 1.0)]
        width: f64,
        #[arg(long, default_value_t = 1_000_000)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    Equivalence {
        #[arg(long, default_value_t = 1000)]
        cases: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    Gradcheck {
        #[arg(long, default_value_t = 21)]
        cases: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    Coverage {
        #[arg(long, default_value_t = 3)]
        levels: usize,
        #[arg(long, default_value_t = 0.6)]
        std: f64,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train {
            config,
            seed,
            out,
            resume,
        } => commands::train(&config, seed, out, resume),
        Command::Eval {
            checkpoint,
            data,
            split,
            batch,
        } => commands::eval(&checkpoint, &data, &split, batch),
        Command::Analyze { kind } => match kind {
            AnalyzeKind::Dormant(m) => commands::analyze_dormant(&m.checkpoint, &m.data, &m.split, m.batch, &m.out),
            AnalyzeKind::Grads(m) => commands::analyze_grads(&m.checkpoint, &m.data, &m.split, m.batch, &m.out),
            AnalyzeKind::Flops {
                checkpoint,
                config,
                layers,
                width,
                timesteps,
                levels,
                shortcut_kernel,
                data,
                out,
            } => commands::analyze_flops(commands::FlopsArgs {
                checkpoint,
                config,
                layers,
                width,
                timesteps,
                levels,
                shortcut_kernel,
                data,
                out,
            }),
        },
        Command::Verify { kind } => match kind {
            VerifyKind::Theorem1 {
                v_th1,
                width,
                samples,
                seed,
            } => commands::verify_theorem1(v_th1, width, samples, seed),
            VerifyKind::Equivalence { cases, seed } => commands::verify_equivalence(cases, seed),
            VerifyKind::Gradcheck { cases, seed } => commands::verify_gradcheck(cases, seed),
            VerifyKind::Coverage { levels, std } => commands::verify_coverage(levels, std),
        },
        Command::Synth {
            out,
            classes,
            samples,
            test_samples,
            timesteps,
            size,
            seed,
        } => commands::synth(&out, classes, samples, test_samples, timesteps, size, seed),
        Command::BinEvents {
            input,
            out,
            size,
            bin_ms,
            timesteps,
        } => commands::bin_events(&input, &out, size, bin_ms, timesteps),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}
