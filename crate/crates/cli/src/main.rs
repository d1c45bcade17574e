//! `retroquant` — data-free post-training quantization pipeline.
//!
//! Subcommands cover the full flow: train a desk-scale FP32 reference model
//! on synthetic data, synthesize calibration data from the model itself,
//! calibrate activation ranges, quantize under per-tensor / per-channel /
//! hybrid / non-uniform schemes, evaluate top-1 accuracy and produce
//! sensitivity and summary reports. All randomness flows from explicit
//! seeds; reruns with equal arguments produce byte-identical outputs.

mod commands;
mod params;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "retroquant",
    version,
    about = "Data-free post-training quantization toolkit"
)]
struct Cli {
    /// Worker threads (default: available cores; falls back to the
    /// RETROQUANT_THREADS environment variable)
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train an FP32 reference model on a labeled dataset
    Train(commands::TrainArgs),
    /// Generate a synthetic template-blob dataset
    SynthData(commands::SynthDataArgs),
    /// Synthesize calibration data from a trained model
    Gen(commands::GenArgs),
    /// Calibrate activation ranges over a dataset
    Calibrate(commands::CalibrateArgs),
    /// Quantize a model's weights and activations
    Quantize(commands::QuantizeArgs),
    /// Evaluate top-1 accuracy of an FP32 or quantized model
    Eval(commands::EvalArgs),
    /// Per-layer sensitivity profiles under three calibration datasets
    Sensitivity(commands::SensitivityArgs),
    /// Accuracy summary across quantization schemes
    Report(commands::ReportArgs),
}

fn main() -> ExitCode {
    let cli = Cli::parse();

    let threads = cli.threads.or_else(|| {
        std::env::var("RETROQUANT_THREADS")
            .ok()
            .and_then(|v| v.parse().ok())
    });
    if let Some(n) = threads {
        // a failed build means a pool already exists; keep going
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global();
    }

    let result = match cli.command {
        Command::Train(args) => commands::train(args),
        Command::SynthData(args) => commands::synth_data(args),
        Command::Gen(args) => commands::gen(args),
        Command::Calibrate(args) => commands::calibrate(args),
        Command::Quantize(args) => commands::quantize(args),
        Command::Eval(args) => commands::eval(args),
        Command::Sensitivity(args) => commands::sensitivity(args),
        Command::Report(args) => commands::report(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let line = serde_json::json!({
                "error": err.to_string(),
                "kind": err.kind(),
            });
            eprintln!("{line}");
            ExitCode::FAILURE
        }
    }
}
