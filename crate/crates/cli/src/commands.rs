//! Subcommand implementations.

use std::path::{Path, PathBuf};

use clap::Args;
use serde::Serialize;

use retroquant::dataset::LabeledDataset;
use retroquant::error::{Error, Result};
use retroquant::harness::{
    evaluate, random_gaussian_dataset, sensitivity_report, synth_dataset_role, train_reference,
    Arch, EvalReport, SplitRole, TrainConfig,
};
use retroquant::hybrid::{hybrid_assign, pc_layer_fraction, SchemeAssignment};
use retroquant::io::{sig9, write_atomic};
use retroquant::model::Model;
use retroquant::quant::{
    build_nonuniform_quant_model, build_quant_model, calibrate_activations, Calibration,
    QuantModel, SchemeLabel,
};
use retroquant::quantfile::{load_quant_model, save_quant_model};
use retroquant::synthesis::{generate_dataset, GenConfig};

use crate::params::*;

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

#[derive(Args)]
pub struct TrainArgs {
    /// Training dataset directory
    #[arg(long)]
    data: PathBuf,
    /// Output model directory
    #[arg(long)]
    out: PathBuf,
    /// Architecture: cnn_bn, cnn_plain, mlp or cnn_deep (default cnn_bn)
    #[arg(long)]
    arch: Option<String>,
    /// Training epochs (default 6)
    #[arg(long)]
    epochs: Option<usize>,
    /// Learning rate (default 0.01)
    #[arg(long)]
    lr: Option<f64>,
    /// Batch size (default 32)
    #[arg(long)]
    batch: Option<usize>,
    /// RNG seed (default 42)
    #[arg(long)]
    seed: Option<u64>,
    /// JSON config file with the same keys (flags override)
    #[arg(long)]
    config: Option<PathBuf>,
}

pub fn train(args: TrainArgs) -> Result<()> {
    let base: TrainParams = load_config(args.config.as_deref())?;
    let params = TrainParams {
        arch: args.arch.unwrap_or(base.arch),
        epochs: resolve(args.epochs, base.epochs),
        learning_rate: resolve(args.lr, base.learning_rate),
        batch_size: resolve(args.batch, base.batch_size),
        seed: resolve(args.seed, base.seed),
    };
    let arch = Arch::parse(&params.arch)?;
    let data = LabeledDataset::load(&args.data)?;
    let outcome = train_reference(
        arch,
        &data,
        &TrainConfig {
            epochs: params.epochs,
            learning_rate: params.learning_rate,
            batch_size: params.batch_size,
            seed: params.seed,
        },
    )?;
    outcome.model.save(&args.out)?;
    echo_config(&params, &args.out, "train_config.json")?;
    let losses: Vec<f64> = outcome.epoch_losses.iter().map(|&l| sig9(l)).collect();
    write_atomic(
        &args.out.join("train_losses.json"),
        serde_json::to_string_pretty(&losses)?.as_bytes(),
    )?;
    println!(
        "trained {} for {} epochs, final loss {:.4}",
        params.arch,
        params.epochs,
        outcome.epoch_losses.last().copied().unwrap_or(f64::NAN)
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// synth-data
// ---------------------------------------------------------------------------

#[derive(Args)]
pub struct SynthDataArgs {
    /// Output dataset directory
    #[arg(long)]
    out: PathBuf,
    /// Number of classes (default 10)
    #[arg(long)]
    classes: Option<usize>,
    /// Samples per class (default 100)
    #[arg(long)]
    per_class: Option<usize>,
    /// Sample shape, e.g. 1x16x16 (default 1x16x16)
    #[arg(long)]
    shape: Option<String>,
    /// Noise split: train or test; both roles of one seed share class
    /// templates (default train)
    #[arg(long)]
    role: Option<String>,
    /// RNG seed (default 42)
    #[arg(long)]
    seed: Option<u64>,
    /// JSON config file with the same keys (flags override)
    #[arg(long)]
    config: Option<PathBuf>,
}

pub fn synth_data(args: SynthDataArgs) -> Result<()> {
    let base: SynthDataParams = load_config(args.config.as_deref())?;
    let params = SynthDataParams {
        classes: resolve(args.classes, base.classes),
        per_class: resolve(args.per_class, base.per_class),
        shape: match args.shape {
            Some(s) => parse_shape(&s)?,
            None => base.shape,
        },
        role: args.role.unwrap_or(base.role),
        seed: resolve(args.seed, base.seed),
    };
    let role = SplitRole::parse(&params.role)?;
    let ds = synth_dataset_role(
        params.seed,
        role,
        params.classes,
        params.per_class,
        &params.shape,
    )?;
    ds.save(&args.out)?;
    echo_config(&params, &args.out, "synth_config.json")?;
    println!("wrote {} samples to {}", ds.len(), args.out.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// gen
// ---------------------------------------------------------------------------

#[derive(Args)]
pub struct GenArgs {
    /// Trained FP32 model directory
    #[arg(long)]
    model: PathBuf,
    /// Output dataset directory
    #[arg(long)]
    out: PathBuf,
    /// Samples per class (default 32)
    #[arg(long)]
    per_class: Option<usize>,
    /// Descent epochs per class (default 500)
    #[arg(long)]
    epochs: Option<usize>,
    /// Learning rate (default 0.05)
    #[arg(long)]
    lr: Option<f64>,
    /// RNG seed (default 42)
    #[arg(long)]
    seed: Option<u64>,
    /// Weight of the batch-norm statistics loss (default 1)
    #[arg(long)]
    wbn: Option<f64>,
    /// Weight of the global-Gaussian loss (default 1)
    #[arg(long)]
    wg: Option<f64>,
    /// Weight of the class loss (default 1)
    #[arg(long)]
    wc: Option<f64>,
    /// JSON config file with the same keys (flags override)
    #[arg(long)]
    config: Option<PathBuf>,
}

pub fn gen(args: GenArgs) -> Result<()> {
    let base: GenParams = load_config(args.config.as_deref())?;
    let params = GenParams {
        per_class: resolve(args.per_class, base.per_class),
        epochs: resolve(args.epochs, base.epochs),
        learning_rate: resolve(args.lr, base.learning_rate),
        seed: resolve(args.seed, base.seed),
        weight_bn: resolve(args.wbn, base.weight_bn),
        weight_gauss: resolve(args.wg, base.weight_gauss),
        weight_class: resolve(args.wc, base.weight_class),
    };
    let model = Model::load(&args.model)?;
    let template = GenConfig {
        epochs: params.epochs,
        learning_rate: params.learning_rate,
        batch_size: params.per_class,
        target_class: 0,
        seed: params.seed,
        loss_weights: (params.weight_bn, params.weight_gauss, params.weight_class),
    };
    let ds = generate_dataset(&model, params.per_class, &template)?;
    ds.save(&args.out)?;
    echo_config(&params, &args.out, "gen_config.json")?;
    println!(
        "synthesized {} samples ({} per class) from {}",
        ds.len(),
        params.per_class,
        model.name
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// calibrate
// ---------------------------------------------------------------------------

#[derive(Args)]
pub struct CalibrateArgs {
    /// Trained FP32 model directory
    #[arg(long)]
    model: PathBuf,
    /// Calibration dataset directory
    #[arg(long)]
    calib: PathBuf,
    /// Output directory for calibration.json
    #[arg(long)]
    out: PathBuf,
    /// Activation bit width: 4, 6 or 8 (default 8)
    #[arg(long)]
    abits: Option<u8>,
    /// JSON config file with the same keys (flags override)
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Serialize)]
struct CalibrationFile {
    format: &'static str,
    version: u32,
    activation_bits: u8,
    points: Vec<CalibrationEntry>,
}

#[derive(Serialize)]
struct CalibrationEntry {
    layer: usize,
    location: retroquant::model::PointLocation,
    min: f64,
    max: f64,
    scale: f64,
    zero_point: i32,
}

fn calibration_file(cal: &Calibration) -> CalibrationFile {
    CalibrationFile {
        format: "retroquant-calibration",
        version: 1,
        activation_bits: cal.bits,
        points: cal
            .points
            .iter()
            .map(|p| CalibrationEntry {
                layer: p.point.layer_index,
                location: p.point.location,
                min: sig9(p.min as f64),
                max: sig9(p.max as f64),
                scale: sig9(p.params.scales[0]),
                zero_point: p.params.zero_points[0],
            })
            .collect(),
    }
}

pub fn calibrate(args: CalibrateArgs) -> Result<()> {
    let base: CalibrateParams = load_config(args.config.as_deref())?;
    let params = CalibrateParams {
        activation_bits: resolve(args.abits, base.activation_bits),
    };
    let model = Model::load(&args.model)?;
    let calib = LabeledDataset::load(&args.calib)?;
    let cal = calibrate_activations(&model, &calib, params.activation_bits)?;
    write_atomic(
        &args.out.join("calibration.json"),
        serde_json::to_string_pretty(&calibration_file(&cal))?.as_bytes(),
    )?;
    echo_config(&params, &args.out, "calibrate_config.json")?;
    println!("calibrated {} activation points", cal.points.len());
    Ok(())
}

// ---------------------------------------------------------------------------
// quantize
// ---------------------------------------------------------------------------

#[derive(Args)]
pub struct QuantizeArgs {
    /// Trained FP32 model directory
    #[arg(long)]
    model: PathBuf,
    /// Calibration dataset directory
    #[arg(long)]
    calib: PathBuf,
    /// Output quantized-model directory
    #[arg(long)]
    out: PathBuf,
    /// Weight scheme: pt, pc, hybrid or nonuniform (default pt)
    #[arg(long)]
    scheme: Option<String>,
    /// Hybrid sensitivity threshold (default 0)
    #[arg(long)]
    th: Option<f64>,
    /// Weight bit width: 4, 6, 8, or 32 for pass-through (default 8)
    #[arg(long)]
    wbits: Option<u8>,
    /// Activation bit width: 4, 6, 8, or 32 for pass-through (default 8)
    #[arg(long)]
    abits: Option<u8>,
    /// JSON config file with the same keys (flags override)
    #[arg(long)]
    config: Option<PathBuf>,
}

fn build_by_scheme(
    model: &Model,
    scheme: &str,
    calib: &LabeledDataset,
    threshold: f64,
    weight_bits: u8,
    activation_bits: u8,
) -> Result<(QuantModel, Option<SchemeAssignment>)> {
    let cal = if activation_bits == 32 {
        None
    } else {
        Some(calibrate_activations(model, calib, activation_bits)?)
    };
    match scheme {
        "pt" | "pc" => {
            let label = if scheme == "pt" {
                SchemeLabel::Pt
            } else {
                SchemeLabel::Pc
            };
            let assignment = SchemeAssignment::uniform(model, label, weight_bits);
            let qm = build_quant_model(
                model,
                &assignment.labels(),
                cal.as_ref(),
                weight_bits,
                activation_bits,
            )?;
            Ok((qm, None))
        }
        "hybrid" => {
            if weight_bits == 32 {
                return Err(Error::Config(
                    "hybrid scheme needs a real weight bit width".into(),
                ));
            }
            let assignment = hybrid_assign(model, calib, threshold, weight_bits)?;
            let mut qm = build_quant_model(
                model,
                &assignment.labels(),
                cal.as_ref(),
                weight_bits,
                activation_bits,
            )?;
            // record the requested scheme even when the threshold assigns
            // every layer the same label
            qm.scheme = retroquant::quant::SchemeKind::Hybrid;
            Ok((qm, Some(assignment)))
        }
        "nonuniform" => {
            let qm =
                build_nonuniform_quant_model(model, cal.as_ref(), weight_bits, activation_bits)?;
            Ok((qm, None))
        }
        other => Err(Error::Config(format!(
            "unknown scheme {other:?} (expected pt, pc, hybrid or nonuniform)"
        ))),
    }
}

#[derive(Serialize)]
struct HybridFile<'a> {
    threshold: f64,
    weight_bits: u8,
    pc_layers: usize,
    total_layers: usize,
    pc_fraction: f64,
    layers: Vec<HybridLayerEntry<'a>>,
}

#[derive(Serialize)]
struct HybridLayerEntry<'a> {
    index: usize,
    kind: &'a str,
    error_pt: f64,
    error_pc: f64,
    label: SchemeLabel,
}

fn write_hybrid_report(assignment: &SchemeAssignment, dir: &Path) -> Result<()> {
    let (pc, total, fraction) = pc_layer_fraction(assignment);
    let file = HybridFile {
        threshold: assignment.threshold,
        weight_bits: assignment.weight_bits,
        pc_layers: pc,
        total_layers: total,
        pc_fraction: sig9(fraction),
        layers: assignment
            .layers
            .iter()
            .map(|l| HybridLayerEntry {
                index: l.index,
                kind: l.kind.name(),
                error_pt: sig9(l.error_pt),
                error_pc: sig9(l.error_pc),
                label: l.label,
            })
            .collect(),
    };
    write_atomic(
        &dir.join("hybrid.json"),
        serde_json::to_string_pretty(&file)?.as_bytes(),
    )?;
    write_atomic(&dir.join("hybrid.csv"), assignment.to_csv().as_bytes())?;
    Ok(())
}

pub fn quantize(args: QuantizeArgs) -> Result<()> {
    let base: QuantizeParams = load_config(args.config.as_deref())?;
    let params = QuantizeParams {
        scheme: args.scheme.unwrap_or(base.scheme),
        threshold: resolve(args.th, base.threshold),
        weight_bits: resolve(args.wbits, base.weight_bits),
        activation_bits: resolve(args.abits, base.activation_bits),
    };
    if !params.threshold.is_finite() {
        return Err(Error::Config("threshold must be finite".into()));
    }
    let model = Model::load(&args.model)?;
    let calib = LabeledDataset::load(&args.calib)?;
    let (qm, assignment) = build_by_scheme(
        &model,
        &params.scheme,
        &calib,
        params.threshold,
        params.weight_bits,
        params.activation_bits,
    )?;
    save_quant_model(&qm, &args.out)?;
    if let Some(assignment) = &assignment {
        write_hybrid_report(assignment, &args.out)?;
    }
    echo_config(&params, &args.out, "quantize_config.json")?;
    println!(
        "quantized {} with scheme {} (W{}A{})",
        model.name, params.scheme, params.weight_bits, params.activation_bits
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

#[derive(Args)]
pub struct EvalArgs {
    /// Model directory; evaluated as a quantized model when it contains
    /// quant.json, as FP32 otherwise
    #[arg(long)]
    model: PathBuf,
    /// Evaluation dataset directory
    #[arg(long)]
    data: PathBuf,
    /// Output directory for report.json / report.csv
    #[arg(long)]
    out: PathBuf,
}

fn eval_csv(reports: &[EvalReport]) -> String {
    let mut out = String::from("model,scheme,weight_bits,activation_bits,correct,total,top1\n");
    for r in reports {
        out.push_str(&format!(
            "{},{},{},{},{},{},{:.9e}\n",
            r.model, r.scheme, r.weight_bits, r.activation_bits, r.correct, r.total, r.top1
        ));
    }
    out
}

fn write_eval_reports(reports: &[EvalReport], dir: &Path) -> Result<()> {
    let rounded: Vec<EvalReport> = reports
        .iter()
        .map(|r| EvalReport {
            top1: sig9(r.top1),
            ..r.clone()
        })
        .collect();
    write_atomic(
        &dir.join("report.json"),
        serde_json::to_string_pretty(&rounded)?.as_bytes(),
    )?;
    write_atomic(&dir.join("report.csv"), eval_csv(&rounded).as_bytes())?;
    Ok(())
}

pub fn eval(args: EvalArgs) -> Result<()> {
    let data = LabeledDataset::load(&args.data)?;
    let report = if args.model.join("quant.json").exists() {
        let qm = load_quant_model(&args.model)?;
        evaluate(&qm, &data)?
    } else {
        let model = Model::load(&args.model)?;
        evaluate(&model, &data)?
    };
    println!(
        "{} [{} W{}A{}]: top1 {:.4} ({}/{})",
        report.model,
        report.scheme,
        report.weight_bits,
        report.activation_bits,
        report.top1,
        report.correct,
        report.total
    );
    write_eval_reports(std::slice::from_ref(&report), &args.out)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// sensitivity
// ---------------------------------------------------------------------------

#[derive(Args)]
pub struct SensitivityArgs {
    /// Trained FP32 model directory
    #[arg(long)]
    model: PathBuf,
    /// Held-out real training data directory
    #[arg(long)]
    real: PathBuf,
    /// Model-synthesized data directory
    #[arg(long)]
    retro: PathBuf,
    /// Random-Gaussian data directory; generated on the fly when omitted
    #[arg(long)]
    random: Option<PathBuf>,
    /// Output directory
    #[arg(long)]
    out: PathBuf,
    /// Granularity under test: pt or pc (default pc)
    #[arg(long)]
    scheme: Option<String>,
    /// Weight bit width (default 8)
    #[arg(long)]
    bits: Option<u8>,
    /// JSON config file with the same keys (flags override)
    #[arg(long)]
    config: Option<PathBuf>,
}

pub fn sensitivity(args: SensitivityArgs) -> Result<()> {
    let base: SensitivityParams = load_config(args.config.as_deref())?;
    let params = SensitivityParams {
        scheme: args.scheme.unwrap_or(base.scheme),
        bits: resolve(args.bits, base.bits),
    };
    let label = match params.scheme.as_str() {
        "pt" => SchemeLabel::Pt,
        "pc" => SchemeLabel::Pc,
        other => {
            return Err(Error::Config(format!(
                "unknown scheme {other:?} (expected pt or pc)"
            )))
        }
    };
    let model = Model::load(&args.model)?;
    let real = LabeledDataset::load(&args.real)?;
    let retro = LabeledDataset::load(&args.retro)?;
    let random = match &args.random {
        Some(p) => LabeledDataset::load(p)?,
        None => random_gaussian_dataset(
            retro.seed,
            retro.len(),
            &model.input_shape,
            model.class_count,
        )?,
    };
    let mut report = sensitivity_report(&model, &real, &retro, &random, label, params.bits)?;
    report.real = report.real.iter().map(|&v| sig9(v)).collect();
    report.retro = report.retro.iter().map(|&v| sig9(v)).collect();
    report.random = report.random.iter().map(|&v| sig9(v)).collect();
    report.dist_retro_real = sig9(report.dist_retro_real);
    report.dist_random_real = sig9(report.dist_random_real);
    write_atomic(
        &args.out.join("sensitivity.json"),
        serde_json::to_string_pretty(&report)?.as_bytes(),
    )?;
    write_atomic(
        &args.out.join("sensitivity.csv"),
        report.to_csv().as_bytes(),
    )?;
    echo_config(&params, &args.out, "sensitivity_config.json")?;
    println!(
        "d(retro, real) = {:.4e}; d(random, real) = {:.4e}",
        report.dist_retro_real, report.dist_random_real
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// report
// ---------------------------------------------------------------------------

#[derive(Args)]
pub struct ReportArgs {
    /// Trained FP32 model directory
    #[arg(long)]
    model: PathBuf,
    /// Calibration dataset directory
    #[arg(long)]
    calib: PathBuf,
    /// Held-out evaluation dataset directory
    #[arg(long)]
    test: PathBuf,
    /// Output directory
    #[arg(long)]
    out: PathBuf,
    /// Hybrid threshold (default 0)
    #[arg(long)]
    th: Option<f64>,
    /// Weight bit width (default 8)
    #[arg(long)]
    wbits: Option<u8>,
    /// Activation bit width (default 8)
    #[arg(long)]
    abits: Option<u8>,
    /// JSON config file with the same keys (flags override)
    #[arg(long)]
    config: Option<PathBuf>,
}

pub fn report(args: ReportArgs) -> Result<()> {
    let base: ReportParams = load_config(args.config.as_deref())?;
    let params = ReportParams {
        threshold: resolve(args.th, base.threshold),
        weight_bits: resolve(args.wbits, base.weight_bits),
        activation_bits: resolve(args.abits, base.activation_bits),
    };
    let model = Model::load(&args.model)?;
    let calib = LabeledDataset::load(&args.calib)?;
    let test = LabeledDataset::load(&args.test)?;

    let mut reports = vec![evaluate(&model, &test)?];
    let mut hybrid_assignment = None;
    for scheme in ["pt", "pc", "hybrid", "nonuniform"] {
        let (qm, assignment) = build_by_scheme(
            &model,
            scheme,
            &calib,
            params.threshold,
            params.weight_bits,
            params.activation_bits,
        )?;
        reports.push(evaluate(&qm, &test)?);
        if let Some(a) = assignment {
            hybrid_assignment = Some(a);
        }
    }
    write_eval_reports(&reports, &args.out)?;
    if let Some(assignment) = &hybrid_assignment {
        write_hybrid_report(assignment, &args.out)?;
    }
    echo_config(&params, &args.out, "report_config.json")?;
    for r in &reports {
        println!(
            "{:<12} W{:<2}A{:<2} top1 {:.4}",
            r.scheme, r.weight_bits, r.activation_bits, r.top1
        );
    }
    Ok(())
}
