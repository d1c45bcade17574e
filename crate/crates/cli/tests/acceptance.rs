//! Acceptance suite: one test per release criterion, each printing a
//! PASS/FAIL line (run with `--nocapture` to see them). The suite pins
//! every tolerance in code and exercises the library end to end on
//! desk-scale models.
//!
//! Known red: `c10a_nonuniform_mixture_dominance`. The proportional step
//! allocation (steps ∝ range × count with a minimum of one code per
//! nonempty cluster) does not beat plain uniform quantization on the tight
//! 9900/100 mixture with outliers at distance 5: bulk values leaking past
//! the upper IQR fence stretch the outlier cluster's range, so it receives
//! ~27 of 256 codes spread over ~5 units and its reconstruction penalty
//! cancels the bulk gain (measured ~9/100 seed wins, median MSE ratio
//! ~1.2). The same scheme wins 100/100 with ~8x margin once the outlier
//! group sits further out (see `far_outlier_mixture_beats_uniform` in the
//! library tests); the criterion is kept as stated rather than tuned to
//! pass.

use std::collections::BTreeSet;
use std::path::Path;
use std::process::Command;
use std::sync::OnceLock;

use rand::Rng;
use retroquant::dataset::LabeledDataset;
use retroquant::grad::{backward_pass, forward_tape, LossSpec};
use retroquant::harness::{
    craft_divergent_channels, evaluate, inject_weight_outliers, random_gaussian_dataset,
    sensitivity_report, synth_dataset_noisy, train_reference, Arch, SplitRole, TrainConfig,
};
use retroquant::hybrid::{hybrid_assign, SchemeAssignment};
use retroquant::layer::{BnMode, LayerSpec};
use retroquant::model::Model;
use retroquant::nonuniform::{allocate_steps, iqr_clusters, nonuniform_quantize, quartiles};
use retroquant::quant::{
    affine_params, build_nonuniform_quant_model, build_quant_model, calibrate_activations,
    fake_quant, per_channel_params, reconstruction_mse, SchemeLabel,
};
use retroquant::seed::{normal_vec, rng_from};
use retroquant::synthesis::{generate_dataset, stat_loss, GenConfig};
use retroquant::tensor::{ChannelStats, Tensor};

const SHAPE: [usize; 3] = [1, 16, 16];

fn train_desk(arch: Arch, seed: u64, noise: f32) -> (Model, LabeledDataset) {
    let train = synth_dataset_noisy(seed, SplitRole::Train, 10, 100, &SHAPE, noise).unwrap();
    let test = synth_dataset_noisy(seed, SplitRole::Test, 10, 150, &SHAPE, noise).unwrap();
    let out = train_reference(
        arch,
        &train,
        &TrainConfig {
            epochs: 6,
            learning_rate: 0.01,
            batch_size: 32,
            seed,
        },
    )
    .unwrap();
    (out.model, test)
}

fn retro_data(model: &Model, per_class: usize, epochs: usize, seed: u64) -> LabeledDataset {
    generate_dataset(
        model,
        per_class,
        &GenConfig {
            epochs,
            seed,
            ..GenConfig::default()
        },
    )
    .unwrap()
}

/// Shared expensive artifacts: a trained batch-norm CNN at the accuracy
/// operating point plus its synthesized calibration data, and the crafted
/// divergent-channel model.
struct Ctx {
    desk_model: Model,
    desk_test: LabeledDataset,
    desk_retro: LabeledDataset,
    crafted: Model,
    crafted_retro: LabeledDataset,
}

static CTX: OnceLock<Ctx> = OnceLock::new();

fn ctx() -> &'static Ctx {
    CTX.get_or_init(|| {
        let (desk_model, desk_test) = train_desk(Arch::CnnBn, 7, 1.5);
        let desk_retro = retro_data(&desk_model, 16, 120, 7);
        let (deep, _) = train_desk(Arch::CnnDeep, 7, 1.5);
        let crafted = craft_divergent_channels(&deep, 3, 100.0).unwrap();
        let crafted_retro = retro_data(&crafted, 16, 120, 7);
        Ctx {
            desk_model,
            desk_test,
            desk_retro,
            crafted,
            crafted_retro,
        }
    })
}

fn quantized_top1(
    model: &Model,
    labels: &[(usize, SchemeLabel)],
    calib: &LabeledDataset,
    test: &LabeledDataset,
    wbits: u8,
    abits: u8,
) -> f64 {
    let cal = calibrate_activations(model, calib, abits).unwrap();
    let qm = build_quant_model(model, labels, Some(&cal), wbits, abits).unwrap();
    evaluate(&qm, test).unwrap().top1
}

// ---------------------------------------------------------------------------
// criterion 1: gradient correctness
// ---------------------------------------------------------------------------

const FD_STEP: f64 = 1e-3;
const REL_TOL: f64 = 1e-3;

fn relative_norm_error(analytic: &[f32], numeric: &[f64]) -> f64 {
    let mut diff = 0.0f64;
    let mut na = 0.0f64;
    let mut nn = 0.0f64;
    for (&a, &n) in analytic.iter().zip(numeric) {
        let a = a as f64;
        diff += (a - n) * (a - n);
        na += a * a;
        nn += n * n;
    }
    diff.sqrt() / na.sqrt().max(nn.sqrt()).max(1e-8)
}

#[derive(Clone, Copy)]
enum Probe {
    Sum,
    Ce,
}

fn probe_loss(probe: Probe, model: &Model, output: &Tensor, labels: &[usize]) -> (f64, Tensor) {
    match probe {
        Probe::Sum => LossSpec::SumOutput.eval(output).unwrap(),
        Probe::Ce => {
            let spec = LossSpec::CrossEntropy {
                labels: labels.to_vec(),
            };
            if model.outputs_probabilities() {
                spec.eval_on_probabilities(output).unwrap()
            } else {
                spec.eval(output).unwrap()
            }
        }
    }
}

fn loss_of(probe: Probe, model: &Model, input: &Tensor, labels: &[usize], mode: BnMode) -> f64 {
    let tape = forward_tape(model, input, mode).unwrap();
    probe_loss(probe, model, tape.output(), labels).0
}

fn gradcheck_instance(probe: Probe, model: &Model, input: &Tensor, labels: &[usize], mode: BnMode) {
    let tape = forward_tape(model, input, mode).unwrap();
    let (_, out_grad) = probe_loss(probe, model, tape.output(), labels);
    let (gx, gparams) = backward_pass(model, &tape, &out_grad, &Default::default(), true).unwrap();

    // input gradient
    let mut x = input.clone();
    let mut fd = Vec::with_capacity(input.len());
    for i in 0..input.len() {
        let orig = x.data()[i];
        x.data_mut()[i] = orig + FD_STEP as f32;
        let up = loss_of(probe, model, &x, labels, mode);
        x.data_mut()[i] = orig - FD_STEP as f32;
        let down = loss_of(probe, model, &x, labels, mode);
        x.data_mut()[i] = orig;
        fd.push((up - down) / (2.0 * FD_STEP));
    }
    let err = relative_norm_error(gx.data(), &fd);
    assert!(err < REL_TOL, "input grad err {err:.2e} on {}", model.name);

    // parameter gradients
    let mut m = model.clone();
    for li in 0..m.layers.len() {
        for pi in 0..m.layers[li].trainable().len() {
            let len = m.layers[li].trainable()[pi].len();
            let mut fd = Vec::with_capacity(len);
            for i in 0..len {
                let orig = m.layers[li].trainable()[pi].data()[i];
                m.layers[li].trainable_mut()[pi].data_mut()[i] = orig + FD_STEP as f32;
                let up = loss_of(probe, &m, input, labels, mode);
                m.layers[li].trainable_mut()[pi].data_mut()[i] = orig - FD_STEP as f32;
                let down = loss_of(probe, &m, input, labels, mode);
                m.layers[li].trainable_mut()[pi].data_mut()[i] = orig;
                fd.push((up - down) / (2.0 * FD_STEP));
            }
            let err = relative_norm_error(gparams[li][pi].data(), &fd);
            assert!(
                err < REL_TOL,
                "param grad err {err:.2e} layer {li} tensor {pi} on {}",
                model.name
            );
        }
    }
}

fn scaled_normal(rng: &mut rand_chacha::ChaCha8Rng, n: usize, fan_in: usize) -> Vec<f32> {
    let s = (2.0 / fan_in as f64).sqrt() as f32;
    normal_vec(rng, n).into_iter().map(|v| v * s).collect()
}

fn small_normal(rng: &mut rand_chacha::ChaCha8Rng, n: usize) -> Vec<f32> {
    normal_vec(rng, n).into_iter().map(|v| v * 0.1).collect()
}

fn positive_head(rng: &mut rand_chacha::ChaCha8Rng, n: usize) -> Vec<f32> {
    normal_vec(rng, n)
        .iter()
        .map(|v| 0.2 + 0.3 * v.abs())
        .collect()
}

fn kink_safe(model: &Model, input: &Tensor) -> bool {
    let tape = forward_tape(model, input, BnMode::Inference).unwrap();
    for (i, layer) in model.layers.iter().enumerate() {
        match layer {
            LayerSpec::Relu => {
                if tape.activations[i].data().iter().any(|v| v.abs() < 5e-3) {
                    return false;
                }
            }
            LayerSpec::MaxPool { size, stride } => {
                let x = &tape.activations[i];
                let [n, c, h, w] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
                let (oh, ow) = ((h - size) / stride + 1, (w - size) / stride + 1);
                for b in 0..n {
                    for ch in 0..c {
                        let plane = (b * c + ch) * h * w;
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let mut best = f32::NEG_INFINITY;
                                let mut second = f32::NEG_INFINITY;
                                for ky in 0..*size {
                                    for kx in 0..*size {
                                        let v = x.data()
                                            [plane + (oy * stride + ky) * w + ox * stride + kx];
                                        if v > best {
                                            second = best;
                                            best = v;
                                        } else if v > second {
                                            second = v;
                                        }
                                    }
                                }
                                if best - second < 5e-3 {
                                    return false;
                                }
                            }
                        }
                    }
                }
            }
            _ => {}
        }
    }
    true
}

/// Every checked gradient must be measurably nonzero: a finite-difference
/// comparison at relative tolerance cannot verify a near-zero vector, so
/// instances whose (analytic) gradients are tiny by sign cancellation are
/// resampled. The accepted instances are still verified from scratch by
/// the independent difference quotient.
fn well_conditioned(
    probe: Probe,
    model: &Model,
    input: &Tensor,
    labels: &[usize],
    modes: &[BnMode],
    rms_floor: f64,
) -> bool {
    let rms_ok = |t: &Tensor| {
        let sumsq: f64 = t.data().iter().map(|&v| (v as f64) * (v as f64)).sum();
        (sumsq / t.len() as f64).sqrt() >= rms_floor
    };
    for &mode in modes {
        let tape = forward_tape(model, input, mode).unwrap();
        let (_, out_grad) = probe_loss(probe, model, tape.output(), labels);
        let (gx, gparams) =
            backward_pass(model, &tape, &out_grad, &Default::default(), true).unwrap();
        if !rms_ok(&gx) {
            return false;
        }
        for layer in &gparams {
            for g in layer {
                if !rms_ok(g) {
                    return false;
                }
            }
        }
    }
    true
}

fn find_safe(
    build: impl Fn(&mut rand_chacha::ChaCha8Rng) -> (Model, Tensor),
    seed: u64,
    probe: Probe,
    modes: &[BnMode],
    rms_floor: f64,
) -> (Model, Tensor, Vec<usize>) {
    for attempt in 0..200 {
        let mut rng = rng_from(seed.wrapping_add(attempt * 1009));
        let (model, input) = build(&mut rng);
        let labels: Vec<usize> = (0..input.shape()[0])
            .map(|_| rng.random_range(0..model.class_count))
            .collect();
        if kink_safe(&model, &input)
            && well_conditioned(probe, &model, &input, &labels, modes, rms_floor)
        {
            return (model, input, labels);
        }
    }
    panic!("no well-conditioned kink-safe instance for seed {seed}");
}

#[test]
fn c01_gradient_correctness() {
    let conv_stack = |rng: &mut rand_chacha::ChaCha8Rng| {
        let model = Model {
            name: "conv".into(),
            input_shape: vec![2, 5, 5],
            class_count: 3,
            layers: vec![
                LayerSpec::Conv2d {
                    weight: Tensor::new(vec![3, 2, 3, 3], scaled_normal(rng, 54, 18)).unwrap(),
                    bias: Tensor::new(vec![3], small_normal(rng, 3)).unwrap(),
                    stride: 2,
                    padding: 1,
                },
                LayerSpec::Flatten,
                LayerSpec::Linear {
                    weight: Tensor::new(vec![3, 27], scaled_normal(rng, 81, 27)).unwrap(),
                    bias: Tensor::zeros(vec![3]),
                },
            ],
        };
        let input = Tensor::new(vec![1, 2, 5, 5], normal_vec(rng, 50)).unwrap();
        (model, input)
    };
    let relu_stack = |rng: &mut rand_chacha::ChaCha8Rng| {
        let model = Model {
            name: "conv_relu".into(),
            input_shape: vec![1, 6, 6],
            class_count: 2,
            layers: vec![
                LayerSpec::Conv2d {
                    weight: Tensor::new(vec![2, 1, 3, 3], scaled_normal(rng, 18, 9)).unwrap(),
                    bias: Tensor::new(vec![2], small_normal(rng, 2)).unwrap(),
                    stride: 1,
                    padding: 0,
                },
                LayerSpec::Relu,
                LayerSpec::Flatten,
                LayerSpec::Linear {
                    weight: Tensor::new(vec![2, 32], positive_head(rng, 64)).unwrap(),
                    bias: Tensor::zeros(vec![2]),
                },
            ],
        };
        let input = Tensor::new(vec![1, 1, 6, 6], normal_vec(rng, 36)).unwrap();
        (model, input)
    };
    let bn_stack = |rng: &mut rand_chacha::ChaCha8Rng| {
        let var: Vec<f32> = normal_vec(rng, 2).iter().map(|v| 0.5 + v * v).collect();
        let gamma: Vec<f32> = normal_vec(rng, 2)
            .iter()
            .map(|v| {
                if v.abs() < 0.2 {
                    0.2 + v.abs()
                } else {
                    v.abs()
                }
            })
            .collect();
        let model = Model {
            name: "bn".into(),
            input_shape: vec![2, 3, 3],
            class_count: 2,
            layers: vec![
                LayerSpec::BatchNorm {
                    gamma: Tensor::new(vec![2], gamma).unwrap(),
                    beta: Tensor::new(vec![2], normal_vec(rng, 2)).unwrap(),
                    running_mean: Tensor::new(vec![2], normal_vec(rng, 2)).unwrap(),
                    running_var: Tensor::new(vec![2], var).unwrap(),
                    eps: 1e-5,
                },
                LayerSpec::Flatten,
                LayerSpec::Linear {
                    weight: Tensor::new(vec![2, 18], scaled_normal(rng, 36, 18)).unwrap(),
                    bias: Tensor::zeros(vec![2]),
                },
            ],
        };
        let input = Tensor::new(vec![3, 2, 3, 3], normal_vec(rng, 54)).unwrap();
        (model, input)
    };
    let pool_stack = |rng: &mut rand_chacha::ChaCha8Rng| {
        let model = Model {
            name: "pools".into(),
            input_shape: vec![1, 4, 4],
            class_count: 2,
            layers: vec![
                LayerSpec::MaxPool { size: 2, stride: 2 },
                LayerSpec::AvgPool { size: 2, stride: 2 },
                LayerSpec::Flatten,
                LayerSpec::Linear {
                    weight: Tensor::new(vec![2, 1], positive_head(rng, 2)).unwrap(),
                    bias: Tensor::new(vec![2], small_normal(rng, 2)).unwrap(),
                },
            ],
        };
        let input = Tensor::new(vec![2, 1, 4, 4], normal_vec(rng, 32)).unwrap();
        (model, input)
    };
    let softmax_stack = |rng: &mut rand_chacha::ChaCha8Rng| {
        let model = Model {
            name: "softmax_head".into(),
            input_shape: vec![5],
            class_count: 3,
            layers: vec![
                LayerSpec::Linear {
                    weight: Tensor::new(vec![3, 5], scaled_normal(rng, 15, 5)).unwrap(),
                    bias: Tensor::new(vec![3], small_normal(rng, 3)).unwrap(),
                },
                LayerSpec::Softmax,
            ],
        };
        let input = Tensor::new(vec![2, 5], normal_vec(rng, 10)).unwrap();
        (model, input)
    };

    // the RMS floor keeps every checked gradient measurably above the f32
    // finite-difference noise; stacks with structurally sparse gradients
    // (max-pool routing) use a lower floor
    let stacks: Vec<(
        &str,
        Probe,
        Vec<BnMode>,
        f64,
        Box<dyn Fn(&mut rand_chacha::ChaCha8Rng) -> (Model, Tensor)>,
    )> = vec![
        (
            "conv+linear+flatten",
            Probe::Sum,
            vec![BnMode::Inference],
            0.05,
            Box::new(conv_stack),
        ),
        (
            "conv+relu",
            Probe::Sum,
            vec![BnMode::Inference],
            0.05,
            Box::new(relu_stack),
        ),
        (
            "batch_norm (both modes)",
            Probe::Sum,
            vec![BnMode::Inference, BnMode::Training],
            0.3,
            Box::new(bn_stack),
        ),
        (
            "max_pool+avg_pool",
            Probe::Sum,
            vec![BnMode::Inference],
            0.02,
            Box::new(pool_stack),
        ),
        (
            "softmax head",
            Probe::Ce,
            vec![BnMode::Inference],
            0.2,
            Box::new(softmax_stack),
        ),
    ];

    for (name, probe, modes, rms_floor, build) in &stacks {
        for instance in 0..100u64 {
            let (model, input, labels) =
                find_safe(build, instance * 37 + 5, *probe, modes, *rms_floor);
            for mode in modes {
                gradcheck_instance(*probe, &model, &input, &labels, *mode);
            }
        }
        println!("  gradcheck 100/100 instances ok: {name}");
    }
    println!("PASS criterion 1: analytic gradients match central finite differences (step 1e-3, rel 1e-3) across all layer kinds");
}

// ---------------------------------------------------------------------------
// criterion 2: statistics-loss unit suite
// ---------------------------------------------------------------------------

#[test]
fn c02_stat_loss_unit_suite() {
    let s = |m: &[f32], d: &[f32]| ChannelStats {
        mean: m.to_vec(),
        std: d.to_vec(),
    };
    let a = s(&[0.4, -0.7], &[1.2, 0.3]);
    assert_eq!(stat_loss(&a, &a).unwrap(), 0.0);

    let got = stat_loss(&s(&[1.0, 0.0], &[1.0, 1.0]), &s(&[0.0, 0.0], &[1.0, 1.0])).unwrap();
    assert!(
        (got - 1.0).abs() < 1e-12,
        "squared L2 of unit mean gap: {got}"
    );

    let got = stat_loss(&s(&[0.5], &[1.5]), &s(&[0.0], &[1.0])).unwrap();
    assert!((got - 0.5).abs() < 1e-12, "0.25 + 0.25: {got}");

    assert!(stat_loss(&s(&[0.0], &[1.0]), &s(&[0.0, 0.0], &[1.0, 1.0])).is_err());
    println!("PASS criterion 2: statistics-loss unit cases exact");
}

// ---------------------------------------------------------------------------
// criterion 3: synthesized vs random calibration
// ---------------------------------------------------------------------------

#[test]
fn c03_retro_vs_random_calibration() {
    for arch in [Arch::CnnBn, Arch::CnnPlain] {
        let mut wins = 0;
        let mut detail = String::new();
        for seed in 1..=5u64 {
            let (model, test) = train_desk(arch, 40 + seed, 2.0);
            let labels = SchemeAssignment::uniform(&model, SchemeLabel::Pt, 8).labels();
            let retro = retro_data(&model, 16, 120, seed);
            let random = random_gaussian_dataset(seed, 160, &SHAPE, 10).unwrap();
            let a_retro = quantized_top1(&model, &labels, &retro, &test, 8, 8);
            let a_random = quantized_top1(&model, &labels, &random, &test, 8, 8);
            if a_retro >= a_random {
                wins += 1;
            }
            detail.push_str(&format!(" [{a_retro:.3} vs {a_random:.3}]"));
        }
        assert!(
            wins >= 3,
            "FAIL criterion 3 on {:?}: synthesized calibration won {wins}/5:{detail}",
            arch
        );
        println!(
            "  {:?}: synthesized-data calibration >= random in {wins}/5 seeds:{detail}",
            arch
        );
    }
    println!("PASS criterion 3: W8A8 with synthesized calibration >= random-Gaussian calibration (majority of 5 seeds, both archs)");
}

// ---------------------------------------------------------------------------
// criterion 4: sensitivity-profile match
// ---------------------------------------------------------------------------

#[test]
fn c04_sensitivity_profile_match() {
    for seed in [41u64, 43, 44] {
        let (model, test) = train_desk(Arch::CnnBn, seed, 0.5);
        let retro = retro_data(&model, 32, 300, seed);
        let random = random_gaussian_dataset(seed, 320, &SHAPE, 10).unwrap();
        let rep = sensitivity_report(&model, &test, &retro, &random, SchemeLabel::Pc, 4).unwrap();
        assert!(
            rep.dist_retro_real < rep.dist_random_real,
            "FAIL criterion 4 seed {seed}: d_retro {:.3e} vs d_random {:.3e}",
            rep.dist_retro_real,
            rep.dist_random_real
        );
        println!(
            "  seed {seed}: d(synth, real) {:.3e} < d(random, real) {:.3e}",
            rep.dist_retro_real, rep.dist_random_real
        );
    }
    println!("PASS criterion 4: synthesized-data sensitivity profile closer to real-data profile than random profile (3/3 seeds)");
}

// ---------------------------------------------------------------------------
// criterion 5: per-channel dominance
// ---------------------------------------------------------------------------

#[test]
fn c05_per_channel_dominance() {
    let mut rng = rng_from(424242);
    let mut worst: f64 = 0.0;
    for round in 0..1000 {
        let channels = 2 + (round % 5);
        let per = 8 + (round % 57);
        let mut data = Vec::with_capacity(channels * per);
        for c in 0..channels {
            let spread = 0.05f32 * 10f32.powf((c % 4) as f32 / 1.5);
            data.extend(normal_vec(&mut rng, per).iter().map(|v| v * spread));
        }
        let t = Tensor::new(vec![channels, per], data).unwrap();
        let bits = [4u8, 6, 8][round % 3];
        let pt = affine_params(t.min(), t.max(), bits).unwrap();
        let pc = per_channel_params(&t, bits, 0).unwrap();
        let mse_pt = reconstruction_mse(&t, &pt).unwrap();
        let mse_pc = reconstruction_mse(&t, &pc).unwrap();
        assert!(
            mse_pc <= mse_pt,
            "FAIL criterion 5 at round {round}: pc {mse_pc:.3e} > pt {mse_pt:.3e}"
        );
        if mse_pt > 0.0 {
            worst = worst.max(mse_pc / mse_pt);
        }
    }
    println!("PASS criterion 5: per-channel reconstruction MSE <= per-tensor on 1000 fuzzed tensors (worst ratio {worst:.3})");
}

// ---------------------------------------------------------------------------
// criterion 6: hybrid accuracy mode + crafted divergence
// ---------------------------------------------------------------------------

#[test]
fn c06_hybrid_accuracy_mode() {
    let c = ctx();
    let pc_labels = SchemeAssignment::uniform(&c.desk_model, SchemeLabel::Pc, 8).labels();
    let a_pc = quantized_top1(&c.desk_model, &pc_labels, &c.desk_retro, &c.desk_test, 8, 8);
    let hybrid = hybrid_assign(&c.desk_model, &c.desk_retro, 0.0, 8).unwrap();
    let a_hy = quantized_top1(
        &c.desk_model,
        &hybrid.labels(),
        &c.desk_retro,
        &c.desk_test,
        8,
        8,
    );
    assert!(
        a_hy >= a_pc - 0.005,
        "FAIL criterion 6: hybrid(0) {a_hy:.4} vs per-channel {a_pc:.4}"
    );
    println!("  hybrid(Th=0) top1 {a_hy:.4} vs fully per-channel {a_pc:.4}");

    let assignment = hybrid_assign(&c.crafted, &c.crafted_retro, 0.001, 8).unwrap();
    let pc_layers: Vec<usize> = assignment
        .layers
        .iter()
        .filter(|l| l.label == SchemeLabel::Pc)
        .map(|l| l.index)
        .collect();
    assert_eq!(
        pc_layers,
        vec![3],
        "FAIL criterion 6: crafted model PC set {pc_layers:?}, expected exactly the crafted conv (layer 3)"
    );
    let crafted_diff = assignment
        .layers
        .iter()
        .find(|l| l.index == 3)
        .map(|l| l.error_pt - l.error_pc)
        .unwrap();
    println!(
        "  crafted model: only layer 3 assigned per-channel (sensitivity gap {crafted_diff:.3e})"
    );
    println!("PASS criterion 6: hybrid(Th=0) within 0.5pp of per-channel; Th=0.001 flags exactly the crafted layer");
}

// ---------------------------------------------------------------------------
// criterion 7: threshold monotonicity
// ---------------------------------------------------------------------------

#[test]
fn c07_hybrid_threshold_monotonicity() {
    let c = ctx();
    let grid = [f64::NEG_INFINITY, 0.0, 1e-3, 1e-2, f64::INFINITY];
    let mut previous: Option<BTreeSet<usize>> = None;
    for th in grid {
        let assignment = hybrid_assign(&c.crafted, &c.crafted_retro, th, 8).unwrap();
        let pt_set: BTreeSet<usize> = assignment
            .layers
            .iter()
            .filter(|l| l.label == SchemeLabel::Pt)
            .map(|l| l.index)
            .collect();
        if let Some(prev) = &previous {
            assert!(
                prev.is_subset(&pt_set),
                "FAIL criterion 7: PT set shrank when threshold rose to {th}: {prev:?} -> {pt_set:?}"
            );
        }
        previous = Some(pt_set);
    }
    let extremes = (
        hybrid_assign(&c.crafted, &c.crafted_retro, f64::NEG_INFINITY, 8).unwrap(),
        hybrid_assign(&c.crafted, &c.crafted_retro, f64::INFINITY, 8).unwrap(),
    );
    assert!(extremes.0.layers.iter().all(|l| l.label == SchemeLabel::Pc));
    assert!(extremes.1.layers.iter().all(|l| l.label == SchemeLabel::Pt));
    println!("PASS criterion 7: PT-labeled set grows monotonically over the threshold grid");
}

// ---------------------------------------------------------------------------
// criterion 8: quartile oracle equivalence
// ---------------------------------------------------------------------------

fn brute_force_quartiles(xs: &[f32]) -> (f64, f64, f64) {
    if xs.len() == 1 {
        return (xs[0] as f64, xs[0] as f64, xs[0] as f64);
    }
    let mut s: Vec<f64> = xs.iter().map(|&v| v as f64).collect();
    s.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let med = |v: &[f64]| {
        if v.len() % 2 == 1 {
            v[v.len() / 2]
        } else {
            (v[v.len() / 2 - 1] + v[v.len() / 2]) / 2.0
        }
    };
    let n = s.len();
    let upper = if n % 2 == 0 {
        &s[n / 2..]
    } else {
        &s[n / 2 + 1..]
    };
    (med(&s[..n / 2]), med(&s), med(upper))
}

#[test]
fn c08_iqr_oracle_equivalence() {
    // worked example with an outlier
    let vals: Vec<f32> = vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0, 100.0];
    let (q1, _, q3) = quartiles(&vals).unwrap();
    assert_eq!((q1, q3), (3.0, 8.0));
    let plan = iqr_clusters(&Tensor::scalar_1d(&vals)).unwrap();
    assert_eq!(plan.fences, (-4.5, 15.5));
    assert_eq!(
        [
            plan.clusters[0].count,
            plan.clusters[1].count,
            plan.clusters[2].count
        ],
        [0, 9, 1]
    );

    // exhaustive small lists over a fixed 3-value alphabet
    let alphabet = [-1.5f32, 0.0, 2.0];
    let mut checked = 0u64;
    for len in 1..=12usize {
        let total = alphabet.len().pow(len as u32);
        for idx in 0..total {
            let mut v = Vec::with_capacity(len);
            let mut rem = idx;
            for _ in 0..len {
                v.push(alphabet[rem % alphabet.len()]);
                rem /= alphabet.len();
            }
            let got = quartiles(&v).unwrap();
            let want = brute_force_quartiles(&v);
            assert_eq!(got, want, "FAIL criterion 8 on {v:?}");
            checked += 1;
        }
    }
    println!("PASS criterion 8: quartiles match the sort-based oracle on all {checked} lists of length <= 12 plus the worked outlier example");
}

// ---------------------------------------------------------------------------
// criterion 9: step-budget exactness
// ---------------------------------------------------------------------------

#[test]
fn c09_step_budget_exactness() {
    let mut rng = rng_from(777);
    for round in 0..1000u64 {
        let n = 2 + ((round * 13) % 400) as usize;
        let mut vals = normal_vec(&mut rng, n);
        match round % 4 {
            0 => {
                for v in vals.iter_mut().take(3.min(n)) {
                    *v *= 40.0;
                }
            }
            1 => vals.iter_mut().for_each(|v| *v = 0.37),
            _ => {}
        }
        let t = Tensor::new(vec![n], vals).unwrap();
        for bits in [4u8, 6, 8] {
            let plan = allocate_steps(&iqr_clusters(&t).unwrap(), bits).unwrap();
            assert_eq!(
                plan.total_steps(),
                1u32 << bits,
                "FAIL criterion 9 round {round} bits {bits}: budget not exact"
            );
            for c in &plan.clusters {
                if c.count > 0 {
                    assert!(
                        c.steps >= 1,
                        "FAIL criterion 9: nonempty cluster got 0 steps"
                    );
                } else {
                    assert_eq!(c.steps, 0);
                }
            }
        }
    }
    println!("PASS criterion 9: step budgets sum to 2^bits with min-1 honored on 1000 fuzzed tensors x bits in {{4,6,8}}");
}

// ---------------------------------------------------------------------------
// criterion 10: non-uniform dominance
// ---------------------------------------------------------------------------

#[test]
fn c10a_nonuniform_mixture_dominance() {
    let mut wins = 0;
    let mut ratios = Vec::new();
    for seed in 0..100u64 {
        let mut rng = rng_from(seed);
        let mut vals: Vec<f32> = normal_vec(&mut rng, 9900).iter().map(|v| 0.1 * v).collect();
        vals.extend(normal_vec(&mut rng, 100).iter().map(|v| 5.0 + 0.1 * v));
        let t = Tensor::new(vec![10_000], vals).unwrap();

        let (_, nu) = nonuniform_quantize(&t, 8).unwrap();
        let mse_nu: f64 = t
            .data()
            .iter()
            .zip(nu.data())
            .map(|(&a, &b)| (a as f64 - b as f64).powi(2))
            .sum::<f64>()
            / t.len() as f64;
        let params = affine_params(t.min(), t.max(), 8).unwrap();
        let mse_u = reconstruction_mse(&t, &params).unwrap();
        if mse_nu < mse_u {
            wins += 1;
        }
        ratios.push(mse_nu / mse_u);
    }
    ratios.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let verdict = if wins >= 95 { "PASS" } else { "FAIL" };
    println!(
        "{verdict} criterion 10a: non-uniform beats uniform on the 9900/100 mixture in {wins}/100 seeds (needs >= 95; median MSE ratio {:.3})",
        ratios[50]
    );
    assert!(
        wins >= 95,
        "criterion 10a: {wins}/100 seed wins (see suite header for the analysis)"
    );
}

#[test]
fn c10b_nonuniform_desk_model() {
    // widest conv of the batch-norm CNN with 12 weights pinned to +-6x the
    // tensor max: tight outlier groups stretch the uniform grid while the
    // cluster scheme represents them exactly
    let (model, test) = train_desk(Arch::CnnBn, 7, 1.0);
    let damaged = inject_weight_outliers(&model, 6, 12, 6.0, 99).unwrap();
    let retro = retro_data(&damaged, 16, 120, 7);
    let cal = calibrate_activations(&damaged, &retro, 8).unwrap();

    let pt = SchemeAssignment::uniform(&damaged, SchemeLabel::Pt, 8);
    let qm_u = build_quant_model(&damaged, &pt.labels(), Some(&cal), 8, 8).unwrap();
    let a_uniform = evaluate(&qm_u, &test).unwrap().top1;

    let qm_nu = build_nonuniform_quant_model(&damaged, Some(&cal), 8, 8).unwrap();
    let a_nu = evaluate(&qm_nu, &test).unwrap().top1;
    assert!(
        a_nu >= a_uniform,
        "FAIL criterion 10b: non-uniform {a_nu:.4} < uniform {a_uniform:.4}"
    );
    println!(
        "PASS criterion 10b: outlier-injected desk model W8A8 top1 non-uniform {a_nu:.4} >= uniform per-tensor {a_uniform:.4}"
    );
}

// ---------------------------------------------------------------------------
// criterion 11: precision ladder
// ---------------------------------------------------------------------------

#[test]
fn c11_precision_ladder() {
    let c = ctx();
    let fp32 = evaluate(&c.desk_model, &c.desk_test).unwrap().top1;
    let labels = SchemeAssignment::uniform(&c.desk_model, SchemeLabel::Pt, 8).labels();
    let w8 = quantized_top1(&c.desk_model, &labels, &c.desk_retro, &c.desk_test, 8, 8);
    let w6 = quantized_top1(&c.desk_model, &labels, &c.desk_retro, &c.desk_test, 6, 8);
    let w4 = quantized_top1(&c.desk_model, &labels, &c.desk_retro, &c.desk_test, 4, 8);

    const SLACK: f64 = 0.003;
    assert!(
        w8 <= fp32 + SLACK,
        "FAIL criterion 11: W8A8 {w8:.4} above FP32 {fp32:.4} + slack"
    );
    assert!(
        w6 <= w8 + SLACK,
        "FAIL criterion 11: W6A8 {w6:.4} above W8A8 {w8:.4} + slack"
    );
    assert!(
        w4 <= w6 + SLACK,
        "FAIL criterion 11: W4A8 {w4:.4} above W6A8 {w6:.4} + slack"
    );
    assert!(
        w8 >= fp32 - 0.01,
        "FAIL criterion 11: W8A8 {w8:.4} more than 1pp below FP32 {fp32:.4}"
    );
    assert!(
        w4 >= fp32 - 0.05,
        "FAIL criterion 11: W4A8 {w4:.4} more than 5pp below FP32 {fp32:.4}"
    );
    println!(
        "PASS criterion 11: precision ladder fp32 {fp32:.4} >= W8A8 {w8:.4} >= W6A8 {w6:.4} >= W4A8 {w4:.4} (0.3pp slack, 1pp/5pp bounds)"
    );
}

// ---------------------------------------------------------------------------
// criterion 12: quantizer algebra
// ---------------------------------------------------------------------------

#[test]
fn c12_quantizer_algebra() {
    let mut rng = rng_from(31337);
    for round in 0..1000 {
        let bits = [4u8, 6, 8][round % 3];
        let spread = 10f32.powf((round % 7) as f32 - 3.0);
        let vals: Vec<f32> = normal_vec(&mut rng, 33)
            .iter()
            .map(|v| v * spread)
            .collect();
        let lo = vals.iter().cloned().fold(f32::INFINITY, f32::min);
        let hi = vals.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        let params = affine_params(lo, hi, bits).unwrap();
        let scale = params.scales[0];

        let t = Tensor::new(vec![vals.len()], vals.clone()).unwrap();
        let q = fake_quant(&t, &params).unwrap();
        for (&x, &y) in vals.iter().zip(q.data()) {
            let err = (x as f64 - y as f64).abs();
            assert!(
                err <= scale / 2.0 + 1e-12,
                "FAIL criterion 12: round-trip err {err:.3e} > scale/2 {:.3e}",
                scale / 2.0
            );
        }

        let zq = fake_quant(&Tensor::scalar_1d(&[0.0]), &params).unwrap();
        assert_eq!(zq.data()[0], 0.0, "FAIL criterion 12: exact-zero violated");

        let mut sorted = vals;
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let qs = fake_quant(&Tensor::new(vec![sorted.len()], sorted).unwrap(), &params).unwrap();
        for w in qs.data().windows(2) {
            assert!(w[0] <= w[1], "FAIL criterion 12: monotonicity violated");
        }
    }
    println!("PASS criterion 12: round-trip bound, exact zero and monotonicity hold on 1000 fuzzed tensors");
}

// ---------------------------------------------------------------------------
// criterion 13: CLI determinism
// ---------------------------------------------------------------------------

fn run_cli(args: &[&str]) {
    let out = Command::new(env!("CARGO_BIN_EXE_retroquant"))
        .args(args)
        .output()
        .expect("spawn retroquant");
    assert!(
        out.status.success(),
        "command {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn run_pipeline(root: &Path) {
    let p = |s: &str| root.join(s).to_str().unwrap().to_string();
    run_cli(&[
        "synth-data",
        "--out",
        &p("train"),
        "--per-class",
        "30",
        "--seed",
        "3",
    ]);
    run_cli(&[
        "synth-data",
        "--out",
        &p("test"),
        "--per-class",
        "10",
        "--seed",
        "3",
        "--role",
        "test",
    ]);
    run_cli(&[
        "train",
        "--data",
        &p("train"),
        "--out",
        &p("model"),
        "--arch",
        "cnn_bn",
        "--epochs",
        "2",
        "--seed",
        "3",
    ]);
    run_cli(&[
        "gen",
        "--model",
        &p("model"),
        "--out",
        &p("retro"),
        "--per-class",
        "4",
        "--epochs",
        "40",
        "--seed",
        "3",
    ]);
    run_cli(&[
        "calibrate",
        "--model",
        &p("model"),
        "--calib",
        &p("retro"),
        "--out",
        &p("cal"),
    ]);
    for scheme in ["pt", "hybrid", "nonuniform"] {
        run_cli(&[
            "quantize",
            "--model",
            &p("model"),
            "--calib",
            &p("retro"),
            "--scheme",
            scheme,
            "--th",
            "0",
            "--wbits",
            "8",
            "--abits",
            "8",
            "--out",
            &p(&format!("q_{scheme}")),
        ]);
    }
    run_cli(&[
        "eval",
        "--model",
        &p("q_pt"),
        "--data",
        &p("test"),
        "--out",
        &p("eval"),
    ]);
    run_cli(&[
        "sensitivity",
        "--model",
        &p("model"),
        "--real",
        &p("test"),
        "--retro",
        &p("retro"),
        "--out",
        &p("sens"),
        "--bits",
        "8",
    ]);
    run_cli(&[
        "report",
        "--model",
        &p("model"),
        "--calib",
        &p("retro"),
        "--test",
        &p("test"),
        "--out",
        &p("rep"),
    ]);
}

fn collect_files(root: &Path, base: &Path, out: &mut Vec<std::path::PathBuf>) {
    for entry in std::fs::read_dir(root).unwrap() {
        let path = entry.unwrap().path();
        if path.is_dir() {
            collect_files(&path, base, out);
        } else {
            out.push(path.strip_prefix(base).unwrap().to_path_buf());
        }
    }
}

#[test]
fn c13_cli_determinism() {
    let dir = tempfile::TempDir::new().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    std::fs::create_dir_all(&a).unwrap();
    std::fs::create_dir_all(&b).unwrap();
    run_pipeline(&a);
    run_pipeline(&b);

    let mut files_a = Vec::new();
    collect_files(&a, &a, &mut files_a);
    files_a.sort();
    let mut files_b = Vec::new();
    collect_files(&b, &b, &mut files_b);
    files_b.sort();
    assert_eq!(
        files_a, files_b,
        "pipeline runs produced different file sets"
    );
    assert!(
        files_a.len() > 20,
        "pipeline produced too few files: {}",
        files_a.len()
    );

    for rel in &files_a {
        let bytes_a = std::fs::read(a.join(rel)).unwrap();
        let bytes_b = std::fs::read(b.join(rel)).unwrap();
        assert_eq!(
            bytes_a,
            bytes_b,
            "FAIL criterion 13: {} differs between identical runs",
            rel.display()
        );
    }
    println!(
        "PASS criterion 13: {} pipeline output files byte-identical across reruns",
        files_a.len()
    );
}
