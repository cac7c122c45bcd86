mod common;

use apex_core::encoders::{DualEncoderModel, EncoderConfig, ImageSample};
use apex_core::tensor::{Tape, Tensor};
use apex_core::training::{
    adadelta_step, cosine_lr, cross_entropy, cross_entropy_loss, loss_and_gradients, train_apex,
    AdadeltaState, Optimizer, Schedule, TrainConfig, ADADELTA_EPS, ADADELTA_RHO,
};
use apex_core::tuning::{AdapterConfig, AdapterMode, PromptConfig, TuningParams};
use apex_core::{rng, Error};
use common::{rel_err, small_config, FD_STEP, REL_TOL};
use rand::Rng;

fn v(x: &[f64]) -> Tensor {
    Tensor::vector(x.to_vec())
}

#[test]
fn cross_entropy_closed_forms() {
    let e = std::f64::consts::E;
    let z = v(&[1.0, 0.0]);
    let classes = [v(&[1.0, 0.0]), v(&[0.0, 1.0])];
    let loss = cross_entropy(&z, &classes, 0, 1.0).unwrap();
    assert!((loss - -(e / (e + 1.0)).ln()).abs() < 1e-15);
    assert!((loss - 0.3133).abs() < 1e-4);

    // Orthogonal to every classifier: uniform, so ln C.
    let z = v(&[0.0, 0.0, 1.0]);
    let classes = [v(&[1.0, 0.0, 0.0]), v(&[0.0, 1.0, 0.0]), v(&[1.0, 1.0, 0.0])];
    for label in 0..3 {
        let loss = cross_entropy(&z, &classes, label, 0.01).unwrap();
        assert!((loss - 3f64.ln()).abs() < 1e-14);
    }

    // Confident and correct: loss vanishes.
    let z = v(&[1.0, 0.0]);
    let classes = [v(&[1.0, 0.0]), v(&[-1.0, 0.0])];
    assert!(cross_entropy(&z, &classes, 0, 0.01).unwrap() < 1e-80);

    assert!(matches!(
        cross_entropy(&z, &classes, 2, 1.0),
        Err(Error::Index { index: 2, bound: 2 })
    ));
}

#[test]
fn taped_cross_entropy_matches_the_value_and_is_nonnegative() {
    let mut rng = rng::seeded(1);
    for _ in 0..50 {
        let z = Tensor::randn(vec![4], 1.0, &mut rng);
        let classes: Vec<Tensor> = (0..3).map(|_| Tensor::randn(vec![4], 1.0, &mut rng)).collect();
        let label = rng.random_range(0..3);
        let tape = Tape::new();
        let vars: Vec<_> = classes.iter().map(|t| tape.constant(t.clone())).collect();
        let taped = cross_entropy_loss(&tape.constant(z.clone()), &vars, label, 0.3).unwrap();
        let value = cross_entropy(&z, &classes, label, 0.3).unwrap();
        assert_eq!(taped.value().item().unwrap(), value);
        assert!(value >= 0.0);
    }
}

/// Scalar Adadelta written out independently of the library.
fn reference_adadelta(x0: f64, grads: &[f64], lr: f64) -> Vec<f64> {
    let (rho, eps) = (0.9, 1e-6);
    let (mut eg, mut ex, mut x) = (0.0f64, 0.0f64, x0);
    let mut out = Vec::new();
    for &g in grads {
        eg = rho * eg + (1.0 - rho) * g * g;
        let dx = -((ex + eps).sqrt() / (eg + eps).sqrt()) * g;
        ex = rho * ex + (1.0 - rho) * dx * dx;
        x += lr * dx;
        out.push(x);
    }
    out
}

#[test]
fn adadelta_constants() {
    assert_eq!(ADADELTA_RHO, 0.9);
    assert_eq!(ADADELTA_EPS, 1e-6);
}

#[test]
fn adadelta_first_step_hand_trace() {
    let g = 0.5;
    let mut x = Tensor::scalar(1.0);
    let mut state = AdadeltaState::new([&x]);
    adadelta_step(&mut [&mut x], &[Tensor::scalar(g)], &mut state, 1.0).unwrap();
    let dx = -(1e-6 / (0.1 * g * g + 1e-6)).sqrt() * g;
    assert!((x.item().unwrap() - (1.0 + dx)).abs() < 1e-15);
    assert!((state.sq_grad[0].item().unwrap() - 0.1 * g * g).abs() < 1e-15);
    assert!((state.sq_update[0].item().unwrap() - 0.1 * dx * dx).abs() < 1e-20);
}

#[test]
fn adadelta_matches_reference_trace() {
    for (g, lr) in [(0.5, 1.0), (-2.0, 0.15), (1e-3, 0.7)] {
        let mut x = Tensor::scalar(0.25);
        let mut state = AdadeltaState::new([&x]);
        let reference = reference_adadelta(0.25, &[g, g], lr);
        for expected in reference {
            adadelta_step(&mut [&mut x], &[Tensor::scalar(g)], &mut state, lr).unwrap();
            assert!((x.item().unwrap() - expected).abs() < 1e-12);
        }
    }
}

#[test]
fn adadelta_zero_gradient_is_a_no_op() {
    let mut x = v(&[1.0, -2.0]);
    let before = x.clone();
    let mut state = AdadeltaState::new([&x]);
    adadelta_step(&mut [&mut x], &[Tensor::zeros(vec![2])], &mut state, 0.15).unwrap();
    assert_eq!(x, before);
    assert!(state.sq_grad[0].data().iter().chain(state.sq_update[0].data()).all(|&v| v == 0.0));
}

#[test]
fn adadelta_rejects_misaligned_gradients() {
    let mut x = v(&[1.0, 2.0]);
    let mut state = AdadeltaState::new([&x]);
    let err = adadelta_step(&mut [&mut x], &[Tensor::zeros(vec![3])], &mut state, 1.0);
    assert!(matches!(err, Err(Error::Contract(_))));
    let err = adadelta_step(&mut [&mut x], &[], &mut state, 1.0);
    assert!(matches!(err, Err(Error::Contract(_))));
}

#[test]
fn cosine_schedule_values() {
    let gamma = 0.15;
    assert_eq!(cosine_lr(0, 15, gamma).unwrap(), gamma);
    assert!((cosine_lr(5, 10, gamma).unwrap() - gamma / 2.0).abs() < 1e-15);
    let last = cosine_lr(14, 15, gamma).unwrap();
    let expected = gamma * (1.0 + (14.0 * std::f64::consts::PI / 15.0).cos()) / 2.0;
    assert!((last - expected).abs() < 1e-15);
    // The exact factor is 0.010926; the commonly quoted 0.01094 is off in the last digit.
    assert!((last / gamma - 0.01094).abs() < 2e-5);
    assert!(matches!(cosine_lr(15, 15, gamma), Err(Error::Range { .. })));
}

/// A frozen small model and a 4-class set whose classes differ by a strong
/// per-class pixel pattern.
fn separable_task(seed: u64) -> (DualEncoderModel, Vec<ImageSample>, Vec<Vec<usize>>) {
    let cfg = small_config();
    let model = DualEncoderModel::seeded(cfg.clone(), seed).unwrap().freeze();
    let mut rng = rng::stream(seed, 1);
    let means: Vec<Tensor> = (0..4)
        .map(|_| Tensor::randn(vec![cfg.patches, cfg.patch_width], 2.0, &mut rng))
        .collect();
    let mut samples = Vec::new();
    for (label, mean) in means.iter().enumerate() {
        for _ in 0..6 {
            let noise = Tensor::randn(vec![cfg.patches, cfg.patch_width], 0.1, &mut rng);
            samples.push(ImageSample {
                pixels: mean.lerp_with(1.0, &noise, 1.0).unwrap(),
                label,
            });
        }
    }
    let tokens = (0..4)
        .map(|c| (0..cfg.token_seq_len).map(|i| (c * 3 + i) % cfg.vocab_size).collect())
        .collect();
    (model, samples, tokens)
}

fn default_tuning(cfg: &EncoderConfig, seed: u64) -> TuningParams {
    let prompts = PromptConfig {
        visual_depth: cfg.visual_layers,
        ..PromptConfig::default()
    };
    TuningParams::init(cfg, &prompts, &AdapterConfig::default(), None, seed).unwrap()
}

#[test]
fn zero_epochs_leave_parameters_bitwise_unchanged() {
    let (model, samples, tokens) = separable_task(2);
    let tuning = default_tuning(model.config(), 3);
    let cfg = TrainConfig {
        epochs: 0,
        ..TrainConfig::default()
    };
    let outcome = train_apex(&samples, &tokens, &model, tuning.clone(), &cfg).unwrap();
    assert_eq!(outcome.tuning, tuning);
    assert!(outcome.trace.is_empty());
}

#[test]
fn training_reduces_loss_and_leaves_the_encoder_untouched() {
    let (model, samples, tokens) = separable_task(4);
    let before = model.clone();
    let tuning = default_tuning(model.config(), 5);
    let cfg = TrainConfig {
        epochs: 8,
        batch_size: 5,
        ..TrainConfig::default()
    };
    let outcome = train_apex(&samples, &tokens, &model, tuning.clone(), &cfg).unwrap();
    let means = outcome.epoch_means();
    assert_eq!(means.len(), 8);
    assert!(means[7] < means[0], "epoch means {means:?}");
    // 24 samples in batches of 5: the final partial batch is kept.
    assert_eq!(outcome.trace.len(), 8 * 5);

    for ((_, a), (_, b)) in model.named_tensors().iter().zip(before.named_tensors()) {
        assert_eq!(a.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
                   b.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>());
    }
    assert_eq!(model, before);
    for ((name, trained), (_, init)) in outcome.tuning.trainable_params().iter().zip(tuning.trainable_params()) {
        assert_ne!(*trained, init, "{name} did not move");
    }
}

#[test]
fn training_is_deterministic() {
    let (model, samples, tokens) = separable_task(6);
    let cfg = TrainConfig {
        epochs: 2,
        seed: 9,
        ..TrainConfig::default()
    };
    let run = || train_apex(&samples, &tokens, &model, default_tuning(model.config(), 7), &cfg).unwrap();
    let (a, b) = (run(), run());
    assert_eq!(a.trace, b.trace);
    assert_eq!(a.tuning, b.tuning);
}

#[test]
fn sgd_and_constant_schedule_also_train() {
    let (model, samples, tokens) = separable_task(8);
    let cfg = TrainConfig {
        epochs: 6,
        learning_rate: 0.05,
        optimizer: Optimizer::Sgd,
        schedule: Schedule::Constant,
        ..TrainConfig::default()
    };
    let outcome = train_apex(&samples, &tokens, &model, default_tuning(model.config(), 9), &cfg).unwrap();
    assert!(outcome.trace.iter().all(|r| r.lr == 0.05));
    let means = outcome.epoch_means();
    assert!(means[5] < means[0], "epoch means {means:?}");
}

#[test]
fn training_preconditions() {
    let (model, samples, tokens) = separable_task(10);
    let tuning = default_tuning(model.config(), 11);
    let cfg = TrainConfig::default();
    assert!(matches!(
        train_apex(&[], &tokens, &model, tuning.clone(), &cfg),
        Err(Error::Input(_))
    ));
    let unfrozen = DualEncoderModel::seeded(model.config().clone(), 10).unwrap();
    assert!(matches!(
        train_apex(&samples, &tokens, &unfrozen, tuning.clone(), &cfg),
        Err(Error::State(_))
    ));
    assert!(matches!(
        train_apex(&samples, &tokens[..2], &model, tuning.clone(), &cfg),
        Err(Error::Index { .. })
    ));
    let bad = TrainConfig {
        batch_size: 0,
        ..cfg
    };
    assert!(train_apex(&samples, &tokens, &model, tuning, &bad).is_err());
}

#[test]
fn non_finite_loss_reports_the_step() {
    let (model, mut samples, tokens) = separable_task(12);
    samples[0].pixels.data_mut()[0] = f64::NAN;
    let cfg = TrainConfig {
        batch_size: samples.len(),
        ..TrainConfig::default()
    };
    let err = train_apex(&samples, &tokens, &model, default_tuning(model.config(), 13), &cfg);
    assert!(matches!(err, Err(Error::Numeric { step: 0, .. })), "{err:?}");
}

/// Largest relative error between the analytic gradient of the batch loss
/// and central differences, over every trainable coordinate.
fn full_loss_grad_error(
    batch: &[ImageSample],
    tokens: &[Vec<usize>],
    model: &DualEncoderModel,
    tuning: &TuningParams,
) -> f64 {
    let (_, grads) = loss_and_gradients(batch, tokens, model, tuning).unwrap();
    let loss_at = |t: &TuningParams| loss_and_gradients(batch, tokens, model, t).unwrap().0;
    let mut worst = 0.0f64;
    let n_params = tuning.trainable_params().len();
    for k in 0..n_params {
        for j in 0..grads[k].len() {
            let mut plus = tuning.clone();
            plus.trainable_params_mut()[k].data_mut()[j] += FD_STEP;
            let mut minus = tuning.clone();
            minus.trainable_params_mut()[k].data_mut()[j] -= FD_STEP;
            let numeric = (loss_at(&plus) - loss_at(&minus)) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(grads[k].data()[j], numeric));
        }
    }
    worst
}

#[test]
fn full_loss_gradients_match_finite_differences_in_every_mode() {
    let modes = [AdapterMode::Dense, AdapterMode::LowRank, AdapterMode::Bottleneck];
    for trial in 0..9u64 {
        let mut rng = rng::stream(14, trial);
        let cfg = EncoderConfig {
            visual_layers: 2,
            text_layers: 2,
            visual_dim: 4,
            text_dim: 4,
            heads: 2,
            patches: 3,
            patch_width: 3,
            token_seq_len: 3,
            vocab_size: 6,
            joint_dim: 4,
            temperature: rng.random_range(0.2..1.0),
        };
        let model = DualEncoderModel::seeded(cfg.clone(), trial).unwrap().freeze();
        let prompts = PromptConfig {
            visual_depth: rng.random_range(0..=2),
            text_depth: rng.random_range(1..=2),
            visual_len: 2,
            text_len: 2,
        };
        let adapter = AdapterConfig {
            mode: modes[trial as usize % 3],
            rank: 2,
        };
        let image_adapter = AdapterConfig {
            mode: modes[(trial as usize / 3) % 3],
            rank: 2,
        };
        let mut tuning = TuningParams::init(&cfg, &prompts, &adapter, Some(&image_adapter), trial).unwrap();
        // Move every parameter off its initialization so no term is trivially zero.
        for p in tuning.trainable_params_mut() {
            for x in p.data_mut() {
                *x += rng.random_range(-0.3..0.3);
            }
        }
        let batch: Vec<ImageSample> = (0..3)
            .map(|label| ImageSample {
                pixels: Tensor::randn(vec![cfg.patches, cfg.patch_width], 1.0, &mut rng),
                label,
            })
            .collect();
        let tokens: Vec<Vec<usize>> = (0..3)
            .map(|_| (0..cfg.token_seq_len).map(|_| rng.random_range(0..cfg.vocab_size)).collect())
            .collect();
        let err = full_loss_grad_error(&batch, &tokens, &model, &tuning);
        assert!(err < REL_TOL, "trial {trial}: relative error {err:e}");
    }
}
