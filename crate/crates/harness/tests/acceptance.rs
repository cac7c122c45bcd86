//! Acceptance checks. Prints one PASS/FAIL line per criterion and exits
//! nonzero when any fails.

use std::time::{Duration, Instant};

use apex_core::encoders::{image_feature, zero_shot_probs, DualEncoderModel, EncoderConfig, ImageSample};
use apex_core::inference::{
    alpha_eval, apex_infer, ensemble_text, pre_adapter_text_feature, prompted_image_feature, ClassBank,
    EnsembleConfig,
};
use apex_core::metrics::{harmonic_mean, rtd, separability_ratio};
use apex_core::rng;
use apex_core::tensor::Tensor;
use apex_core::training::loss_and_gradients;
use apex_core::tuning::{adapter_apply, Adapter, AdapterConfig, AdapterMode, PromptConfig, TuningParams};
use apex_harness::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use apex_harness::experiment::{
    initial_tuning, prepare_seed, pretrained_model, context_with_model, run_experiment, train_seed,
    zero_shot_report, ExperimentConfig, RunReport,
};
use rand::Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn random_image(cfg: &EncoderConfig, rng: &mut rng::Rng) -> ImageSample {
    ImageSample {
        pixels: Tensor::randn(vec![cfg.patches, cfg.patch_width], 1.0, rng),
        label: 0,
    }
}

fn random_names(cfg: &EncoderConfig, count: usize, rng: &mut rng::Rng) -> Vec<Vec<usize>> {
    (0..count)
        .map(|_| (0..cfg.token_seq_len).map(|_| rng.random_range(0..cfg.vocab_size)).collect())
        .collect()
}

fn zero_shot_collapse() -> Outcome {
    let start = Instant::now();
    let cfg = EncoderConfig::default();
    let model = DualEncoderModel::seeded(cfg.clone(), 1).unwrap().freeze();
    let tuning = TuningParams::init(&cfg, &PromptConfig::none(), &AdapterConfig::default(), None, 2).unwrap();
    let ens = EnsembleConfig::default();
    let mut rng = rng::seeded(3);
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let learned = random_names(&cfg, 5, &mut rng);
        let eval = random_names(&cfg, rng.random_range(2..6), &mut rng);
        let bank = ClassBank::build(&model, &learned, &eval).unwrap();
        let image = random_image(&cfg, &mut rng);
        let (inference, _) = apex_infer(&image, &eval, &model, &tuning, &bank, &ens).unwrap();
        let reference = zero_shot_probs(&image, &eval, &model).unwrap();
        for (a, b) in inference.probs.iter().zip(&reference) {
            worst = worst.max((a - b).abs());
        }
    }
    let elapsed = start.elapsed();
    outcome(
        worst <= 1e-12 && elapsed < Duration::from_secs(5),
        format!("max |dp| = {worst:.1e} over 200 inputs (tol 1e-12) in {:.2} s (limit 5 s)", elapsed.as_secs_f64()),
    )
}

const FD_STEP: f64 = 1e-5;
const REL_TOL: f64 = 1e-4;
/// Components below this magnitude are judged on absolute error; central
/// differences at step 1e-5 carry ~1e-10 of round-off.
const MAGNITUDE_FLOOR: f64 = 1e-5;

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(MAGNITUDE_FLOOR)
}

fn gradient_fidelity() -> Outcome {
    let modes = [AdapterMode::Dense, AdapterMode::LowRank, AdapterMode::Bottleneck];
    let mut worst = 0.0f64;
    let mut worst_trial = 0;
    let mut coordinates = 0usize;
    for trial in 0..100u64 {
        let mut rng = rng::stream(2024, trial);
        let heads = rng.random_range(1..=2);
        let dim = 2 * heads * rng.random_range(1..=2);
        let cfg = EncoderConfig {
            visual_layers: rng.random_range(1..=2),
            text_layers: rng.random_range(1..=2),
            visual_dim: dim,
            text_dim: dim,
            heads,
            patches: rng.random_range(2..=3),
            patch_width: 3,
            token_seq_len: rng.random_range(2..=3),
            vocab_size: 6,
            joint_dim: rng.random_range(3..=4),
            temperature: rng.random_range(0.2..1.0),
        };
        let model = DualEncoderModel::seeded(cfg.clone(), trial).unwrap().freeze();
        let prompts = PromptConfig {
            visual_depth: rng.random_range(0..=cfg.visual_layers),
            text_depth: rng.random_range(1..=cfg.text_layers),
            visual_len: rng.random_range(1..=2),
            text_len: rng.random_range(1..=2),
        };
        let adapter = AdapterConfig {
            mode: modes[trial as usize % 3],
            rank: 2,
        };
        let image_adapter = (trial % 2 == 1).then(|| AdapterConfig {
            mode: modes[(trial as usize / 2) % 3],
            rank: 2,
        });
        let mut tuning = TuningParams::init(&cfg, &prompts, &adapter, image_adapter.as_ref(), trial).unwrap();
        for p in tuning.trainable_params_mut() {
            for x in p.data_mut() {
                *x += rng.random_range(-0.3..0.3);
            }
        }
        let classes = rng.random_range(2..=3);
        let batch: Vec<ImageSample> = (0..3)
            .map(|i| ImageSample {
                label: i % classes,
                ..random_image(&cfg, &mut rng)
            })
            .collect();
        let tokens = random_names(&cfg, classes, &mut rng);
        let (_, grads) = loss_and_gradients(&batch, &tokens, &model, &tuning).unwrap();
        let loss_at = |t: &TuningParams| loss_and_gradients(&batch, &tokens, &model, t).unwrap().0;
        for (k, g) in grads.iter().enumerate() {
            for j in 0..g.len() {
                let mut plus = tuning.clone();
                plus.trainable_params_mut()[k].data_mut()[j] += FD_STEP;
                let mut minus = tuning.clone();
                minus.trainable_params_mut()[k].data_mut()[j] -= FD_STEP;
                let numeric = (loss_at(&plus) - loss_at(&minus)) / (2.0 * FD_STEP);
                let e = rel_err(g.data()[j], numeric);
                if e > worst {
                    worst = e;
                    worst_trial = trial;
                }
                coordinates += 1;
            }
        }
    }
    outcome(
        worst < REL_TOL,
        format!(
            "worst relative error {worst:.2e} (trial {worst_trial}) over {coordinates} coordinates in 100 configurations (tol 1e-4)"
        ),
    )
}

fn frozen_backbone() -> Outcome {
    let cfg = ExperimentConfig::default();
    let ctx = prepare_seed(&cfg, 0).unwrap();
    let bits = |m: &DualEncoderModel| -> Vec<(String, Vec<u64>)> {
        m.named_tensors()
            .into_iter()
            .map(|(n, t)| (n, t.data().iter().map(|x| x.to_bits()).collect()))
            .collect()
    };
    let before = bits(&ctx.model);
    let initial = initial_tuning(&cfg, 0).unwrap();
    let trained = train_seed(&cfg, &ctx).unwrap();
    let unchanged = bits(&ctx.model) == before;
    let names = |t: &TuningParams| t.trainable_params().into_iter().map(|(n, _)| n).collect::<Vec<_>>();
    let changed = initial
        .trainable_params()
        .iter()
        .zip(trained.tuning.trainable_params())
        .filter(|((_, a), (_, b))| a != b)
        .count();
    outcome(
        unchanged && names(&initial) == names(&trained.tuning) && changed > 0,
        format!(
            "{} encoder tensors bitwise unchanged: {unchanged}; {changed}/{} trainable tensors moved over {} steps",
            before.len(),
            initial.trainable_params().len(),
            trained.trace.len()
        ),
    )
}

fn alpha_contract() -> Outcome {
    let cfg = EnsembleConfig::default();
    let gated = [0.0, 0.01, 0.03, 0.05]
        .iter()
        .flat_map(|&d_nn| [0.0, 0.25, 0.9, 1.7].map(|d_avg| alpha_eval(d_avg, d_nn, &cfg)))
        .all(|a| a == 1.0);
    let e = alpha_eval(0.25, 0.5, &cfg);
    let closed = (e - (-1.0f64).exp()).abs();
    let grid: Vec<f64> = (0..50).map(|i| alpha_eval(0.1 + 1.8 * i as f64 / 49.0, 0.5, &cfg)).collect();
    let decreasing = grid.windows(2).all(|w| w[1] < w[0]);
    outcome(
        gated && closed <= 1e-12 && decreasing,
        format!("gate at d_nn <= 0.05 exact: {gated}; |alpha - e^-1| = {closed:.1e} (tol 1e-12); strictly decreasing on 50 points: {decreasing}"),
    )
}

fn ensemble_endpoints() -> Outcome {
    let mut rng = rng::seeded(5);
    let d = 6;
    let mut ok = true;
    for _ in 0..20 {
        let t = Tensor::randn(vec![d], 1.0, &mut rng);
        let adapters = [
            Adapter::Dense {
                a: Tensor::randn(vec![d, d], 1.0, &mut rng),
                b: Tensor::randn(vec![d], 1.0, &mut rng),
            },
            Adapter::LowRank {
                u: Tensor::randn(vec![d, 2], 1.0, &mut rng),
                v: Tensor::randn(vec![d, 2], 1.0, &mut rng),
                b: Tensor::randn(vec![d], 1.0, &mut rng),
            },
        ];
        for adapter in &adapters {
            ok &= ensemble_text(&t, adapter, 0.0).unwrap() == t;
            ok &= ensemble_text(&t, adapter, 1.0).unwrap() == adapter_apply(&t, adapter).unwrap();
        }
        let identity = Adapter::init(d, &AdapterConfig::default(), &mut rng).unwrap();
        for i in 0..=10 {
            ok &= ensemble_text(&t, &identity, i as f64 / 10.0).unwrap() == t;
        }
    }
    outcome(
        ok,
        "alpha = 0 gives the pre-adapter feature, alpha = 1 the post-adapter feature, identity adapter blend alpha-invariant (exact, 20 draws)".into(),
    )
}

fn cos(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

fn oracle_equivalence() -> Outcome {
    let cfg = EncoderConfig {
        visual_layers: 2,
        text_layers: 2,
        visual_dim: 8,
        text_dim: 8,
        heads: 2,
        patches: 4,
        patch_width: 5,
        token_seq_len: 4,
        vocab_size: 10,
        joint_dim: 4,
        temperature: 0.5,
    };
    let model = DualEncoderModel::seeded(cfg.clone(), 8).unwrap().freeze();
    let prompts = PromptConfig {
        visual_depth: 2,
        text_depth: 1,
        visual_len: 2,
        text_len: 2,
    };
    let mut tuning = TuningParams::init(&cfg, &prompts, &AdapterConfig::default(), None, 9).unwrap();
    let a = [
        [0.9, 0.1, 0.0, -0.2],
        [0.0, 1.1, 0.3, 0.0],
        [0.2, 0.0, 0.8, 0.1],
        [-0.1, 0.0, 0.0, 1.2],
    ];
    let b = [0.05, -0.1, 0.0, 0.2];
    tuning.text_adapter = Adapter::Dense {
        a: Tensor::new(vec![4, 4], a.concat()).unwrap(),
        b: Tensor::vector(b.to_vec()),
    };
    let learned = [[1.0, 0.0, 0.0, 0.0], [0.0, 1.0, 0.0, 0.0]];
    let eval_bank = [[1.0, 0.0, 0.0, 0.0], [0.6, 0.8, 0.0, 0.0], [0.0, 0.0, 0.6, 0.8]];
    let bank = ClassBank::new(
        learned.iter().map(|x| Tensor::vector(x.to_vec())).collect(),
        eval_bank.iter().map(|x| Tensor::vector(x.to_vec())).collect(),
    )
    .unwrap();
    let tokens = vec![vec![1, 2, 3, 4], vec![5, 6, 7, 8], vec![9, 0, 1, 2]];
    let image = random_image(&cfg, &mut rng::seeded(10));
    let (inference, prepared) =
        apex_infer(&image, &tokens, &model, &tuning, &bank, &EnsembleConfig::default()).unwrap();

    let t_tilde: Vec<Vec<f64>> = tokens
        .iter()
        .map(|t| pre_adapter_text_feature(t, &model, &tuning).unwrap().into_data())
        .collect();
    let z_pre = image_feature(&image, &model).unwrap().into_data();
    let z_prompt = prompted_image_feature(&image, &model, &tuning).unwrap().into_data();

    let mut worst = 0.0f64;
    let mut track = |x: f64, y: f64| worst = worst.max((x - y).abs());
    let mut alphas = Vec::new();
    let mut classifiers = Vec::new();
    for (k, e) in eval_bank.iter().enumerate() {
        let sims: Vec<f64> = learned.iter().map(|l| cos(e, l)).collect();
        let d_avg = 1.0 - (sims[0] + sims[1]) / 2.0;
        let d_nn = 1.0 - sims[0].max(sims[1]);
        let alpha = if d_nn > 0.05 { (-4.0 * d_avg).exp() } else { 1.0 };
        track(prepared.d_avg[k], d_avg);
        track(prepared.d_nn[k], d_nn);
        track(prepared.alpha[k], alpha);
        let t = &t_tilde[k];
        let post: Vec<f64> = (0..4).map(|j| (0..4).map(|i| t[i] * a[i][j]).sum::<f64>() + b[j]).collect();
        let blended: Vec<f64> = (0..4).map(|j| alpha * post[j] + (1.0 - alpha) * t[j]).collect();
        for j in 0..4 {
            track(prepared.classifiers[k].data()[j], blended[j]);
        }
        alphas.push(alpha);
        classifiers.push(blended);
    }
    let alpha_bar = alphas.iter().sum::<f64>() / 3.0;
    track(prepared.alpha_bar, alpha_bar);
    let z: Vec<f64> = (0..4).map(|j| alpha_bar * z_pre[j] + (1.0 - alpha_bar) * z_prompt[j]).collect();
    for j in 0..4 {
        track(inference.z.data()[j], z[j]);
    }
    let logits: Vec<f64> = classifiers.iter().map(|t| cos(&z, t) / cfg.temperature).collect();
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let total: f64 = logits.iter().map(|l| (l - max).exp()).sum();
    for (k, l) in logits.iter().enumerate() {
        track(inference.probs[k], (l - max).exp() / total);
    }
    let cases = alphas[0] == 1.0 && alphas[1] < 1.0 && alphas[2] < alphas[1];
    outcome(
        worst <= 1e-12 && cases,
        format!("max deviation {worst:.1e} across d_avg, d_nn, alpha, classifiers, alpha_bar, z, probs (tol 1e-12); alphas {alphas:.4?}"),
    )
}

fn metric_arithmetic() -> Outcome {
    let h1 = 100.0 * harmonic_mean(0.7712, 0.7110).unwrap();
    let h2 = 100.0 * harmonic_mean(0.9283, 0.7989).unwrap();
    let fixed: Vec<f64> = [1usize, 2, 10, 37, 1000].iter().map(|&c| rtd(c, 1.0 / c as f64).unwrap()).collect();
    let rtd_ok = fixed.iter().all(|r| (r - 1.0).abs() < 1e-12);
    outcome(
        (h1 - 73.99).abs() <= 0.01 && (h2 - 85.88).abs() <= 0.01 && rtd_ok,
        format!("HM(77.12, 71.10) = {h1:.4}, HM(92.83, 79.89) = {h2:.4} (tol 0.01); RTD at prec = 1/C: {fixed:?}"),
    )
}

fn desk_experiment() -> (Outcome, RunReport) {
    let cfg = ExperimentConfig::default();
    let start = Instant::now();
    let report = run_experiment(&cfg).unwrap();
    let elapsed = start.elapsed();
    let gain = report.base_acc - report.zero_shot_base_acc;
    let a = gain >= 0.05;
    let b = report.novel_acc >= report.no_ensemble_novel_acc;
    let fast = elapsed < Duration::from_secs(180);
    let detail = format!(
        "(a) base {:.4} vs zero-shot {:.4}: +{:.2} pts (need >= 5) [{}]; (b) adaptive novel {:.4} vs unblended {:.4} [{}]; {:.1} s (limit 180 s); unblended base {:.4}, fixed-alpha novel {:.4}",
        report.base_acc,
        report.zero_shot_base_acc,
        100.0 * gain,
        if a { "ok" } else { "short" },
        report.novel_acc,
        report.no_ensemble_novel_acc,
        if b { "ok" } else { "short" },
        elapsed.as_secs_f64(),
        report.no_ensemble_base_acc,
        report.fixed_ensemble_novel_acc,
    );
    (outcome(a && b && fast, detail), report)
}

/// Orthogonal matrix from Gram-Schmidt on Gaussian rows.
fn orthogonal(d: usize, seed: u64) -> Vec<Vec<f64>> {
    let g = Tensor::randn(vec![d, d], 1.0, &mut rng::seeded(seed));
    let mut basis: Vec<Vec<f64>> = Vec::new();
    for i in 0..d {
        let mut v = g.row(i).to_vec();
        for q in &basis {
            let dot: f64 = v.iter().zip(q).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(q).for_each(|(x, y)| *x -= dot * y);
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        basis.push(v.into_iter().map(|x| x / n).collect());
    }
    basis
}

fn separability_instrument() -> Outcome {
    let cfg = ExperimentConfig::default();
    let (model, world) = pretrained_model(&cfg, 0).unwrap();
    let mut ratios = Vec::new();
    let mut rotation_err = 0.0;
    for s in [0.5, 1.0, 2.0, 4.0, 8.0] {
        let mut c = cfg.clone();
        c.data.separability = s;
        let ctx = context_with_model(&c, 0, model.clone(), &world).unwrap();
        ratios.push(zero_shot_report(&c, &ctx).unwrap().separability.ratio);
        if s == 2.0 {
            let mut feats = Vec::new();
            let mut labels = Vec::new();
            for (class, samples) in ctx.data.eval.iter().enumerate() {
                for sample in samples {
                    feats.push(image_feature(sample, &ctx.model).unwrap());
                    labels.push(class);
                }
            }
            let q = orthogonal(cfg.encoder.joint_dim, 77);
            let rotated: Vec<Tensor> = feats
                .iter()
                .map(|f| Tensor::vector(q.iter().map(|row| row.iter().zip(f.data()).map(|(a, b)| a * b).sum()).collect()))
                .collect();
            let before = separability_ratio(&feats, &labels).unwrap().ratio;
            let after = separability_ratio(&rotated, &labels).unwrap().ratio;
            rotation_err = (before - after).abs();
        }
    }
    let monotone = ratios.windows(2).all(|w| w[1] >= w[0]);
    outcome(
        monotone && rotation_err <= 1e-9,
        format!("ratios at s = 0.5..8: {ratios:.4?} (nondecreasing: {monotone}); rotation change {rotation_err:.1e} (tol 1e-9)"),
    )
}

fn determinism_and_persistence(first: &RunReport) -> Outcome {
    let second = run_experiment(&ExperimentConfig::default()).unwrap();
    let same_report = *first == second
        && serde_json::to_string(first).unwrap() == serde_json::to_string(&second).unwrap();

    let cfg = ExperimentConfig::default();
    let ctx = prepare_seed(&cfg, 0).unwrap();
    let tuning = train_seed(&cfg, &ctx).unwrap().tuning;
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("seed0.apex");
    save_checkpoint(&path, &Checkpoint::new(cfg.clone(), 0, ctx.model.clone(), tuning.clone())).unwrap();
    let loaded = load_checkpoint(&path).unwrap();
    let base = ctx.base_tokens();
    let novel = ctx.novel_tokens();
    let bank = ClassBank::build(&ctx.model, &base, &novel).unwrap();
    let mut images = 0;
    let mut identical = true;
    for &class in &ctx.novel {
        for image in &ctx.data.eval[class] {
            let (x, _) = apex_infer(image, &novel, &ctx.model, &tuning, &bank, &cfg.ensemble).unwrap();
            let (y, _) = apex_infer(image, &novel, &loaded.model, &loaded.tuning, &bank, &cfg.ensemble).unwrap();
            identical &= x.probs.iter().zip(&y.probs).all(|(a, b)| a.to_bits() == b.to_bits())
                && x.prediction == y.prediction;
            images += 1;
        }
    }
    outcome(
        same_report && identical,
        format!("repeat run bitwise identical: {same_report}; checkpoint round trip identical on {images} images: {identical}"),
    )
}

fn main() {
    let mut results: Vec<(&str, Outcome)> = Vec::new();
    let mut run = |name: &'static str, f: &dyn Fn() -> Outcome| {
        let o = f();
        println!("{} [{}] {}: {}", if o.pass { "PASS" } else { "FAIL" }, results.len() + 1, name, o.detail);
        results.push((name, o));
    };
    run("zero-shot collapse", &zero_shot_collapse);
    run("gradient fidelity", &gradient_fidelity);
    run("frozen backbone", &frozen_backbone);
    run("alpha formula", &alpha_contract);
    run("ensemble endpoints", &ensemble_endpoints);
    run("adaptive inference oracle", &oracle_equivalence);
    run("metric arithmetic", &metric_arithmetic);
    let report = std::cell::RefCell::new(None);
    run("desk-scale base-to-novel", &|| {
        let (o, r) = desk_experiment();
        *report.borrow_mut() = Some(r);
        o
    });
    run("separability instrument", &separability_instrument);
    run("determinism and persistence", &|| {
        determinism_and_persistence(report.borrow().as_ref().expect("desk experiment ran"))
    });
    let failed = results.iter().filter(|(_, o)| !o.pass).count();
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
