//! Base-to-novel experiments: pretrain and freeze a toy model, train the
//! tuning parameters on the base classes, and evaluate zero-shot, adaptive,
//! fixed-coefficient and unblended inference on both splits.

use apex_core::encoders::{argmax, class_text_feature, image_feature, predict_probs, DualEncoderModel, EncoderConfig, ImageSample};
use apex_core::inference::{
    classify_features, prepare_classes, prompted_image_feature, AlphaRow, ClassBank,
    EnsembleConfig, EnsembleMode,
};
use apex_core::metrics::{accuracy, harmonic_mean, rtd, separability_ratio, Separability};
use apex_core::rng;
use apex_core::training::{train_apex, LossRecord, TrainConfig, TrainOutcome};
use apex_core::tuning::{AdapterConfig, PromptConfig, TuningParams};
use apex_core::Tensor;
use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result, StageExt};
use crate::pretrain::{pretrain_alignment, PretrainConfig};
use crate::synthetic::{gen_synthetic, split_base_novel, SyntheticDataset, SyntheticDatasetSpec, World};

/// The fixed coefficient of the fixed-ensemble ablation.
pub const FIXED_ALPHA: f64 = 0.4;

/// Every knob of one experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub data: SyntheticDatasetSpec,
    pub encoder: EncoderConfig,
    pub prompts: PromptConfig,
    pub adapter: AdapterConfig,
    /// Present only for the visual-adapter ablation.
    pub image_adapter: Option<AdapterConfig>,
    pub train: TrainConfig,
    pub ensemble: EnsembleConfig,
    pub pretrain: PretrainConfig,
    pub seeds: Vec<u64>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            data: SyntheticDatasetSpec::default(),
            encoder: EncoderConfig::default(),
            prompts: PromptConfig::default(),
            adapter: AdapterConfig::default(),
            image_adapter: None,
            train: TrainConfig::default(),
            ensemble: EnsembleConfig::default(),
            pretrain: PretrainConfig::default(),
            seeds: (0..5).collect(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.encoder.validate()?;
        self.prompts.validate(&self.encoder)?;
        self.train.validate()?;
        self.ensemble.validate()?;
        if self.seeds.is_empty() {
            return Err(HarnessError::Config("at least one seed is required".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlphaStats {
    pub mean: f64,
    pub min: f64,
    pub max: f64,
}

impl AlphaStats {
    fn of(alpha: &[f64]) -> Self {
        Self {
            mean: alpha.iter().sum::<f64>() / alpha.len() as f64,
            min: alpha.iter().copied().fold(f64::INFINITY, f64::min),
            max: alpha.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        }
    }
}

/// Raw measurements of one seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedReport {
    pub seed: u64,
    pub base_classes: Vec<usize>,
    pub novel_classes: Vec<usize>,
    pub base_acc: f64,
    pub novel_acc: f64,
    pub zero_shot_base_acc: f64,
    pub zero_shot_novel_acc: f64,
    /// Post-adapter classifiers and prompted image features, no blending.
    pub no_ensemble_base_acc: f64,
    pub no_ensemble_novel_acc: f64,
    /// Fixed coefficient [`FIXED_ALPHA`] for every class and the image.
    pub fixed_ensemble_novel_acc: f64,
    /// Zero-shot accuracy over all classes of the domain.
    pub zero_shot_acc: f64,
    pub rtd: f64,
    pub separability: Separability,
    /// Over the novel evaluation classes.
    pub alpha_stats: AlphaStats,
    pub alpha_table: Vec<AlphaRow>,
    pub loss_trace: Vec<LossRecord>,
}

/// Seed-averaged summary of one configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub base_acc: f64,
    pub novel_acc: f64,
    /// Harmonic mean of the stored `base_acc` and `novel_acc`.
    pub hm: f64,
    pub zero_shot_base_acc: f64,
    pub zero_shot_novel_acc: f64,
    pub zero_shot_hm: f64,
    pub no_ensemble_base_acc: f64,
    pub no_ensemble_novel_acc: f64,
    pub fixed_ensemble_novel_acc: f64,
    pub rtd: f64,
    pub separability: Separability,
    pub alpha_stats: AlphaStats,
    pub seeds: Vec<u64>,
    pub config: ExperimentConfig,
    pub per_seed: Vec<SeedReport>,
}

/// Independent sub-seed for one purpose of one experiment seed.
pub fn derive_seed(seed: u64, purpose: u64) -> u64 {
    rng::stream(seed, purpose).next_u64()
}

const WORLD: u64 = 10;
const MODEL: u64 = 11;
const DATA: u64 = 12;
const SPLIT: u64 = 13;
const TUNING: u64 = 14;
const TRAIN: u64 = 15;
const PRETRAIN: u64 = 16;

/// A frozen, pretrained toy model and its world for one seed.
pub fn pretrained_model(config: &ExperimentConfig, seed: u64) -> Result<(DualEncoderModel, World)> {
    let world = World::new(&config.encoder, derive_seed(seed, WORLD));
    let model = DualEncoderModel::seeded(config.encoder.clone(), derive_seed(seed, MODEL))?;
    let model = pretrain_alignment(model, &world, &config.pretrain, derive_seed(seed, PRETRAIN))?;
    Ok((model, world))
}

/// Images of `classes`, relabeled to their position in `classes`.
fn relabel(per_class: &[Vec<ImageSample>], classes: &[usize]) -> Vec<ImageSample> {
    classes
        .iter()
        .enumerate()
        .flat_map(|(local, &c)| {
            per_class[c].iter().map(move |s| ImageSample {
                pixels: s.pixels.clone(),
                label: local,
            })
        })
        .collect()
}

fn tokens_of(data: &SyntheticDataset, classes: &[usize]) -> Vec<Vec<usize>> {
    classes.iter().map(|&c| data.class_tokens[c].clone()).collect()
}

struct Features {
    pretrained: Vec<Tensor>,
    prompted: Vec<Tensor>,
    labels: Vec<usize>,
}

fn zero_shot_accuracy(
    features: &[Tensor],
    labels: &[usize],
    classifiers: &[Tensor],
    temperature: f64,
) -> Result<f64> {
    let predictions = features
        .iter()
        .map(|z| Ok(argmax(&predict_probs(z, classifiers, temperature)?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(accuracy(&predictions, labels)?)
}

/// Everything one seed needs before training: the frozen model, its domain
/// and the base/novel split (global class ids).
#[derive(Clone, Debug)]
pub struct SeedContext {
    pub seed: u64,
    pub model: DualEncoderModel,
    pub data: SyntheticDataset,
    pub base: Vec<usize>,
    pub novel: Vec<usize>,
}

impl SeedContext {
    pub fn base_tokens(&self) -> Vec<Vec<usize>> {
        tokens_of(&self.data, &self.base)
    }

    pub fn novel_tokens(&self) -> Vec<Vec<usize>> {
        tokens_of(&self.data, &self.novel)
    }

    /// Training images of the base classes, labeled by base position.
    pub fn train_set(&self) -> Vec<ImageSample> {
        relabel(&self.data.train, &self.base)
    }
}

pub fn prepare_seed(config: &ExperimentConfig, seed: u64) -> Result<SeedContext> {
    let (model, world) = pretrained_model(config, seed).stage("pretraining", seed)?;
    context_with_model(config, seed, model, &world)
}

/// Builds the seed's domain around an existing frozen model, e.g. one
/// restored from a checkpoint.
pub fn context_with_model(
    config: &ExperimentConfig,
    seed: u64,
    model: DualEncoderModel,
    world: &World,
) -> Result<SeedContext> {
    let spec = SyntheticDatasetSpec {
        seed: derive_seed(seed ^ config.data.seed, DATA),
        ..config.data.clone()
    };
    let data = gen_synthetic(&spec, world, &model).stage("data generation", seed)?;
    let all: Vec<usize> = (0..spec.num_classes).collect();
    let (base, novel) =
        split_base_novel(&all, spec.base_fraction, derive_seed(seed, SPLIT)).stage("split", seed)?;
    Ok(SeedContext {
        seed,
        model,
        data,
        base,
        novel,
    })
}

/// The world of one seed (cheap; it holds only the renderer).
pub fn world_for(config: &ExperimentConfig, seed: u64) -> World {
    World::new(&config.encoder, derive_seed(seed, WORLD))
}

pub fn initial_tuning(config: &ExperimentConfig, seed: u64) -> Result<TuningParams> {
    TuningParams::init(
        &config.encoder,
        &config.prompts,
        &config.adapter,
        config.image_adapter.as_ref(),
        derive_seed(seed, TUNING),
    )
    .stage("tuning init", seed)
}

/// Trains fresh tuning parameters on the base classes of `ctx`.
pub fn train_seed(config: &ExperimentConfig, ctx: &SeedContext) -> Result<TrainOutcome> {
    let seed = ctx.seed;
    let tuning = initial_tuning(config, seed)?;
    let train_cfg = TrainConfig {
        seed: derive_seed(seed ^ config.train.seed, TRAIN),
        ..config.train.clone()
    };
    train_apex(&ctx.train_set(), &ctx.base_tokens(), &ctx.model, tuning, &train_cfg)
        .stage("training", seed)
}

/// Zero-shot view of the whole domain: all classes are candidates and labels
/// are global class ids.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ZeroShotReport {
    pub seed: u64,
    pub num_classes: usize,
    pub zero_shot_acc: f64,
    pub rtd: f64,
    pub separability: Separability,
}

pub fn zero_shot_report(config: &ExperimentConfig, ctx: &SeedContext) -> Result<ZeroShotReport> {
    let seed = ctx.seed;
    let run = || -> Result<ZeroShotReport> {
        let mut feats = Vec::new();
        let mut labels = Vec::new();
        for (class, samples) in ctx.data.eval.iter().enumerate() {
            for s in samples {
                feats.push(image_feature(s, &ctx.model)?);
                labels.push(class);
            }
        }
        let text = class_features(&ctx.data.class_tokens, &ctx.model)?;
        let zero_shot_acc = zero_shot_accuracy(&feats, &labels, &text, config.encoder.temperature)?;
        Ok(ZeroShotReport {
            seed,
            num_classes: ctx.data.class_tokens.len(),
            zero_shot_acc,
            rtd: rtd(ctx.data.class_tokens.len(), zero_shot_acc)?,
            separability: separability_ratio(&feats, &labels)?,
        })
    };
    run().stage("zero-shot evaluation", seed)
}

fn class_features(tokens: &[Vec<usize>], model: &DualEncoderModel) -> Result<Vec<Tensor>> {
    Ok(tokens
        .iter()
        .map(|t| class_text_feature(t, model))
        .collect::<apex_core::Result<Vec<_>>>()?)
}

/// Evaluates trained tuning parameters on both splits of `ctx`.
pub fn evaluate_seed(
    config: &ExperimentConfig,
    ctx: &SeedContext,
    tuning: &TuningParams,
    loss_trace: Vec<LossRecord>,
) -> Result<SeedReport> {
    let seed = ctx.seed;
    let model = &ctx.model;
    let (base, novel) = (&ctx.base, &ctx.novel);
    let base_tokens = ctx.base_tokens();
    let novel_tokens = ctx.novel_tokens();
    let temperature = config.encoder.temperature;

    let features = |classes: &[usize]| -> Result<Features> {
        let samples = relabel(&ctx.data.eval, classes);
        Ok(Features {
            pretrained: samples
                .iter()
                .map(|s| image_feature(s, model))
                .collect::<apex_core::Result<_>>()?,
            prompted: samples
                .iter()
                .map(|s| prompted_image_feature(s, model, tuning))
                .collect::<apex_core::Result<_>>()?,
            labels: samples.iter().map(|s| s.label).collect(),
        })
    };
    let base_features = features(base).stage("feature extraction", seed)?;
    let novel_features = features(novel).stage("feature extraction", seed)?;

    let evaluate = |tokens: &[Vec<usize>], f: &Features, mode: EnsembleMode| -> Result<(f64, Vec<f64>, Vec<AlphaRow>)> {
        let bank = ClassBank::build(model, &base_tokens, tokens)?;
        let prepared = prepare_classes(tokens, model, tuning, &bank, &config.ensemble, mode)?;
        let predictions = f
            .pretrained
            .iter()
            .zip(&f.prompted)
            .map(|(zp, z)| Ok(classify_features(zp.clone(), z.clone(), &prepared, temperature)?.prediction))
            .collect::<Result<Vec<_>>>()?;
        let table = prepared.alpha_table(&(0..tokens.len()).collect::<Vec<_>>());
        Ok((accuracy(&predictions, &f.labels)?, prepared.alpha.clone(), table))
    };
    let (base_acc, ..) =
        evaluate(&base_tokens, &base_features, EnsembleMode::Adaptive).stage("base evaluation", seed)?;
    let (novel_acc, novel_alpha, mut alpha_table) =
        evaluate(&novel_tokens, &novel_features, EnsembleMode::Adaptive).stage("novel evaluation", seed)?;
    for (row, &c) in alpha_table.iter_mut().zip(novel) {
        row.class_id = c;
    }
    let (no_ensemble_base_acc, ..) =
        evaluate(&base_tokens, &base_features, EnsembleMode::Off).stage("base evaluation", seed)?;
    let (no_ensemble_novel_acc, ..) =
        evaluate(&novel_tokens, &novel_features, EnsembleMode::Off).stage("novel evaluation", seed)?;
    let (fixed_ensemble_novel_acc, ..) =
        evaluate(&novel_tokens, &novel_features, EnsembleMode::Fixed(FIXED_ALPHA))
            .stage("novel evaluation", seed)?;

    let split_zero_shot = || -> Result<(f64, f64)> {
        let zs_base = zero_shot_accuracy(
            &base_features.pretrained,
            &base_features.labels,
            &class_features(&base_tokens, model)?,
            temperature,
        )?;
        let zs_novel = zero_shot_accuracy(
            &novel_features.pretrained,
            &novel_features.labels,
            &class_features(&novel_tokens, model)?,
            temperature,
        )?;
        Ok((zs_base, zs_novel))
    };
    let (zero_shot_base_acc, zero_shot_novel_acc) =
        split_zero_shot().stage("zero-shot evaluation", seed)?;
    let domain = zero_shot_report(config, ctx)?;

    Ok(SeedReport {
        seed,
        base_classes: base.clone(),
        novel_classes: novel.clone(),
        base_acc,
        novel_acc,
        zero_shot_base_acc,
        zero_shot_novel_acc,
        no_ensemble_base_acc,
        no_ensemble_novel_acc,
        fixed_ensemble_novel_acc,
        zero_shot_acc: domain.zero_shot_acc,
        rtd: domain.rtd,
        separability: domain.separability,
        alpha_stats: AlphaStats::of(&novel_alpha),
        alpha_table,
        loss_trace,
    })
}

/// Runs one seed end to end.
pub fn run_seed(config: &ExperimentConfig, seed: u64) -> Result<SeedReport> {
    let ctx = prepare_seed(config, seed)?;
    let outcome = train_seed(config, &ctx)?;
    evaluate_seed(config, &ctx, &outcome.tuning, outcome.trace)
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    sum / n as f64
}

/// Folds per-seed reports, in seed order, into a summary.
pub fn aggregate(config: &ExperimentConfig, per_seed: Vec<SeedReport>) -> Result<RunReport> {
    if per_seed.is_empty() {
        return Err(HarnessError::Config("no seed reports to aggregate".into()));
    }
    let m = |f: fn(&SeedReport) -> f64| mean(per_seed.iter().map(f));
    let base_acc = m(|r| r.base_acc);
    let novel_acc = m(|r| r.novel_acc);
    let zero_shot_base_acc = m(|r| r.zero_shot_base_acc);
    let zero_shot_novel_acc = m(|r| r.zero_shot_novel_acc);
    Ok(RunReport {
        base_acc,
        novel_acc,
        hm: harmonic_mean(base_acc, novel_acc)?,
        zero_shot_base_acc,
        zero_shot_novel_acc,
        zero_shot_hm: harmonic_mean(zero_shot_base_acc, zero_shot_novel_acc)?,
        no_ensemble_base_acc: m(|r| r.no_ensemble_base_acc),
        no_ensemble_novel_acc: m(|r| r.no_ensemble_novel_acc),
        fixed_ensemble_novel_acc: m(|r| r.fixed_ensemble_novel_acc),
        rtd: m(|r| r.rtd),
        separability: Separability {
            intra: m(|r| r.separability.intra),
            inter: m(|r| r.separability.inter),
            ratio: m(|r| r.separability.ratio),
        },
        alpha_stats: AlphaStats {
            mean: m(|r| r.alpha_stats.mean),
            min: per_seed.iter().map(|r| r.alpha_stats.min).fold(f64::INFINITY, f64::min),
            max: per_seed.iter().map(|r| r.alpha_stats.max).fold(f64::NEG_INFINITY, f64::max),
        },
        seeds: per_seed.iter().map(|r| r.seed).collect(),
        config: config.clone(),
        per_seed,
    })
}

/// Runs every seed of `config` and aggregates.
pub fn run_experiment(config: &ExperimentConfig) -> Result<RunReport> {
    config.validate()?;
    let per_seed = config
        .seeds
        .iter()
        .map(|&seed| run_seed(config, seed))
        .collect::<Result<Vec<_>>>()?;
    aggregate(config, per_seed)
}
