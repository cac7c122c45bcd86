//! Seeded synthetic domains.
//!
//! A [`World`] ties class names to images through a fixed random linear
//! renderer from the joint space to the patch grid: the prototype image of a
//! class is the rendering of its concept, a (domain-shifted) pretrained text
//! direction of its name. Samples are `s · prototype + σ · noise`, so the
//! separability knob `s` scales the spacing between class means and `s = 0`
//! collapses every class onto pure noise.

use std::collections::HashSet;

use apex_core::encoders::{class_text_feature, DualEncoderModel, EncoderConfig, ImageSample};
use apex_core::rng;
use apex_core::Tensor;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticDatasetSpec {
    pub num_classes: usize,
    pub base_fraction: f64,
    pub shots_per_base_class: usize,
    pub eval_samples_per_class: usize,
    /// Multiplier on the class prototypes (between-class spacing).
    pub separability: f64,
    pub feature_noise: f64,
    /// Strength of the per-domain linear distortion of class concepts.
    pub domain_shift: f64,
    /// Strength of the per-class concept perturbation.
    pub class_jitter: f64,
    pub seed: u64,
}

impl Default for SyntheticDatasetSpec {
    fn default() -> Self {
        Self {
            num_classes: 10,
            base_fraction: 0.5,
            shots_per_base_class: 16,
            eval_samples_per_class: 20,
            separability: 2.0,
            feature_noise: 0.25,
            domain_shift: 0.5,
            class_jitter: 0.2,
            seed: 0,
        }
    }
}

impl SyntheticDatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(HarnessError::Config("need at least 2 classes".into()));
        }
        if !(self.base_fraction > 0.0 && self.base_fraction < 1.0) {
            return Err(HarnessError::Config(format!(
                "base_fraction must lie in (0, 1), got {}",
                self.base_fraction
            )));
        }
        let base = base_count(self.num_classes, self.base_fraction);
        if base == 0 || base >= self.num_classes {
            return Err(HarnessError::Config(format!(
                "base_fraction {} leaves an empty side for {} classes",
                self.base_fraction, self.num_classes
            )));
        }
        if self.shots_per_base_class == 0 || self.eval_samples_per_class == 0 {
            return Err(HarnessError::Config("sample counts must be at least 1".into()));
        }
        if !(self.separability >= 0.0 && self.separability.is_finite()) {
            return Err(HarnessError::Config(format!(
                "separability must be nonnegative, got {}",
                self.separability
            )));
        }
        for (name, v) in [
            ("feature_noise", self.feature_noise),
            ("domain_shift", self.domain_shift),
            ("class_jitter", self.class_jitter),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(HarnessError::Config(format!(
                    "{name} must be nonnegative, got {v}"
                )));
            }
        }
        Ok(())
    }
}

fn base_count(classes: usize, fraction: f64) -> usize {
    (fraction * classes as f64).ceil() as usize
}

/// The rendering rule shared by pretraining and every experiment domain.
#[derive(Clone, Debug, PartialEq)]
pub struct World {
    /// `[joint_dim × (patches·patch_width)]` linear renderer.
    renderer: Tensor,
    patches: usize,
    patch_width: usize,
    token_seq_len: usize,
    vocab_size: usize,
}

impl World {
    pub fn new(config: &EncoderConfig, seed: u64) -> Self {
        let mut rng = rng::seeded(seed);
        let (d, m, p) = (config.joint_dim, config.patches, config.patch_width);
        // Unit-norm concepts render to images with unit-norm patches on average.
        let renderer = Tensor::randn(vec![d, m * p], 1.0 / (p as f64).sqrt(), &mut rng);
        Self {
            renderer,
            patches: m,
            patch_width: p,
            token_seq_len: config.token_seq_len,
            vocab_size: config.vocab_size,
        }
    }

    /// `count` distinct random class names.
    pub fn class_names(&self, count: usize, rng: &mut rng::Rng) -> Vec<Vec<usize>> {
        let mut seen = HashSet::new();
        let mut names = Vec::with_capacity(count);
        while names.len() < count {
            let name: Vec<usize> = (0..self.token_seq_len)
                .map(|_| rng.random_range(0..self.vocab_size))
                .collect();
            if seen.insert(name.clone()) {
                names.push(name);
            }
        }
        names
    }

    /// Noise-free image of a concept vector (normalized first).
    pub fn prototype(&self, concept: &Tensor) -> Result<Tensor> {
        let norm = concept.norm();
        if norm == 0.0 {
            return Err(apex_core::Error::DegenerateInput("zero concept".into()).into());
        }
        let row = concept.scale(1.0 / norm).reshape(vec![1, concept.len()])?;
        Ok(row.matmul(&self.renderer)?.reshape(vec![self.patches, self.patch_width])?)
    }

    /// `s · prototype + σ · noise`, rescaled to unit RMS like a normalized
    /// input image, so `s` only sets the signal-to-noise ratio.
    pub fn sample(
        &self,
        prototype: &Tensor,
        label: usize,
        separability: f64,
        noise: f64,
        rng: &mut rng::Rng,
    ) -> ImageSample {
        let mut pixels = prototype.scale(separability);
        for x in pixels.data_mut() {
            let n: f64 = StandardNormal.sample(rng);
            *x += noise * n;
        }
        let rms = (pixels.data().iter().map(|x| x * x).sum::<f64>() / pixels.len() as f64).sqrt();
        if rms > 0.0 {
            pixels = pixels.scale(1.0 / rms);
        }
        ImageSample { pixels, label }
    }
}

/// Class names plus per-class training and evaluation images. Labels are
/// global class indices into `class_tokens`.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticDataset {
    pub class_tokens: Vec<Vec<usize>>,
    pub train: Vec<Vec<ImageSample>>,
    pub eval: Vec<Vec<ImageSample>>,
}

/// Draws a domain: class names, their concepts under the domain shift, and
/// per-class images. Concepts are the pretrained text directions of the class
/// names, mixed through `I + δ·G` with a per-domain Gaussian `G` and jittered
/// per class, so the pretrained alignment is imperfect in a way partly shared
/// across classes.
pub fn gen_synthetic(
    spec: &SyntheticDatasetSpec,
    world: &World,
    model: &DualEncoderModel,
) -> Result<SyntheticDataset> {
    spec.validate()?;
    let mut rng = rng::stream(spec.seed, 1);
    let class_tokens = world.class_names(spec.num_classes, &mut rng);
    let d = model.config().joint_dim;
    let mut shift = Tensor::randn(vec![d, d], spec.domain_shift / (d as f64).sqrt(), &mut rng);
    for i in 0..d {
        shift.data_mut()[i * d + i] += 1.0;
    }
    let prototypes = class_tokens
        .iter()
        .map(|tokens| {
            let t = class_text_feature(tokens, model)?;
            let t = t.scale(1.0 / t.norm());
            let shifted = t.reshape(vec![1, d])?.matmul(&shift)?.reshape(vec![d])?;
            let jitter = Tensor::randn(vec![d], spec.class_jitter / (d as f64).sqrt(), &mut rng);
            world.prototype(&shifted.lerp_with(1.0, &jitter, 1.0)?)
        })
        .collect::<Result<Vec<_>>>()?;
    let draw = |n: usize, rng: &mut rng::Rng| -> Vec<Vec<ImageSample>> {
        prototypes
            .iter()
            .enumerate()
            .map(|(label, proto)| {
                (0..n)
                    .map(|_| world.sample(proto, label, spec.separability, spec.feature_noise, rng))
                    .collect()
            })
            .collect()
    };
    let train = draw(spec.shots_per_base_class, &mut rng);
    let eval = draw(spec.eval_samples_per_class, &mut rng);
    Ok(SyntheticDataset {
        class_tokens,
        train,
        eval,
    })
}

/// Seeded shuffle; the first `⌈fraction·C⌉` classes are base, the rest novel.
pub fn split_base_novel(
    classes: &[usize],
    base_fraction: f64,
    seed: u64,
) -> Result<(Vec<usize>, Vec<usize>)> {
    if classes.len() < 2 {
        return Err(HarnessError::Config("split needs at least 2 classes".into()));
    }
    let base = base_count(classes.len(), base_fraction);
    if !(base_fraction > 0.0) || base == 0 || base >= classes.len() {
        return Err(HarnessError::Config(format!(
            "base_fraction {base_fraction} leaves an empty side for {} classes",
            classes.len()
        )));
    }
    let mut shuffled = classes.to_vec();
    shuffled.shuffle(&mut rng::stream(seed, 2));
    let novel = shuffled.split_off(base);
    Ok((shuffled, novel))
}
