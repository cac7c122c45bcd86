//! Stand-in for contrastive pretraining.
//!
//! A randomly initialized dual encoder has chance-level zero-shot accuracy.
//! Before freezing, the image projection is refit by ridge regression so that
//! the projected visual feature of an image predicts the normalized text
//! feature of its class name, over many classes drawn from the same
//! [`World`]. Every other weight keeps its random initialization.

use apex_core::encoders::{class_text_feature, image_head_input, patch_embed, DualEncoderModel};
use apex_core::rng;
use apex_core::Tensor;
use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};
use crate::synthetic::World;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub classes: usize,
    pub samples_per_class: usize,
    /// Each sample's separability is drawn log-uniformly from
    /// `[min_separability, max_separability]`, so the fitted projection
    /// serves every image scale a domain may use.
    pub min_separability: f64,
    pub max_separability: f64,
    pub feature_noise: f64,
    pub ridge: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            classes: 200,
            samples_per_class: 4,
            min_separability: 1.0,
            max_separability: 32.0,
            feature_noise: 0.25,
            ridge: 1e-2,
        }
    }
}

/// Refits the image projection of an unfrozen model; returns it frozen.
pub fn pretrain_alignment(
    mut model: DualEncoderModel,
    world: &World,
    config: &PretrainConfig,
    seed: u64,
) -> Result<DualEncoderModel> {
    if config.classes == 0 || config.samples_per_class == 0 {
        return Err(HarnessError::Config("pretraining needs samples".into()));
    }
    if !(config.ridge > 0.0) {
        return Err(HarnessError::Config("ridge penalty must be positive".into()));
    }
    if !(config.min_separability > 0.0 && config.min_separability <= config.max_separability) {
        return Err(HarnessError::Config(format!(
            "pretraining separability range [{}, {}] is invalid",
            config.min_separability, config.max_separability
        )));
    }
    let (lo, hi) = (config.min_separability.ln(), config.max_separability.ln());
    let mut rng = rng::stream(seed, 3);
    let names = world.class_names(config.classes, &mut rng);
    let dv = model.config().visual_dim;
    let d = model.config().joint_dim;
    let n = config.classes * config.samples_per_class;
    let mut inputs = DMatrix::<f64>::zeros(n, dv);
    let mut targets = DMatrix::<f64>::zeros(n, d);
    let mut row = 0;
    for (label, tokens) in names.iter().enumerate() {
        let t = class_text_feature(tokens, &model)?;
        let t = t.scale(1.0 / t.norm());
        let prototype = world.prototype(&t)?;
        for _ in 0..config.samples_per_class {
            let s = (lo + (hi - lo) * rng.random::<f64>()).exp();
            let image = world.sample(&prototype, label, s, config.feature_noise, &mut rng);
            let h = image_head_input(&patch_embed(&image, &model)?, &model)?;
            inputs.row_mut(row).copy_from_slice(h.data());
            targets.row_mut(row).copy_from_slice(t.data());
            row += 1;
        }
    }
    let gram = inputs.transpose() * &inputs + DMatrix::<f64>::identity(dv, dv) * config.ridge;
    let rhs = inputs.transpose() * &targets;
    let weight = gram
        .cholesky()
        .ok_or_else(|| HarnessError::Config("ridge system is not positive definite".into()))?
        .solve(&rhs);
    let data: Vec<f64> = (0..dv)
        .flat_map(|i| (0..d).map(move |j| (i, j)))
        .map(|(i, j)| weight[(i, j)])
        .collect();
    model.set_tensor("visual.proj.weight", Tensor::new(vec![dv, d], data)?)?;
    Ok(model.freeze())
}
