//! Adaptive ensembling at evaluation time.
//!
//! Each evaluation class gets a coefficient `α = exp(−β·d_avg·𝟙(d_nn > ε))`
//! from the distances between its pretrained text feature and those of the
//! classes seen in training. The class's classifier blends post- and
//! pre-adapter features with `α`; the image feature blends the pretrained and
//! prompted visual features with the mean coefficient `ᾱ`.

use serde::{Deserialize, Serialize};

use crate::encoders::{
    argmax, class_text_feature, image_feature, predict_probs, token_embed, DualEncoderModel,
    ImageSample,
};
use crate::error::{Error, Result};
use crate::tensor::{cosine_similarity, Tape, Tensor};
use crate::tuning::{adapter_apply, Adapter, TuningParams};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnsembleConfig {
    pub beta: f64,
    pub epsilon: f64,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        Self {
            beta: 4.0,
            epsilon: 0.05,
        }
    }
}

impl EnsembleConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::Config(format!("beta must be nonnegative, got {}", self.beta)));
        }
        if !(0.0..=2.0).contains(&self.epsilon) {
            return Err(Error::Config(format!(
                "epsilon must lie in [0, 2], got {}",
                self.epsilon
            )));
        }
        Ok(())
    }
}

/// How classifiers and image features are blended at evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnsembleMode {
    /// Per-class distance-driven `α` for text, mean `ᾱ` for the image.
    Adaptive,
    /// One coefficient for every class and for the image.
    Fixed(f64),
    /// Post-adapter classifiers and the prompted image feature, unblended.
    Off,
}

/// Pretrained (untuned) text features of the learned classes and of the
/// evaluation candidates.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassBank {
    pub learned: Vec<Tensor>,
    pub eval: Vec<Tensor>,
}

impl ClassBank {
    pub fn new(learned: Vec<Tensor>, eval: Vec<Tensor>) -> Result<Self> {
        for t in learned.iter().chain(&eval) {
            if t.norm() == 0.0 {
                return Err(Error::DegenerateInput("zero-norm class feature".into()));
            }
        }
        Ok(Self { learned, eval })
    }

    pub fn build(
        model: &DualEncoderModel,
        learned_tokens: &[Vec<usize>],
        eval_tokens: &[Vec<usize>],
    ) -> Result<Self> {
        let features = |tokens: &[Vec<usize>]| {
            tokens
                .iter()
                .map(|t| class_text_feature(t, model))
                .collect::<Result<Vec<_>>>()
        };
        Self::new(features(learned_tokens)?, features(eval_tokens)?)
    }
}

/// `(d_avg, d_nn)`: one minus the mean and one minus the largest cosine
/// similarity to the learned classes.
pub fn class_distances(t_eval: &Tensor, bank: &ClassBank) -> Result<(f64, f64)> {
    if bank.learned.is_empty() {
        return Err(Error::State("class bank has no learned classes".into()));
    }
    let mut sum = 0.0;
    let mut max = f64::NEG_INFINITY;
    for t in &bank.learned {
        let s = cosine_similarity(t_eval, t)?;
        sum += s;
        max = max.max(s);
    }
    Ok((1.0 - sum / bank.learned.len() as f64, 1.0 - max))
}

pub fn alpha_eval(d_avg: f64, d_nn: f64, cfg: &EnsembleConfig) -> f64 {
    if d_nn > cfg.epsilon {
        (-cfg.beta * d_avg).exp()
    } else {
        1.0
    }
}

fn check_coefficient(alpha: f64) -> Result<()> {
    if (0.0..=1.0).contains(&alpha) {
        Ok(())
    } else {
        Err(Error::Parameter(format!("blend coefficient {alpha} outside [0, 1]")))
    }
}

/// `α·adapter(t̃) + (1−α)·t̃`.
pub fn ensemble_text(t_tilde: &Tensor, adapter: &Adapter, alpha: f64) -> Result<Tensor> {
    check_coefficient(alpha)?;
    blend(&adapter_apply(t_tilde, adapter)?, t_tilde, alpha)
}

/// The same blend with one coefficient shared by every class.
pub fn fixed_alpha_ensemble(t_tilde: &Tensor, adapter: &Adapter, alpha: f64) -> Result<Tensor> {
    ensemble_text(t_tilde, adapter, alpha)
}

/// `ᾱ·z′ + (1−ᾱ)·z`.
pub fn ensemble_visual(z_pretrained: &Tensor, z: &Tensor, alpha_bar: f64) -> Result<Tensor> {
    check_coefficient(alpha_bar)?;
    blend(z_pretrained, z, alpha_bar)
}

/// `α·a + (1−α)·b`, written as `b + α(a − b)` so that equal inputs and
/// both endpoints come out exact.
fn blend(a: &Tensor, b: &Tensor, alpha: f64) -> Result<Tensor> {
    let diff = a.lerp_with(1.0, b, -1.0)?;
    if alpha == 1.0 {
        return Ok(a.clone());
    }
    b.lerp_with(1.0, &diff, alpha)
}

/// Per-class diagnostics, one row of the α table.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlphaRow {
    pub class_id: usize,
    pub d_avg: f64,
    pub d_nn: f64,
    pub alpha: f64,
}

/// Image-independent half of adaptive inference: per-class coefficients and
/// blended classifiers.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedClasses {
    pub mode: EnsembleMode,
    /// Pre-adapter features `t̃_eval` from the prompted text path.
    pub pre_adapter: Vec<Tensor>,
    pub d_avg: Vec<f64>,
    pub d_nn: Vec<f64>,
    /// Text blend coefficient actually used per class.
    pub alpha: Vec<f64>,
    /// Blended classifiers `t_eval`.
    pub classifiers: Vec<Tensor>,
    /// Image blend weight on the pretrained feature `z′`.
    pub alpha_bar: f64,
}

impl PreparedClasses {
    pub fn alpha_table(&self, class_ids: &[usize]) -> Vec<AlphaRow> {
        class_ids
            .iter()
            .enumerate()
            .map(|(i, &class_id)| AlphaRow {
                class_id,
                d_avg: self.d_avg[i],
                d_nn: self.d_nn[i],
                alpha: self.alpha[i],
            })
            .collect()
    }
}

/// Pre-adapter text feature `t̃` of one class name under the learned prompts.
pub fn pre_adapter_text_feature(
    tokens: &[usize],
    model: &DualEncoderModel,
    tuning: &TuningParams,
) -> Result<Tensor> {
    let w0 = token_embed(tokens, model)?;
    let tape = Tape::new();
    let bound_model = model.bind(&tape);
    let bound = tuning.bind(&tape, false);
    let (t, _) = bound.pre_adapter_text(&bound_model, tape.constant(w0))?;
    Ok((*t.value()).clone())
}

/// Prompted image feature `z` (with the image adapter when present).
pub fn prompted_image_feature(
    image: &ImageSample,
    model: &DualEncoderModel,
    tuning: &TuningParams,
) -> Result<Tensor> {
    let tape = Tape::new();
    let bound_model = model.bind(&tape);
    let bound = tuning.bind(&tape, false);
    let e0 = bound_model.patch_embed(image)?;
    let (z, _) = bound.image_feature(&bound_model, e0)?;
    Ok((*z.value()).clone())
}

/// Computes distances, coefficients and blended classifiers for the
/// evaluation candidates in `bank.eval`, named by `eval_tokens`.
pub fn prepare_classes(
    eval_tokens: &[Vec<usize>],
    model: &DualEncoderModel,
    tuning: &TuningParams,
    bank: &ClassBank,
    cfg: &EnsembleConfig,
    mode: EnsembleMode,
) -> Result<PreparedClasses> {
    cfg.validate()?;
    if eval_tokens.is_empty() {
        return Err(Error::Input("no evaluation classes".into()));
    }
    if eval_tokens.len() != bank.eval.len() {
        return Err(Error::Contract(format!(
            "{} evaluation classes but the bank holds {}",
            eval_tokens.len(),
            bank.eval.len()
        )));
    }
    let pre_adapter = eval_tokens
        .iter()
        .map(|t| pre_adapter_text_feature(t, model, tuning))
        .collect::<Result<Vec<_>>>()?;
    let mut d_avg = Vec::with_capacity(bank.eval.len());
    let mut d_nn = Vec::with_capacity(bank.eval.len());
    for t in &bank.eval {
        let (a, n) = class_distances(t, bank)?;
        d_avg.push(a);
        d_nn.push(n);
    }
    let (alpha, alpha_bar) = match mode {
        EnsembleMode::Adaptive => {
            let alpha: Vec<f64> = d_avg
                .iter()
                .zip(&d_nn)
                .map(|(&a, &n)| alpha_eval(a, n, cfg))
                .collect();
            let mean = alpha.iter().sum::<f64>() / alpha.len() as f64;
            (alpha, mean)
        }
        EnsembleMode::Fixed(a) => {
            check_coefficient(a)?;
            (vec![a; bank.eval.len()], a)
        }
        EnsembleMode::Off => (vec![1.0; bank.eval.len()], 0.0),
    };
    let classifiers = pre_adapter
        .iter()
        .zip(&alpha)
        .map(|(t, &a)| ensemble_text(t, &tuning.text_adapter, a))
        .collect::<Result<Vec<_>>>()?;
    Ok(PreparedClasses {
        mode,
        pre_adapter,
        d_avg,
        d_nn,
        alpha,
        classifiers,
        alpha_bar,
    })
}

/// One image's prediction with its intermediate features.
#[derive(Clone, Debug, PartialEq)]
pub struct Inference {
    pub prediction: usize,
    pub probs: Vec<f64>,
    /// Pretrained feature `z′`.
    pub z_pretrained: Tensor,
    /// Prompted feature `z`.
    pub z_prompted: Tensor,
    /// The blended feature that is classified.
    pub z: Tensor,
}

pub fn infer_prepared(
    image: &ImageSample,
    prepared: &PreparedClasses,
    model: &DualEncoderModel,
    tuning: &TuningParams,
) -> Result<Inference> {
    let z_pretrained = image_feature(image, model)?;
    let z_prompted = prompted_image_feature(image, model, tuning)?;
    classify_features(z_pretrained, z_prompted, prepared, model.config().temperature)
}

/// Blends precomputed pretrained and prompted image features with `ᾱ` and
/// classifies against the prepared classifiers.
pub fn classify_features(
    z_pretrained: Tensor,
    z_prompted: Tensor,
    prepared: &PreparedClasses,
    temperature: f64,
) -> Result<Inference> {
    let z = ensemble_visual(&z_pretrained, &z_prompted, prepared.alpha_bar)?;
    let probs = predict_probs(&z, &prepared.classifiers, temperature)?;
    Ok(Inference {
        prediction: argmax(&probs),
        probs,
        z_pretrained,
        z_prompted,
        z,
    })
}

/// Full adaptive inference for one image against `eval_tokens`.
pub fn apex_infer(
    image: &ImageSample,
    eval_tokens: &[Vec<usize>],
    model: &DualEncoderModel,
    tuning: &TuningParams,
    bank: &ClassBank,
    cfg: &EnsembleConfig,
) -> Result<(Inference, PreparedClasses)> {
    let prepared = prepare_classes(eval_tokens, model, tuning, bank, cfg, EnsembleMode::Adaptive)?;
    let inference = infer_prepared(image, &prepared, model, tuning)?;
    Ok((inference, prepared))
}
