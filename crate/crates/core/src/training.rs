//! Cross-entropy objective, Adadelta, the cosine schedule and the training loop.

use std::borrow::Cow;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::encoders::{token_embed, DualEncoderModel, ImageSample};
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{cosine_similarity, Tape, Tensor, Var};
use crate::tuning::TuningParams;

pub const ADADELTA_RHO: f64 = 0.9;
pub const ADADELTA_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    Adadelta,
    Sgd,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    Cosine,
    Constant,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub optimizer: Optimizer,
    pub schedule: Schedule,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.15,
            batch_size: 16,
            epochs: 15,
            optimizer: Optimizer::Adadelta,
            schedule: Schedule::Cosine,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Zero epochs is allowed and leaves the parameters untouched.
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        Ok(())
    }
}

/// `−log Pr(y = y_gt | z, t)` on the tape.
pub fn cross_entropy_loss<'t>(
    z: &Var<'t>,
    classifiers: &[Var<'t>],
    label: usize,
    temperature: f64,
) -> Result<Var<'t>> {
    if label >= classifiers.len() {
        return Err(Error::Index {
            index: label,
            bound: classifiers.len(),
        });
    }
    let sims = classifiers
        .iter()
        .map(|t| z.cosine_similarity(t))
        .collect::<Result<Vec<_>>>()?;
    let logp = z.tape().stack(&sims)?.log_softmax(temperature)?;
    Ok(logp.select(label)?.neg())
}

/// Tape-free value of [`cross_entropy_loss`].
pub fn cross_entropy(z: &Tensor, classifiers: &[Tensor], label: usize, temperature: f64) -> Result<f64> {
    if label >= classifiers.len() {
        return Err(Error::Index {
            index: label,
            bound: classifiers.len(),
        });
    }
    let sims = classifiers
        .iter()
        .map(|t| cosine_similarity(z, t))
        .collect::<Result<Vec<_>>>()?;
    let tape = Tape::new();
    let logp = tape.constant(Tensor::vector(sims)).log_softmax(temperature)?;
    logp.select(label)?.neg().value().item()
}

/// Running averages of squared gradients and squared updates.
#[derive(Clone, Debug, PartialEq)]
pub struct AdadeltaState {
    pub sq_grad: Vec<Tensor>,
    pub sq_update: Vec<Tensor>,
    pub rho: f64,
    pub eps: f64,
}

impl AdadeltaState {
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor>) -> Self {
        let sq_grad: Vec<Tensor> = params
            .into_iter()
            .map(|p| Tensor::zeros(p.shape().to_vec()))
            .collect();
        Self {
            sq_update: sq_grad.clone(),
            sq_grad,
            rho: ADADELTA_RHO,
            eps: ADADELTA_EPS,
        }
    }
}

/// One Adadelta update scaled by `lr`:
/// `E[g²] ← ρE[g²] + (1−ρ)g²`, `Δx = −√(E[Δx²]+ε)/√(E[g²]+ε)·g`,
/// `E[Δx²] ← ρE[Δx²] + (1−ρ)Δx²`, `x ← x + lr·Δx`.
pub fn adadelta_step(
    params: &mut [&mut Tensor],
    grads: &[Tensor],
    state: &mut AdadeltaState,
    lr: f64,
) -> Result<()> {
    check_aligned(params, grads)?;
    if state.sq_grad.len() != params.len() {
        return Err(Error::Contract(format!(
            "optimizer state tracks {} tensors, got {}",
            state.sq_grad.len(),
            params.len()
        )));
    }
    let (rho, eps) = (state.rho, state.eps);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        if state.sq_grad[i].shape() != p.shape() {
            return Err(Error::Contract(format!(
                "optimizer state shape {:?} for parameter {:?}",
                state.sq_grad[i].shape(),
                p.shape()
            )));
        }
        let eg = state.sq_grad[i].data_mut();
        let ex = state.sq_update[i].data_mut();
        for (j, (x, &gj)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
            eg[j] = rho * eg[j] + (1.0 - rho) * gj * gj;
            let dx = -((ex[j] + eps).sqrt() / (eg[j] + eps).sqrt()) * gj;
            ex[j] = rho * ex[j] + (1.0 - rho) * dx * dx;
            *x += lr * dx;
        }
    }
    Ok(())
}

pub fn sgd_step(params: &mut [&mut Tensor], grads: &[Tensor], lr: f64) -> Result<()> {
    check_aligned(params, grads)?;
    for (p, g) in params.iter_mut().zip(grads) {
        for (x, gj) in p.data_mut().iter_mut().zip(g.data()) {
            *x -= lr * gj;
        }
    }
    Ok(())
}

fn check_aligned(params: &[&mut Tensor], grads: &[Tensor]) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::Contract(format!(
            "{} parameters but {} gradients",
            params.len(),
            grads.len()
        )));
    }
    for (p, g) in params.iter().zip(grads) {
        if p.shape() != g.shape() {
            return Err(Error::Contract(format!(
                "gradient shape {:?} for parameter {:?}",
                g.shape(),
                p.shape()
            )));
        }
    }
    Ok(())
}

/// `γ·(1 + cos(π·epoch/total))/2`.
pub fn cosine_lr(epoch: usize, total_epochs: usize, base_lr: f64) -> Result<f64> {
    if epoch >= total_epochs {
        return Err(Error::Range {
            what: "epoch must be below the epoch count",
            value: epoch as f64,
        });
    }
    let phase = std::f64::consts::PI * epoch as f64 / total_epochs as f64;
    Ok(base_lr * (1.0 + phase.cos()) / 2.0)
}

/// Per-sample transform applied before the forward pass.
pub trait Augmentation {
    fn apply<'a>(&self, sample: &'a ImageSample, rng: &mut rng::Rng) -> Cow<'a, ImageSample>;
}

/// Leaves samples untouched; crop/flip has no meaning for synthetic patches.
pub struct NoAugmentation;

impl Augmentation for NoAugmentation {
    fn apply<'a>(&self, sample: &'a ImageSample, _rng: &mut rng::Rng) -> Cow<'a, ImageSample> {
        Cow::Borrowed(sample)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub tuning: TuningParams,
    pub trace: Vec<LossRecord>,
}

impl TrainOutcome {
    /// Mean step loss of each epoch.
    pub fn epoch_means(&self) -> Vec<f64> {
        let epochs = self.trace.last().map_or(0, |r| r.epoch + 1);
        (0..epochs)
            .map(|e| {
                let losses: Vec<f64> = self
                    .trace
                    .iter()
                    .filter(|r| r.epoch == e)
                    .map(|r| r.loss)
                    .collect();
                losses.iter().sum::<f64>() / losses.len() as f64
            })
            .collect()
    }
}

/// Trains φ on `samples`, whose labels index `class_tokens`.
pub fn train_apex(
    samples: &[ImageSample],
    class_tokens: &[Vec<usize>],
    model: &DualEncoderModel,
    tuning: TuningParams,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    train_apex_with(samples, class_tokens, model, tuning, config, &NoAugmentation)
}

pub fn train_apex_with(
    samples: &[ImageSample],
    class_tokens: &[Vec<usize>],
    model: &DualEncoderModel,
    mut tuning: TuningParams,
    config: &TrainConfig,
    augmentation: &dyn Augmentation,
) -> Result<TrainOutcome> {
    config.validate()?;
    if samples.is_empty() {
        return Err(Error::Input("training set is empty".into()));
    }
    if !model.is_frozen() {
        return Err(Error::State("training requires a frozen model".into()));
    }
    if let Some(s) = samples.iter().find(|s| s.label >= class_tokens.len()) {
        return Err(Error::Index {
            index: s.label,
            bound: class_tokens.len(),
        });
    }
    let word_embeddings = class_tokens
        .iter()
        .map(|t| token_embed(t, model))
        .collect::<Result<Vec<_>>>()?;
    let temperature = model.config().temperature;
    let mut adadelta = AdadeltaState::new(tuning.trainable_params().into_iter().map(|(_, t)| t));
    let mut trace = Vec::new();
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut step = 0;

    for epoch in 0..config.epochs {
        let lr = match config.schedule {
            Schedule::Cosine => cosine_lr(epoch, config.epochs, config.learning_rate)?,
            Schedule::Constant => config.learning_rate,
        };
        let mut epoch_rng = rng::stream(config.seed, epoch as u64);
        order.sort_unstable();
        order.shuffle(&mut epoch_rng);

        for batch in order.chunks(config.batch_size) {
            let batch: Vec<ImageSample> = batch
                .iter()
                .map(|&i| augmentation.apply(&samples[i], &mut epoch_rng).into_owned())
                .collect();
            let (value, grads) = batch_loss(&batch, &word_embeddings, model, &tuning, temperature)?;
            if !value.is_finite() {
                return Err(Error::Numeric { step, loss: value });
            }
            let mut params = tuning.trainable_params_mut();
            match config.optimizer {
                Optimizer::Adadelta => adadelta_step(&mut params, &grads, &mut adadelta, lr)?,
                Optimizer::Sgd => sgd_step(&mut params, &grads, lr)?,
            }
            trace.push(LossRecord {
                step,
                epoch,
                lr,
                loss: value,
            });
            step += 1;
        }
    }
    Ok(TrainOutcome { tuning, trace })
}

fn batch_loss(
    batch: &[ImageSample],
    word_embeddings: &[Tensor],
    model: &DualEncoderModel,
    tuning: &TuningParams,
    temperature: f64,
) -> Result<(f64, Vec<Tensor>)> {
    let tape = Tape::new();
    let bound_model = model.bind(&tape);
    let bound = tuning.bind(&tape, true);
    let classifiers = word_embeddings
        .iter()
        .map(|w0| {
            let (t_tilde, _) = bound.pre_adapter_text(&bound_model, tape.constant(w0.clone()))?;
            bound.text_adapter.apply(t_tilde)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut losses = Vec::with_capacity(batch.len());
    for sample in batch {
        let e0 = bound_model.patch_embed(sample)?;
        let (z, _) = bound.image_feature(&bound_model, e0)?;
        losses.push(cross_entropy_loss(&z, &classifiers, sample.label, temperature)?);
    }
    let loss = tape.stack(&losses)?.sum().scale(1.0 / batch.len() as f64);
    let value = loss.value().item()?;
    if !value.is_finite() {
        return Ok((value, Vec::new()));
    }
    let grads = tape.backward(loss)?;
    Ok((value, bound.vars().iter().map(|v| grads.get_or_zeros(v)).collect()))
}

/// Mean training loss over `batch` and its gradient with respect to every
/// trainable tensor, in [`TuningParams::trainable_params`] order.
pub fn loss_and_gradients(
    batch: &[ImageSample],
    class_tokens: &[Vec<usize>],
    model: &DualEncoderModel,
    tuning: &TuningParams,
) -> Result<(f64, Vec<Tensor>)> {
    if batch.is_empty() {
        return Err(Error::Input("empty batch".into()));
    }
    if let Some(s) = batch.iter().find(|s| s.label >= class_tokens.len()) {
        return Err(Error::Index {
            index: s.label,
            bound: class_tokens.len(),
        });
    }
    let word_embeddings = class_tokens
        .iter()
        .map(|t| token_embed(t, model))
        .collect::<Result<Vec<_>>>()?;
    batch_loss(batch, &word_embeddings, model, tuning, model.config().temperature)
}
