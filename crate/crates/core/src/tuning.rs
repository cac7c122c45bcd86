//! The trainable surface: deep visual prompts, the shallow text prompt (with
//! optional deeper text prompts for ablations), and text/image adapters.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::encoders::{DualEncoderModel, EncoderConfig, EncoderTrace};
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{Tape, Tensor, Var};

/// Standard deviation of every Gaussian prompt initialization.
pub const PROMPT_INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PromptConfig {
    /// J_V: number of leading visual layers that receive a fresh prompt block.
    pub visual_depth: usize,
    /// J_T: 1 is the shallow input-only prompt; larger values are deep text prompts.
    pub text_depth: usize,
    pub visual_len: usize,
    pub text_len: usize,
}

impl Default for PromptConfig {
    fn default() -> Self {
        Self {
            visual_depth: 4,
            text_depth: 1,
            visual_len: 2,
            text_len: 2,
        }
    }
}

impl PromptConfig {
    /// No prompts anywhere.
    pub fn none() -> Self {
        Self {
            visual_depth: 0,
            text_depth: 0,
            visual_len: 0,
            text_len: 0,
        }
    }

    pub fn validate(&self, enc: &EncoderConfig) -> Result<()> {
        if self.visual_depth > enc.visual_layers {
            return Err(Error::Config(format!(
                "visual prompt depth {} exceeds {} visual layers",
                self.visual_depth, enc.visual_layers
            )));
        }
        if self.text_depth > enc.text_layers {
            return Err(Error::Config(format!(
                "text prompt depth {} exceeds {} text layers",
                self.text_depth, enc.text_layers
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdapterMode {
    Dense,
    LowRank,
    Bottleneck,
}

impl AdapterMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            AdapterMode::Dense => "dense",
            AdapterMode::LowRank => "low_rank",
            AdapterMode::Bottleneck => "bottleneck",
        }
    }
}

impl std::str::FromStr for AdapterMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dense" => Ok(AdapterMode::Dense),
            "low_rank" => Ok(AdapterMode::LowRank),
            "bottleneck" => Ok(AdapterMode::Bottleneck),
            other => Err(Error::Config(format!("unknown adapter mode {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdapterConfig {
    pub mode: AdapterMode,
    /// d_r, ignored in dense mode.
    pub rank: usize,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        Self {
            mode: AdapterMode::Dense,
            rank: 4,
        }
    }
}

/// A map on `d`-dimensional features; every mode is the identity at init.
///
/// * dense: `t ↦ Aᵀt + b`
/// * low rank: `t ↦ t + V Uᵀ t + b`
/// * bottleneck: `t ↦ t + W₂ᵀ gelu(W₁ᵀ t) + b`
#[derive(Clone, Debug, PartialEq)]
pub enum Adapter {
    Dense { a: Tensor, b: Tensor },
    LowRank { u: Tensor, v: Tensor, b: Tensor },
    Bottleneck { w1: Tensor, w2: Tensor, b: Tensor },
}

pub type TextAdapter = Adapter;

impl Adapter {
    /// `A = I`, `b = 0` for dense; random `U` / `W₁`, zero `V` / `W₂` otherwise.
    pub fn init(dim: usize, config: &AdapterConfig, rng: &mut rng::Rng) -> Result<Self> {
        let rank_ok = (1..=dim).contains(&config.rank);
        let std = 1.0 / (dim as f64).sqrt();
        let b = Tensor::zeros(vec![dim]);
        match config.mode {
            AdapterMode::Dense => Ok(Adapter::Dense {
                a: Tensor::identity(dim),
                b,
            }),
            _ if !rank_ok => Err(Error::Config(format!(
                "adapter rank {} must lie in 1..={dim}",
                config.rank
            ))),
            AdapterMode::LowRank => Ok(Adapter::LowRank {
                u: Tensor::randn(vec![dim, config.rank], std, rng),
                v: Tensor::zeros(vec![dim, config.rank]),
                b,
            }),
            AdapterMode::Bottleneck => Ok(Adapter::Bottleneck {
                w1: Tensor::randn(vec![dim, config.rank], std, rng),
                w2: Tensor::zeros(vec![config.rank, dim]),
                b,
            }),
        }
    }

    pub fn mode(&self) -> AdapterMode {
        match self {
            Adapter::Dense { .. } => AdapterMode::Dense,
            Adapter::LowRank { .. } => AdapterMode::LowRank,
            Adapter::Bottleneck { .. } => AdapterMode::Bottleneck,
        }
    }

    /// d_r, or `d` for dense.
    pub fn rank(&self) -> usize {
        match self {
            Adapter::Dense { a, .. } => a.cols(),
            Adapter::LowRank { u, .. } => u.cols(),
            Adapter::Bottleneck { w1, .. } => w1.cols(),
        }
    }

    pub fn dim(&self) -> usize {
        self.bias().len()
    }

    pub fn bias(&self) -> &Tensor {
        match self {
            Adapter::Dense { b, .. } | Adapter::LowRank { b, .. } | Adapter::Bottleneck { b, .. } => b,
        }
    }

    pub fn named_tensors(&self) -> Vec<(&'static str, &Tensor)> {
        match self {
            Adapter::Dense { a, b } => vec![("a", a), ("b", b)],
            Adapter::LowRank { u, v, b } => vec![("u", u), ("v", v), ("b", b)],
            Adapter::Bottleneck { w1, w2, b } => vec![("w1", w1), ("w2", w2), ("b", b)],
        }
    }

    fn tensors_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        match self {
            Adapter::Dense { a, b } => vec![("a", a), ("b", b)],
            Adapter::LowRank { u, v, b } => vec![("u", u), ("v", v), ("b", b)],
            Adapter::Bottleneck { w1, w2, b } => vec![("w1", w1), ("w2", w2), ("b", b)],
        }
    }

    /// Rebuilds an adapter from its named tensors, checking shapes.
    pub fn from_named(mode: AdapterMode, tensors: &HashMap<&str, Tensor>) -> Result<Self> {
        let get = |name: &str| {
            tensors
                .get(name)
                .cloned()
                .ok_or_else(|| Error::Input(format!("missing adapter tensor {name}")))
        };
        let adapter = match mode {
            AdapterMode::Dense => Adapter::Dense {
                a: get("a")?,
                b: get("b")?,
            },
            AdapterMode::LowRank => Adapter::LowRank {
                u: get("u")?,
                v: get("v")?,
                b: get("b")?,
            },
            AdapterMode::Bottleneck => Adapter::Bottleneck {
                w1: get("w1")?,
                w2: get("w2")?,
                b: get("b")?,
            },
        };
        adapter.check_shapes()?;
        Ok(adapter)
    }

    fn check_shapes(&self) -> Result<()> {
        let b = self.bias();
        if b.rank() != 1 {
            return Err(Error::Input(format!("adapter bias has shape {:?}", b.shape())));
        }
        let d = b.len();
        let (x, y, expected_x, expected_y) = match self {
            Adapter::Dense { a, .. } => (a, a, [d, d], [d, d]),
            Adapter::LowRank { u, v, .. } => {
                let r = u.shape().get(1).copied().unwrap_or(0);
                (u, v, [d, r], [d, r])
            }
            Adapter::Bottleneck { w1, w2, .. } => {
                let r = w1.shape().get(1).copied().unwrap_or(0);
                (w1, w2, [d, r], [r, d])
            }
        };
        if x.shape() != expected_x {
            return Err(Error::dim("adapter", x.shape(), &expected_x));
        }
        if y.shape() != expected_y {
            return Err(Error::dim("adapter", y.shape(), &expected_y));
        }
        if self.mode() != AdapterMode::Dense && !(1..=d).contains(&self.rank()) {
            return Err(Error::Config(format!("adapter rank {} exceeds {d}", self.rank())));
        }
        Ok(())
    }

    fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> BoundAdapter<'t> {
        let vars = self
            .named_tensors()
            .into_iter()
            .map(|(_, t)| bind_one(tape, t, trainable))
            .collect();
        BoundAdapter {
            mode: self.mode(),
            vars,
        }
    }
}

fn bind_one<'t>(tape: &'t Tape, t: &Tensor, trainable: bool) -> Var<'t> {
    if trainable {
        tape.leaf(t.clone())
    } else {
        tape.constant(t.clone())
    }
}

/// An adapter whose parameters live on a tape.
#[derive(Clone)]
pub struct BoundAdapter<'t> {
    mode: AdapterMode,
    vars: Vec<Var<'t>>,
}

impl<'t> BoundAdapter<'t> {
    /// Applies the adapter to a `[d]` feature.
    pub fn apply(&self, x: Var<'t>) -> Result<Var<'t>> {
        let d = *self.vars.last().expect("adapter has a bias").shape().first().unwrap_or(&0);
        if x.shape() != [d] {
            return Err(Error::dim("adapter_apply", &x.shape(), &[d]));
        }
        let row = x.reshape(vec![1, d])?;
        let b = &self.vars[self.vars.len() - 1];
        let out = match self.mode {
            AdapterMode::Dense => row.matmul(&self.vars[0])?.add_row(b)?,
            AdapterMode::LowRank => {
                let (u, v) = (&self.vars[0], &self.vars[1]);
                let delta = row.matmul(u)?.matmul(&v.transpose()?)?;
                row.add(&delta)?.add_row(b)?
            }
            AdapterMode::Bottleneck => {
                let (w1, w2) = (&self.vars[0], &self.vars[1]);
                let delta = row.matmul(w1)?.gelu().matmul(w2)?;
                row.add(&delta)?.add_row(b)?
            }
        };
        out.reshape(vec![d])
    }

    pub fn vars(&self) -> &[Var<'t>] {
        &self.vars
    }
}

/// Fresh visual prompt blocks `P̂_0..P̂_{J_V−1}`, each `b_V × d_v`.
#[derive(Clone, Debug, PartialEq)]
pub struct VisualPrompts {
    pub blocks: Vec<Tensor>,
}

/// The shallow prompt `P_0` and, in deep ablations, `P_1..P_{J_T−1}`.
#[derive(Clone, Debug, PartialEq)]
pub struct TextPrompts {
    pub shallow: Option<Tensor>,
    pub deep: Vec<Tensor>,
}

impl TextPrompts {
    fn blocks(&self) -> impl Iterator<Item = &Tensor> {
        self.shallow.iter().chain(self.deep.iter())
    }
}

/// The trainable set φ.
#[derive(Clone, Debug, PartialEq)]
pub struct TuningParams {
    pub prompt_config: PromptConfig,
    pub visual: VisualPrompts,
    pub text: TextPrompts,
    pub text_adapter: Adapter,
    /// Only used by the text-prompt + visual-adapter ablation.
    pub image_adapter: Option<Adapter>,
}

impl TuningParams {
    pub fn init(
        enc: &EncoderConfig,
        prompts: &PromptConfig,
        text_adapter: &AdapterConfig,
        image_adapter: Option<&AdapterConfig>,
        seed: u64,
    ) -> Result<Self> {
        enc.validate()?;
        prompts.validate(enc)?;
        let mut rng = rng::seeded(seed);
        let visual = VisualPrompts {
            blocks: (0..prompts.visual_depth)
                .map(|_| {
                    Tensor::randn(vec![prompts.visual_len, enc.visual_dim], PROMPT_INIT_STD, &mut rng)
                })
                .collect(),
        };
        let mut text_blocks: Vec<Tensor> = (0..prompts.text_depth)
            .map(|_| Tensor::randn(vec![prompts.text_len, enc.text_dim], PROMPT_INIT_STD, &mut rng))
            .collect();
        let shallow = (!text_blocks.is_empty()).then(|| text_blocks.remove(0));
        let text_adapter = Adapter::init(enc.joint_dim, text_adapter, &mut rng)?;
        let image_adapter = image_adapter
            .map(|cfg| Adapter::init(enc.joint_dim, cfg, &mut rng))
            .transpose()?;
        Ok(Self {
            prompt_config: prompts.clone(),
            visual,
            text: TextPrompts {
                shallow,
                deep: text_blocks,
            },
            text_adapter,
            image_adapter,
        })
    }

    /// Every trainable tensor with a stable name, in optimizer order.
    pub fn trainable_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, p) in self.visual.blocks.iter().enumerate() {
            out.push((format!("visual_prompt.{i}"), p));
        }
        for (i, p) in self.text.blocks().enumerate() {
            out.push((format!("text_prompt.{i}"), p));
        }
        for (name, t) in self.text_adapter.named_tensors() {
            out.push((format!("text_adapter.{name}"), t));
        }
        if let Some(adapter) = &self.image_adapter {
            for (name, t) in adapter.named_tensors() {
                out.push((format!("image_adapter.{name}"), t));
            }
        }
        out
    }

    /// Mutable view in the same order as [`trainable_params`](Self::trainable_params).
    pub fn trainable_params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = self.visual.blocks.iter_mut().collect();
        out.extend(self.text.shallow.iter_mut());
        out.extend(self.text.deep.iter_mut());
        out.extend(self.text_adapter.tensors_mut().into_iter().map(|(_, t)| t));
        if let Some(adapter) = &mut self.image_adapter {
            out.extend(adapter.tensors_mut().into_iter().map(|(_, t)| t));
        }
        out
    }

    pub fn num_trainable(&self) -> usize {
        self.trainable_params().iter().map(|(_, t)| t.len()).sum()
    }

    /// Binds φ to `tape`; leaves when `trainable`, constants otherwise.
    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> BoundTuning<'t> {
        BoundTuning {
            visual: self
                .visual
                .blocks
                .iter()
                .map(|t| bind_one(tape, t, trainable))
                .collect(),
            text: self.text.blocks().map(|t| bind_one(tape, t, trainable)).collect(),
            text_adapter: self.text_adapter.bind(tape, trainable),
            image_adapter: self.image_adapter.as_ref().map(|a| a.bind(tape, trainable)),
        }
    }
}

/// φ recorded on a tape.
pub struct BoundTuning<'t> {
    pub visual: Vec<Var<'t>>,
    pub text: Vec<Var<'t>>,
    pub text_adapter: BoundAdapter<'t>,
    pub image_adapter: Option<BoundAdapter<'t>>,
}

impl<'t> BoundTuning<'t> {
    /// All parameter handles in optimizer order.
    pub fn vars(&self) -> Vec<Var<'t>> {
        let mut out: Vec<Var<'t>> = self.visual.clone();
        out.extend(self.text.iter().copied());
        out.extend(self.text_adapter.vars().iter().copied());
        if let Some(a) = &self.image_adapter {
            out.extend(a.vars().iter().copied());
        }
        out
    }

    /// Prompted image feature, with the image adapter applied when present.
    pub fn image_feature(
        &self,
        model: &crate::encoders::BoundModel<'t, '_>,
        e0: Var<'t>,
    ) -> Result<(Var<'t>, EncoderTrace)> {
        let (z, trace) = model.visual(e0, &self.visual)?;
        let z = match &self.image_adapter {
            Some(a) => a.apply(z)?,
            None => z,
        };
        Ok((z, trace))
    }

    /// Pre-adapter text feature `t̃` of one class name.
    pub fn pre_adapter_text(
        &self,
        model: &crate::encoders::BoundModel<'t, '_>,
        w0: Var<'t>,
    ) -> Result<(Var<'t>, EncoderTrace)> {
        model.text(w0, &self.text)
    }
}

pub fn trainable_params(tuning: &TuningParams) -> Vec<(String, &Tensor)> {
    tuning.trainable_params()
}

/// Prompted visual pass `z = ImageProj(c_{L_V})` (no image adapter).
pub fn visual_forward_prompted(
    e0: &Tensor,
    prompts: &VisualPrompts,
    model: &DualEncoderModel,
) -> Result<(Tensor, EncoderTrace)> {
    let tape = Tape::new();
    let bound = model.bind(&tape);
    let blocks: Vec<Var> = prompts.blocks.iter().map(|p| tape.constant(p.clone())).collect();
    let (z, trace) = bound.visual(tape.constant(e0.clone()), &blocks)?;
    Ok(((*z.value()).clone(), trace))
}

/// Prompted text pass returning the pre-adapter feature `t̃`.
pub fn text_forward_prompted(
    w0: &Tensor,
    prompts: &TextPrompts,
    model: &DualEncoderModel,
) -> Result<(Tensor, EncoderTrace)> {
    let tape = Tape::new();
    let bound = model.bind(&tape);
    let blocks: Vec<Var> = prompts.blocks().map(|p| tape.constant(p.clone())).collect();
    let (t, trace) = bound.text(tape.constant(w0.clone()), &blocks)?;
    Ok(((*t.value()).clone(), trace))
}

pub fn adapter_apply(t: &Tensor, adapter: &Adapter) -> Result<Tensor> {
    let tape = Tape::new();
    let out = adapter.bind(&tape, false).apply(tape.constant(t.clone()))?;
    Ok((*out.value()).clone())
}

pub fn image_adapter_apply(z: &Tensor, adapter: &Adapter) -> Result<Tensor> {
    adapter_apply(z, adapter)
}
