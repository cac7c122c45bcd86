//! Frozen toy dual encoder: a visual transformer over patch embeddings and a
//! text transformer over word embeddings, each followed by a projection head
//! into the joint space, plus the zero-shot classification rule.
//!
//! Blocks are pre-norm: `x + MHSA(LN(x))`, then `x + MLP(LN(x))` with a GELU
//! MLP of width `4·dim`. The text tower uses causal attention and pools the
//! final word position (the end-of-text slot); the visual tower pools the
//! class token at row 0. Projection heads are `LN` followed by a bias-free
//! linear map.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{cosine_similarity, softmax, Tape, Tensor, Var};

pub const LAYER_NORM_EPS: f64 = 1e-5;
pub const MLP_RATIO: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub visual_layers: usize,
    pub text_layers: usize,
    pub visual_dim: usize,
    pub text_dim: usize,
    pub heads: usize,
    /// Patches per image (M).
    pub patches: usize,
    /// Raw features per patch (p).
    pub patch_width: usize,
    /// Word tokens per class name (N).
    pub token_seq_len: usize,
    pub vocab_size: usize,
    pub joint_dim: usize,
    pub temperature: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            visual_layers: 4,
            text_layers: 4,
            visual_dim: 32,
            text_dim: 32,
            heads: 4,
            patches: 16,
            patch_width: 16,
            token_seq_len: 8,
            vocab_size: 32,
            joint_dim: 16,
            temperature: 0.01,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("visual_dim", self.visual_dim),
            ("text_dim", self.text_dim),
            ("heads", self.heads),
            ("patches", self.patches),
            ("patch_width", self.patch_width),
            ("token_seq_len", self.token_seq_len),
            ("vocab_size", self.vocab_size),
            ("joint_dim", self.joint_dim),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be at least 1")));
        }
        if !self.visual_dim.is_multiple_of(self.heads) || !self.text_dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "visual_dim {} and text_dim {} must be divisible by heads {}",
                self.visual_dim, self.text_dim, self.heads
            )));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        Ok(())
    }
}

/// A raw image: `patches × patch_width` features and its class label.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageSample {
    pub pixels: Tensor,
    pub label: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransformerBlock {
    dim: usize,
    heads: usize,
    ln1_gain: Arc<Tensor>,
    ln1_bias: Arc<Tensor>,
    w_q: Arc<Tensor>,
    w_k: Arc<Tensor>,
    w_v: Arc<Tensor>,
    w_o: Arc<Tensor>,
    b_o: Arc<Tensor>,
    ln2_gain: Arc<Tensor>,
    ln2_bias: Arc<Tensor>,
    w_fc1: Arc<Tensor>,
    b_fc1: Arc<Tensor>,
    w_fc2: Arc<Tensor>,
    b_fc2: Arc<Tensor>,
}

const BLOCK_TENSORS: [&str; 13] = [
    "ln1_gain", "ln1_bias", "w_q", "w_k", "w_v", "w_o", "b_o", "ln2_gain", "ln2_bias", "w_fc1",
    "b_fc1", "w_fc2", "b_fc2",
];

impl TransformerBlock {
    fn seeded(dim: usize, heads: usize, rng: &mut rng::Rng) -> Self {
        let hidden = MLP_RATIO * dim;
        let std = 1.0 / (dim as f64).sqrt();
        let a = |t: Tensor| Arc::new(t);
        Self {
            dim,
            heads,
            ln1_gain: a(Tensor::full(vec![dim], 1.0)),
            ln1_bias: a(Tensor::zeros(vec![dim])),
            w_q: a(Tensor::randn(vec![dim, dim], std, rng)),
            w_k: a(Tensor::randn(vec![dim, dim], std, rng)),
            w_v: a(Tensor::randn(vec![dim, dim], std, rng)),
            w_o: a(Tensor::randn(vec![dim, dim], std, rng)),
            b_o: a(Tensor::zeros(vec![dim])),
            ln2_gain: a(Tensor::full(vec![dim], 1.0)),
            ln2_bias: a(Tensor::zeros(vec![dim])),
            w_fc1: a(Tensor::randn(vec![dim, hidden], std, rng)),
            b_fc1: a(Tensor::randn(vec![hidden], 0.02, rng)),
            w_fc2: a(Tensor::randn(vec![hidden, dim], 1.0 / (hidden as f64).sqrt(), rng)),
            b_fc2: a(Tensor::zeros(vec![dim])),
        }
    }

    fn tensors(&self) -> [&Arc<Tensor>; 13] {
        [
            &self.ln1_gain,
            &self.ln1_bias,
            &self.w_q,
            &self.w_k,
            &self.w_v,
            &self.w_o,
            &self.b_o,
            &self.ln2_gain,
            &self.ln2_bias,
            &self.w_fc1,
            &self.b_fc1,
            &self.w_fc2,
            &self.b_fc2,
        ]
    }

    fn tensors_mut(&mut self) -> [&mut Arc<Tensor>; 13] {
        [
            &mut self.ln1_gain,
            &mut self.ln1_bias,
            &mut self.w_q,
            &mut self.w_k,
            &mut self.w_v,
            &mut self.w_o,
            &mut self.b_o,
            &mut self.ln2_gain,
            &mut self.ln2_bias,
            &mut self.w_fc1,
            &mut self.b_fc1,
            &mut self.w_fc2,
            &mut self.b_fc2,
        ]
    }
}

/// One layer of an encoder stack. `Identity` passes its input through
/// unchanged and exists as a test hook.
#[derive(Clone, Debug, PartialEq)]
pub enum Block {
    Transformer(TransformerBlock),
    Identity,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionHead {
    ln_gain: Arc<Tensor>,
    ln_bias: Arc<Tensor>,
    weight: Arc<Tensor>,
}

impl ProjectionHead {
    fn seeded(input: usize, output: usize, rng: &mut rng::Rng) -> Self {
        Self {
            ln_gain: Arc::new(Tensor::full(vec![input], 1.0)),
            ln_bias: Arc::new(Tensor::zeros(vec![input])),
            weight: Arc::new(Tensor::randn(
                vec![input, output],
                1.0 / (input as f64).sqrt(),
                rng,
            )),
        }
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }
}

/// The frozen visual and text towers with their embedders and heads.
#[derive(Clone, Debug, PartialEq)]
pub struct DualEncoderModel {
    config: EncoderConfig,
    visual_blocks: Vec<Block>,
    text_blocks: Vec<Block>,
    cls_token: Arc<Tensor>,
    patch_weight: Arc<Tensor>,
    patch_pos: Arc<Tensor>,
    token_embedding: Arc<Tensor>,
    token_pos: Arc<Tensor>,
    image_head: ProjectionHead,
    text_head: ProjectionHead,
    frozen: bool,
}

impl DualEncoderModel {
    /// Random initialization from `seed`. The model starts unfrozen.
    pub fn seeded(config: EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng::seeded(seed);
        let (dv, dl) = (config.visual_dim, config.text_dim);
        let visual_blocks = (0..config.visual_layers)
            .map(|_| Block::Transformer(TransformerBlock::seeded(dv, config.heads, &mut rng)))
            .collect();
        let text_blocks = (0..config.text_layers)
            .map(|_| Block::Transformer(TransformerBlock::seeded(dl, config.heads, &mut rng)))
            .collect();
        let a = |t: Tensor| Arc::new(t);
        Ok(Self {
            cls_token: a(Tensor::randn(vec![dv], 1.0, &mut rng)),
            patch_weight: a(Tensor::randn(
                vec![config.patch_width, dv],
                1.0 / (config.patch_width as f64).sqrt(),
                &mut rng,
            )),
            patch_pos: a(Tensor::randn(vec![config.patches, dv], 0.1, &mut rng)),
            token_embedding: a(Tensor::randn(vec![config.vocab_size, dl], 1.0, &mut rng)),
            token_pos: a(Tensor::randn(vec![config.token_seq_len, dl], 0.1, &mut rng)),
            image_head: ProjectionHead::seeded(dv, config.joint_dim, &mut rng),
            text_head: ProjectionHead::seeded(dl, config.joint_dim, &mut rng),
            visual_blocks,
            text_blocks,
            config,
            frozen: false,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn freeze(mut self) -> Self {
        self.frozen = true;
        self
    }

    /// Replaces every transformer block with an identity map (test hook).
    pub fn with_identity_blocks(mut self) -> Self {
        self.visual_blocks.fill(Block::Identity);
        self.text_blocks.fill(Block::Identity);
        self
    }

    pub fn visual_blocks(&self) -> &[Block] {
        &self.visual_blocks
    }

    pub fn text_blocks(&self) -> &[Block] {
        &self.text_blocks
    }

    pub fn image_head(&self) -> &ProjectionHead {
        &self.image_head
    }

    /// Every weight with a stable name, in a fixed order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = vec![
            ("visual.cls_token".into(), &self.cls_token),
            ("visual.patch_weight".into(), &self.patch_weight),
            ("visual.patch_pos".into(), &self.patch_pos),
            ("text.token_embedding".into(), &self.token_embedding),
            ("text.token_pos".into(), &self.token_pos),
        ];
        for (tower, blocks) in [("visual", &self.visual_blocks), ("text", &self.text_blocks)] {
            for (i, block) in blocks.iter().enumerate() {
                if let Block::Transformer(b) = block {
                    for (name, t) in BLOCK_TENSORS.iter().zip(b.tensors()) {
                        out.push((format!("{tower}.blocks.{i}.{name}"), t));
                    }
                }
            }
        }
        for (tower, head) in [("visual", &self.image_head), ("text", &self.text_head)] {
            out.push((format!("{tower}.proj.ln_gain"), &head.ln_gain));
            out.push((format!("{tower}.proj.ln_bias"), &head.ln_bias));
            out.push((format!("{tower}.proj.weight"), &head.weight));
        }
        out
    }

    fn slot_mut(&mut self, name: &str) -> Option<&mut Arc<Tensor>> {
        match name {
            "visual.cls_token" => return Some(&mut self.cls_token),
            "visual.patch_weight" => return Some(&mut self.patch_weight),
            "visual.patch_pos" => return Some(&mut self.patch_pos),
            "text.token_embedding" => return Some(&mut self.token_embedding),
            "text.token_pos" => return Some(&mut self.token_pos),
            "visual.proj.ln_gain" => return Some(&mut self.image_head.ln_gain),
            "visual.proj.ln_bias" => return Some(&mut self.image_head.ln_bias),
            "visual.proj.weight" => return Some(&mut self.image_head.weight),
            "text.proj.ln_gain" => return Some(&mut self.text_head.ln_gain),
            "text.proj.ln_bias" => return Some(&mut self.text_head.ln_bias),
            "text.proj.weight" => return Some(&mut self.text_head.weight),
            _ => {}
        }
        let mut parts = name.splitn(4, '.');
        let (tower, kw, idx, field) = (parts.next()?, parts.next()?, parts.next()?, parts.next()?);
        if kw != "blocks" {
            return None;
        }
        let blocks = match tower {
            "visual" => &mut self.visual_blocks,
            "text" => &mut self.text_blocks,
            _ => return None,
        };
        let Block::Transformer(block) = blocks.get_mut(idx.parse::<usize>().ok()?)? else {
            return None;
        };
        let pos = BLOCK_TENSORS.iter().position(|n| *n == field)?;
        block.tensors_mut().into_iter().nth(pos)
    }

    /// Overwrites one named weight. Rejected once the model is frozen or when
    /// the shape changes.
    pub fn set_tensor(&mut self, name: &str, value: Tensor) -> Result<()> {
        if self.frozen {
            return Err(Error::State(format!("cannot modify {name}: model is frozen")));
        }
        let slot = self
            .slot_mut(name)
            .ok_or_else(|| Error::Input(format!("unknown model tensor {name}")))?;
        if slot.shape() != value.shape() {
            return Err(Error::dim("set_tensor", slot.shape(), value.shape()));
        }
        *slot = Arc::new(value);
        Ok(())
    }

    /// Binds every weight to `tape` as a constant.
    pub fn bind<'t>(&self, tape: &'t Tape) -> BoundModel<'t, '_> {
        let c = |t: &Arc<Tensor>| tape.constant_shared(Arc::clone(t));
        let bind_blocks = |blocks: &[Block]| {
            blocks
                .iter()
                .map(|b| match b {
                    Block::Identity => None,
                    Block::Transformer(b) => Some(BoundBlock {
                        heads: b.heads,
                        dim: b.dim,
                        ln1: (c(&b.ln1_gain), c(&b.ln1_bias)),
                        w_q: c(&b.w_q),
                        w_k: c(&b.w_k),
                        w_v: c(&b.w_v),
                        w_o: c(&b.w_o),
                        b_o: c(&b.b_o),
                        ln2: (c(&b.ln2_gain), c(&b.ln2_bias)),
                        w_fc1: c(&b.w_fc1),
                        b_fc1: c(&b.b_fc1),
                        w_fc2: c(&b.w_fc2),
                        b_fc2: c(&b.b_fc2),
                    }),
                })
                .collect()
        };
        let head = |h: &ProjectionHead| BoundHead {
            ln_gain: c(&h.ln_gain),
            ln_bias: c(&h.ln_bias),
            weight: c(&h.weight),
        };
        BoundModel {
            model: self,
            tape,
            visual: bind_blocks(&self.visual_blocks),
            text: bind_blocks(&self.text_blocks),
            cls_token: c(&self.cls_token),
            patch_weight: c(&self.patch_weight),
            patch_pos: c(&self.patch_pos),
            token_pos: c(&self.token_pos),
            image_head: head(&self.image_head),
            text_head: head(&self.text_head),
        }
    }

    /// Rebuilds a model from named weights, e.g. from a checkpoint. Blocks
    /// whose tensors are all absent are identity blocks.
    pub fn from_named_tensors(
        config: EncoderConfig,
        tensors: &std::collections::HashMap<String, Tensor>,
        frozen: bool,
    ) -> Result<Self> {
        let mut model = Self::seeded(config, 0)?;
        for (tower, layers) in [
            ("visual", model.config.visual_layers),
            ("text", model.config.text_layers),
        ] {
            for i in 0..layers {
                let present = BLOCK_TENSORS
                    .iter()
                    .filter(|n| tensors.contains_key(&format!("{tower}.blocks.{i}.{n}")))
                    .count();
                if present == 0 {
                    let blocks = if tower == "visual" {
                        &mut model.visual_blocks
                    } else {
                        &mut model.text_blocks
                    };
                    blocks[i] = Block::Identity;
                }
            }
        }
        let names: Vec<String> = model.named_tensors().into_iter().map(|(n, _)| n).collect();
        for name in names {
            let value = tensors
                .get(&name)
                .ok_or_else(|| Error::Input(format!("missing model tensor {name}")))?;
            model.set_tensor(&name, value.clone())?;
        }
        if tensors.len() != model.named_tensors().len() {
            return Err(Error::Input(format!(
                "expected {} model tensors, got {}",
                model.named_tensors().len(),
                tensors.len()
            )));
        }
        model.frozen = frozen;
        Ok(model)
    }
}

struct BoundBlock<'t> {
    heads: usize,
    dim: usize,
    ln1: (Var<'t>, Var<'t>),
    w_q: Var<'t>,
    w_k: Var<'t>,
    w_v: Var<'t>,
    w_o: Var<'t>,
    b_o: Var<'t>,
    ln2: (Var<'t>, Var<'t>),
    w_fc1: Var<'t>,
    b_fc1: Var<'t>,
    w_fc2: Var<'t>,
    b_fc2: Var<'t>,
}

impl<'t> BoundBlock<'t> {
    fn forward(&self, x: Var<'t>, causal: bool) -> Result<Var<'t>> {
        let tape = x.tape();
        let h = x.layer_norm(&self.ln1.0, &self.ln1.1, LAYER_NORM_EPS)?;
        let (q, k, v) = (h.matmul(&self.w_q)?, h.matmul(&self.w_k)?, h.matmul(&self.w_v)?);
        let head_dim = self.dim / self.heads;
        let scale = 1.0 / (head_dim as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        for hd in 0..self.heads {
            let start = hd * head_dim;
            let qh = q.slice_cols(start, head_dim)?;
            let kh = k.slice_cols(start, head_dim)?;
            let vh = v.slice_cols(start, head_dim)?;
            let scores = qh.matmul(&kh.transpose()?)?.scale(scale);
            let attn = if causal {
                scores.causal_softmax(1.0)?
            } else {
                scores.softmax(1.0)?
            };
            outs.push(attn.matmul(&vh)?);
        }
        let attn_out = tape
            .concat_cols(&outs)?
            .matmul(&self.w_o)?
            .add_row(&self.b_o)?;
        let x = x.add(&attn_out)?;
        let h = x.layer_norm(&self.ln2.0, &self.ln2.1, LAYER_NORM_EPS)?;
        let mlp = h
            .matmul(&self.w_fc1)?
            .add_row(&self.b_fc1)?
            .gelu()
            .matmul(&self.w_fc2)?
            .add_row(&self.b_fc2)?;
        x.add(&mlp)
    }
}

struct BoundHead<'t> {
    ln_gain: Var<'t>,
    ln_bias: Var<'t>,
    weight: Var<'t>,
}

impl<'t> BoundHead<'t> {
    fn normalize(&self, pooled: Var<'t>) -> Result<Var<'t>> {
        pooled.layer_norm(&self.ln_gain, &self.ln_bias, LAYER_NORM_EPS)
    }

    /// `[1×dim]` pooled row → `[joint_dim]` feature.
    fn project(&self, pooled: Var<'t>) -> Result<Var<'t>> {
        let out = self.normalize(pooled)?.matmul(&self.weight)?;
        let d = out.value().len();
        out.reshape(vec![d])
    }
}

/// What happened at each layer of one encoder pass.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EncoderTrace {
    /// Pooled-position state before the first layer and after each layer
    /// (`layers + 1` entries): `c_0..c_L` for the visual tower, the final
    /// word row for the text tower.
    pub pooled_states: Vec<Tensor>,
    /// Per layer: whether a fresh prompt block was injected at its input.
    pub fresh_prompt: Vec<bool>,
    /// Per layer: the prompt rows entering the layer (empty when no prompts).
    pub prompt_inputs: Vec<Tensor>,
    /// Per layer: the prompt rows leaving the layer.
    pub prompt_outputs: Vec<Tensor>,
}

/// A model whose weights are recorded on a tape.
pub struct BoundModel<'t, 'm> {
    model: &'m DualEncoderModel,
    tape: &'t Tape,
    visual: Vec<Option<BoundBlock<'t>>>,
    text: Vec<Option<BoundBlock<'t>>>,
    cls_token: Var<'t>,
    patch_weight: Var<'t>,
    patch_pos: Var<'t>,
    token_pos: Var<'t>,
    image_head: BoundHead<'t>,
    text_head: BoundHead<'t>,
}

impl<'t> BoundModel<'t, '_> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.model.config
    }

    /// `E_0 = pixels · W_patch + positions`.
    pub fn patch_embed(&self, image: &ImageSample) -> Result<Var<'t>> {
        let cfg = &self.model.config;
        let expected = [cfg.patches, cfg.patch_width];
        if image.pixels.shape() != expected {
            return Err(Error::dim("patch_embed", image.pixels.shape(), &expected));
        }
        self.tape
            .constant(image.pixels.clone())
            .matmul(&self.patch_weight)?
            .add(&self.patch_pos)
    }

    /// `W_0`: embedding rows of `tokens` plus positions.
    pub fn token_embed(&self, tokens: &[usize]) -> Result<Var<'t>> {
        let cfg = &self.model.config;
        if tokens.len() != cfg.token_seq_len {
            return Err(Error::dim(
                "token_embed",
                &[tokens.len()],
                &[cfg.token_seq_len],
            ));
        }
        let table = &self.model.token_embedding;
        let mut rows = Vec::with_capacity(tokens.len() * cfg.text_dim);
        for &id in tokens {
            if id >= cfg.vocab_size {
                return Err(Error::Index {
                    index: id,
                    bound: cfg.vocab_size,
                });
            }
            rows.extend_from_slice(table.row(id));
        }
        let words = Tensor::new(vec![tokens.len(), cfg.text_dim], rows)?;
        self.tape.constant(words).add(&self.token_pos)
    }

    /// Runs the visual tower on `[c_0, E_0]`.
    ///
    /// `prompts[i]` is injected fresh at the input of layer `i` for
    /// `i < prompts.len()`; the prompt rows a layer outputs are dropped when
    /// the next layer receives a fresh block and carried forward otherwise.
    /// Returns `ImageProj(c_L)`.
    pub fn visual(&self, e0: Var<'t>, prompts: &[Var<'t>]) -> Result<(Var<'t>, EncoderTrace)> {
        let cfg = &self.model.config;
        let e_shape = e0.shape();
        if e_shape != [cfg.patches, cfg.visual_dim] {
            return Err(Error::dim("visual_forward", &e_shape, &[cfg.patches, cfg.visual_dim]));
        }
        let cls = self.cls_token.reshape(vec![1, cfg.visual_dim])?;
        let x = self.tape.concat_rows(&[cls, e0])?;
        let main_rows = 1 + cfg.patches;
        let (out, trace) = run_stack(&self.visual, x, main_rows, prompts, PromptSide::After, false)?;
        let pooled = out.slice_rows(0, 1)?;
        Ok((self.image_head.project(pooled)?, trace))
    }

    /// Runs the text tower on `[P, W_0]` and projects the final word row.
    pub fn text(&self, w0: Var<'t>, prompts: &[Var<'t>]) -> Result<(Var<'t>, EncoderTrace)> {
        let cfg = &self.model.config;
        let w_shape = w0.shape();
        if w_shape != [cfg.token_seq_len, cfg.text_dim] {
            return Err(Error::dim("text_forward", &w_shape, &[cfg.token_seq_len, cfg.text_dim]));
        }
        let (out, trace) = run_stack(
            &self.text,
            w0,
            cfg.token_seq_len,
            prompts,
            PromptSide::Before,
            true,
        )?;
        let rows = out.shape()[0];
        let pooled = out.slice_rows(rows - 1, 1)?;
        Ok((self.text_head.project(pooled)?, trace))
    }
}

#[derive(Clone, Copy, PartialEq)]
enum PromptSide {
    Before,
    After,
}

fn run_stack<'t>(
    blocks: &[Option<BoundBlock<'t>>],
    x: Var<'t>,
    main_rows: usize,
    prompts: &[Var<'t>],
    side: PromptSide,
    causal: bool,
) -> Result<(Var<'t>, EncoderTrace)> {
    if prompts.len() > blocks.len() {
        return Err(Error::Config(format!(
            "{} prompt blocks for {} layers",
            prompts.len(),
            blocks.len()
        )));
    }
    let width = x.shape()[1];
    for p in prompts {
        let s = p.shape();
        if s.len() != 2 || s[1] != width || s[0] != prompts[0].shape()[0] {
            return Err(Error::dim("prompt block", &s, &[prompts[0].shape()[0], width]));
        }
    }
    let tape = x.tape();
    let pooled_row = |v: &Var<'t>| -> Tensor {
        let val = v.value();
        let r = match side {
            PromptSide::After => 0,
            PromptSide::Before => val.shape()[0] - 1,
        };
        Tensor::vector(val.row(r).to_vec())
    };
    let mut trace = EncoderTrace {
        pooled_states: vec![pooled_row(&x)],
        ..Default::default()
    };
    // Main rows (class token + patches, or words) and carried prompt rows.
    let mut main = x;
    let mut carried: Option<Var<'t>> = None;
    for (i, block) in blocks.iter().enumerate() {
        let fresh = prompts.get(i).copied();
        let prompt_in = fresh.or(carried).filter(|p| p.shape()[0] > 0);
        trace.fresh_prompt.push(fresh.is_some());
        trace.prompt_inputs.push(
            prompt_in
                .map(|p| (*p.value()).clone())
                .unwrap_or_else(|| Tensor::zeros(vec![0, width])),
        );
        let input = match (prompt_in, side) {
            (None, _) => main,
            (Some(p), PromptSide::After) => tape.concat_rows(&[main, p])?,
            (Some(p), PromptSide::Before) => tape.concat_rows(&[p, main])?,
        };
        let out = match block {
            Some(b) => b.forward(input, causal)?,
            None => input,
        };
        let n_prompt = prompt_in.map_or(0, |p| p.shape()[0]);
        let (m, p) = match side {
            PromptSide::After => (out.slice_rows(0, main_rows)?, (n_prompt > 0).then(|| out.slice_rows(main_rows, n_prompt))),
            PromptSide::Before => (out.slice_rows(n_prompt, main_rows)?, (n_prompt > 0).then(|| out.slice_rows(0, n_prompt))),
        };
        let p = p.transpose()?;
        trace.prompt_outputs.push(
            p.map(|p| (*p.value()).clone())
                .unwrap_or_else(|| Tensor::zeros(vec![0, width])),
        );
        main = m;
        carried = p;
        trace.pooled_states.push(pooled_row(&main));
    }
    Ok((main, trace))
}

/// `E_0` for one image.
pub fn patch_embed(image: &ImageSample, model: &DualEncoderModel) -> Result<Tensor> {
    let tape = Tape::new();
    let e0 = model.bind(&tape).patch_embed(image)?;
    Ok((*e0.value()).clone())
}

/// `W_0` for one class name.
pub fn token_embed(tokens: &[usize], model: &DualEncoderModel) -> Result<Tensor> {
    let tape = Tape::new();
    let w0 = model.bind(&tape).token_embed(tokens)?;
    Ok((*w0.value()).clone())
}

/// Unprompted visual pass: `z = ImageProj(c_L)` plus the per-layer trace.
pub fn visual_forward(e0: &Tensor, model: &DualEncoderModel) -> Result<(Tensor, EncoderTrace)> {
    let tape = Tape::new();
    let bound = model.bind(&tape);
    let (z, trace) = bound.visual(tape.constant(e0.clone()), &[])?;
    Ok(((*z.value()).clone(), trace))
}

/// The normalized pooled state that the image projection weight multiplies,
/// i.e. `LN(c_L)` of an unprompted pass.
pub fn image_head_input(e0: &Tensor, model: &DualEncoderModel) -> Result<Tensor> {
    let tape = Tape::new();
    let bound = model.bind(&tape);
    let (_, trace) = bound.visual(tape.constant(e0.clone()), &[])?;
    let c_last = trace.pooled_states.last().expect("at least the input state");
    let row = tape.constant(c_last.reshape(vec![1, c_last.len()])?);
    let normalized = bound.image_head.normalize(row)?;
    normalized.value().reshape(vec![c_last.len()])
}

/// Unprompted text pass: `t = TextProj(w_L^N)`.
pub fn text_forward(w0: &Tensor, model: &DualEncoderModel) -> Result<Tensor> {
    let tape = Tape::new();
    let bound = model.bind(&tape);
    let (t, _) = bound.text(tape.constant(w0.clone()), &[])?;
    Ok((*t.value()).clone())
}

/// Pretrained (zero-shot) text feature of a class name.
pub fn class_text_feature(tokens: &[usize], model: &DualEncoderModel) -> Result<Tensor> {
    text_forward(&token_embed(tokens, model)?, model)
}

/// Pretrained (zero-shot) visual feature of an image.
pub fn image_feature(image: &ImageSample, model: &DualEncoderModel) -> Result<Tensor> {
    Ok(visual_forward(&patch_embed(image, model)?, model)?.0)
}

/// `Pr(y = i) = softmax_i(sim(z, t_i) / τ)`.
pub fn predict_probs(z: &Tensor, classifiers: &[Tensor], temperature: f64) -> Result<Vec<f64>> {
    if classifiers.is_empty() {
        return Err(Error::Input("no classifiers".into()));
    }
    let sims = classifiers
        .iter()
        .map(|t| cosine_similarity(z, t))
        .collect::<Result<Vec<_>>>()?;
    Ok(softmax(&Tensor::vector(sims), temperature)?.into_data())
}

/// Index of the largest probability; ties go to the lowest index.
pub fn argmax(probs: &[f64]) -> usize {
    let mut best = 0;
    for (i, p) in probs.iter().enumerate() {
        if *p > probs[best] {
            best = i;
        }
    }
    best
}

/// Zero-shot class probabilities of `image` against the class names.
pub fn zero_shot_probs(
    image: &ImageSample,
    class_tokens: &[Vec<usize>],
    model: &DualEncoderModel,
) -> Result<Vec<f64>> {
    let z = image_feature(image, model)?;
    let classifiers = class_tokens
        .iter()
        .map(|t| class_text_feature(t, model))
        .collect::<Result<Vec<_>>>()?;
    predict_probs(&z, &classifiers, model.config.temperature)
}
