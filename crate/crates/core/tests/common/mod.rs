#![allow(dead_code)]

use apex_core::tensor::{Tape, Tensor, Var};

pub const FD_STEP: f64 = 1e-5;
pub const REL_TOL: f64 = 1e-4;

/// Magnitude floor for the relative error. Central differences at step 1e-5
/// carry ~1e-10 of round-off, so components below this are judged on
/// absolute error (1e-9) instead.
pub const MAGNITUDE_FLOOR: f64 = 1e-5;

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(MAGNITUDE_FLOOR)
}

/// Evaluates `f` on fresh constant inputs (no gradient bookkeeping).
pub fn eval_loss<F>(inputs: &[Tensor], f: &F) -> f64
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Var<'t>,
{
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    f(&tape, &vars).value().item().unwrap()
}

/// Central finite differences for every coordinate of every input.
pub fn numeric_grads<F>(inputs: &[Tensor], f: &F) -> Vec<Vec<f64>>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Var<'t>,
{
    let mut out = Vec::new();
    for (i, t) in inputs.iter().enumerate() {
        let mut g = Vec::with_capacity(t.len());
        for j in 0..t.len() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= FD_STEP;
            g.push((eval_loss(&plus, f) - eval_loss(&minus, f)) / (2.0 * FD_STEP));
        }
        out.push(g);
    }
    out
}

pub fn analytic_grads<F>(inputs: &[Tensor], f: &F) -> Vec<Vec<f64>>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Var<'t>,
{
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = f(&tape, &vars);
    let grads = tape.backward(loss).unwrap();
    vars.iter()
        .map(|v| grads.get_or_zeros(v).into_data())
        .collect()
}

/// Largest relative error between analytic and numeric gradients.
pub fn max_grad_error<F>(inputs: &[Tensor], f: F) -> f64
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Var<'t>,
{
    let a = analytic_grads(inputs, &f);
    let n = numeric_grads(inputs, &f);
    a.iter()
        .flatten()
        .zip(n.iter().flatten())
        .map(|(a, n)| rel_err(*a, *n))
        .fold(0.0, f64::max)
}

/// A small encoder that keeps every code path but runs in milliseconds.
pub fn small_config() -> apex_core::encoders::EncoderConfig {
    apex_core::encoders::EncoderConfig {
        visual_layers: 2,
        text_layers: 2,
        visual_dim: 8,
        text_dim: 8,
        heads: 2,
        patches: 4,
        patch_width: 5,
        token_seq_len: 4,
        vocab_size: 10,
        joint_dim: 6,
        temperature: 0.5,
    }
}
