//! Linear maps, layer norm, MLPs, multi-head attention and transformer
//! blocks expressed over tape variables.

use rand::Rng;

use super::params::{uniform, xavier, Bound, ParamSet};
use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};

pub(crate) const MLP_RATIO: usize = 4;

pub(crate) fn register_linear<R: Rng>(
    ps: &mut ParamSet,
    rng: &mut R,
    prefix: &str,
    fan_in: usize,
    fan_out: usize,
) -> Result<()> {
    ps.insert(format!("{prefix}.w"), xavier(rng, fan_in, fan_out))?;
    ps.insert(format!("{prefix}.b"), Tensor::zeros(&[fan_out]))
}

pub(crate) fn register_norm(ps: &mut ParamSet, prefix: &str, dim: usize) -> Result<()> {
    ps.insert(format!("{prefix}.g"), Tensor::full(&[dim], 1.0))?;
    ps.insert(format!("{prefix}.b"), Tensor::zeros(&[dim]))
}

pub(crate) fn register_mlp<R: Rng>(ps: &mut ParamSet, rng: &mut R, prefix: &str, dim: usize) -> Result<()> {
    register_linear(ps, rng, &format!("{prefix}.fc1"), dim, dim * MLP_RATIO)?;
    register_linear(ps, rng, &format!("{prefix}.fc2"), dim * MLP_RATIO, dim)
}

/// Pre-norm transformer block: `x + proj(attn(ln1 x))`, then `x + mlp(ln2 x)`.
pub(crate) fn register_block<R: Rng>(ps: &mut ParamSet, rng: &mut R, prefix: &str, dim: usize) -> Result<()> {
    register_norm(ps, &format!("{prefix}.ln1"), dim)?;
    register_linear(ps, rng, &format!("{prefix}.qkv"), dim, 3 * dim)?;
    register_linear(ps, rng, &format!("{prefix}.proj"), dim, dim)?;
    register_norm(ps, &format!("{prefix}.ln2"), dim)?;
    register_mlp(ps, rng, &format!("{prefix}.mlp"), dim)
}

pub(crate) fn register_token<R: Rng>(ps: &mut ParamSet, rng: &mut R, name: &str, dim: usize) -> Result<()> {
    ps.insert(name.to_string(), uniform(rng, &[1, dim], 0.02))
}

pub fn linear(tape: &mut Tape, b: &Bound, prefix: &str, x: Var) -> Result<Var> {
    let y = tape.matmul(x, b.var(&format!("{prefix}.w")))?;
    tape.add_row(y, b.var(&format!("{prefix}.b")))
}

pub fn norm(tape: &mut Tape, b: &Bound, prefix: &str, x: Var, eps: f64) -> Result<Var> {
    tape.layer_norm(x, b.var(&format!("{prefix}.g")), b.var(&format!("{prefix}.b")), eps)
}

pub fn mlp(tape: &mut Tape, b: &Bound, prefix: &str, x: Var) -> Result<Var> {
    let h = linear(tape, b, &format!("{prefix}.fc1"), x)?;
    let h = tape.gelu(h);
    linear(tape, b, &format!("{prefix}.fc2"), h)
}

/// Attention result plus the per-head probability matrices.
pub struct AttentionOutput {
    pub out: Var,
    pub probs: Vec<Var>,
}

/// `softmax(Q·Kᵀ/√d_k)·V` applied per head, where `d_k = dim / heads`.
pub fn multi_head_attention(tape: &mut Tape, q: Var, k: Var, v: Var, heads: usize) -> Result<AttentionOutput> {
    let dim = tape.shape(q)[1];
    if heads == 0 || !dim.is_multiple_of(heads) {
        return Err(Error::InvalidArgument(format!(
            "{heads} heads do not divide width {dim}"
        )));
    }
    if tape.shape(k) != tape.shape(v) || tape.shape(k)[1] != dim {
        return Err(Error::ShapeMismatch {
            op: "attention",
            left: tape.shape(q).to_vec(),
            right: tape.shape(k).to_vec(),
        });
    }
    let dk = dim / heads;
    let scale = 1.0 / (dk as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    let mut probs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (
                tape.slice_cols(q, h * dk, dk)?,
                tape.slice_cols(k, h * dk, dk)?,
                tape.slice_cols(v, h * dk, dk)?,
            )
        };
        let kt = tape.transpose(kh)?;
        let scores = tape.matmul(qh, kt)?;
        let scores = tape.scale(scores, scale);
        let p = tape.softmax(scores, 1)?;
        outs.push(tape.matmul(p, vh)?);
        probs.push(p);
    }
    let out = if heads == 1 { outs[0] } else { tape.concat_cols(&outs)? };
    Ok(AttentionOutput { out, probs })
}

/// Frequency-guided attention: `softmax(Q_s(K_sᵀ + K_fᵀ)/√d_k)·(V_s + V_f)`.
pub fn frequency_guided_attention(
    tape: &mut Tape,
    q_spatial: Var,
    k_spatial: Var,
    v_spatial: Var,
    k_freq: Var,
    v_freq: Var,
    heads: usize,
) -> Result<AttentionOutput> {
    let k = tape.add(k_spatial, k_freq)?;
    let v = tape.add(v_spatial, v_freq)?;
    multi_head_attention(tape, q_spatial, k, v, heads)
}

/// Attention restricted to consecutive windows of `window` rows.
fn windowed_attention(tape: &mut Tape, q: Var, k: Var, v: Var, heads: usize, window: usize) -> Result<Var> {
    let n = tape.shape(q)[0];
    if window >= n {
        return Ok(multi_head_attention(tape, q, k, v, heads)?.out);
    }
    if !n.is_multiple_of(window) {
        return Err(Error::InvalidArgument(format!(
            "{n} tokens do not split into windows of {window}"
        )));
    }
    let mut parts = Vec::with_capacity(n / window);
    for w in 0..n / window {
        let idx: Vec<usize> = (w * window..(w + 1) * window).collect();
        let qw = tape.gather_rows(q, &idx)?;
        let kw = tape.gather_rows(k, &idx)?;
        let vw = tape.gather_rows(v, &idx)?;
        parts.push(multi_head_attention(tape, qw, kw, vw, heads)?.out);
    }
    tape.concat_rows(&parts)
}

/// Standard pre-norm block. `window = None` attends over all rows.
pub fn block(
    tape: &mut Tape,
    b: &Bound,
    prefix: &str,
    x: Var,
    heads: usize,
    window: Option<usize>,
    eps: f64,
) -> Result<Var> {
    let dim = tape.shape(x)[1];
    let h = norm(tape, b, &format!("{prefix}.ln1"), x, eps)?;
    let qkv = linear(tape, b, &format!("{prefix}.qkv"), h)?;
    let q = tape.slice_cols(qkv, 0, dim)?;
    let k = tape.slice_cols(qkv, dim, dim)?;
    let v = tape.slice_cols(qkv, 2 * dim, dim)?;
    let a = match window {
        Some(w) => windowed_attention(tape, q, k, v, heads, w)?,
        None => multi_head_attention(tape, q, k, v, heads)?.out,
    };
    let a = linear(tape, b, &format!("{prefix}.proj"), a)?;
    let x = tape.add(x, a)?;
    let h = norm(tape, b, &format!("{prefix}.ln2"), x, eps)?;
    let m = mlp(tape, b, &format!("{prefix}.mlp"), h)?;
    tape.add(x, m)
}

/// Fixed 2D sinusoidal embedding: the first half of the channels encodes
/// the row, the second half the column. `dim` must be a multiple of 4.
pub fn sincos_2d(positions: &[(usize, usize)], dim: usize) -> Tensor {
    assert!(dim.is_multiple_of(4), "positional width must be a multiple of 4");
    let quarter = dim / 4;
    let omega: Vec<f64> = (0..quarter)
        .map(|k| 1.0 / 10_000f64.powf(k as f64 / quarter as f64))
        .collect();
    let mut data = Vec::with_capacity(positions.len() * dim);
    for &(r, c) in positions {
        for coord in [r as f64, c as f64] {
            data.extend(omega.iter().map(|w| (coord * w).sin()));
            data.extend(omega.iter().map(|w| (coord * w).cos()));
        }
    }
    Tensor::new(vec![positions.len(), dim], data).unwrap()
}
