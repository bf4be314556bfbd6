//! Shared neural building blocks: linear layers, layer norm, multi-head
//! attention and FFNs, all addressed by parameter-name prefixes in a
//! [`ParamStore`].

use crate::error::{Error, Result};
use crate::tensor::{Bound, Matrix, ParamStore, Tape, Var};
use rand::Rng;

pub const LN_EPS: f64 = 1e-5;

pub fn init_linear<R: Rng>(
    store: &mut ParamStore,
    rng: &mut R,
    name: &str,
    d_in: usize,
    d_out: usize,
) -> Result<()> {
    store.insert(format!("{name}.w"), Matrix::xavier(d_in, d_out, rng), true)?;
    store.insert(format!("{name}.b"), Matrix::zeros(1, d_out), true)?;
    Ok(())
}

pub fn linear(tape: &mut Tape, bound: &Bound, name: &str, x: Var) -> Result<Var> {
    let w = bound.var(&format!("{name}.w"))?;
    let b = bound.var(&format!("{name}.b"))?;
    let y = tape.matmul(x, w)?;
    tape.add_row_broadcast(y, b)
}

pub fn init_layer_norm(store: &mut ParamStore, name: &str, d: usize) -> Result<()> {
    store.insert(format!("{name}.g"), Matrix::filled(1, d, 1.0), true)?;
    store.insert(format!("{name}.b"), Matrix::zeros(1, d), true)?;
    Ok(())
}

pub fn layer_norm(tape: &mut Tape, bound: &Bound, name: &str, x: Var) -> Result<Var> {
    let g = bound.var(&format!("{name}.g"))?;
    let b = bound.var(&format!("{name}.b"))?;
    tape.layer_norm(x, g, b, LN_EPS)
}

pub fn init_attention<R: Rng>(
    store: &mut ParamStore,
    rng: &mut R,
    name: &str,
    dim: usize,
) -> Result<()> {
    for proj in ["wq", "wk", "wv", "wo"] {
        init_linear(store, rng, &format!("{name}.{proj}"), dim, dim)?;
    }
    Ok(())
}

/// Multi-head attention. Queries come from `q_in`, keys and values from
/// `kv_in`. `mask` is an additive (S_q x S_kv) matrix applied to the scores
/// before softmax. `lora` optionally names adapter prefixes for the query and
/// value projections together with the (alpha/r) scale.
pub struct LoraHook<'a> {
    pub q_prefix: &'a str,
    pub v_prefix: &'a str,
    pub scale: f64,
}

pub fn attention(
    tape: &mut Tape,
    bound: &Bound,
    name: &str,
    q_in: Var,
    kv_in: Var,
    heads: usize,
    mask: Option<&Matrix>,
    lora: Option<&LoraHook>,
) -> Result<Var> {
    let dim = tape.value(q_in).cols;
    if dim % heads != 0 {
        return Err(Error::config(format!("dim {dim} not divisible by {heads} heads")));
    }
    let dh = dim / heads;

    let mut q = linear(tape, bound, &format!("{name}.wq"), q_in)?;
    let k = linear(tape, bound, &format!("{name}.wk"), kv_in)?;
    let mut v = linear(tape, bound, &format!("{name}.wv"), kv_in)?;

    if let Some(hook) = lora {
        q = lora_add(tape, bound, hook.q_prefix, q_in, q, hook.scale)?;
        v = lora_add(tape, bound, hook.v_prefix, kv_in, v, hook.scale)?;
    }

    let scale = 1.0 / (dh as f64).sqrt();
    let mask_var = mask.map(|m| tape.constant(m.clone()));

    let mut head_outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = tape.slice_cols(q, h * dh, dh)?;
        let kh = tape.slice_cols(k, h * dh, dh)?;
        let vh = tape.slice_cols(v, h * dh, dh)?;
        let kt = tape.transpose(kh);
        let scores = tape.matmul(qh, kt)?;
        let mut scores = tape.scale_const(scores, scale);
        if let Some(m) = mask_var {
            scores = tape.add(scores, m)?;
        }
        let probs = tape.softmax_rows(scores);
        let ctx = tape.matmul(probs, vh)?;
        head_outs.push(ctx);
    }
    let ctx = tape.concat_cols(&head_outs)?;
    linear(tape, bound, &format!("{name}.wo"), ctx)
}

/// Add a low-rank delta (alpha/r) * x * down^T * up^T to a base projection
/// output. `prefix.down` is r x d_in, `prefix.up` is d_out x r.
fn lora_add(
    tape: &mut Tape,
    bound: &Bound,
    prefix: &str,
    x: Var,
    base_out: Var,
    scale: f64,
) -> Result<Var> {
    let down = bound.var(&format!("{prefix}.down"))?;
    let up = bound.var(&format!("{prefix}.up"))?;
    let down_t = tape.transpose(down);
    let up_t = tape.transpose(up);
    let mid = tape.matmul(x, down_t)?;
    let delta = tape.matmul(mid, up_t)?;
    let delta = tape.scale_const(delta, scale);
    tape.add(base_out, delta)
}

pub fn init_ffn<R: Rng>(
    store: &mut ParamStore,
    rng: &mut R,
    name: &str,
    dim: usize,
    hidden: usize,
) -> Result<()> {
    init_linear(store, rng, &format!("{name}.fc1"), dim, hidden)?;
    init_linear(store, rng, &format!("{name}.fc2"), hidden, dim)?;
    Ok(())
}

pub fn ffn(tape: &mut Tape, bound: &Bound, name: &str, x: Var) -> Result<Var> {
    let h = linear(tape, bound, &format!("{name}.fc1"), x)?;
    let h = tape.relu(h);
    linear(tape, bound, &format!("{name}.fc2"), h)
}

/// Causal additive mask: position i may attend to positions <= i.
pub fn causal_mask(n: usize) -> Matrix {
    let mut m = Matrix::zeros(n, n);
    for r in 0..n {
        for c in (r + 1)..n {
            m.data[r * n + c] = f64::NEG_INFINITY;
        }
    }
    m
}

/// Pre-norm transformer encoder block: x + Attn(LN(x)), then x + FFN(LN(x)).
pub fn encoder_block(
    tape: &mut Tape,
    bound: &Bound,
    name: &str,
    x: Var,
    heads: usize,
    mask: Option<&Matrix>,
    lora: Option<&LoraHook>,
) -> Result<Var> {
    let normed = layer_norm(tape, bound, &format!("{name}.ln1"), x)?;
    let att = attention(tape, bound, &format!("{name}.attn"), normed, normed, heads, mask, lora)?;
    let x = tape.add(x, att)?;
    let normed = layer_norm(tape, bound, &format!("{name}.ln2"), x)?;
    let f = ffn(tape, bound, &format!("{name}.ffn"), normed)?;
    tape.add(x, f)
}

pub fn init_encoder_block<R: Rng>(
    store: &mut ParamStore,
    rng: &mut R,
    name: &str,
    dim: usize,
    ffn_mult: usize,
) -> Result<()> {
    init_layer_norm(store, &format!("{name}.ln1"), dim)?;
    init_attention(store, rng, &format!("{name}.attn"), dim)?;
    init_layer_norm(store, &format!("{name}.ln2"), dim)?;
    init_ffn(store, rng, &format!("{name}.ffn"), dim, dim * ffn_mult)?;
    Ok(())
}
