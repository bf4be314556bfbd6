//! Desk-scale causal language decoder with a byte-level vocabulary. Stands in
//! for the full-size text decoder; every contract on it is size-independent.

use crate::error::{Error, Result};
use crate::nn::{self, LoraHook};
use crate::tensor::{Bound, Matrix, ParamStore, Tape, Var};
use rand::Rng;

pub const BOS: usize = 256;
pub const EOS: usize = 257;
/// Delimiter between instruction prompt and response in training sequences.
pub const SEP: usize = 258;
pub const VOCAB: usize = 259;

/// Byte-level tokenization: one token per byte plus the special markers above.
pub fn encode_text(text: &str) -> Vec<usize> {
    text.bytes().map(|b| b as usize).collect()
}

pub fn decode_tokens(tokens: &[usize]) -> String {
    let bytes: Vec<u8> = tokens
        .iter()
        .filter(|&&t| t < 256)
        .map(|&t| t as u8)
        .collect();
    String::from_utf8_lossy(&bytes).into_owned()
}

#[derive(Clone, Debug)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
}

impl LoraConfig {
    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }
}

#[derive(Clone, Debug)]
pub struct DecoderConfig {
    pub depth: usize,
    pub dim: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    pub max_len: usize,
    pub lora: Option<LoraConfig>,
}

impl DecoderConfig {
    /// Desk defaults: 4 layers, dim 64, 4 heads; LoRA r=8, alpha=16 on the
    /// attention query/value projections.
    pub fn desk() -> Self {
        DecoderConfig {
            depth: 4,
            dim: 64,
            heads: 4,
            ffn_mult: 4,
            max_len: 512,
            lora: Some(LoraConfig {
                rank: 8,
                alpha: 16.0,
            }),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim % self.heads != 0 {
            return Err(Error::config("decoder dim must divide by heads"));
        }
        if let Some(l) = &self.lora {
            if l.rank == 0 {
                return Err(Error::config("LoRA rank must be >= 1"));
            }
            if l.rank > self.dim {
                return Err(Error::config(format!(
                    "LoRA rank {} exceeds min weight dim {}",
                    l.rank, self.dim
                )));
            }
        }
        Ok(())
    }
}

pub fn init_decoder<R: Rng>(store: &mut ParamStore, rng: &mut R, cfg: &DecoderConfig) -> Result<()> {
    cfg.validate()?;
    store.insert("decoder.embed", Matrix::uniform(VOCAB, cfg.dim, 0.05, rng), true)?;
    store.insert("decoder.pos", Matrix::uniform(cfg.max_len, cfg.dim, 0.02, rng), true)?;
    for l in 0..cfg.depth {
        nn::init_encoder_block(store, rng, &format!("decoder.l{l}"), cfg.dim, cfg.ffn_mult)?;
    }
    nn::init_layer_norm(store, "decoder.ln_f", cfg.dim)?;
    nn::init_linear(store, rng, "decoder.head", cfg.dim, VOCAB)?;
    if let Some(lora) = &cfg.lora {
        init_lora(store, rng, cfg, lora)?;
    }
    Ok(())
}

/// Adapter factors for every targeted decoder projection. `up` starts at
/// zero so a fresh adapter is a no-op.
pub fn init_lora<R: Rng>(
    store: &mut ParamStore,
    rng: &mut R,
    cfg: &DecoderConfig,
    lora: &LoraConfig,
) -> Result<()> {
    if lora.rank == 0 || lora.rank > cfg.dim {
        return Err(Error::config(format!("bad LoRA rank {}", lora.rank)));
    }
    for l in 0..cfg.depth {
        for proj in ["wq", "wv"] {
            let p = format!("lora.decoder.l{l}.{proj}");
            store.insert(
                format!("{p}.down"),
                Matrix::uniform(lora.rank, cfg.dim, 0.05, rng),
                true,
            )?;
            store.insert(format!("{p}.up"), Matrix::zeros(cfg.dim, lora.rank), true)?;
        }
    }
    Ok(())
}

/// Token embeddings without positions; positions are added over the full
/// input sequence in `forward_hidden`.
pub fn token_embed(tape: &mut Tape, bound: &Bound, ids: &[usize]) -> Result<Var> {
    let table = bound.var("decoder.embed")?;
    tape.gather_rows(table, ids)
}

/// Causal forward over an embedded input sequence, returning final hidden
/// states. `use_lora` controls whether adapter deltas are applied.
pub fn forward_hidden(
    tape: &mut Tape,
    bound: &Bound,
    cfg: &DecoderConfig,
    input: Var,
    use_lora: bool,
) -> Result<Var> {
    let n = tape.value(input).rows;
    if n > cfg.max_len {
        return Err(Error::validation(format!(
            "sequence length {n} exceeds decoder max {}",
            cfg.max_len
        )));
    }
    let pos = bound.var("decoder.pos")?;
    let pos = tape.slice_rows(pos, 0, n)?;
    let mut x = tape.add(input, pos)?;
    let mask = nn::causal_mask(n);
    let lora_scale = cfg.lora.as_ref().map(|l| l.scale());
    for l in 0..cfg.depth {
        let hook_names = (
            format!("lora.decoder.l{l}.wq"),
            format!("lora.decoder.l{l}.wv"),
        );
        let hook = match (use_lora, lora_scale) {
            (true, Some(scale)) => Some(LoraHook {
                q_prefix: &hook_names.0,
                v_prefix: &hook_names.1,
                scale,
            }),
            _ => None,
        };
        x = nn::encoder_block(
            tape,
            bound,
            &format!("decoder.l{l}"),
            x,
            cfg.heads,
            Some(&mask),
            hook.as_ref(),
        )?;
    }
    nn::layer_norm(tape, bound, "decoder.ln_f", x)
}

pub fn logits(tape: &mut Tape, bound: &Bound, hidden: Var) -> Result<Var> {
    nn::linear(tape, bound, "decoder.head", hidden)
}

/// Greedy decoding from a fixed prefix of embedded rows. Starts after the
/// prefix, feeds back the argmax token, stops at EOS or `max_new`.
pub fn generate(
    store: &ParamStore,
    cfg: &DecoderConfig,
    prefix: &Matrix,
    max_new: usize,
    use_lora: bool,
) -> Result<Vec<usize>> {
    if max_new == 0 {
        return Err(Error::validation("max_new must be >= 1"));
    }
    let mut generated: Vec<usize> = Vec::new();
    for _ in 0..max_new {
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let pre = tape.constant(prefix.clone());
        let input = if generated.is_empty() {
            pre
        } else {
            let emb = token_embed(&mut tape, &bound, &generated)?;
            tape.concat_rows(&[pre, emb])?
        };
        let hidden = forward_hidden(&mut tape, &bound, cfg, input, use_lora)?;
        let lg = logits(&mut tape, &bound, hidden)?;
        let v = tape.value(lg);
        let last = v.row(v.rows - 1);
        let next = last
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;
        if next == EOS {
            break;
        }
        generated.push(next);
    }
    Ok(generated)
}
