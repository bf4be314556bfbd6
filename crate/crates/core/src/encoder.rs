//! Spectrogram-patch transformer encoder exposing per-layer hidden states
//! and a tag-classification head used only for soft-prompt event tags.

use crate::error::{Error, Result};
use crate::frontend::PatchSequence;
use crate::nn;
use crate::tensor::{Bound, Matrix, ParamStore, Tape, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug)]
pub struct EncoderConfig {
    pub depth: usize,
    pub dim: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    pub patch_dim: usize,
    pub max_tokens: usize,
    pub tag_vocab: Vec<String>,
    /// middle layer indices (j, k) consumed by the aggregator, 1-based
    pub middle: Option<(usize, usize)>,
}

impl EncoderConfig {
    /// Desk-scale defaults: depth 12, dim 64, heads 4, j=4, k=8.
    pub fn desk(patch_dim: usize, tag_vocab: Vec<String>) -> Self {
        EncoderConfig {
            depth: 12,
            dim: 64,
            heads: 4,
            ffn_mult: 4,
            patch_dim,
            max_tokens: 1024,
            tag_vocab,
            middle: Some((4, 8)),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim % self.heads != 0 {
            return Err(Error::config("encoder dim must divide by heads"));
        }
        if let Some((j, k)) = self.middle {
            if !(1 <= j && j < k && k < self.depth) {
                return Err(Error::config(format!(
                    "middle layers require 1 <= j < k < depth (j={j}, k={k}, depth={})",
                    self.depth
                )));
            }
        }
        Ok(())
    }
}

/// Per-layer encoder outputs with the designated last/middle indices.
pub struct LayerFeatureBundle {
    /// outputs of layers 1..=depth, in order
    pub per_layer: Vec<Var>,
    pub middle: Option<(usize, usize)>,
}

impl LayerFeatureBundle {
    pub fn depth(&self) -> usize {
        self.per_layer.len()
    }

    /// 1-based layer lookup.
    pub fn layer(&self, idx: usize) -> Result<Var> {
        if idx == 0 || idx > self.per_layer.len() {
            return Err(Error::validation(format!(
                "layer index {idx} out of 1..={}",
                self.per_layer.len()
            )));
        }
        Ok(self.per_layer[idx - 1])
    }

    pub fn last(&self) -> Var {
        *self.per_layer.last().expect("non-empty bundle")
    }
}

/// Audio event tag with a sigmoid score.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EventTag {
    pub label: String,
    pub score: f64,
    pub span: Option<(f64, f64)>,
}

pub fn init_encoder<R: Rng>(store: &mut ParamStore, rng: &mut R, cfg: &EncoderConfig) -> Result<()> {
    cfg.validate()?;
    nn::init_linear(store, rng, "encoder.patch_proj", cfg.patch_dim, cfg.dim)?;
    store.insert(
        "encoder.pos",
        Matrix::uniform(cfg.max_tokens, cfg.dim, 0.02, rng),
        true,
    )?;
    for l in 0..cfg.depth {
        nn::init_encoder_block(store, rng, &format!("encoder.l{l}"), cfg.dim, cfg.ffn_mult)?;
    }
    nn::init_linear(store, rng, "encoder.tag_head", cfg.dim, cfg.tag_vocab.len().max(1))?;
    Ok(())
}

/// Run the encoder and collect every layer's output. Deterministic given
/// params and input; aggregation consumers read layers j, k and the last.
pub fn encode(
    tape: &mut Tape,
    bound: &Bound,
    cfg: &EncoderConfig,
    patches: &PatchSequence,
) -> Result<LayerFeatureBundle> {
    cfg.validate()?;
    if patches.patch_dim != cfg.patch_dim {
        return Err(Error::shape(format!(
            "patch dim {} != configured {}",
            patches.patch_dim, cfg.patch_dim
        )));
    }
    if patches.tokens > cfg.max_tokens {
        return Err(Error::validation(format!(
            "{} tokens exceed max {}",
            patches.tokens, cfg.max_tokens
        )));
    }
    let x = tape.constant(patches.values.clone());
    let x = nn::linear(tape, bound, "encoder.patch_proj", x)?;
    let pos = bound.var("encoder.pos")?;
    let pos = tape.slice_rows(pos, 0, patches.tokens)?;
    let mut x = tape.add(x, pos)?;

    let mut per_layer = Vec::with_capacity(cfg.depth);
    for l in 0..cfg.depth {
        x = nn::encoder_block(tape, bound, &format!("encoder.l{l}"), x, cfg.heads, None, None)?;
        per_layer.push(x);
    }
    Ok(LayerFeatureBundle {
        per_layer,
        middle: cfg.middle,
    })
}

/// Mean-pool the last-layer feature, apply the tag head, and return tags with
/// sigmoid score >= threshold, capped at top_k, sorted descending by score
/// (ties broken by tag-vocab index).
pub fn classify_tags(
    last: &Matrix,
    store: &ParamStore,
    cfg: &EncoderConfig,
    top_k: usize,
    threshold: f64,
) -> Result<Vec<EventTag>> {
    if cfg.tag_vocab.is_empty() {
        return Err(Error::config("empty tag vocabulary"));
    }
    let w = &store.get("encoder.tag_head.w")?.value;
    let b = &store.get("encoder.tag_head.b")?.value;
    let mut pooled = Matrix::zeros(1, last.cols);
    for r in 0..last.rows {
        for c in 0..last.cols {
            pooled.data[c] += last.get(r, c);
        }
    }
    for v in pooled.data.iter_mut() {
        *v /= last.rows as f64;
    }
    let logits = pooled.matmul(w)?.add(b)?;
    let mut scored: Vec<(usize, f64)> = logits
        .data
        .iter()
        .enumerate()
        .map(|(i, &z)| (i, 1.0 / (1.0 + (-z).exp())))
        .filter(|(_, s)| *s >= threshold)
        .collect();
    scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    scored.truncate(top_k);
    Ok(scored
        .into_iter()
        .map(|(i, s)| EventTag {
            label: cfg.tag_vocab[i].clone(),
            score: s,
            span: None,
        })
        .collect())
}
