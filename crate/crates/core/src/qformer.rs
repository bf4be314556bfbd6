//! Querying-transformer bottleneck over encoder last-layer features: a fixed
//! set of learnable query tokens cross-attends to audio in designated layers,
//! producing a fixed-size representation regardless of input length. Carries
//! the two-stage training objectives and caption-augmentation sampling.

use crate::decoder::{self, DecoderConfig, BOS, VOCAB};
use crate::error::{Error, Result};
use crate::nn;
use crate::tensor::{Bound, Matrix, ParamStore, Tape, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug)]
pub struct QFormerConfig {
    pub num_queries: usize,
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    pub max_text: usize,
    /// cross-attention is inserted in every n-th layer (layers 0, n, 2n, ...)
    pub cross_every: usize,
}

impl QFormerConfig {
    /// Desk defaults: Q=32, depth 4, cross-attention every 2nd layer.
    pub fn desk(dim: usize) -> Self {
        QFormerConfig {
            num_queries: 32,
            dim,
            depth: 4,
            heads: 4,
            ffn_mult: 4,
            max_text: 256,
            cross_every: 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_queries == 0 {
            return Err(Error::config("need at least one query token"));
        }
        if self.dim % self.heads != 0 {
            return Err(Error::config("q-former dim must divide by heads"));
        }
        if self.cross_every == 0 {
            return Err(Error::config("cross_every must be >= 1"));
        }
        Ok(())
    }

    fn has_cross(&self, layer: usize) -> bool {
        layer % self.cross_every == 0
    }
}

/// Self-attention masking for the stage-1 tasks.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum MaskMode {
    /// everything attends to everything (matching task)
    Bidirectional,
    /// queries see only queries; text sees queries and earlier text
    MultimodalCausal,
    /// queries see only queries; text sees earlier text only
    TextCausal,
}

impl MaskMode {
    fn requires_text(self) -> bool {
        matches!(self, MaskMode::MultimodalCausal | MaskMode::TextCausal)
    }
}

/// Additive mask over the joint [queries; text] sequence.
pub fn build_mask(mode: MaskMode, q: usize, text_len: usize) -> Matrix {
    let s = q + text_len;
    let mut m = Matrix::zeros(s, s);
    if mode == MaskMode::Bidirectional {
        return m;
    }
    for r in 0..s {
        for c in 0..s {
            let allowed = if r < q {
                c < q
            } else {
                match mode {
                    MaskMode::MultimodalCausal => c < q || c <= r,
                    MaskMode::TextCausal => c >= q && c <= r,
                    MaskMode::Bidirectional => unreachable!(),
                }
            };
            if !allowed {
                m.data[r * s + c] = f64::NEG_INFINITY;
            }
        }
    }
    m
}

pub fn init_qformer<R: Rng>(store: &mut ParamStore, rng: &mut R, cfg: &QFormerConfig) -> Result<()> {
    cfg.validate()?;
    store.insert(
        "qformer.queries",
        Matrix::uniform(cfg.num_queries, cfg.dim, 0.05, rng),
        true,
    )?;
    store.insert(
        "qformer.text_embed",
        Matrix::uniform(VOCAB, cfg.dim, 0.05, rng),
        true,
    )?;
    store.insert(
        "qformer.text_pos",
        Matrix::uniform(cfg.max_text, cfg.dim, 0.02, rng),
        true,
    )?;
    for l in 0..cfg.depth {
        let p = format!("qformer.l{l}");
        nn::init_layer_norm(store, &format!("{p}.ln1"), cfg.dim)?;
        nn::init_attention(store, rng, &format!("{p}.attn"), cfg.dim)?;
        if cfg.has_cross(l) {
            nn::init_layer_norm(store, &format!("{p}.ln_cross"), cfg.dim)?;
            nn::init_attention(store, rng, &format!("{p}.cross"), cfg.dim)?;
        }
        nn::init_layer_norm(store, &format!("{p}.ln2"), cfg.dim)?;
        nn::init_ffn(store, rng, &format!("{p}.ffn"), cfg.dim, cfg.dim * cfg.ffn_mult)?;
    }
    nn::init_linear(store, rng, "qformer.atm_head", cfg.dim, 1)?;
    nn::init_linear(store, rng, "qformer.lm_head", cfg.dim, VOCAB)?;
    store.insert("qformer.temp", Matrix::filled(1, 1, 0.07), true)?;
    Ok(())
}

/// Joint forward over [queries; text]. `query_out` always has exactly
/// `num_queries` rows; cross-attention to the audio features happens only in
/// the designated layers and only for query rows.
pub fn qformer_forward(
    tape: &mut Tape,
    bound: &Bound,
    cfg: &QFormerConfig,
    audio: Var,
    text: Option<&[usize]>,
    mask_mode: MaskMode,
) -> Result<(Var, Option<Var>)> {
    cfg.validate()?;
    if mask_mode.requires_text() && text.is_none() {
        return Err(Error::contract(format!(
            "{mask_mode:?} requires a text sequence"
        )));
    }
    if tape.value(audio).cols != cfg.dim {
        return Err(Error::shape(format!(
            "audio dim {} != q-former dim {}",
            tape.value(audio).cols,
            cfg.dim
        )));
    }
    let q = cfg.num_queries;
    let queries = bound.var("qformer.queries")?;
    let mut x = match text {
        Some(ids) => {
            if ids.len() > cfg.max_text {
                return Err(Error::validation(format!(
                    "text length {} exceeds max {}",
                    ids.len(),
                    cfg.max_text
                )));
            }
            let table = bound.var("qformer.text_embed")?;
            let emb = tape.gather_rows(table, ids)?;
            let pos = bound.var("qformer.text_pos")?;
            let pos = tape.slice_rows(pos, 0, ids.len())?;
            let emb = tape.add(emb, pos)?;
            tape.concat_rows(&[queries, emb])?
        }
        None => queries,
    };
    let text_len = text.map(|t| t.len()).unwrap_or(0);
    let mask = build_mask(mask_mode, q, text_len);

    for l in 0..cfg.depth {
        let p = format!("qformer.l{l}");
        let normed = nn::layer_norm(tape, bound, &format!("{p}.ln1"), x)?;
        let att = nn::attention(
            tape,
            bound,
            &format!("{p}.attn"),
            normed,
            normed,
            cfg.heads,
            Some(&mask),
            None,
        )?;
        x = tape.add(x, att)?;

        if cfg.has_cross(l) {
            let qpart = tape.slice_rows(x, 0, q)?;
            let normed = nn::layer_norm(tape, bound, &format!("{p}.ln_cross"), qpart)?;
            let ca = nn::attention(
                tape,
                bound,
                &format!("{p}.cross"),
                normed,
                audio,
                cfg.heads,
                None,
                None,
            )?;
            let qpart = tape.add(qpart, ca)?;
            x = if text_len > 0 {
                let tpart = tape.slice_rows(x, q, text_len)?;
                tape.concat_rows(&[qpart, tpart])?
            } else {
                qpart
            };
        }

        let normed = nn::layer_norm(tape, bound, &format!("{p}.ln2"), x)?;
        let f = nn::ffn(tape, bound, &format!("{p}.ffn"), normed)?;
        x = tape.add(x, f)?;
    }

    let query_out = tape.slice_rows(x, 0, q)?;
    let text_out = if text_len > 0 {
        Some(tape.slice_rows(x, q, text_len)?)
    } else {
        None
    };
    Ok((query_out, text_out))
}

/// Mean-pooled text embedding from a text-causal forward, for the
/// contrastive objective.
pub fn text_embedding(
    tape: &mut Tape,
    bound: &Bound,
    cfg: &QFormerConfig,
    audio: Var,
    text: &[usize],
) -> Result<Var> {
    let (_, text_out) = qformer_forward(tape, bound, cfg, audio, Some(text), MaskMode::TextCausal)?;
    let text_out = text_out.ok_or_else(|| Error::contract("missing text output"))?;
    Ok(tape.mean_rows(text_out))
}

/// Audio-text contrastive loss: per-pair similarity is the max over queries
/// of cosine(query, text); symmetric cross-entropy over the scaled B x B
/// similarity matrix with the learnable temperature.
pub fn atc_loss(
    tape: &mut Tape,
    bound: &Bound,
    query_outs: &[Var],
    text_embs: &[Var],
) -> Result<Var> {
    if query_outs.is_empty() || query_outs.len() != text_embs.len() {
        return Err(Error::validation("contrastive batch must be non-empty and paired"));
    }
    let b = query_outs.len();
    let texts = tape.concat_rows(text_embs)?;
    let texts_n = tape.row_normalize(texts)?;
    let texts_t = tape.transpose(texts_n);
    let mut sim_rows = Vec::with_capacity(b);
    for &qo in query_outs {
        let qn = tape.row_normalize(qo)?;
        let prods = tape.matmul(qn, texts_t)?;
        sim_rows.push(tape.col_max(prods));
    }
    let sims = tape.concat_rows(&sim_rows)?;
    let temp = bound.var("qformer.temp")?;
    let inv_temp = tape.recip(temp);
    let scaled = tape.mul_scalar(sims, inv_temp)?;
    let targets: Vec<Option<usize>> = (0..b).map(Some).collect();
    let loss_a = tape.cross_entropy(scaled, targets.clone())?;
    let scaled_t = tape.transpose(scaled);
    let loss_t = tape.cross_entropy(scaled_t, targets)?;
    let sum = tape.add(loss_a, loss_t)?;
    Ok(tape.scale_const(sum, 0.5))
}

/// Audio-text matching: joint bidirectional forward, mean-pooled query
/// output through a binary head, BCE against the matched/mismatched label.
pub fn atm_loss(
    tape: &mut Tape,
    bound: &Bound,
    cfg: &QFormerConfig,
    audio: Var,
    text: &[usize],
    matched: bool,
) -> Result<Var> {
    let (query_out, _) =
        qformer_forward(tape, bound, cfg, audio, Some(text), MaskMode::Bidirectional)?;
    let pooled = tape.mean_rows(query_out);
    let logit = nn::linear(tape, bound, "qformer.atm_head", pooled)?;
    let label = if matched { 1.0 } else { 0.0 };
    tape.bce_with_logits(logit, Matrix::filled(1, 1, label))
}

/// Audio-grounded text generation: next-token cross-entropy over the caption
/// under the multimodal-causal mask.
pub fn agtg_loss(
    tape: &mut Tape,
    bound: &Bound,
    cfg: &QFormerConfig,
    audio: Var,
    caption: &[usize],
) -> Result<Var> {
    let lg = agtg_logits(tape, bound, cfg, audio, caption)?;
    let mut targets: Vec<Option<usize>> = caption.iter().map(|&t| Some(t)).collect();
    targets.push(None); // last text position predicts nothing
    tape.cross_entropy(lg, targets)
}

/// Text-position logits for the generation task; exposed so tests can check
/// the mask with a perturbation oracle.
pub fn agtg_logits(
    tape: &mut Tape,
    bound: &Bound,
    cfg: &QFormerConfig,
    audio: Var,
    caption: &[usize],
) -> Result<Var> {
    if caption.is_empty() {
        return Err(Error::validation("empty caption"));
    }
    let mut text = Vec::with_capacity(caption.len() + 1);
    text.push(BOS);
    text.extend_from_slice(caption);
    let (_, text_out) =
        qformer_forward(tape, bound, cfg, audio, Some(&text), MaskMode::MultimodalCausal)?;
    let text_out = text_out.ok_or_else(|| Error::contract("missing text output"))?;
    nn::linear(tape, bound, "qformer.lm_head", text_out)
}

/// Second-stage objective: project the query output into the decoder
/// embedding space, prefix it to the caption embeddings, and take the
/// language-modeling loss on caption positions only.
pub fn stage2_lm_loss(
    tape: &mut Tape,
    bound: &Bound,
    cfg: &QFormerConfig,
    dec_cfg: &DecoderConfig,
    audio: Var,
    caption: &[usize],
) -> Result<Var> {
    if caption.is_empty() {
        return Err(Error::validation("empty caption"));
    }
    let (query_out, _) = qformer_forward(tape, bound, cfg, audio, None, MaskMode::Bidirectional)?;
    let proj = nn::linear(tape, bound, "qformer.stage2_proj", query_out)?;
    let mut text = Vec::with_capacity(caption.len() + 1);
    text.push(BOS);
    text.extend_from_slice(caption);
    let emb = decoder::token_embed(tape, bound, &text)?;
    let input = tape.concat_rows(&[proj, emb])?;
    let hidden = decoder::forward_hidden(tape, bound, dec_cfg, input, false)?;
    let lg = decoder::logits(tape, bound, hidden)?;
    let q = cfg.num_queries;
    let total = q + text.len();
    let mut targets: Vec<Option<usize>> = vec![None; total];
    for (i, &tok) in caption.iter().enumerate() {
        targets[q + i] = Some(tok); // BOS row predicts caption[0], etc.
    }
    tape.cross_entropy(lg, targets)
}

pub fn init_stage2_proj<R: Rng>(
    store: &mut ParamStore,
    rng: &mut R,
    qf_dim: usize,
    dec_dim: usize,
) -> Result<()> {
    nn::init_linear(store, rng, "qformer.stage2_proj", qf_dim, dec_dim)
}

/// Original caption plus LLM rewrites and the probability of keeping the
/// original during training.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CaptionSet {
    pub original: String,
    pub rewrites: Vec<String>,
    pub p_original: f64,
}

impl CaptionSet {
    pub fn original_only(original: String) -> Self {
        CaptionSet {
            original,
            rewrites: Vec::new(),
            p_original: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.p_original) {
            return Err(Error::validation("p_original must be in [0,1]"));
        }
        if self.p_original < 1.0 && self.rewrites.is_empty() {
            return Err(Error::validation(
                "rewrites required when p_original < 1",
            ));
        }
        Ok(())
    }
}

/// Pick the original with probability p_original, otherwise a uniformly
/// random rewrite.
pub fn sample_training_caption<'a, R: Rng>(set: &'a CaptionSet, rng: &mut R) -> Result<&'a str> {
    set.validate()?;
    if set.p_original >= 1.0 || rng.random_range(0.0..1.0) < set.p_original {
        Ok(&set.original)
    } else {
        let idx = rng.random_range(0..set.rewrites.len());
        Ok(&set.rewrites[idx])
    }
}
