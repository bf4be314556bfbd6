//! End-to-end model assembly: audio patches flow through the encoder, the
//! layer aggregator and the query bottleneck; both audio branches are mapped
//! into the decoder embedding space by small connector MLPs and prefixed to
//! the (optionally soft-prompted) text prompt for decoding.

use crate::aggregator;
use crate::assembly::prompt::RenderedPrompt;
use crate::decoder::{self, DecoderConfig, EOS, SEP};
use crate::encoder::{self, EncoderConfig};
use crate::error::{Error, Result};
use crate::frontend::PatchSequence;
use crate::nn;
use crate::qformer::{self, MaskMode, QFormerConfig};
use crate::tensor::{Bound, Matrix, ParamStore, Tape, Var};
use rand::Rng;

#[derive(Clone, Debug)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub qformer: QFormerConfig,
    pub decoder: DecoderConfig,
    /// include the aggregated multi-layer branch in the decoder prefix
    pub use_aggregator: bool,
    pub soft_prompt_rows: usize,
    pub connector_hidden: usize,
}

impl ModelConfig {
    pub fn desk(patch_dim: usize, tag_vocab: Vec<String>) -> Self {
        let encoder = EncoderConfig::desk(patch_dim, tag_vocab);
        let qformer = QFormerConfig::desk(encoder.dim);
        ModelConfig {
            encoder,
            qformer,
            decoder: DecoderConfig::desk(),
            use_aggregator: true,
            soft_prompt_rows: 4,
            connector_hidden: 64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.qformer.validate()?;
        self.decoder.validate()?;
        if self.qformer.dim != self.encoder.dim {
            return Err(Error::config(format!(
                "query bottleneck dim {} must match encoder dim {}",
                self.qformer.dim, self.encoder.dim
            )));
        }
        if self.use_aggregator && self.encoder.middle.is_none() {
            return Err(Error::config(
                "aggregator enabled but encoder has no middle layer indices",
            ));
        }
        if self.soft_prompt_rows == 0 {
            return Err(Error::config("soft prompt needs at least one row"));
        }
        Ok(())
    }
}

fn init_connector<R: Rng>(
    store: &mut ParamStore,
    rng: &mut R,
    name: &str,
    d_in: usize,
    hidden: usize,
    d_out: usize,
) -> Result<()> {
    nn::init_linear(store, rng, &format!("{name}.fc1"), d_in, hidden)?;
    nn::init_linear(store, rng, &format!("{name}.fc2"), hidden, d_out)
}

/// Two-layer ReLU MLP mapping an audio branch into decoder embedding space.
fn connector(tape: &mut Tape, bound: &Bound, name: &str, x: Var) -> Result<Var> {
    let h = nn::linear(tape, bound, &format!("{name}.fc1"), x)?;
    let h = tape.relu(h);
    nn::linear(tape, bound, &format!("{name}.fc2"), h)
}

pub fn init_model<R: Rng>(store: &mut ParamStore, rng: &mut R, cfg: &ModelConfig) -> Result<()> {
    cfg.validate()?;
    encoder::init_encoder(store, rng, &cfg.encoder)?;
    aggregator::init_aggregator(store, rng, cfg.encoder.dim, cfg.encoder.ffn_mult)?;
    qformer::init_qformer(store, rng, &cfg.qformer)?;
    decoder::init_decoder(store, rng, &cfg.decoder)?;
    qformer::init_stage2_proj(store, rng, cfg.qformer.dim, cfg.decoder.dim)?;
    init_connector(
        store,
        rng,
        "connector.agg",
        cfg.encoder.dim,
        cfg.connector_hidden,
        cfg.decoder.dim,
    )?;
    init_connector(
        store,
        rng,
        "connector.qf",
        cfg.qformer.dim,
        cfg.connector_hidden,
        cfg.decoder.dim,
    )?;
    store.insert(
        "soft_prompt",
        Matrix::uniform(cfg.soft_prompt_rows, cfg.decoder.dim, 0.05, rng),
        true,
    )?;
    Ok(())
}

/// Decoder-space prefix for one audio clip and prompt:
/// [aggregated branch if enabled] ++ [query branch] ++ [embedded prompt].
/// Row count is T * [aggregator on] + num_queries + prompt.len().
pub fn build_prefix(
    tape: &mut Tape,
    bound: &Bound,
    cfg: &ModelConfig,
    patches: &PatchSequence,
    prompt: &RenderedPrompt,
) -> Result<Var> {
    cfg.validate()?;
    if prompt.soft_rows != 0 && prompt.soft_rows != cfg.soft_prompt_rows {
        return Err(Error::contract(format!(
            "prompt expects {} soft rows, model has {}",
            prompt.soft_rows, cfg.soft_prompt_rows
        )));
    }
    let bundle = encoder::encode(tape, bound, &cfg.encoder, patches)?;
    let last = bundle.last();

    let mut parts: Vec<Var> = Vec::new();
    if cfg.use_aggregator {
        let fused = aggregator::aggregate(tape, bound, &bundle, cfg.encoder.heads)?;
        parts.push(connector(tape, bound, "connector.agg", fused)?);
    }
    let (queries, _) =
        qformer::qformer_forward(tape, bound, &cfg.qformer, last, None, MaskMode::Bidirectional)?;
    parts.push(connector(tape, bound, "connector.qf", queries)?);

    if !prompt.pre_tokens.is_empty() {
        parts.push(decoder::token_embed(tape, bound, &prompt.pre_tokens)?);
    }
    if prompt.soft_rows > 0 {
        parts.push(bound.var("soft_prompt")?);
    }
    if !prompt.post_tokens.is_empty() {
        parts.push(decoder::token_embed(tape, bound, &prompt.post_tokens)?);
    }
    tape.concat_rows(&parts)
}

/// Language-modeling loss over the response only: the full sequence is
/// prefix ++ emb([SEP] ++ response); loss terms are the response tokens plus
/// the closing EOS, everything else is masked out.
pub fn lm_loss(
    tape: &mut Tape,
    bound: &Bound,
    cfg: &ModelConfig,
    patches: &PatchSequence,
    prompt: &RenderedPrompt,
    response: &[usize],
    use_lora: bool,
) -> Result<Var> {
    if response.is_empty() {
        return Err(Error::validation("empty response"));
    }
    let prefix = build_prefix(tape, bound, cfg, patches, prompt)?;
    let p = tape.value(prefix).rows;
    let mut tail = Vec::with_capacity(response.len() + 1);
    tail.push(SEP);
    tail.extend_from_slice(response);
    let tail_emb = decoder::token_embed(tape, bound, &tail)?;
    let input = tape.concat_rows(&[prefix, tail_emb])?;
    let hidden = decoder::forward_hidden(tape, bound, &cfg.decoder, input, use_lora)?;
    let lg = decoder::logits(tape, bound, hidden)?;
    let total = p + tail.len();
    let mut targets: Vec<Option<usize>> = vec![None; total];
    for (i, &tok) in response.iter().enumerate() {
        targets[p + i] = Some(tok); // SEP row predicts response[0], etc.
    }
    targets[p + response.len()] = Some(EOS);
    tape.cross_entropy(lg, targets)
}

/// Greedy response generation: build the prefix, append the separator
/// embedding, then decode token by token until EOS.
pub fn generate_response(
    store: &ParamStore,
    cfg: &ModelConfig,
    patches: &PatchSequence,
    prompt: &RenderedPrompt,
    max_new: usize,
    use_lora: bool,
) -> Result<String> {
    let prefix_val = {
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let prefix = build_prefix(&mut tape, &bound, cfg, patches, prompt)?;
        let sep = decoder::token_embed(&mut tape, &bound, &[SEP])?;
        let full = tape.concat_rows(&[prefix, sep])?;
        tape.value(full).clone()
    };
    let tokens = decoder::generate(store, &cfg.decoder, &prefix_val, max_new, use_lora)?;
    Ok(decoder::decode_tokens(&tokens))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::assembly::prompt::{render_prompt, PromptMode};
    use crate::decoder::{encode_text, LoraConfig, VOCAB};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy_cfg(use_aggregator: bool) -> ModelConfig {
        ModelConfig {
            encoder: EncoderConfig {
                depth: 3,
                dim: 8,
                heads: 2,
                ffn_mult: 2,
                patch_dim: 6,
                max_tokens: 64,
                tag_vocab: vec!["dog".into(), "rain".into()],
                middle: Some((1, 2)),
            },
            qformer: QFormerConfig {
                num_queries: 2,
                dim: 8,
                heads: 2,
                ffn_mult: 2,
                max_text: 32,
                depth: 2,
                cross_every: 2,
            },
            decoder: DecoderConfig {
                depth: 2,
                dim: 8,
                heads: 2,
                ffn_mult: 2,
                max_len: 256,
                lora: Some(LoraConfig { rank: 2, alpha: 4.0 }),
            },
            use_aggregator,
            soft_prompt_rows: 3,
            connector_hidden: 8,
        }
    }

    fn toy_store(cfg: &ModelConfig, seed: u64) -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        init_model(&mut store, &mut rng, cfg).unwrap();
        store
    }

    fn toy_patches(tokens: usize, patch_dim: usize, seed: u64) -> PatchSequence {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        PatchSequence {
            tokens,
            patch_dim,
            values: Matrix::uniform(tokens, patch_dim, 1.0, &mut rng),
            grid: (1, tokens),
            patch_h: 1,
            patch_w: patch_dim,
            padded: (1, tokens * patch_dim),
        }
    }

    #[test]
    fn prefix_length_law() {
        for use_agg in [false, true] {
            let cfg = toy_cfg(use_agg);
            let store = toy_store(&cfg, 0);
            let prompt = render_prompt(
                PromptMode::Instruction,
                &cfg.encoder.tag_vocab,
                "What do you hear?",
                cfg.soft_prompt_rows,
            )
            .unwrap();
            for tokens in [3, 7] {
                let patches = toy_patches(tokens, cfg.encoder.patch_dim, 1);
                let mut tape = Tape::new();
                let bound = store.bind(&mut tape);
                let prefix = build_prefix(&mut tape, &bound, &cfg, &patches, &prompt).unwrap();
                let expected =
                    tokens * (use_agg as usize) + cfg.qformer.num_queries + prompt.len();
                let v = tape.value(prefix);
                assert_eq!((v.rows, v.cols), (expected, cfg.decoder.dim));
            }
        }
    }

    #[test]
    fn soft_row_mismatch_rejected() {
        let cfg = toy_cfg(true);
        let store = toy_store(&cfg, 2);
        let prompt = render_prompt(PromptMode::Instruction, &[], "hi", 5).unwrap();
        let patches = toy_patches(3, cfg.encoder.patch_dim, 3);
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        assert!(build_prefix(&mut tape, &bound, &cfg, &patches, &prompt).is_err());
    }

    #[test]
    fn uniform_head_loss_is_ln_vocab_and_counts_only_response() {
        let cfg = toy_cfg(true);
        let mut store = toy_store(&cfg, 4);
        store.get_mut("decoder.head.w").unwrap().value.data.fill(0.0);
        store.get_mut("decoder.head.b").unwrap().value.data.fill(0.0);
        let prompt = render_prompt(
            PromptMode::Instruction,
            &cfg.encoder.tag_vocab,
            "Describe.",
            cfg.soft_prompt_rows,
        )
        .unwrap();
        let patches = toy_patches(4, cfg.encoder.patch_dim, 5);
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let loss = lm_loss(
            &mut tape,
            &bound,
            &cfg,
            &patches,
            &prompt,
            &encode_text("a dog"),
            false,
        )
        .unwrap();
        assert!((tape.scalar(loss).unwrap() - (VOCAB as f64).ln()).abs() < 1e-9);
    }

    #[test]
    fn empty_response_rejected() {
        let cfg = toy_cfg(false);
        let store = toy_store(&cfg, 6);
        let prompt = render_prompt(PromptMode::Finetune, &[], "hi", 0).unwrap();
        let patches = toy_patches(3, cfg.encoder.patch_dim, 7);
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        assert!(lm_loss(&mut tape, &bound, &cfg, &patches, &prompt, &[], false).is_err());
    }

    #[test]
    fn loss_gradient_reaches_soft_prompt_and_adapters() {
        let cfg = toy_cfg(true);
        let mut store = toy_store(&cfg, 8);
        // adapters start as no-ops; give the up factors content so the
        // gradient path through them is active both ways
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for (name, p) in store.iter_mut() {
            if name.starts_with("lora.") && name.ends_with(".up") {
                p.value = Matrix::uniform(p.value.rows, p.value.cols, 0.1, &mut rng);
            }
        }
        let prompt = render_prompt(
            PromptMode::Instruction,
            &cfg.encoder.tag_vocab,
            "Describe.",
            cfg.soft_prompt_rows,
        )
        .unwrap();
        let patches = toy_patches(4, cfg.encoder.patch_dim, 10);
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let loss = lm_loss(
            &mut tape,
            &bound,
            &cfg,
            &patches,
            &prompt,
            &encode_text("rain"),
            true,
        )
        .unwrap();
        tape.backward(loss).unwrap();
        let soft = bound.var("soft_prompt").unwrap();
        assert!(tape.grad(soft).max_abs() > 0.0);
        let down = bound.var("lora.decoder.l0.wq.down").unwrap();
        assert!(tape.grad(down).max_abs() > 0.0);
    }

    #[test]
    fn generation_is_deterministic_and_byte_clean() {
        let cfg = toy_cfg(false);
        let store = toy_store(&cfg, 11);
        let prompt = render_prompt(PromptMode::Finetune, &[], "What is this?", 0).unwrap();
        let patches = toy_patches(3, cfg.encoder.patch_dim, 12);
        let a = generate_response(&store, &cfg, &patches, &prompt, 6, false).unwrap();
        let b = generate_response(&store, &cfg, &patches, &prompt, 6, false).unwrap();
        assert_eq!(a, b);
        assert!(a.len() <= 6);
    }

    #[test]
    fn mismatched_bottleneck_dim_rejected() {
        let mut cfg = toy_cfg(false);
        cfg.qformer.dim = 16;
        cfg.qformer.heads = 2;
        assert!(cfg.validate().is_err());
    }
}
