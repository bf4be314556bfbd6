//! Command-line entry point for the audio-language workbench: staged
//! training, inference, instruction-data synthesis, and evaluation, all
//! driven by flat key=value config files and explicit seeds.
//!
//! Exit codes: 0 success, 2 usage error, 3 validation/config error,
//! 4 external-service failure.

use auris::assembly::{
    apply_stage, generate_response, init_model, lm_loss, render_prompt, training_step,
    ModelConfig, PromptMode, StageId,
};
use auris::checkpoint;
use auris::config::Config;
use auris::decoder::{DecoderConfig, LoraConfig};
use auris::encoder::EncoderConfig;
use auris::error::{Error, Result};
use auris::eval::{
    accuracy, aggregate, cosine, mean_average_precision, micro_f1, parse_judge_scores,
    retrieval_classify, HashedBowEmbedder, TextEmbedder,
};
use auris::frontend::{load_wav, log_mel, patchify, FrontendConfig, PatchSequence};
use auris::qformer::QFormerConfig;
use auris::synthesis::{
    read_jsonl, synthesize_for_clip, write_jsonl, AudioMetadata, GenerationClient,
    InstructionRecord, MockClient,
};
use auris::tensor::{Adam, ParamStore};
use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::io::Write;
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(name = "auris", about = "Desk-scale audio-language model workbench")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run one training stage and write a checkpoint
    Train(TrainArgs),
    /// Generate a response for one audio clip and instruction
    Infer(InferArgs),
    /// Synthesize instruction-response records from metadata
    Synth(SynthArgs),
    /// Score predictions or judge replies
    Eval(EvalArgs),
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: u64,
    /// ft1..ft4 or it
    #[arg(long)]
    stage: String,
    /// resume from an existing checkpoint instead of fresh initialization
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// output directory for checkpoint, manifest and per-step losses
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// write the response JSON here as well as to stdout
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: u64,
    /// output JSONL of validated records
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    config: PathBuf,
    /// write the report JSON here as well as to stdout
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() {
    let cli = Cli::parse();
    let code = match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::External(_) => 4,
                _ => 3,
            }
        }
    };
    std::process::exit(code);
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Train(args) => train(args),
        Cmd::Infer(args) => infer(args),
        Cmd::Synth(args) => synth(args),
        Cmd::Eval(args) => eval(args),
    }
}

/// Model and frontend settings from config keys, with desk-test defaults
/// small enough to train in seconds.
fn model_config(cfg: &Config) -> Result<(ModelConfig, FrontendConfig, usize, usize)> {
    let n_mels = cfg.get_usize_or("n_mels", 32)?;
    let patch_h = cfg.get_usize_or("patch_h", 8)?;
    let patch_w = cfg.get_usize_or("patch_w", 8)?;
    let dim = cfg.get_usize_or("dim", 16)?;
    let heads = cfg.get_usize_or("heads", 2)?;
    let tags: Vec<String> = cfg
        .get("tags")
        .unwrap_or("speech,music")
        .split(',')
        .map(|t| t.trim().to_string())
        .filter(|t| !t.is_empty())
        .collect();
    let model = ModelConfig {
        encoder: EncoderConfig {
            depth: cfg.get_usize_or("enc_depth", 3)?,
            dim,
            heads,
            ffn_mult: 2,
            patch_dim: patch_h * patch_w,
            max_tokens: cfg.get_usize_or("max_tokens", 256)?,
            tag_vocab: tags,
            middle: Some((
                cfg.get_usize_or("middle_j", 1)?,
                cfg.get_usize_or("middle_k", 2)?,
            )),
        },
        qformer: QFormerConfig {
            num_queries: cfg.get_usize_or("queries", 4)?,
            dim,
            heads,
            ffn_mult: 2,
            max_text: 128,
            depth: cfg.get_usize_or("qf_depth", 2)?,
            cross_every: 2,
        },
        decoder: DecoderConfig {
            depth: cfg.get_usize_or("dec_depth", 2)?,
            dim,
            heads,
            ffn_mult: 2,
            max_len: cfg.get_usize_or("max_len", 256)?,
            lora: Some(LoraConfig {
                rank: cfg.get_usize_or("lora_rank", 2)?,
                alpha: cfg.get_f64_or("lora_alpha", 4.0)?,
            }),
        },
        use_aggregator: cfg.get_bool_or("use_aggregator", true)?,
        soft_prompt_rows: cfg.get_usize_or("soft_prompt_rows", 2)?,
        connector_hidden: cfg.get_usize_or("connector_hidden", dim)?,
    };
    model.validate()?;
    let frontend = FrontendConfig {
        n_mels,
        ..FrontendConfig::default()
    };
    Ok((model, frontend, patch_h, patch_w))
}

fn clip_patches(
    audio_dir: &Path,
    audio_id: &str,
    fcfg: &FrontendConfig,
    patch_h: usize,
    patch_w: usize,
) -> Result<PatchSequence> {
    let wav = load_wav(&audio_dir.join(format!("{audio_id}.wav")))?;
    let mel = log_mel(&wav, fcfg)?;
    Ok(patchify(&mel, patch_h, patch_w))
}

fn train(args: TrainArgs) -> Result<()> {
    let cfg = Config::load(&args.config)?;
    let stage = StageId::parse(&args.stage)?;
    let (mcfg, fcfg, patch_h, patch_w) = model_config(&cfg)?;
    let audio_dir = PathBuf::from(cfg.require("audio_dir")?);
    let records: Vec<InstructionRecord> = read_jsonl(Path::new(cfg.require("data")?))?;
    if records.is_empty() {
        return Err(Error::validation("training data is empty"));
    }

    let mut store = match &args.checkpoint {
        Some(path) => checkpoint::load(path)?,
        None => {
            let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
            let mut store = ParamStore::new();
            init_model(&mut store, &mut rng, &mcfg)?;
            store
        }
    };
    apply_stage(&mut store, stage);

    let mut patch_cache: HashMap<String, PatchSequence> = HashMap::new();
    for r in &records {
        if !patch_cache.contains_key(&r.audio_id) {
            patch_cache.insert(
                r.audio_id.clone(),
                clip_patches(&audio_dir, &r.audio_id, &fcfg, patch_h, patch_w)?,
            );
        }
    }

    let steps = cfg.get_usize_or("steps", 5)?;
    let micro = cfg.get_usize_or("micro_batch", 2)?.min(records.len());
    let mut opt = Adam::new(cfg.get_f64_or("lr", 1e-4)?);
    let (mode, use_lora, soft_rows) = if stage == StageId::It {
        (PromptMode::Instruction, true, mcfg.soft_prompt_rows)
    } else {
        (PromptMode::Finetune, false, 0)
    };

    std::fs::create_dir_all(&args.out)?;
    let mut loss_log = std::io::BufWriter::new(std::fs::File::create(args.out.join("losses.jsonl"))?);
    for step in 0..steps {
        let base = (step * micro) % records.len();
        let mean_loss = training_step(&mut store, &mut opt, micro, |tape, bound, m| {
            let rec = &records[(base + m) % records.len()];
            let prompt = render_prompt(mode, &mcfg.encoder.tag_vocab, &rec.instruction, soft_rows)?;
            let patches = &patch_cache[&rec.audio_id];
            let response = auris::decoder::encode_text(&rec.response);
            lm_loss(tape, bound, &mcfg, patches, &prompt, &response, use_lora)
        })?;
        writeln!(loss_log, "{{\"step\":{step},\"loss\":{mean_loss}}}")?;
    }
    loss_log.flush()?;

    checkpoint::save(&store, &args.out.join("model.ntar"))?;
    checkpoint::write_manifest(&store, &args.out.join("manifest.json"))?;
    println!(
        "{}",
        serde_json::json!({
            "stage": stage.name(),
            "steps": steps,
            "params": store.len(),
            "checkpoint": args.out.join("model.ntar"),
        })
    );
    Ok(())
}

fn infer(args: InferArgs) -> Result<()> {
    let cfg = Config::load(&args.config)?;
    let (mcfg, fcfg, patch_h, patch_w) = model_config(&cfg)?;
    let store = checkpoint::load(&args.checkpoint)?;
    let audio = PathBuf::from(cfg.require("audio")?);
    let instruction = cfg.require("instruction")?.to_string();
    let it_mode = cfg.get_bool_or("instruction_mode", false)?;
    let max_new = cfg.get_usize_or("max_new", 16)?;

    let wav = load_wav(&audio)?;
    let mel = log_mel(&wav, &fcfg)?;
    let patches = patchify(&mel, patch_h, patch_w);
    let (mode, soft_rows) = if it_mode {
        (PromptMode::Instruction, mcfg.soft_prompt_rows)
    } else {
        (PromptMode::Finetune, 0)
    };
    let prompt = render_prompt(mode, &mcfg.encoder.tag_vocab, &instruction, soft_rows)?;
    let response = generate_response(&store, &mcfg, &patches, &prompt, max_new, it_mode)?;
    let out = serde_json::json!({ "instruction": instruction, "response": response });
    println!("{out}");
    if let Some(path) = args.out {
        std::fs::write(path, format!("{out}\n"))?;
    }
    Ok(())
}

fn synth(args: SynthArgs) -> Result<()> {
    let cfg = Config::load(&args.config)?;
    let client: Box<dyn GenerationClient> = match cfg.get("client").unwrap_or("mock") {
        "mock" => Box::new(MockClient),
        other => {
            return Err(Error::External(format!(
                "generation client '{other}' is not reachable from this build"
            )))
        }
    };
    let metadata: Vec<AudioMetadata> = read_jsonl(Path::new(cfg.require("metadata")?))?;
    let pool: Vec<InstructionRecord> = read_jsonl(Path::new(cfg.require("pool")?))?;
    let exemplars = cfg.get_usize_or("exemplars", 3)?;

    let mut kept = Vec::new();
    let mut skipped = 0usize;
    for meta in &metadata {
        match synthesize_for_clip(client.as_ref(), meta, &pool, exemplars, args.seed) {
            Ok(record) => kept.push(record),
            Err(Error::External(e)) => return Err(Error::External(e)),
            Err(_) => skipped += 1,
        }
    }
    write_jsonl(&args.out, &kept)?;
    println!(
        "{}",
        serde_json::json!({ "kept": kept.len(), "skipped": skipped, "out": args.out })
    );
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct EvalItem {
    text: String,
    label: usize,
}

fn eval(args: EvalArgs) -> Result<()> {
    let cfg = Config::load(&args.config)?;
    let report = if cfg.get("judge_replies").is_some() {
        let replies: Vec<String> = read_jsonl(Path::new(cfg.require("judge_replies")?))?;
        let mut scores = Vec::new();
        let mut unparsed = 0usize;
        for reply in &replies {
            match parse_judge_scores(reply) {
                Ok(s) => scores.push(s),
                Err(_) => unparsed += 1,
            }
        }
        let agg = aggregate(&scores)?;
        serde_json::json!({ "judge": agg, "unparsed": unparsed })
    } else {
        let items: Vec<EvalItem> = read_jsonl(Path::new(cfg.require("items")?))?;
        let labels: Vec<String> = cfg
            .require("labels")?
            .split(',')
            .map(|s| s.trim().to_string())
            .collect();
        let texts: Vec<String> = items.iter().map(|i| i.text.clone()).collect();
        let gold: Vec<usize> = items.iter().map(|i| i.label).collect();
        if let Some(&bad) = gold.iter().find(|&&g| g >= labels.len()) {
            return Err(Error::validation(format!(
                "gold label {bad} outside {} candidates",
                labels.len()
            )));
        }
        let embedder = HashedBowEmbedder::default();
        let predicted = retrieval_classify(&embedder, &texts, &labels)?;
        let label_embs: Vec<Vec<f64>> = labels.iter().map(|l| embedder.embed(l)).collect();
        let item_embs: Vec<Vec<f64>> = texts.iter().map(|t| embedder.embed(t)).collect();
        let scores: Vec<Vec<f64>> = label_embs
            .iter()
            .map(|l| item_embs.iter().map(|e| cosine(l, e)).collect())
            .collect();
        let relevance: Vec<Vec<bool>> = (0..labels.len())
            .map(|l| gold.iter().map(|&g| g == l).collect())
            .collect();
        serde_json::json!({
            "items": items.len(),
            "accuracy": accuracy(&predicted, &gold)?,
            "micro_f1": micro_f1(&predicted, &gold, labels.len())?,
            "map": mean_average_precision(&scores, &relevance)?,
        })
    };
    println!("{report}");
    if let Some(path) = args.out {
        std::fs::write(path, format!("{report}\n"))?;
    }
    Ok(())
}
