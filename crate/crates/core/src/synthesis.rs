//! Instruction-data synthesis: metadata is rendered into a scene caption by
//! a generation model, few-shot exemplars steer the synthesis of new
//! instruction-response pairs, and rule-based validation filters the output.
//! Caption augmentation produces paraphrase sets for contrastive-stage
//! training. All sampling is seeded; per-clip seeds derive from a stable
//! hash so results are reproducible item by item.

use crate::encoder::EventTag;
use crate::error::{Error, Result};
use crate::qformer::CaptionSet;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{de::DeserializeOwned, Deserialize, Serialize};
use std::collections::BTreeSet;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

const SCENE_CAPTION_TEMPLATE: &str = include_str!("../templates/scene_caption.txt");
const SYNTHESIS_TEMPLATE: &str = include_str!("../templates/synthesis.txt");
const CAPTION_PROMPTS: [&str; 2] = [
    include_str!("../templates/caption_prompt1.txt"),
    include_str!("../templates/caption_prompt2.txt"),
];

/// Per-clip metadata feeding the scene-caption prompt. Any missing field is
/// rendered as "unavailable".
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AudioMetadata {
    pub audio_id: String,
    pub caption: Option<String>,
    pub tags: Vec<String>,
    pub events: Vec<EventTag>,
    pub duration_s: Option<f64>,
    pub scene: Option<String>,
    pub source: Option<String>,
}

/// One synthesized training example.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstructionRecord {
    pub audio_id: String,
    pub instruction: String,
    pub response: String,
}

/// External text-generation service. Implementations must be deterministic
/// in (prompt, seed) for reproducible pipelines.
pub trait GenerationClient {
    fn generate(&self, prompt: &str, seed: u64) -> Result<String>;
}

/// Deterministic stand-in for a live model: output is a pure function of the
/// prompt and seed.
pub struct MockClient;

fn mix(h: u64, byte: u8) -> u64 {
    (h ^ byte as u64).wrapping_mul(0x100000001b3)
}

fn prompt_hash(prompt: &str, seed: u64) -> u64 {
    let mut h = 0xcbf29ce484222325u64 ^ seed.wrapping_mul(0x9e3779b97f4a7c15);
    for b in prompt.bytes() {
        h = mix(h, b);
    }
    h
}

impl GenerationClient for MockClient {
    fn generate(&self, prompt: &str, seed: u64) -> Result<String> {
        let h = prompt_hash(prompt, seed);
        if prompt.starts_with("Rewrite") || prompt.starts_with("Paraphrase") {
            Ok(format!("A paraphrased account of the audible scene ({h:08x})."))
        } else if prompt.contains("Instruction:") {
            Ok(format!(
                "Instruction: Describe the most prominent sound ({h:08x}).\nResponse: The clip is dominated by a clearly audible event ({h:08x})."
            ))
        } else {
            Ok(format!("A recording in which sound {h:08x} can be heard."))
        }
    }
}

/// Seed for one clip's synthesis, derived stably from the run seed and the
/// clip id.
pub fn derive_seed(global_seed: u64, audio_id: &str) -> u64 {
    prompt_hash(audio_id, global_seed)
}

fn fmt_time(t: f64) -> String {
    if t.fract() == 0.0 {
        format!("{t:.1}")
    } else {
        format!("{t}")
    }
}

/// "(label-start-end)" rendering for one detected event; no span renders as
/// "(label)".
pub fn format_event(ev: &EventTag) -> String {
    match ev.span {
        Some((s, e)) => format!("({}-{}-{})", ev.label, fmt_time(s), fmt_time(e)),
        None => format!("({})", ev.label),
    }
}

fn field_or_unavailable(v: &Option<String>) -> &str {
    match v {
        Some(s) if !s.trim().is_empty() => s,
        _ => "unavailable",
    }
}

/// Fill the six-field scene-description prompt from metadata.
pub fn scene_caption_prompt(meta: &AudioMetadata) -> String {
    let tags = if meta.tags.is_empty() {
        "unavailable".to_string()
    } else {
        meta.tags.join(", ")
    };
    let events = if meta.events.is_empty() {
        "unavailable".to_string()
    } else {
        meta.events
            .iter()
            .map(format_event)
            .collect::<Vec<_>>()
            .join(", ")
    };
    let duration = match meta.duration_s {
        Some(d) => fmt_time(d),
        None => "unavailable".to_string(),
    };
    SCENE_CAPTION_TEMPLATE
        .replace("{caption}", field_or_unavailable(&meta.caption))
        .replace("{tags}", &tags)
        .replace("{events}", &events)
        .replace("{duration}", &duration)
        .replace("{scene}", field_or_unavailable(&meta.scene))
        .replace("{source}", field_or_unavailable(&meta.source))
}

/// Draw `n` distinct exemplars uniformly without replacement.
pub fn sample_exemplars<'a, R: Rng>(
    pool: &'a [InstructionRecord],
    n: usize,
    rng: &mut R,
) -> Result<Vec<&'a InstructionRecord>> {
    if n > pool.len() {
        return Err(Error::validation(format!(
            "requested {n} exemplars from a pool of {}",
            pool.len()
        )));
    }
    let mut indices: Vec<usize> = (0..pool.len()).collect();
    for i in 0..n {
        let j = rng.random_range(i..indices.len());
        indices.swap(i, j);
    }
    Ok(indices[..n].iter().map(|&i| &pool[i]).collect())
}

/// Fill the few-shot synthesis prompt with exemplars and the scene caption.
pub fn synthesis_prompt(exemplars: &[&InstructionRecord], scene: &str) -> String {
    let rendered: Vec<String> = exemplars
        .iter()
        .map(|r| format!("Instruction: {}\nResponse: {}", r.instruction, r.response))
        .collect();
    SYNTHESIS_TEMPLATE
        .replace("{exemplars}", &rendered.join("\n\n"))
        .replace("{scene}", scene)
}

/// Generate and parse one instruction-response pair. A malformed completion
/// is an error that carries the raw model output for inspection.
pub fn synthesize_pair(
    client: &dyn GenerationClient,
    prompt: &str,
    seed: u64,
    audio_id: &str,
) -> Result<InstructionRecord> {
    let raw = client.generate(prompt, seed)?;
    let parse = || -> Option<(String, String)> {
        let inst_start = raw.find("Instruction:")?;
        let rest = &raw[inst_start + "Instruction:".len()..];
        let resp_start = rest.find("Response:")?;
        let instruction = rest[..resp_start].trim().to_string();
        let response = rest[resp_start + "Response:".len()..].trim().to_string();
        Some((instruction, response))
    };
    let (instruction, response) = parse().ok_or_else(|| Error::Synthesis {
        reason: "completion lacks Instruction:/Response: structure".into(),
        raw: raw.clone(),
    })?;
    Ok(InstructionRecord {
        audio_id: audio_id.to_string(),
        instruction,
        response,
    })
}

pub const MAX_INSTRUCTION_CHARS: usize = 512;
pub const MAX_RESPONSE_CHARS: usize = 2048;

const VISUAL_WORDS: &[&str] = &[
    "see", "seen", "watch", "look", "visible", "image", "picture", "video", "photo", "screen",
];

/// Rule-based record filter, applied in a fixed order: non-empty fields,
/// length bounds, leaked "(label-start-end)" tag templates, then a
/// visual-vocabulary denylist (responses must be grounded in audio).
pub fn validate_record(record: &InstructionRecord) -> Result<()> {
    if record.instruction.trim().is_empty() || record.response.trim().is_empty() {
        return Err(Error::validation("empty instruction or response"));
    }
    if record.instruction.chars().count() > MAX_INSTRUCTION_CHARS {
        return Err(Error::validation(format!(
            "instruction exceeds {MAX_INSTRUCTION_CHARS} chars"
        )));
    }
    if record.response.chars().count() > MAX_RESPONSE_CHARS {
        return Err(Error::validation(format!(
            "response exceeds {MAX_RESPONSE_CHARS} chars"
        )));
    }
    let tag_template = regex::Regex::new(r"\([^()]+-\d+(\.\d+)?-\d+(\.\d+)?\)").unwrap();
    for text in [&record.instruction, &record.response] {
        if tag_template.is_match(text) {
            return Err(Error::validation(
                "leaked event-tag template in synthesized text",
            ));
        }
    }
    let denylist = regex::RegexBuilder::new(&format!(r"\b(?:{})\b", VISUAL_WORDS.join("|")))
        .case_insensitive(true)
        .build()
        .unwrap();
    if denylist.is_match(&record.response) {
        return Err(Error::validation(
            "response uses visual vocabulary",
        ));
    }
    Ok(())
}

/// Rewrite a caption with both paraphrase prompts, `k` seeds each. On client
/// failure the set degrades to the original caption only (p = 1); otherwise
/// the original keeps probability 0.4 at sampling time.
pub fn augment_captions(
    client: &dyn GenerationClient,
    caption: &str,
    k: usize,
    seed: u64,
) -> CaptionSet {
    let mut rewrites = Vec::with_capacity(2 * k);
    for (p_idx, template) in CAPTION_PROMPTS.iter().enumerate() {
        let prompt = template.replace("{caption}", caption);
        for i in 0..k {
            let rewrite_seed = seed
                .wrapping_mul(2)
                .wrapping_add(p_idx as u64)
                .wrapping_mul(0x9e3779b97f4a7c15)
                .wrapping_add(i as u64);
            match client.generate(&prompt, rewrite_seed) {
                Ok(text) if !text.trim().is_empty() => rewrites.push(text.trim().to_string()),
                _ => return CaptionSet::original_only(caption.to_string()),
            }
        }
    }
    if rewrites.is_empty() {
        return CaptionSet::original_only(caption.to_string());
    }
    CaptionSet {
        original: caption.to_string(),
        rewrites,
        p_original: 0.4,
    }
}

/// Split records into train/eval with no audio clip spanning both sides.
pub fn split_by_audio(
    records: &[InstructionRecord],
    train_frac: f64,
    seed: u64,
) -> Result<(Vec<InstructionRecord>, Vec<InstructionRecord>)> {
    if !(0.0..=1.0).contains(&train_frac) {
        return Err(Error::validation("train_frac must be in [0,1]"));
    }
    let ids: BTreeSet<&str> = records.iter().map(|r| r.audio_id.as_str()).collect();
    let mut ids: Vec<&str> = ids.into_iter().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in (1..ids.len()).rev() {
        let j = rng.random_range(0..=i);
        ids.swap(i, j);
    }
    let n_train = (ids.len() as f64 * train_frac).round() as usize;
    let train_ids: BTreeSet<&str> = ids[..n_train.min(ids.len())].iter().copied().collect();
    let (mut train, mut eval) = (Vec::new(), Vec::new());
    for r in records {
        if train_ids.contains(r.audio_id.as_str()) {
            train.push(r.clone());
        } else {
            eval.push(r.clone());
        }
    }
    Ok((train, eval))
}

/// Write one JSON object per line.
pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for item in items {
        serde_json::to_writer(&mut f, item)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let f = BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for line in f.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}

/// Full pipeline for one clip: scene prompt from metadata, scene caption
/// from the client, exemplar-conditioned pair synthesis, then validation.
pub fn synthesize_for_clip(
    client: &dyn GenerationClient,
    meta: &AudioMetadata,
    pool: &[InstructionRecord],
    exemplar_count: usize,
    global_seed: u64,
) -> Result<InstructionRecord> {
    let seed = derive_seed(global_seed, &meta.audio_id);
    let scene = client.generate(&scene_caption_prompt(meta), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let exemplars = sample_exemplars(pool, exemplar_count, &mut rng)?;
    let record = synthesize_pair(
        client,
        &synthesis_prompt(&exemplars, scene.trim()),
        seed,
        &meta.audio_id,
    )?;
    validate_record(&record)?;
    Ok(record)
}
