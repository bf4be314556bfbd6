//! Full-model assembly: adapter merging, prompt construction, the
//! audio-to-decoder wiring, and the staged training loop.

pub mod lora;
pub mod model;
pub mod prompt;
pub mod train;

pub use lora::{lora_merge, merge_lora_into_decoder};
pub use model::{build_prefix, generate_response, init_model, lm_loss, ModelConfig};
pub use prompt::{render_prompt, PromptMode, RenderedPrompt};
pub use train::{
    accumulate_gradients, apply_stage, is_trainable, training_step, StageConfig, StageId,
};
