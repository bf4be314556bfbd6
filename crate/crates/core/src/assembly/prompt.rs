//! Prompt assembly for the instruction-tuned model. The soft prompt is a
//! block of learned embedding rows spliced between literal token spans; the
//! renderer produces the token spans plus the span bookkeeping needed to
//! place (and later locate) the soft rows.

use crate::decoder::encode_text;
use crate::error::{Error, Result};

/// Whether the prompt carries the tag-conditioned soft-prompt frame.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum PromptMode {
    /// plain instruction, no soft rows
    Finetune,
    /// "According to <soft rows>, you are allowed to use ... tags: ..." frame
    Instruction,
}

/// Token spans surrounding the soft-prompt block. The embedded prompt is
/// emb(pre) ++ soft rows ++ emb(post); `soft_span` is (row offset, rows)
/// within that concatenation, empty in finetune mode.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderedPrompt {
    pub pre_tokens: Vec<usize>,
    pub post_tokens: Vec<usize>,
    pub soft_rows: usize,
}

impl RenderedPrompt {
    pub fn len(&self) -> usize {
        self.pre_tokens.len() + self.soft_rows + self.post_tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// (offset, rows) of the soft block inside the embedded prompt; None when
    /// there is no soft block.
    pub fn soft_span(&self) -> Option<(usize, usize)> {
        if self.soft_rows == 0 {
            None
        } else {
            Some((self.pre_tokens.len(), self.soft_rows))
        }
    }
}

pub fn render_prompt(
    mode: PromptMode,
    tags: &[String],
    instruction: &str,
    soft_rows: usize,
) -> Result<RenderedPrompt> {
    if instruction.trim().is_empty() {
        return Err(Error::validation("empty instruction"));
    }
    match mode {
        PromptMode::Finetune => Ok(RenderedPrompt {
            pre_tokens: Vec::new(),
            post_tokens: encode_text(instruction),
            soft_rows: 0,
        }),
        PromptMode::Instruction => {
            if soft_rows == 0 {
                return Err(Error::contract(
                    "instruction mode requires a non-empty soft prompt",
                ));
            }
            let post = format!(
                ", you are allowed to use or partially use the following tags: {}\n{}",
                tags.join(", "),
                instruction
            );
            Ok(RenderedPrompt {
                pre_tokens: encode_text("According to "),
                post_tokens: encode_text(&post),
                soft_rows,
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decoder::decode_tokens;

    #[test]
    fn finetune_mode_is_plain_instruction() {
        let p = render_prompt(PromptMode::Finetune, &["dog".into()], "What is heard?", 4).unwrap();
        assert!(p.pre_tokens.is_empty());
        assert_eq!(decode_tokens(&p.post_tokens), "What is heard?");
        assert_eq!(p.soft_span(), None);
        assert_eq!(p.len(), "What is heard?".len());
    }

    #[test]
    fn instruction_mode_frame_and_span() {
        let tags = vec!["dog bark".to_string(), "rain".to_string()];
        let p = render_prompt(PromptMode::Instruction, &tags, "Describe the scene.", 3).unwrap();
        assert_eq!(decode_tokens(&p.pre_tokens), "According to ");
        assert_eq!(
            decode_tokens(&p.post_tokens),
            ", you are allowed to use or partially use the following tags: dog bark, rain\nDescribe the scene."
        );
        assert_eq!(p.soft_span(), Some(("According to ".len(), 3)));
        assert_eq!(p.len(), p.pre_tokens.len() + 3 + p.post_tokens.len());
    }

    #[test]
    fn instruction_mode_without_soft_rows_rejected() {
        assert!(render_prompt(PromptMode::Instruction, &[], "hi", 0).is_err());
    }

    #[test]
    fn empty_instruction_rejected() {
        assert!(render_prompt(PromptMode::Finetune, &[], "   ", 0).is_err());
    }

    #[test]
    fn empty_tag_list_renders_empty_tag_field() {
        let p = render_prompt(PromptMode::Instruction, &[], "Go.", 2).unwrap();
        assert!(decode_tokens(&p.post_tokens)
            .starts_with(", you are allowed to use or partially use the following tags: \n"));
    }
}
