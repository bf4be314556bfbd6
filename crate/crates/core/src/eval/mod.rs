//! Evaluation harness: text embeddings, retrieval/ranking metrics, and
//! model-as-judge scoring.

pub mod embed;
pub mod judge;
pub mod metrics;

pub use embed::{HashedBowEmbedder, TextEmbedder};
pub use judge::{
    aggregate, build_judge_prompt, parse_judge_scores, JudgeEvidence, JudgeReport, JudgeScores,
};
pub use metrics::{
    accuracy, average_precision, cosine, mean_average_precision, micro_f1, retrieval_classify,
};
