//! Model-as-judge scoring: prompt construction with audio evidence, robust
//! parsing of the three 1-5 axis scores, and report aggregation.

use crate::encoder::EventTag;
use crate::error::{Error, Result};
use crate::synthesis::format_event;
use serde::{Deserialize, Serialize};

const JUDGE_TEMPLATE: &str = include_str!("../../templates/judge.txt");

/// Evidence shown to the judge alongside the question and answer.
pub struct JudgeEvidence<'a> {
    pub reference: &'a str,
    pub events: &'a [EventTag],
    pub question: &'a str,
    pub answer: &'a str,
}

pub fn build_judge_prompt(ev: &JudgeEvidence) -> String {
    let events = if ev.events.is_empty() {
        "unavailable".to_string()
    } else {
        ev.events
            .iter()
            .map(format_event)
            .collect::<Vec<_>>()
            .join(", ")
    };
    JUDGE_TEMPLATE
        .replace("{reference}", ev.reference)
        .replace("{events}", &events)
        .replace("{question}", ev.question)
        .replace("{answer}", ev.answer)
}

/// One judged answer. `clamped` flags scores that fell outside 1-5 in the
/// raw reply and were clipped.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JudgeScores {
    pub clarity: f64,
    pub correctness: f64,
    pub engagement: f64,
    pub clamped: bool,
}

fn parse_axis(reply: &str, axis: &str) -> Result<f64> {
    let re = regex::RegexBuilder::new(&format!(r"{axis}\s*:\s*(-?\d+(?:\.\d+)?)"))
        .case_insensitive(true)
        .build()
        .expect("static pattern");
    re.captures(reply)
        .and_then(|c| c.get(1))
        .and_then(|m| m.as_str().parse::<f64>().ok())
        .ok_or_else(|| Error::Parse {
            reason: format!("missing {axis} score"),
            raw: reply.to_string(),
        })
}

/// Parse the three axis scores from a judge reply, clamping each into [1, 5].
pub fn parse_judge_scores(reply: &str) -> Result<JudgeScores> {
    let raw = [
        parse_axis(reply, "clarity")?,
        parse_axis(reply, "correctness")?,
        parse_axis(reply, "engagement")?,
    ];
    let clamped = raw.iter().any(|&v| !(1.0..=5.0).contains(&v));
    let c = |v: f64| v.clamp(1.0, 5.0);
    Ok(JudgeScores {
        clarity: c(raw[0]),
        correctness: c(raw[1]),
        engagement: c(raw[2]),
        clamped,
    })
}

/// Aggregate report: per-axis means plus an overall score, the mean of the
/// axis means rounded to one decimal.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JudgeReport {
    pub clarity: f64,
    pub correctness: f64,
    pub engagement: f64,
    pub overall: f64,
    pub count: usize,
    pub clamped_count: usize,
}

pub fn aggregate(scores: &[JudgeScores]) -> Result<JudgeReport> {
    if scores.is_empty() {
        return Err(Error::validation("no judge scores to aggregate"));
    }
    let n = scores.len() as f64;
    let clarity = scores.iter().map(|s| s.clarity).sum::<f64>() / n;
    let correctness = scores.iter().map(|s| s.correctness).sum::<f64>() / n;
    let engagement = scores.iter().map(|s| s.engagement).sum::<f64>() / n;
    let overall = ((clarity + correctness + engagement) / 3.0 * 10.0).round() / 10.0;
    Ok(JudgeReport {
        clarity,
        correctness,
        engagement,
        overall,
        count: scores.len(),
        clamped_count: scores.iter().filter(|s| s.clamped).count(),
    })
}
