use serde::{Deserialize, Serialize};

use super::intent::{Intent, IntentKind, Module};

pub const TEXT_PREAMBLE: &str = "You are a music expert. Please read the following question carefully and provide the correct answer based on your knowledge of music theory and practice.";
pub const IMAGE_PREAMBLE: &str = "You are a music expert. Please analyze the given sheet music image and select the correct answer to the question based on its notated content.";
pub const AUDIO_PREAMBLE: &str = "You are a music expert. Please carefully listen to the <measure_id> section of the provided audio excerpt and answer the question based on your auditory analysis.";
pub const MEASURE_PLACEHOLDER: &str = "<measure_id>";

/// Canonical section order in the rendered prompt.
pub const SECTION_ORDER: [&str; 5] = ["SCORE_ABC", "ALIGNMENT_JSON", "EVALUATION_JSON", "RETRIEVED", "HISTORY"];
pub const QUESTION_LABEL: &str = "QUESTION";
pub const TRUNCATION_LABEL: &str = "TRUNCATED";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextPiece {
    pub label: String,
    pub content: String,
}

impl ContextPiece {
    pub fn new(label: impl Into<String>, content: impl Into<String>) -> Self {
        Self { label: label.into(), content: content.into() }
    }

    fn rendered_len(&self) -> usize {
        section(&self.label, &self.content).chars().count()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct PromptConfig {
    /// Character budget for all context sections together.
    pub budget_chars: usize,
}

impl Default for PromptConfig {
    fn default() -> Self {
        Self { budget_chars: 16_000 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Modality {
    Text,
    Image,
    Audio,
}

pub fn modality(intent: &Intent) -> Modality {
    match intent.kind {
        IntentKind::PerformanceAnalysis | IntentKind::Followup => Modality::Audio,
        IntentKind::RetrievalImplicit if intent.requires(Module::AudioDsp) => Modality::Audio,
        IntentKind::ScoreAnalysis | IntentKind::RetrievalImplicit => Modality::Image,
        IntentKind::Theory | IntentKind::RetrievalExplicit => Modality::Text,
    }
}

/// Preamble for the intent's modality. The audio preamble keeps the
/// `<measure_id>` placeholder unless a measure is given.
pub fn preamble(intent: &Intent, measure_id: Option<&str>) -> String {
    match modality(intent) {
        Modality::Text => TEXT_PREAMBLE.to_string(),
        Modality::Image => IMAGE_PREAMBLE.to_string(),
        Modality::Audio => match measure_id {
            Some(m) => AUDIO_PREAMBLE.replace(MEASURE_PLACEHOLDER, m),
            None => AUDIO_PREAMBLE.to_string(),
        },
    }
}

fn section(label: &str, content: &str) -> String {
    format!("[{label}]\n{}\n\n", content.trim_end())
}

fn order_key(label: &str) -> usize {
    SECTION_ORDER.iter().position(|l| *l == label).unwrap_or(SECTION_ORDER.len())
}

/// Preamble, labeled context sections in canonical order, then the question.
/// `context` is ordered oldest first; when it exceeds the budget the oldest
/// pieces are dropped and a truncation marker takes their place. A single
/// piece that alone exceeds the budget keeps only its tail.
pub fn compose_prompt(
    intent: &Intent,
    question: &str,
    context: &[ContextPiece],
    measure_id: Option<&str>,
    config: &PromptConfig,
) -> String {
    let mut kept: Vec<(usize, ContextPiece)> = context.iter().cloned().enumerate().collect();
    let mut dropped = 0usize;
    let total = |k: &[(usize, ContextPiece)]| k.iter().map(|(_, p)| p.rendered_len()).sum::<usize>();
    while kept.len() > 1 && total(&kept) > config.budget_chars {
        kept.remove(0);
        dropped += 1;
    }
    let mut clipped = false;
    if let Some((_, piece)) = kept.first_mut() {
        let overhead = piece.rendered_len() - piece.content.trim_end().chars().count();
        let room = config.budget_chars.saturating_sub(overhead);
        let chars: Vec<char> = piece.content.trim_end().chars().collect();
        if chars.len() > room {
            piece.content = chars[chars.len() - room..].iter().collect();
            clipped = true;
        }
    }
    kept.sort_by_key(|(age, p)| (order_key(&p.label), *age));

    let mut out = preamble(intent, measure_id);
    out.push_str("\n\n");
    if dropped > 0 || clipped {
        let mut note = String::new();
        if dropped > 0 {
            note.push_str(&format!("{dropped} older context section(s) omitted to fit the context budget."));
        }
        if clipped {
            if !note.is_empty() {
                note.push(' ');
            }
            note.push_str("The oldest remaining section was shortened from the front.");
        }
        out.push_str(&section(TRUNCATION_LABEL, &note));
    }
    for (_, p) in &kept {
        out.push_str(&section(&p.label, &p.content));
    }
    out.push_str(&format!("[{QUESTION_LABEL}]\n{}\n", question.trim()));
    out
}

/// Section labels and bodies of a composed prompt, in order.
pub fn parse_sections(prompt: &str) -> Vec<(String, String)> {
    let mut out: Vec<(String, String)> = Vec::new();
    for line in prompt.lines() {
        let is_header = line.len() > 2
            && line.starts_with('[')
            && line.ends_with(']')
            && line[1..line.len() - 1].chars().all(|c| c.is_ascii_uppercase() || c == '_');
        if is_header {
            out.push((line[1..line.len() - 1].to_string(), String::new()));
        } else if let Some((_, body)) = out.last_mut() {
            if !body.is_empty() {
                body.push('\n');
            }
            body.push_str(line);
        }
    }
    for (_, body) in &mut out {
        *body = body.trim_end().to_string();
    }
    out
}
